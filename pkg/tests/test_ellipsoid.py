import numpy as np
import pytest

from fisher_fair import ValidationError, build_instance, solve
from fisher_fair.ellipsoid import (
    build_perturbed_system,
    ellipsoid_solve,
    feasible_start,
    first_order_oracle,
    separation_oracle,
)
from fisher_fair.feasible import membership, normalize_segment
from fisher_fair.verification import check_equilibrium


def small_system(example5):
    kappa = 1.0 / example5.budgets.min()
    eps = 1e-4
    eps_int = eps / (2 * kappa + example5.num_segments + 1)
    return build_perturbed_system(example5, eps, eps_int)


def test_separation_tangent_normal(example5):
    # build a point whose only violation is the parabola pair (0.5, 0.1):
    # zero utilities, u at its lower bound, and (z, w) = G(s, t) keep every
    # linear row satisfied
    system = small_system(example5)
    x = feasible_start(system)
    for idx in system.useg_index.values():
        x[idx] = 0.0
    for idx in system.uhat_index.values():
        x[idx] = 0.0
    x[system.u_index] = np.minimum(example5.budgets, system.eps_internal / 2)
    for (name, k, j), idx in system.aux_index.items():
        x[idx] = 0.0
    # last adjacent pair: its w only feeds the slack-rich final chain row
    seg = system.segments[0]
    j = seg.num_active - 2
    s_idx = system.aux_index[("s", 0, j)]
    t_idx = system.aux_index[("t", 0, j)]
    x[s_idx], x[t_idx] = 0.5, 0.1
    z, w = seg.G(j) @ np.array([0.5, 0.1])
    x[system.aux_index[("z", 0, j)]] = z
    x[system.aux_index[("w", 0, j)]] = w
    result = separation_oracle(system, x)
    assert result is not None
    g, kind, _ = result
    assert kind == "quadratic"
    assert g[s_idx] == pytest.approx(1.0)
    assert g[t_idx] == pytest.approx(-1.0)
    others = np.delete(g, [s_idx, t_idx])
    assert np.all(others == 0.0)


def test_separation_interior_point(example5):
    system = small_system(example5)
    assert separation_oracle(system, feasible_start(system)) is None


def test_separation_linear_row(example5):
    system = small_system(example5)
    x = feasible_start(system)
    i = 0
    row = system.row_labels.index("usum[0]")
    x = x.copy()
    x[system.u_index[i]] = 1.0  # exceeds the segment mass by far
    result = separation_oracle(system, x)
    assert result is not None
    g, kind, label = result
    assert kind == "linear"
    assert label == "usum[0]"
    assert np.allclose(g, system.A[row])


def test_first_order_oracle_values():
    inst = build_instance([0.5, 0.5], [0, 1], [[0.0], [0.0]], [[1.0], [1.0]])
    kappa = 2.0
    system = build_perturbed_system(inst, 1e-4, 1e-4 / (2 * kappa + 2))
    x = feasible_start(system)
    x[system.u_index] = [0.5, 0.5]
    g = first_order_oracle(system, x)
    assert np.allclose(g[system.u_index], [-1.0, -1.0])
    assert np.all(np.delete(g, system.u_index) == 0.0)
    # at the lower bound u_i = B_i the component is exactly -1
    x[system.u_index] = inst.budgets
    g = first_order_oracle(system, x)
    assert np.allclose(g[system.u_index], [-1.0, -1.0])


def test_first_order_oracle_finite_differences(example5):
    system = small_system(example5)
    rng = np.random.default_rng(3)
    x = feasible_start(system)
    x[system.u_index] = rng.uniform(0.2, 0.9, example5.n)
    g = first_order_oracle(system, x)
    h = 1e-6
    for idx in system.u_index:
        xp = x.copy(); xp[idx] += h
        xm = x.copy(); xm[idx] -= h
        fd = (system.objective(xp) - system.objective(xm)) / (2 * h)
        assert g[idx] == pytest.approx(fd, rel=1e-6)


def test_single_buyer_single_segment_immediate():
    inst = build_instance([1.0], [0, 1], [[0.0]], [[1.0]])
    res = ellipsoid_solve(inst, 1e-3)
    assert res.u[0] >= 1.0 - 1e-3
    assert res.certified


def test_example5_matches_dual(example5):
    ref = solve(example5)
    res = ellipsoid_solve(example5, 1e-4)
    assert np.abs(res.u - ref.u).max() <= 1e-3
    assert res.certified
    assert res.calls <= res.call_budget


def test_random_instance_cross_check(random_instance):
    inst = random_instance(3, 2, seed=107)
    ref = solve(inst)
    eps = 1e-4
    res = ellipsoid_solve(inst, eps)
    assert np.abs(res.u - ref.u).max() <= 5 * eps
    report = check_equilibrium(inst, res.allocation, res.beta, tol=10 * eps)
    assert report.passed


def test_returned_utilities_exact_membership(random_instance):
    inst = random_instance(4, 3, seed=77)
    res = ellipsoid_solve(inst, 2e-4)
    for k in range(inst.num_segments):
        seg = normalize_segment(inst, k)
        assert membership(seg, res.useg[seg.active, k])


def test_objective_bounded_at_feasible_points(example5):
    system = small_system(example5)
    kappa = 1.0 / example5.budgets.min()
    bound = np.log(kappa) + np.log(2.0 / system.eps_internal)
    rng = np.random.default_rng(5)
    x = feasible_start(system)
    assert system.objective(x) <= bound
    for _ in range(20):
        y = x.copy()
        y[system.u_index] = rng.uniform(
            np.minimum(example5.budgets, system.eps_internal / 2), 1.0)
        if separation_oracle(system, y) is None:
            assert system.objective(y) <= bound


def test_volume_shrinks_at_canonical_rate():
    # dimension <= 10: run a few cuts and compare the per-step volume factor
    inst = build_instance([0.6, 0.4], [0, 1], [[0.2], [-0.2]], [[0.9], [1.1]])
    kappa = 1.0 / 0.4
    system = build_perturbed_system(inst, 1e-3, 1e-3 / (2 * kappa + 2))
    d = system.dim
    assert d <= 10
    x = feasible_start(system)
    P = 4.0 * d * np.eye(d)
    rng = np.random.default_rng(0)
    factor = np.exp(-1.0 / (2.0 * (d + 1)))
    for _ in range(30):
        g = rng.standard_normal(d)
        Pg = P @ g
        gPg = float(g @ Pg)
        before = np.linalg.slogdet(P)[1]
        P = (d * d / (d * d - 1.0)) * (P - (2.0 / (d + 1)) * np.outer(Pg, Pg) / gPg)
        after = np.linalg.slogdet(P)[1]
        ratio = np.exp(0.5 * (after - before))  # volume ratio of the update
        assert ratio <= factor + 1e-9
        assert ratio >= np.exp(-1.0 / d)


def test_rejects_bad_eps_and_mode(example5, random_instance):
    with pytest.raises(ValidationError):
        ellipsoid_solve(example5, 2.0)
    ql = random_instance(3, 2, seed=1, mode="quasilinear")
    with pytest.raises(ValidationError):
        ellipsoid_solve(ql, 1e-4)


def test_diagnostic_log_schema(random_instance):
    inst = random_instance(2, 2, seed=8)
    res = ellipsoid_solve(inst, 1e-3, collect_log=True)
    assert res.log
    it, feas, obj, kind, vol = res.log[0]
    assert it == 1
    assert kind in ("objective", "linear", "quadratic")
    vols = [row[4] for row in res.log]
    assert all(b <= a + 1e-12 for a, b in zip(vols, vols[1:]))
