import numpy as np
import pytest

from fisher_fair import (
    DomainError,
    build_instance,
    dual_objective,
    dual_subgradient,
    integral,
    solve,
    upper_envelope,
    winning_utilities,
)
from fisher_fair.envelope import PiecewiseLinearFunction, beta_bounds, plot_data
from tests.conftest import EX5_BETA, EX5_CUTS, EX5_U


def owner_sequence(env):
    seq = []
    for j in range(env.num_pieces):
        if env.breakpoints[j + 1] - env.breakpoints[j] <= 0:
            continue
        if not seq or seq[-1] != env.owners[j]:
            seq.append(int(env.owners[j]))
    return seq


def test_envelope_example5_structure(example5):
    env = upper_envelope(example5, EX5_BETA)
    interior = env.breakpoints[1:-1]
    assert np.allclose(sorted(interior), EX5_CUTS, atol=1e-3)
    assert owner_sequence(env) == [3, 0, 1, 2]


def test_envelope_single_buyer():
    inst = build_instance([1.0], [0, 1], [[0.8]], [[0.6]])
    env = upper_envelope(inst, np.array([0.7]))
    assert env.num_pieces == 1
    assert owner_sequence(env) == [0]
    theta = np.linspace(0, 1, 101)
    assert np.allclose(env(theta), 0.7 * inst.values_at(theta)[0], atol=1e-14)


def test_envelope_identical_buyers_tie_to_smallest_index():
    inst = build_instance([0.5, 0.5], [0, 1], [[0.8], [0.8]], [[0.6], [0.6]])
    env = upper_envelope(inst, np.array([0.9, 0.9]))
    assert owner_sequence(env) == [0]


def test_envelope_rejects_nonpositive_beta(example5):
    with pytest.raises(DomainError):
        upper_envelope(example5, np.array([0.5, 0.5, 0.0, 0.5]))


def test_envelope_dominance_dense(example5, random_instance):
    from fisher_fair.envelope import certify_envelope
    rng = np.random.default_rng(5)
    for inst in [example5, random_instance(6, 4, seed=11),
                 random_instance(3, 7, seed=12)]:
        lo, hi = beta_bounds(inst)
        beta = rng.uniform(lo, hi)
        env = upper_envelope(inst, beta)
        theta = rng.random(1000)
        direct = np.max(beta[:, None] * inst.values_at(theta), axis=0)
        assert np.abs(env(theta) - direct).max() <= 1e-10
        assert certify_envelope(inst, beta, env)


def test_integral_at_optimum_is_budget_mass(example5, random_instance):
    for inst in [example5, random_instance(5, 3, seed=21)]:
        res = solve(inst)
        assert integral(upper_envelope(inst, res.beta)) == pytest.approx(1.0, abs=1e-6)


def test_integral_zero_function():
    f = PiecewiseLinearFunction(breakpoints=np.array([0.0, 1.0]),
                                cs=np.zeros(1), ds=np.zeros(1))
    assert integral(f) == 0.0


def test_integral_example5_weighted_utilities(example5):
    env = upper_envelope(example5, EX5_BETA)
    assert integral(env) == pytest.approx(float(EX5_BETA @ EX5_U), abs=1e-3)


def test_winning_utilities_example5(example5):
    u = winning_utilities(example5, EX5_BETA)
    assert np.allclose(u, EX5_U, atol=1e-3)


def test_winning_utilities_single_buyer():
    inst = build_instance([1.0], [0, 1], [[1.0]], [[0.5]])
    assert winning_utilities(inst, np.array([0.4]))[0] == pytest.approx(1.0)


def test_winning_utilities_dominated_buyer(example5):
    beta = EX5_BETA.copy()
    beta[0] = 1e-6
    u = winning_utilities(example5, beta)
    assert u[0] == 0.0
    # cross-check by dense sampling: buyer 0 never attains the max
    theta = np.linspace(0, 1, 10001)
    scaled = beta[:, None] * example5.values_at(theta)
    assert np.all(np.argmax(scaled, axis=0) != 0)


def test_dual_objective_example5_matches_shifted_primal(example5):
    from fisher_fair.dual_solver import duality_constant
    res = solve(example5)
    z = float(np.dot(example5.budgets, np.log(res.u)))
    psi = dual_objective(example5, res.beta)
    assert psi == pytest.approx(z + duality_constant(example5), abs=1e-9)


def test_dual_objective_single_buyer_closed_form():
    inst = build_instance([1.0], [0, 1], [[0.0]], [[1.0]])
    for beta in (0.3, 0.7, 1.0, 1.8):
        assert dual_objective(inst, np.array([beta])) == pytest.approx(
            beta - np.log(beta), abs=1e-12)
    values = [dual_objective(inst, np.array([b]))
              for b in (0.9, 0.95, 1.0, 1.05, 1.1)]
    assert min(values) == values[2]


def test_dual_objective_against_riemann_sum(random_instance):
    inst = random_instance(5, 4, seed=33)
    rng = np.random.default_rng(7)
    lo, hi = beta_bounds(inst)
    beta = rng.uniform(lo, hi)
    theta = (np.arange(1_000_000) + 0.5) / 1_000_000
    riemann = float(np.max(beta[:, None] * inst.values_at(theta), axis=0).mean())
    expected = riemann - float(np.dot(inst.budgets, np.log(beta)))
    assert dual_objective(inst, beta) == pytest.approx(expected, abs=1e-5)


def test_dual_objective_rejects_nonpositive(example5):
    with pytest.raises(DomainError):
        dual_objective(example5, np.zeros(4))


def test_subgradient_inequality(random_instance):
    inst = random_instance(6, 3, seed=44)
    rng = np.random.default_rng(9)
    lo, hi = beta_bounds(inst)
    for _ in range(25):
        b1 = rng.uniform(lo, hi)
        b2 = rng.uniform(lo, hi)
        psi1, g1, _, _ = dual_subgradient(inst, b1)
        psi2 = dual_objective(inst, b2)
        assert psi2 >= psi1 + float(g1 @ (b2 - b1)) - 1e-9


def test_price_invariance_under_valuation_scaling():
    doc_c = [[-0.4], [0.8]]
    doc_d = [[1.2], [0.6]]
    base = build_instance([0.4, 0.6], [0, 1], doc_c, doc_d)
    scaled = build_instance([0.4, 0.6], [0, 1],
                            [[-0.4 * 5], [0.8]], [[1.2 * 5], [0.6]])
    rb = solve(base)
    rs = solve(scaled)
    theta = np.linspace(0, 1, 501)
    assert np.abs(rb.prices(theta) - rs.prices(theta)).max() <= 1e-8


def test_quasilinear_box_bounds(random_instance):
    inst = random_instance(4, 2, seed=5, mode="quasilinear")
    lo, hi = beta_bounds(inst)
    assert np.allclose(lo, inst.budgets / (inst.total_values + inst.budgets))
    assert np.all(hi == 1.0)


def test_plot_data_includes_envelope_breakpoints(example5):
    header, rows = plot_data(example5, EX5_BETA, num_points=100)
    assert header[:2] == ["theta", "p_star"]
    theta = rows[:, 0]
    env = upper_envelope(example5, EX5_BETA)
    for b in env.breakpoints:
        assert np.any(np.isclose(theta, b, atol=1e-12))
    # p_star column equals the per-row max of the scaled valuation columns
    assert np.allclose(rows[:, 1], rows[:, 2:].max(axis=1), atol=1e-10)
