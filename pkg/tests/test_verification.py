import numpy as np
import pytest

from fisher_fair import Interval, ValidationError, build_instance, solve
from fisher_fair.dual_solver import PureAllocation
from fisher_fair.verification import (
    check_equilibrium,
    discretized_oracle,
    fairness,
)
from fisher_fair.feasible import partition_segment


def test_example5_equilibrium_passes(example5):
    res = solve(example5)
    rep = check_equilibrium(example5, res.allocation, res.beta, tol=1e-6)
    assert rep.passed
    assert rep.duality_gap <= 1e-6
    assert rep.price_mass_residual <= 1e-6


def test_perturbed_endpoint_fails(example5):
    res = solve(example5)
    intervals = [list(ivs) for ivs in res.allocation.intervals]
    moved = intervals[3][0]
    intervals[3][0] = Interval(moved.lo, moved.hi - 0.01)
    intervals[0][0] = Interval(intervals[0][0].lo - 0.01, intervals[0][0].hi)
    bad = PureAllocation(intervals=intervals)
    rep = check_equilibrium(example5, bad, res.beta, tol=1e-6)
    assert not rep.passed
    worst = max(rep.comp_slack_residuals.max(), rep.budget_residuals.max())
    assert worst > 1e-3


def test_single_buyer_full_allocation_zero_residuals():
    inst = build_instance([1.0], [0, 1], [[0.8]], [[0.6]])
    alloc = PureAllocation(intervals=[[Interval(0.0, 1.0)]])
    rep = check_equilibrium(inst, alloc, np.array([1.0]), tol=1e-9)
    assert rep.passed
    assert rep.market_clear_residual == pytest.approx(0.0, abs=1e-12)
    assert rep.comp_slack_residuals[0] == pytest.approx(0.0, abs=1e-12)
    assert rep.budget_residuals[0] == pytest.approx(0.0, abs=1e-12)


def test_overlapping_allocation_rejected(example5):
    alloc = PureAllocation(intervals=[[Interval(0.0, 0.6)], [Interval(0.4, 1.0)],
                                      [], []])
    with pytest.raises(ValidationError, match="overlap"):
        check_equilibrium(example5, alloc, np.ones(4))


def test_fairness_at_equilibrium(example5):
    res = solve(example5)
    rep = fairness(example5, res.allocation)
    assert rep.passed
    assert rep.envy.max() <= 1e-6
    assert rep.proportionality.min() >= -1e-6
    assert rep.pareto_gap <= 1e-6
    assert not rep.ceei  # budgets differ


def test_fairness_proportional_share_partition(example5):
    # a pure allocation worth exactly the proportional share for the first
    # n-1 buyers in cut order: slacks vanish there and stay nonnegative
    share = example5.budgets * example5.total_values
    parts = partition_segment(example5, 0, share)
    alloc = PureAllocation(intervals=[[p] for p in parts])
    rep = fairness(example5, alloc)
    order_last = int(np.argmin([0 if p.length else 1 for p in parts]))
    slack = rep.proportionality
    assert np.all(slack >= -1e-9)
    assert np.sum(np.abs(slack) <= 1e-9) >= example5.n - 1
    del order_last


def test_fairness_detects_envy_after_swap(example5):
    res = solve(example5)
    intervals = [list(ivs) for ivs in res.allocation.intervals]
    intervals[0], intervals[3] = intervals[3], intervals[0]
    rep = fairness(example5, PureAllocation(intervals=intervals))
    assert rep.envy.max() > 1e-3
    assert not rep.passed


def test_fairness_ceei_flag():
    inst = build_instance([0.5, 0.5], [0, 1], [[-0.4], [0.8]], [[1.2], [0.6]])
    res = solve(inst)
    rep = fairness(inst, res.allocation)
    assert rep.ceei
    assert rep.passed


def test_oracle_example5(example5):
    res = solve(example5)
    orc = discretized_oracle(example5, 2000)
    assert np.abs(orc.beta - res.beta).max() <= 5e-3


def test_oracle_single_cell_proportional_split(example5):
    orc = discretized_oracle(example5, 1)
    assert np.allclose(orc.u, example5.budgets * example5.total_values, atol=1e-8)


def test_oracle_symmetric_instance():
    inst = build_instance([0.5, 0.5], [0, 1], [[0.8], [0.8]], [[0.6], [0.6]])
    orc = discretized_oracle(inst, 400)
    assert orc.beta[0] == pytest.approx(orc.beta[1], abs=1e-6)


def test_oracle_consistency_as_cells_double(example5):
    res = solve(example5)
    errs = []
    for m in (500, 1000, 2000):
        orc = discretized_oracle(example5, m)
        errs.append(np.linalg.norm(orc.beta - res.beta))
    assert errs[1] <= errs[0] * 1.2
    assert errs[2] <= errs[1] * 1.2


def test_gap_certificate_transfers_to_utilities(random_instance):
    for seed in (3, 14, 25):
        inst = random_instance(5, 3, seed=seed)
        res = solve(inst)
        rep = check_equilibrium(inst, res.allocation, res.beta)
        assert rep.duality_gap <= 1e-8
        assert np.abs(res.u - inst.budgets / res.beta).max() <= 1e-4


def test_quasilinear_report_fields(random_instance):
    inst = random_instance(4, 2, seed=31, mode="quasilinear")
    res = solve(inst)
    rep = check_equilibrium(inst, res.allocation, res.beta, delta=res.delta)
    assert rep.passed
    assert rep.ql_delta_residuals.max() <= 1e-9
    doc = rep.to_json()
    assert set(doc) >= {"market_clear_residual", "budget_residuals",
                        "utility_price_residuals", "comp_slack_residuals",
                        "price_mass_residual", "duality_gap",
                        "ql_delta_residuals", "pass"}
