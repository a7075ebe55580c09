"""Solution certificates: KKT residuals, duality gap, fairness, and an
independent discretized-market oracle.

``check_equilibrium`` rebuilds the price envelope from beta and measures
every optimality condition of the reported pure allocation; it reports and
never throws on a bad solution.  ``fairness`` evaluates budget-weighted envy
and proportionality exactly.  ``discretized_oracle`` runs proportional
response dynamics on a finite split of [0, 1]; the dynamics share no code
path or algorithmic idea with the solvers, which makes them a genuinely
independent cross-check (accurate to the O(1/m) discretization error).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dual_solver import PureAllocation, duality_constant
from .envelope import upper_envelope
from .errors import NotConverged, ValidationError
from .market import MarketInstance, QUASILINEAR

KKT_TOL = 1e-6
FAIR_TOL = 1e-6


@dataclass
class KktReport:
    market_clear_residual: float
    budget_residuals: np.ndarray
    utility_price_residuals: np.ndarray
    comp_slack_residuals: np.ndarray
    price_mass_residual: float
    duality_gap: float
    ql_delta_residuals: np.ndarray
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        worst = max(self.market_clear_residual,
                    float(np.max(self.budget_residuals)),
                    float(np.max(self.utility_price_residuals)),
                    float(np.max(self.comp_slack_residuals)),
                    self.price_mass_residual,
                    self.duality_gap,
                    float(np.max(self.ql_delta_residuals)))
        self.passed = bool(worst <= self.tol)

    def to_json(self):
        return {
            "market_clear_residual": self.market_clear_residual,
            "budget_residuals": self.budget_residuals.tolist(),
            "utility_price_residuals": self.utility_price_residuals.tolist(),
            "comp_slack_residuals": self.comp_slack_residuals.tolist(),
            "price_mass_residual": self.price_mass_residual,
            "duality_gap": self.duality_gap,
            "ql_delta_residuals": self.ql_delta_residuals.tolist(),
            "tol": self.tol,
            "pass": self.passed,
        }


@dataclass
class FairnessReport:
    envy: np.ndarray              # envy[i, j] = <v_i, x_j>/B_j - <v_i, x_i>/B_i
    proportionality: np.ndarray   # u_i - (B_i/||B||_1) v_i(Theta)
    pareto_gap: float
    ceei: bool
    tol: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = bool(float(np.max(self.envy)) <= self.tol
                           and float(np.min(self.proportionality)) >= -self.tol)

    def to_json(self):
        return {
            "envy": self.envy.tolist(),
            "proportionality": self.proportionality.tolist(),
            "pareto_gap": self.pareto_gap,
            "ceei": self.ceei,
            "tol": self.tol,
            "pass": self.passed,
        }


def _validate_allocation(instance, allocation):
    spans = []
    for i, ivs in enumerate(allocation.intervals):
        for iv in ivs:
            if iv.lo < -1e-12 or iv.hi > 1.0 + 1e-12:
                raise ValidationError(f"buyer {i} interval {iv} leaves [0, 1]")
            if iv.length > 0:
                spans.append((iv.lo, iv.hi))
    for iv in allocation.leftover:
        if iv.length > 0:
            spans.append((iv.lo, iv.hi))
    spans.sort()
    for (l1, h1), (l2, h2) in zip(spans, spans[1:]):
        if l2 < h1 - 1e-9:
            raise ValidationError(
                f"allocation intervals overlap: [{l1}, {h1}] and [{l2}, {h2}]")


def _inner_product(env, instance, i, iv, scaled_beta=None):
    """(<p, 1_iv>, <v_i, 1_iv>, sup over iv of p - beta_i v_i)."""
    b = env.breakpoints
    j0 = int(env.locate(iv.lo))
    j1 = int(env.locate(np.nextafter(iv.hi, iv.lo)))
    p_mass = 0.0
    v_mass = 0.0
    sup = 0.0
    for j in range(j0, j1 + 1):
        lo = max(iv.lo, b[j])
        hi = min(iv.hi, b[j + 1])
        if hi <= lo:
            continue
        k = env.segments[j]
        mid = 0.5 * (lo + hi)
        length = hi - lo
        p_mass += length * (env.cs[j] * mid + env.ds[j])
        vi_c, vi_d = instance.c[i, k], instance.d[i, k]
        v_mass += length * (vi_c * mid + vi_d)
        if scaled_beta is not None:
            for x in (lo, hi):
                gap = (env.cs[j] * x + env.ds[j]) - scaled_beta * (vi_c * x + vi_d)
                sup = max(sup, gap)
    return p_mass, v_mass, sup


def check_equilibrium(instance: MarketInstance, allocation: PureAllocation,
                      beta, tol: float = KKT_TOL, delta=None) -> KktReport:
    """KKT residual report for a pure allocation at utility prices beta.

    Rebuilds p = max_i beta_i v_i and measures: the p-mass left unallocated
    (market clearance), |<p, x_i> - spend_i| (budget depletion),
    |<v_i, x_i> - target_i| (the utility-price identity), the sup of
    p - beta_i v_i over buyer i's intervals (complementary slackness), the
    envelope mass against total spend, and the duality gap after adding the
    constant C to the primal.  In quasilinear mode spend_i = B_i - delta_i,
    target_i = B_i/beta_i - delta_i, and the complementarity residuals
    |delta_i (1 - beta_i)| are included.
    """
    beta = np.asarray(beta, dtype=float)
    n = instance.n
    B = instance.budgets
    if delta is None:
        delta = np.zeros(n)
    else:
        delta = np.asarray(delta, dtype=float)
    _validate_allocation(instance, allocation)
    env = upper_envelope(instance, beta)
    p_total = env.integral()
    budget = np.zeros(n)
    uprice = np.zeros(n)
    comp = np.zeros(n)
    covered = 0.0
    u = np.zeros(n)
    for i in range(n):
        spend = 0.0
        for iv in allocation.intervals[i]:
            if iv.length <= 0:
                continue
            p_mass, v_mass, sup = _inner_product(env, instance, i, iv,
                                                 scaled_beta=beta[i])
            spend += p_mass
            u[i] += v_mass
            comp[i] = max(comp[i], sup)
        covered += spend
        budget[i] = abs(spend - (B[i] - delta[i]))
        uprice[i] = abs(u[i] - (B[i] / beta[i] - delta[i]))
    market_clear = abs(p_total - covered)
    mass_target = float(B.sum() - delta.sum())
    price_mass = abs(p_total - mass_target)
    C = duality_constant(instance)
    dual = p_total - float(np.dot(B, np.log(beta)))
    if instance.mode == QUASILINEAR:
        ueg = u + delta
        with np.errstate(divide="ignore"):
            primal = (float(np.dot(B, np.log(ueg)) - delta.sum())
                      if np.all(ueg > 0) else -np.inf)
        ql_res = np.abs(delta * (1.0 - beta))
    else:
        with np.errstate(divide="ignore"):
            primal = float(np.dot(B, np.log(u))) if np.all(u > 0) else -np.inf
        ql_res = np.zeros(n)
    gap = dual - (primal + C)
    return KktReport(market_clear_residual=float(market_clear),
                     budget_residuals=budget,
                     utility_price_residuals=uprice,
                     comp_slack_residuals=comp,
                     price_mass_residual=float(price_mass),
                     duality_gap=float(gap),
                     ql_delta_residuals=ql_res,
                     tol=tol)


def fairness(instance: MarketInstance, allocation: PureAllocation,
             tol: float = FAIR_TOL) -> FairnessReport:
    """Budget-weighted envy matrix and proportionality slacks, computed with
    exact interval integrals.  The Pareto certificate is the duality gap at
    the allocation-implied utility prices B_i / u_i."""
    _validate_allocation(instance, allocation)
    n = instance.n
    B = instance.budgets
    vals = np.zeros((n, n))  # vals[i, j] = <v_i, x_j>
    for j in range(n):
        for iv in allocation.intervals[j]:
            if iv.length <= 0:
                continue
            for i in range(n):
                vals[i, j] += instance.buyer_value(i, iv)
    u = np.diag(vals).copy()
    per_budget = vals / B[None, :]
    envy = per_budget - np.diag(per_budget)[:, None]
    np.fill_diagonal(envy, 0.0)
    prop = u - (B / B.sum()) * instance.total_values
    if np.all(u > 0):
        beta_implied = np.clip(B / u, 1e-300, None)
        env = upper_envelope(instance, beta_implied)
        gap = (env.integral() - float(np.dot(B, np.log(beta_implied)))
               - (float(np.dot(B, np.log(u))) + duality_constant(instance)))
    else:
        gap = float("inf")
    ceei = bool(np.allclose(B, B[0]))
    return FairnessReport(envy=envy, proportionality=prop, pareto_gap=float(gap),
                          ceei=ceei, tol=tol)


@dataclass
class OracleResult:
    beta: np.ndarray
    u: np.ndarray
    rounds: int
    cells: int

    def to_json(self):
        return {"beta": self.beta.tolist(), "u": self.u.tolist(),
                "rounds": self.rounds, "cells": self.cells}


def discretized_oracle(instance: MarketInstance, m: int, gap_tol: float = 1e-8,
                       max_rounds: int = 500000) -> OracleResult:
    """Proportional response dynamics on the m-cell discretization.

    Linear mode: bids b_ij <- B_i v_ij x_ij / u_i, prices p_j = sum_i b_ij,
    allocations x_ij = b_ij / p_j.  Quasilinear mode adds a per-buyer idle
    slot of unit price absorbing unspent budget, so buyers whose value per
    unit money falls below one end up with beta_i = 1.  The run stops when
    the discretized market's own duality-gap certificate (checked
    periodically on the implied beta_i = B_i / u_i) drops below gap_tol, so
    the returned prices are within sqrt(2 * gap_tol / min B) of the
    discretized optimum.
    """
    if m < 1:
        raise ValidationError("oracle needs at least one cell")
    n = instance.n
    B = instance.budgets
    C = duality_constant(instance)
    edges = np.linspace(0.0, 1.0, m + 1)
    lo, hi = edges[:-1], edges[1:]
    seg = instance.grid.locate(0.5 * (lo + hi))
    length = hi - lo
    mid = 0.5 * (lo + hi)
    V = length[None, :] * (instance.c[:, seg] * mid[None, :] + instance.d[:, seg])
    V = np.maximum(V, 0.0)
    ql = instance.mode == QUASILINEAR

    def certificate(u_prog, delta):
        if np.any(u_prog <= 0):
            return np.inf
        beta = B / u_prog
        if ql:
            beta = np.clip(beta, None, 1.0)
        psi = float(np.max(beta[:, None] * V, axis=0).sum()
                    - np.dot(B, np.log(beta)))
        primal = float(np.dot(B, np.log(u_prog)) - delta.sum())
        return psi - (primal + C)

    x = np.full((n, m), 1.0 / n)
    idle = np.full(n, 0.1 * B.min()) if ql else np.zeros(n)
    won = np.empty_like(x)
    rounds = 0
    gap = np.inf
    for rounds in range(1, max_rounds + 1):
        np.multiply(V, x, out=won)
        u = won.sum(axis=1)
        total = u + idle if ql else np.maximum(u, 1e-300)
        if ql:
            idle = B * idle / total
        won *= (B / total)[:, None]
        p = won.sum(axis=0)
        np.divide(won, np.maximum(p, 1e-300)[None, :], out=x)
        if rounds % 64 == 0 or rounds == max_rounds:
            u_prog = (V * x).sum(axis=1) + idle
            gap = certificate(u_prog, idle)
            if gap <= gap_tol:
                break
    else:
        raise NotConverged(
            f"proportional response certificate stuck at {gap:.3e} "
            f"after {max_rounds} rounds", result=None, gap=gap)
    u_prog = (V * x).sum(axis=1) + idle
    beta = B / u_prog
    if ql:
        beta = np.clip(beta, None, 1.0)
    return OracleResult(beta=beta, u=u_prog, rounds=rounds, cells=m)


def report_to_file(report, path):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report.to_json(), fh, indent=1)
        fh.write("\n")
