"""Stochastic dual averaging over sampled items.

Each round draws one item location uniformly, charges the whole stochastic
subgradient to the buyer whose scaled density wins there (smallest index on
ties), and re-solves the regularized model in closed form:

    gbar_t = ((t-1) gbar_{t-1} + g_t) / t
    beta_{t+1, i} = clamp(B_i / gbar_{t, i}, lower_i, 1)

A buyer never yet sampled as winner has gbar_i = 0 and maps to the upper
bound 1.  Traces record the iterate and the uniform average beta_tilde at
power-of-two checkpoints; with a reference vector the squared error of the
average is recorded too, and ``mse_theory_bound`` evaluates the guarantee
curve (6(1+log t) + (log t)^2 / 2) / t * G^2 / sigma^2 that the empirical
mean-squared error is compared against.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .envelope import beta_bounds
from .errors import ValidationError
from .market import MarketInstance


@dataclass
class SdaTrace:
    seed: int
    iterations: int
    checkpoints: np.ndarray     # iteration counts t
    beta: np.ndarray            # (len, n) iterate after t samples
    beta_avg: np.ndarray        # (len, n) uniform average of beta^1..beta^t
    sq_err: np.ndarray = None   # ||beta_avg - beta_ref||^2 when a reference is given

    def csv_rows(self):
        n = self.beta.shape[1]
        header = (["t"] + [f"beta_{i + 1}" for i in range(n)]
                  + [f"betaavg_{i + 1}" for i in range(n)])
        if self.sq_err is not None:
            header.append("sqerr")
        rows = []
        for r, t in enumerate(self.checkpoints):
            row = [int(t)] + list(self.beta[r]) + list(self.beta_avg[r])
            if self.sq_err is not None:
                row.append(float(self.sq_err[r]))
            rows.append(row)
        return header, rows


def _checkpoint_list(iters):
    pts = []
    t = 1
    while t < iters:
        pts.append(t)
        t *= 2
    pts.append(iters)
    return np.asarray(pts, dtype=int)


def subgradient_bound(instance: MarketInstance) -> float:
    """G = max_i sup_theta v_i(theta); densities are linear so segment
    endpoints attain the sup."""
    pts = instance.grid.points
    vals_lo = instance.c * pts[:-1][None, :] + instance.d
    vals_hi = instance.c * pts[1:][None, :] + instance.d
    return float(max(vals_lo.max(), vals_hi.max()))


def mse_theory_bound(instance: MarketInstance, t) -> np.ndarray:
    """Guarantee curve for E||beta_avg_t - beta*||^2."""
    t = np.asarray(t, dtype=float)
    G = subgradient_bound(instance)
    sigma = float(instance.budgets.min())
    logt = np.log(t)
    return (6.0 * (1.0 + logt) + 0.5 * logt ** 2) / t * (G / sigma) ** 2


def sda_run(instance: MarketInstance, iters: int, seed: int,
            beta_ref=None) -> SdaTrace:
    """One stochastic dual averaging run; bit-reproducible per seed."""
    if iters < 1:
        raise ValidationError("iters must be >= 1")
    n = instance.n
    B = instance.budgets
    lower, upper = beta_bounds(instance)
    rng = np.random.default_rng(seed)
    thetas = rng.random(iters)
    seg = instance.grid.locate(thetas)
    values = instance.c[:, seg] * thetas[None, :] + instance.d[:, seg]  # (n, T)
    checkpoints = _checkpoint_list(iters)
    want = {int(t): r for r, t in enumerate(checkpoints)}
    beta = upper.copy()
    gbar = np.zeros(n)
    beta_sum = np.zeros(n)
    out_beta = np.zeros((checkpoints.size, n))
    out_avg = np.zeros((checkpoints.size, n))
    ref = None if beta_ref is None else np.asarray(beta_ref, dtype=float)
    sq = np.zeros(checkpoints.size) if ref is not None else None
    for t in range(1, iters + 1):
        col = values[:, t - 1]
        winner = int(np.argmax(beta * col))
        beta_sum += beta
        gbar *= (t - 1) / t
        gbar[winner] += col[winner] / t
        with np.errstate(divide="ignore"):
            beta = np.where(gbar > 0.0, np.minimum(np.maximum(B / gbar, lower),
                                                   upper), upper)
        r = want.get(t)
        if r is not None:
            out_beta[r] = beta
            avg = beta_sum / t
            out_avg[r] = avg
            if sq is not None:
                diff = avg - ref
                sq[r] = float(np.dot(diff, diff))
    return SdaTrace(seed=seed, iterations=iters, checkpoints=checkpoints,
                    beta=out_beta, beta_avg=out_avg, sq_err=sq)


def mse_curve(instance: MarketInstance, iters: int, seeds, beta_ref):
    """Empirical MSE of the averaged iterate across replications.

    Returns a dict with the checkpoint grid, the per-checkpoint mean of
    ||beta_avg - beta_ref||^2 over the seeds, the theoretical envelope at the
    same checkpoints, and the final per-run errors.
    """
    ref = np.asarray(beta_ref, dtype=float)
    seeds = list(seeds)
    if not seeds:
        raise ValidationError("mse_curve needs at least one seed")
    total = None
    finals = []
    checkpoints = None
    for seed in seeds:
        trace = sda_run(instance, iters, seed, beta_ref=ref)
        if total is None:
            checkpoints = trace.checkpoints
            total = np.zeros_like(trace.sq_err)
        total += trace.sq_err
        finals.append(math.sqrt(trace.sq_err[-1]))
    mse = total / len(seeds)
    return {
        "checkpoints": checkpoints,
        "mse": mse,
        "bound": mse_theory_bound(instance, checkpoints),
        "final_errors": np.asarray(finals),
        "replications": len(seeds),
    }
