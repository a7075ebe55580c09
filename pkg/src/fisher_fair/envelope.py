"""Upper envelopes of scaled valuations and the reduced dual objective.

For a utility-price vector beta > 0 the price density is the pointwise upper
envelope p(theta) = max_i beta_i * v_i(theta).  On each grid segment that is
an envelope of n lines, computed by a left-to-right leader sweep: starting
from the leader at the segment's left end, repeatedly find the nearest point
where another line overtakes the current leader.  Each line can lead at most
once per segment, and ties are resolved to the smallest buyer index so the
winning sets are a deterministic selection from the subdifferential.

The reduced dual is psi(beta) = integral(p) - sum_i B_i log beta_i; its
subgradient has components (winning utility of buyer i) - B_i / beta_i.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DomainError
from .market import Interval, LinearPiece, MarketInstance

ENV_TOL = 1e-9      # owner certification tolerance (dominance slack)
_TIE_EPS = 1e-13    # relative slack when grouping equal leaders at a point


@dataclass
class PiecewiseLinearFunction:
    """Piecewise-linear function on [0, 1]; not necessarily continuous.

    Piece j is the linear density cs[j] * theta + ds[j] on
    [breakpoints[j], breakpoints[j+1]), with the last piece closed at 1.
    ``owners[j]`` is the buyer attaining the max on piece j (envelopes only)
    and ``segments[j]`` the grid segment the piece lives in.
    """

    breakpoints: np.ndarray
    cs: np.ndarray
    ds: np.ndarray
    owners: np.ndarray = None
    segments: np.ndarray = None

    @property
    def num_pieces(self) -> int:
        return self.cs.size

    def piece(self, j: int) -> LinearPiece:
        return LinearPiece(self.cs[j], self.ds[j])

    def piece_interval(self, j: int) -> Interval:
        return Interval(self.breakpoints[j], self.breakpoints[j + 1])

    def locate(self, theta):
        idx = np.searchsorted(self.breakpoints, theta, side="right") - 1
        return np.clip(idx, 0, self.num_pieces - 1)

    def __call__(self, theta):
        theta = np.asarray(theta, dtype=float)
        j = self.locate(theta)
        return self.cs[j] * theta + self.ds[j]

    def integral(self, lo: float = None, hi: float = None) -> float:
        """Exact integral over [lo, hi] (defaults to the whole support)."""
        b = self.breakpoints
        lo = b[0] if lo is None else lo
        hi = b[-1] if hi is None else hi
        if hi <= lo:
            return 0.0
        left = np.maximum(b[:-1], lo)
        right = np.minimum(b[1:], hi)
        length = np.maximum(right - left, 0.0)
        mid = 0.5 * (left + right)
        return float(np.sum(length * (self.cs * mid + self.ds)))


def _segment_envelope(m, q, lo, hi):
    """Leader sweep for lines y = m*x + q on [lo, hi].

    Returns (cuts, leaders): interior breakpoints and the leading line index
    on each resulting piece (len(cuts) + 1 entries).  Ties at a point go to
    the steepest line, then the smallest index, so the winner is the line
    that dominates immediately to the right.
    """
    n = m.size
    cuts = []
    leaders = []
    x = lo
    vals = m * x + q
    vmax = vals.max()
    cand = vals >= vmax - _TIE_EPS * (1.0 + abs(vmax))
    slopes = np.where(cand, m, -np.inf)
    leader = int(np.argmax(slopes))
    for _ in range(n + 1):
        leaders.append(leader)
        steeper = m > m[leader]
        if not steeper.any():
            break
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = (q[leader] - q) / (m - m[leader])
        xc = np.where(steeper, xc, np.inf)
        xc = np.where(xc > x + _TIE_EPS, xc, np.inf)
        nxt = xc.min()
        if nxt >= hi - _TIE_EPS:
            break
        at_next = xc <= nxt + _TIE_EPS * (1.0 + abs(nxt))
        slopes = np.where(at_next, m, -np.inf)
        leader = int(np.argmax(slopes))
        cuts.append(nxt)
        x = nxt
    return cuts, leaders


def beta_bounds(instance: MarketInstance):
    """Box containing the optimal beta: [B, 1] in linear mode and
    [B_i / (v_i(Theta) + B_i), 1] in quasilinear mode."""
    B = instance.budgets
    if instance.mode == "quasilinear":
        lo = B / (instance.total_values + B)
    else:
        lo = B.copy()
    return lo, np.ones_like(B)


def upper_envelope(instance: MarketInstance, beta) -> PiecewiseLinearFunction:
    """Exact envelope p = max_i beta_i v_i with per-piece owners."""
    beta = np.asarray(beta, dtype=float)
    if beta.shape != (instance.n,) or np.any(beta <= 0):
        raise DomainError("beta must be a positive vector, one entry per buyer")
    pts = instance.grid.points
    bps = [0.0]
    cs, ds, owners, segs = [], [], [], []
    for k in range(instance.num_segments):
        lo, hi = pts[k], pts[k + 1]
        m = beta * instance.c[:, k]
        q = beta * instance.d[:, k]
        cuts, leads = _segment_envelope(m, q, lo, hi)
        for j, owner in enumerate(leads):
            cs.append(m[owner])
            ds.append(q[owner])
            owners.append(owner)
            segs.append(k)
            bps.append(cuts[j] if j < len(cuts) else hi)
    return PiecewiseLinearFunction(
        breakpoints=np.asarray(bps), cs=np.asarray(cs), ds=np.asarray(ds),
        owners=np.asarray(owners, dtype=int), segments=np.asarray(segs, dtype=int))


def integral(f: PiecewiseLinearFunction) -> float:
    """Total mass of a piecewise-linear function (exact up to roundoff)."""
    return f.integral()


def certify_envelope(instance: MarketInstance, beta,
                     env: PiecewiseLinearFunction = None,
                     tol: float = ENV_TOL) -> bool:
    """Ownership certificate: on every piece the owner's scaled density
    dominates every other buyer's at both endpoints, up to ``tol``.
    Endpoint checks suffice because all densities are linear on the piece."""
    beta = np.asarray(beta, dtype=float)
    if env is None:
        env = upper_envelope(instance, beta)
    b = env.breakpoints
    for j in range(env.num_pieces):
        lo, hi = b[j], b[j + 1]
        if hi <= lo:
            continue
        k = env.segments[j]
        for x in (lo, hi):
            vals = beta * (instance.c[:, k] * x + instance.d[:, k])
            if vals[env.owners[j]] < vals.max() - tol:
                return False
    return True


def winning_utility_matrix(instance: MarketInstance, beta) -> np.ndarray:
    """(n, K) matrix: buyer i's unscaled value over its winning set in segment k."""
    env = upper_envelope(instance, beta)
    U = np.zeros((instance.n, instance.num_segments))
    b = env.breakpoints
    for j in range(env.num_pieces):
        lo, hi = b[j], b[j + 1]
        if hi <= lo:
            continue
        i = env.owners[j]
        k = env.segments[j]
        mid = 0.5 * (lo + hi)
        U[i, k] += (hi - lo) * (instance.c[i, k] * mid + instance.d[i, k])
    return U


def winning_utilities(instance: MarketInstance, beta) -> np.ndarray:
    """Per-buyer value of its winning set; the envelope term of the subgradient."""
    return winning_utility_matrix(instance, beta).sum(axis=1)


def dual_objective(instance: MarketInstance, beta) -> float:
    """psi(beta) = integral of the envelope minus sum_i B_i log beta_i."""
    beta = np.asarray(beta, dtype=float)
    if np.any(beta <= 0):
        raise DomainError("dual objective requires beta > 0")
    env = upper_envelope(instance, beta)
    return env.integral() - float(np.dot(instance.budgets, np.log(beta)))


def dual_subgradient(instance: MarketInstance, beta):
    """One envelope pass returning (psi(beta), subgradient, winning matrix).

    The subgradient is g_i = winning_utilities_i - B_i / beta_i with the
    smallest-index tie rule baked into the envelope owners.
    """
    beta = np.asarray(beta, dtype=float)
    if np.any(beta <= 0):
        raise DomainError("dual subgradient requires beta > 0")
    env = upper_envelope(instance, beta)
    U = np.zeros((instance.n, instance.num_segments))
    b = env.breakpoints
    for j in range(env.num_pieces):
        lo, hi = b[j], b[j + 1]
        if hi <= lo:
            continue
        i = env.owners[j]
        k = env.segments[j]
        mid = 0.5 * (lo + hi)
        U[i, k] += (hi - lo) * (instance.c[i, k] * mid + instance.d[i, k])
    w = U.sum(axis=1)
    psi = env.integral() - float(np.dot(instance.budgets, np.log(beta)))
    g = w - instance.budgets / beta
    return psi, g, U, env


def plot_data(instance: MarketInstance, beta, num_points: int = 1000):
    """Rows (theta, p(theta), beta_1 v_1(theta), ..., beta_n v_n(theta)).

    Samples a uniform grid and additionally every envelope piece endpoint so
    discontinuities across valuation breakpoints render faithfully.
    """
    beta = np.asarray(beta, dtype=float)
    env = upper_envelope(instance, beta)
    theta = np.union1d(np.linspace(0.0, 1.0, num_points), env.breakpoints)
    scaled = beta[:, None] * instance.values_at(theta)
    p = env(theta)
    header = ["theta", "p_star"] + [f"beta{i + 1}_v{i + 1}" for i in range(instance.n)]
    rows = np.column_stack([theta, p, scaled.T])
    return header, rows
