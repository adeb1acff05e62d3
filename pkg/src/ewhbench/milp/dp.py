"""
Exact per-scenario dynamic programming over the block-start temperature.

With one demand trace the block schedule problem has a scalar state: the
temperature at the start of each block. The cost-to-go is piecewise linear
in that temperature (a minimum of two branches, each a convex discomfort
term plus a shifted copy of the next cost-to-go), so it can be carried
exactly as a list of linear pieces. Branches that may exceed the cap are cut
off with +inf, which leaves the functions lower semicontinuous; values at
breakpoints are the minimum of the two adjacent pieces.

Summed with the scenario probabilities these optima give a valid lower bound
for the shared-schedule problem (each scenario may pick its own schedule),
and they are exact when there is a single scenario.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .model import TEMP_TOL, MilpModel

INF = math.inf


@dataclass(frozen=True)
class Pwl:
    """Piecewise linear function; piece i is ``sl[i] * s + ic[i]`` on ``[xs[i], xs[i+1]]``."""
    xs: np.ndarray
    sl: np.ndarray
    ic: np.ndarray

    @classmethod
    def constant(cls, lo: float, hi: float, value: float = 0.0) -> "Pwl":
        return cls(np.array([lo, hi]), np.zeros(1), np.array([value]))

    def pieces_on(self, grid: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Slope and intercept on each interval of ``grid`` (a refinement of ``xs``)."""
        mid = 0.5 * (grid[:-1] + grid[1:])
        i = np.clip(np.searchsorted(self.xs, mid, side="right") - 1, 0, len(self.sl) - 1)
        return self.sl[i], self.ic[i]

    def __call__(self, s: float) -> float:
        xs = self.xs
        i = int(np.clip(np.searchsorted(xs, s, side="right") - 1, 0, len(self.sl) - 1))
        best = _line(self.sl[i], self.ic[i], s)
        if i > 0 and s == xs[i]:
            best = min(best, _line(self.sl[i - 1], self.ic[i - 1], s))
        return best


def _line(sl, ic, s):
    return INF if ic == INF else sl * s + ic


def _grid(*fs: Pwl) -> np.ndarray:
    g = np.unique(np.concatenate([f.xs for f in fs]))
    return g


def _clean(xs, sl, ic) -> Pwl:
    keep = np.diff(xs) > 0
    if not keep.all():
        xs = np.concatenate([xs[:-1][keep], xs[-1:]])
        sl, ic = sl[keep], ic[keep]
    # merge neighbours carrying the same line
    same = (sl[1:] == sl[:-1]) & (ic[1:] == ic[:-1])
    if same.any():
        inner = np.flatnonzero(~same) + 1
        xs = np.concatenate([xs[:1], xs[inner], xs[-1:]])
        starts = np.concatenate([[0], inner])
        sl, ic = sl[starts], ic[starts]
    return Pwl(xs, sl, ic)


def add(f: Pwl, g: Pwl) -> Pwl:
    grid = _grid(f, g)
    a, b = f.pieces_on(grid)
    c, d = g.pieces_on(grid)
    ic = np.where((b == INF) | (d == INF), INF, b + d)
    sl = np.where(ic == INF, 0.0, a + c)
    return _clean(grid, sl, ic)


def minimum(f: Pwl, g: Pwl) -> tuple[Pwl, np.ndarray]:
    """Pointwise minimum and, per output piece, whether it came from ``g``."""
    grid = _grid(f, g)
    a, b = f.pieces_on(grid)
    c, d = g.pieces_on(grid)
    x0, x1 = grid[:-1], grid[1:]
    both = (b < INF) & (d < INF)
    with np.errstate(divide="ignore", invalid="ignore"):
        cross = np.where(both & (a != c), (d - b) / (a - c), np.nan)
    split = both & (cross > x0) & (cross < x1)

    idx = np.repeat(np.arange(len(x0)), np.where(split, 2, 1))
    first = np.ones(len(idx), dtype=bool)
    first[1:] = idx[1:] != idx[:-1]
    lo = np.where(first, x0[idx], cross[idx])
    hi = np.where(split[idx] & first, cross[idx], x1[idx])
    # compare at the midpoint: robust when the crossing sits next to an end
    m = 0.5 * (lo + hi)
    a, b, c, d = a[idx], b[idx], c[idx], d[idx]
    with np.errstate(invalid="ignore"):
        src = (d < INF) & ((b == INF) | (c * m + d < a * m + b))
    xs = np.concatenate([x0[:1], hi])
    return Pwl(xs, np.where(src, c, a), np.where(src, d, b)), src


def compose(f: Pwl, A: float, beta: float, lo: float, hi: float) -> Pwl:
    """``s -> f(A s + beta)`` on ``[lo, hi]`` for ``A > 0``; ``f`` extends linearly past its ends."""
    inner = (f.xs[1:-1] - beta) / A
    inner = inner[(inner > lo) & (inner < hi)]
    xs = np.concatenate([[lo], inner, [hi]])
    mid = 0.5 * (xs[:-1] + xs[1:]) * A + beta
    i = np.clip(np.searchsorted(f.xs, mid, side="right") - 1, 0, len(f.sl) - 1)
    s, c = f.sl[i], f.ic[i]
    ic = np.where(c == INF, INF, s * beta + c)
    sl = np.where(c == INF, 0.0, s * A)
    return _clean(xs, sl, ic)


def cap_above(f: Pwl, u: float) -> Pwl:
    """Infinite for ``s > u``."""
    lo, hi = f.xs[0], f.xs[-1]
    if u >= hi:
        return f
    if u < lo:
        return Pwl(np.array([lo, hi]), np.zeros(1), np.array([INF]))
    cut = Pwl(np.array([lo, u, hi]), np.zeros(2), np.array([0.0, INF]))
    return add(f, cut)


def hinge_sum(w: np.ndarray, alpha: np.ndarray, beta: np.ndarray, target: float, lo: float, hi: float) -> Pwl:
    """``sum_j w_j max(0, target - alpha_j s - beta_j)`` on ``[lo, hi]``, with ``alpha_j > 0``."""
    act = w > 0
    w, alpha, beta = w[act], alpha[act], beta[act]
    if len(w) == 0:
        return Pwl.constant(lo, hi)
    knots = (target - beta) / alpha
    inner = np.unique(knots[(knots > lo) & (knots < hi)])
    xs = np.concatenate([[lo], inner, [hi]])
    mid = 0.5 * (xs[:-1] + xs[1:])
    on = mid[:, None] < knots[None, :]  # hinge j active on this piece
    sl = -(on * (w * alpha)).sum(axis=1)
    ic = (on * (w * (target - beta))).sum(axis=1)
    return _clean(xs, sl, ic)


@dataclass
class BlockData:
    alpha: np.ndarray  # (B, L) cumulative decay from block start to after step j
    beta0: np.ndarray  # (B, L) offsets with the heater off
    beta1: np.ndarray  # (B, L) offsets with the heater on
    weight: np.ndarray  # (B, L) discomfort cost per degree below the threshold
    lo: np.ndarray  # (B+1,) lowest reachable block-start temperature


def block_data(model: MilpModel, n: int) -> BlockData:
    decay, drive, gain, _, _ = model.coefficients
    B, L = model.n_blocks, model.block_len
    Pon = model.params.rated_power_Pon
    rc = model.schedule.discomfort_rate_rc
    alpha = np.empty((B, L))
    b0 = np.empty((B, L))
    b1 = np.empty((B, L))
    lo = np.empty(B + 1)
    lo[0] = model.T0
    for b in range(B):
        al, p0, p1 = 1.0, 0.0, 0.0
        for j in range(L):
            k = b * L + j
            al = decay[n, k] * al
            p0 = decay[n, k] * p0 + drive[n, k]
            p1 = decay[n, k] * p1 + drive[n, k] + gain[n, k] * Pon
            alpha[b, j], b0[b, j], b1[b, j] = al, p0, p1
        lo[b + 1] = alpha[b, -1] * lo[b] + b0[b, -1]
    weight = rc * model.demand[n].reshape(B, L)
    return BlockData(alpha, b0, b1, weight, lo)


class ScenarioDp:
    """Backward value functions and forward argmin for one scenario."""

    def __init__(self, model: MilpModel, n: int):
        self.model = model
        self.n = n
        self.data = block_data(model, n)
        self.heat = model.block_heating_cost()
        prm = model.params
        self.lower = prm.temp_lower_T
        self.cap = prm.temp_upper_Tbar + TEMP_TOL
        d = self.data
        B = model.n_blocks
        self.hi = np.full(B + 1, max(self.cap, model.T0))
        self.u0 = ((self.cap - d.beta0) / d.alpha).min(axis=1)
        self.u1 = ((self.cap - d.beta1) / d.alpha).min(axis=1)
        self.cost0 = [hinge_sum(d.weight[b], d.alpha[b], d.beta0[b], self.lower, d.lo[b], self.hi[b])
                      for b in range(B)]
        self.cost1 = [hinge_sum(d.weight[b], d.alpha[b], d.beta1[b], self.lower, d.lo[b], self.hi[b])
                      for b in range(B)]

    def solve(self, y_lo: np.ndarray, y_hi: np.ndarray) -> tuple[float, np.ndarray]:
        """Optimal cost from the initial temperature and the schedule attaining it."""
        d = self.data
        B = self.model.n_blocks
        V = [None] * (B + 1)
        V[B] = Pwl.constant(d.lo[B], self.hi[B])
        for b in range(B - 1, -1, -1):
            lo, hi = d.lo[b], self.hi[b]
            A = d.alpha[b, -1]
            off = None
            on = None
            if y_lo[b] < 0.5:
                off = cap_above(add(self.cost0[b], compose(V[b + 1], A, d.beta0[b, -1], lo, hi)), self.u0[b])
            if y_hi[b] > 0.5:
                on = add(self.cost1[b], compose(V[b + 1], A, d.beta1[b, -1], lo, hi))
                on = cap_above(Pwl(on.xs, on.sl, np.where(on.ic == INF, INF, on.ic + self.heat[b])), self.u1[b])
            if off is None:
                V[b] = on
            elif on is None:
                V[b] = off
            else:
                V[b], _ = minimum(off, on)
        value = V[0](self.model.T0)
        if value == INF:
            return INF, np.zeros(B)
        y = np.zeros(B)
        s = self.model.T0
        for b in range(B):
            best, pick = INF, 0
            for a in (0, 1):
                if (a == 0 and y_lo[b] > 0.5) or (a == 1 and y_hi[b] < 0.5):
                    continue
                u = self.u1[b] if a else self.u0[b]
                if s > u:
                    continue
                beta = d.beta1[b] if a else d.beta0[b]
                cost = (self.cost1[b] if a else self.cost0[b])(s) + (self.heat[b] if a else 0.0)
                nxt = d.alpha[b, -1] * s + beta[-1]
                total = cost + V[b + 1](nxt)
                if total < best:
                    best, pick = total, a
            y[b] = pick
            beta = d.beta1[b] if pick else d.beta0[b]
            s = d.alpha[b, -1] * s + beta[-1]
        return float(value), y


class ScenarioBound:
    """Probability-weighted sum of per-scenario optima under block fixings."""

    def __init__(self, model: MilpModel):
        self.model = model
        self.dps = [ScenarioDp(model, n) for n in range(model.n_scenarios)]

    def __call__(self, y_lo, y_hi) -> tuple[float, list[np.ndarray]]:
        total = 0.0
        ys = []
        for p, dp in zip(self.model.probs, self.dps):
            v, y = dp.solve(y_lo, y_hi)
            if v == INF:
                return INF, []
            total += p * v
            ys.append(y)
        return total, ys
