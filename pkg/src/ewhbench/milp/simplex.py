"""
Bounded-variable primal simplex on a dense tableau.

Problem form::

    min  c @ x
    s.t. row_lo <= A @ x <= row_hi
         col_lo <=   x   <= col_hi

Each row gets a logical variable ``s_i = A_i x`` so the equality system is
``[A, -I] [x; s] = 0``. Phase 1 minimises the sum of bound violations of the
basic variables (composite method), phase 2 the true objective. Pricing is
Dantzig's rule; after ``10 * (m + n)`` iterations the solver falls back to
Bland's rule for both pricing and ratio-test ties.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg.blas import dger

FEAS_TOL = 1e-9
OPT_TOL = 1e-9
PIVOT_TOL = 1e-10

OPTIMAL, INFEASIBLE, UNBOUNDED, ITERATION_LIMIT = "optimal", "infeasible", "unbounded", "iteration_limit"


@dataclass
class Basis:
    head: np.ndarray  # variable index basic in each row
    at_upper: np.ndarray  # bool per variable (meaningful for nonbasic ones)


@dataclass
class LpResult:
    status: str
    x: np.ndarray
    objective: float
    row_activity: np.ndarray
    reduced_costs: np.ndarray  # structural then logical (= row duals)
    basis: Basis | None
    iterations: int

    @property
    def duals(self) -> np.ndarray:
        return self.reduced_costs[len(self.x):]


def _initial_nonbasic(lo, hi, at_upper):
    x = np.where(at_upper, hi, lo)
    free = ~np.isfinite(x)
    x[free] = 0.0
    return x


def solve_lp(c, A, row_lo, row_hi, col_lo, col_hi, basis: Basis | None = None,
             max_iter: int | None = None, refactor_every: int | None = None) -> LpResult:
    A = np.asarray(A, dtype=float)
    m, n = A.shape
    N = n + m
    lo = np.concatenate([np.asarray(col_lo, float), np.asarray(row_lo, float)])
    hi = np.concatenate([np.asarray(col_hi, float), np.asarray(row_hi, float)])
    if np.any(lo > hi + FEAS_TOL):
        return LpResult(INFEASIBLE, np.zeros(n), np.inf, np.zeros(m), np.zeros(N), None, 0)
    cost = np.concatenate([np.asarray(c, float), np.zeros(m)])
    M = np.zeros((m, N), order="F")
    M[:, :n] = A
    M[:, n:] = -np.eye(m)

    if basis is None:
        head = np.arange(n, N)
        at_upper = (~np.isfinite(lo)) & np.isfinite(hi)
    else:
        head = np.array(basis.head, dtype=int)
        at_upper = np.array(basis.at_upper, dtype=bool)
        # bounds may have moved since the basis was recorded
        at_upper &= np.isfinite(hi)
        at_upper |= (~np.isfinite(lo)) & np.isfinite(hi)

    is_basic = np.zeros(N, dtype=bool)
    x = np.empty(N)
    T = None

    def factor():
        nonlocal T
        is_basic[:] = False
        is_basic[head] = True
        if basis is None and T is None:
            T = np.asfortranarray(-M)
        else:
            T = np.asfortranarray(np.linalg.solve(M[:, head], M))
        x[~is_basic] = _initial_nonbasic(lo, hi, at_upper)[~is_basic]
        xn = np.where(is_basic, 0.0, x)
        x[head] = -(T @ xn)

    try:
        factor()
    except np.linalg.LinAlgError:
        basis = None
        head = np.arange(n, N)
        at_upper = (~np.isfinite(lo)) & np.isfinite(hi)
        T = None
        factor()

    max_iter = max_iter if max_iter is not None else 50 * (m + n) + 1000
    bland_after = 10 * (m + n)
    refactor_every = refactor_every or max(200, m)
    it = 0
    since_factor = 0
    status = ITERATION_LIMIT
    d = None
    phase = 0
    while it < max_iter:
        xb = x[head]
        lob, hib = lo[head], hi[head]
        below = xb < lob - FEAS_TOL
        above = xb > hib + FEAS_TOL
        if below.any() or above.any():
            phase = 1
            cb = above.astype(float) - below.astype(float)
            d = -(cb @ T)
        else:
            if phase != 2 or d is None:
                phase = 2
                d = cost - cost[head] @ T
        d[head] = 0.0
        bland = it >= bland_after
        nb = ~is_basic
        fixed = hi - lo <= 0
        can_up = nb & ~fixed & (~at_upper | ~np.isfinite(hi)) & (x < hi) & (d < -OPT_TOL)
        can_dn = nb & ~fixed & (at_upper | ~np.isfinite(lo)) & (x > lo) & (d > OPT_TOL)
        elig = can_up | can_dn
        if not elig.any():
            status = INFEASIBLE if phase == 1 else OPTIMAL
            break
        cand = np.flatnonzero(elig)
        q = int(cand[0]) if bland else int(cand[np.argmax(np.abs(d[cand]))])
        direction = 1.0 if can_up[q] else -1.0
        alpha = direction * T[:, q]  # xb(t) = xb - t * alpha

        t_best = hi[q] - lo[q]  # bound flip of the entering variable
        r_best = -1
        leave_upper = False
        dec = alpha > PIVOT_TOL
        inc = alpha < -PIVOT_TOL
        ratios = np.full(m, np.inf)
        to_upper = np.zeros(m, dtype=bool)
        # decreasing basics
        i = dec & above
        ratios[i] = (xb[i] - hib[i]) / alpha[i]
        to_upper[i] = True
        i = dec & ~above & ~below & np.isfinite(lob)
        ratios[i] = (xb[i] - lob[i]) / alpha[i]
        # increasing basics
        i = inc & below
        ratios[i] = (lob[i] - xb[i]) / -alpha[i]
        i = inc & ~above & ~below & np.isfinite(hib)
        ratios[i] = (hib[i] - xb[i]) / -alpha[i]
        to_upper[i] = True
        np.maximum(ratios, 0.0, out=ratios)
        tmin = ratios.min() if m else np.inf
        if tmin < t_best:
            ties = np.flatnonzero(ratios <= tmin + 1e-12)
            if bland:
                r_best = int(ties[np.argmin(head[ties])])
            else:
                r_best = int(ties[np.argmax(np.abs(alpha[ties]))])
            t_best = ratios[r_best]
            leave_upper = bool(to_upper[r_best])
        if not np.isfinite(t_best):
            status = UNBOUNDED if phase == 2 else INFEASIBLE
            break
        it += 1
        x[head] = xb - t_best * alpha
        x[q] += direction * t_best
        if r_best < 0:
            at_upper[q] = not at_upper[q] if np.isfinite(hi[q]) and np.isfinite(lo[q]) else direction > 0
            x[q] = hi[q] if at_upper[q] else lo[q]
            continue
        leaving = int(head[r_best])
        at_upper[leaving] = leave_upper
        x[leaving] = hi[leaving] if leave_upper else lo[leaving]
        piv = T[r_best, q]
        row = T[r_best, :] / piv
        col = T[:, q].copy()
        col[r_best] = 0.0
        T = dger(-1.0, col, row, a=T, overwrite_a=True)
        T[r_best, :] = row
        if phase == 2:
            d = d - d[q] * row
        head[r_best] = q
        is_basic[leaving] = False
        is_basic[q] = True
        since_factor += 1
        if since_factor >= refactor_every:
            factor()
            since_factor = 0
            d = None if phase == 2 else d
            if phase == 2:
                d = cost - cost[head] @ T

    if status == OPTIMAL:
        resid = np.abs(M @ x).max() if m else 0.0
        if resid > 1e-9 * max(1.0, np.abs(x).max()):
            factor()
        xb = x[head]
        viol = np.maximum(lo[head] - xb, xb - hi[head]).max() if m else 0.0
        if viol > 1e-7:
            status = INFEASIBLE
        d = cost - cost[head] @ T
        d[head] = 0.0
    xs = x[:n].copy()
    obj = float(cost[:n] @ xs) if status == OPTIMAL else (np.inf if status == INFEASIBLE else -np.inf)
    return LpResult(status, xs, obj, x[n:].copy(), d if d is not None else np.zeros(N),
                    Basis(head.copy(), at_upper.copy()), it)
