"""Gomory mixed-integer cuts read off an optimal simplex basis."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .simplex import Basis

MIN_FRAC = 0.005
MAX_DYNAMISM = 1e8


@dataclass(frozen=True)
class Cut:
    coef: np.ndarray  # over structural columns; valid inequality coef @ x >= rhs
    rhs: float
    efficacy: float  # euclidean distance of the separated point from the cut


def gmi_cuts(A, row_lo, row_hi, col_lo, col_hi, x, basis: Basis, is_int: np.ndarray,
             max_cuts: int = 20) -> list[Cut]:
    """Separate ``x`` (an optimal vertex for ``basis``) with GMI cuts.

    Only integer columns with integer bounds count as integer; row logicals
    are treated as continuous, which keeps every cut valid. No coefficient is
    dropped: the terms are non-negative, so dropping one would strengthen the
    cut rather than relax it.
    """
    A = np.asarray(A, float)
    m, n = A.shape
    if m == 0:
        return []
    lo = np.concatenate([col_lo, row_lo])
    hi = np.concatenate([col_hi, row_hi])
    M = np.hstack([A, -np.eye(m)])
    head = basis.head
    nonbasic = np.ones(n + m, dtype=bool)
    nonbasic[head] = False
    at_upper = basis.at_upper & nonbasic
    fixed = hi - lo <= 0
    use_hi = at_upper | (~np.isfinite(lo) & np.isfinite(hi))
    bound_val = np.where(use_hi, hi, lo)
    sign = np.where(use_hi, -1.0, 1.0)  # x_j = bound + sign * t_j
    free = nonbasic & ~np.isfinite(bound_val)
    int_col = np.zeros(n + m, dtype=bool)
    int_col[:n] = is_int & np.isfinite(col_lo) & np.isfinite(col_hi) \
        & (col_lo == np.floor(col_lo)) & (col_hi == np.floor(col_hi))

    rows = [r for r in range(m) if head[r] < n and is_int[head[r]]]
    cand = []
    for r in rows:
        v = x[head[r]]
        f0 = v - math.floor(v)
        if min(f0, 1.0 - f0) >= MIN_FRAC:
            cand.append((r, f0))
    if not cand:
        return []
    Bm = M[:, head]
    try:
        U = np.linalg.solve(Bm.T, np.eye(m)[:, [r for r, _ in cand]])
    except np.linalg.LinAlgError:
        return []
    tab = U.T @ M  # rows of B^-1 M: x_head[r] + sum_j tab_j x_j = 0

    cuts = []
    for (r, f0), t in zip(cand, tab):
        abar = np.where(nonbasic & ~fixed, t * sign, 0.0)
        if np.any(free & (abar != 0.0)):
            continue
        pi = np.zeros(n + m)
        fj = abar - np.floor(abar)
        ii = int_col & (abar != 0.0)
        pi[ii] = np.where(fj[ii] <= f0, fj[ii] / f0, (1.0 - fj[ii]) / (1.0 - f0))
        cc = ~int_col & (abar != 0.0)
        pi[cc] = np.where(abar[cc] > 0, abar[cc] / f0, -abar[cc] / (1.0 - f0))
        # sum pi_j t_j >= 1 with t_j = sign_j (x_j - bound_j)
        w = pi * sign
        rhs = 1.0 + float(np.dot(w[nonbasic & ~fixed], bound_val[nonbasic & ~fixed]))
        coef = w[:n] + w[n:] @ A
        nz = np.abs(coef[coef != 0.0])
        if len(nz) == 0 or nz.max() / nz.min() > MAX_DYNAMISM:
            continue
        scale = nz.max()
        coef = coef / scale
        rhs = rhs / scale
        rhs -= 1e-9 * max(1.0, abs(rhs))  # guard against roundoff in the tableau row
        viol = rhs - float(coef @ x[:n])
        norm = float(np.linalg.norm(coef))
        if viol <= 1e-6 * max(1.0, abs(rhs)):
            continue
        cuts.append(Cut(coef, rhs, viol / norm))
    cuts.sort(key=lambda c: -c.efficacy)
    return _parallel_filter(cuts, max_cuts)


def _parallel_filter(cuts: list[Cut], k: int, max_cos: float = 0.999) -> list[Cut]:
    keep: list[Cut] = []
    for c in cuts:
        u = c.coef / np.linalg.norm(c.coef)
        if all(abs(u @ (d.coef / np.linalg.norm(d.coef))) < max_cos for d in keep):
            keep.append(c)
        if len(keep) >= k:
            break
    return keep
