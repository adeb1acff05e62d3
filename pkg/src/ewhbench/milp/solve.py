"""LP relaxation, best-first branch-and-bound and exhaustive enumeration."""

from __future__ import annotations

import heapq
import itertools
import json
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from ..ewh import BTU_PER_KWH, step_coefficients
from .cuts import gmi_cuts
from .dp import ScenarioBound
from .model import TEMP_TOL, MilpModel, ReducedLp
from .simplex import INFEASIBLE, OPTIMAL, Basis, solve_lp

OPTIMAL_STATUS, INFEASIBLE_STATUS, LIMIT_STATUS = "optimal", "infeasible", "limit"
INT_TOL = 1e-7


@dataclass
class MilpSolution:
    objective: float
    block_actions: np.ndarray  # bool per block
    temps: np.ndarray  # (N, K+1)
    cold: np.ndarray  # (N, K) slack after each step
    status: str
    node_count: int = 0
    solve_seconds: float = 0.0
    bound: float = -math.inf
    lp_iterations: int = 0

    def to_json(self, path: str | Path | None = None) -> str:
        doc = {"objective": self.objective, "actions": [int(a) for a in self.block_actions],
               "status": self.status, "node_count": self.node_count, "solve_seconds": self.solve_seconds,
               "bound": self.bound}
        text = json.dumps(doc, indent=2)
        if path is not None:
            Path(path).write_text(text)
        return text


@dataclass
class Relaxation:
    bound: float
    y: np.ndarray
    x: np.ndarray  # full relaxed vector of the reduced form
    status: str
    basis: Basis | None = None
    iterations: int = 0
    duals: np.ndarray = field(default=None)
    reduced_costs: np.ndarray = field(default=None)  # structural columns only


def _solution(model: MilpModel, y, status, **kw) -> MilpSolution:
    y = np.asarray(y, float)
    T = model.temperatures(y)
    cold = np.maximum(0.0, model.params.temp_lower_T - T[:, 1:])
    return MilpSolution(model.objective_of(y), y > 0.5, T, cold, status, **kw)


def lp_relax_solve(model: MilpModel, y_lo=None, y_hi=None, basis: Basis | None = None, red=None) -> Relaxation:
    """Solve the LP relaxation with the block binaries relaxed to ``[y_lo, y_hi]``."""
    red = red if red is not None else model.reduced()
    B = red.n_y
    lo = red.col_lo.copy()
    hi = red.col_hi.copy()
    if y_lo is not None:
        lo[:B] = np.maximum(lo[:B], y_lo)
    if y_hi is not None:
        hi[:B] = np.minimum(hi[:B], y_hi)
    if red.A.shape[0] == 0:
        # bounds only: each variable sits at its cheaper bound
        if np.any(lo > hi):
            return Relaxation(math.inf, np.zeros(B), lo, INFEASIBLE)
        x = np.where(red.c < 0, hi, lo)
        return Relaxation(float(red.c @ x) + red.obj_const, x[:B], x, OPTIMAL,
                          reduced_costs=np.asarray(red.c, float).copy())
    res = solve_lp(red.c, red.A, red.row_lo, red.row_hi, lo, hi, basis=basis)
    if res.status != OPTIMAL:
        return Relaxation(math.inf, np.zeros(B), res.x, res.status, None, res.iterations)
    return Relaxation(res.objective + red.obj_const, res.x[:B], res.x, OPTIMAL, res.basis,
                      res.iterations, res.duals, res.reduced_costs[:len(res.x)])


def _repair(model: MilpModel, y: np.ndarray, y_lo: np.ndarray) -> np.ndarray | None:
    """Switch off blocks until the schedule respects the temperature cap."""
    y = y.copy()
    if model.y0_forced_off and len(y):
        if y_lo[0] > 0.5:
            return None
        y[0] = 0.0
    Tbar = model.params.temp_upper_Tbar
    L = model.block_len
    for _ in range(len(y) + 1):
        T = model.temperatures(y)[:, 1:]
        over = T > Tbar + TEMP_TOL
        if not over.any():
            return y
        k = int(np.flatnonzero(over.any(axis=0))[0])  # first violating step (0-based)
        cand = [b for b in range(k // L, -1, -1) if y[b] > 0.5 and y_lo[b] < 0.5]
        if not cand:
            return None
        y[cand[0]] = 0.0
    return None


def _local_search(model: MilpModel, y: np.ndarray, y_lo: np.ndarray, y_hi: np.ndarray,
                  max_rounds: int = 50) -> tuple[np.ndarray, float]:
    """Best-improvement single-block flips within the node's bounds."""
    free = np.flatnonzero(y_lo < y_hi)
    obj = model.objective_of(y)
    if len(free) == 0:
        return y, obj
    for _ in range(max_rounds):
        Y = np.repeat(y[None], len(free), axis=0)
        Y[np.arange(len(free)), free] = 1.0 - y[free]
        objs, ok = model.objectives(Y)
        objs = np.where(ok, objs, math.inf)
        i = int(np.argmin(objs))
        if not objs[i] < obj - 1e-12:
            break
        cand = Y[i]
        cand_obj = model.objective_of(cand)
        if not cand_obj < obj:
            break
        y, obj = cand, cand_obj
    return y, obj


def _add_cuts(red: ReducedLp, cuts) -> ReducedLp:
    A = np.vstack([red.A] + [c.coef[None] for c in cuts])
    lo = np.concatenate([red.row_lo, [c.rhs for c in cuts]])
    hi = np.concatenate([red.row_hi, np.full(len(cuts), math.inf)])
    return replace(red, A=A, row_lo=lo, row_hi=hi)


def _extend_basis(basis: Basis, n_cols: int, m_old: int, k: int) -> Basis:
    # the new rows enter with their logicals basic
    head = np.concatenate([basis.head, n_cols + m_old + np.arange(k)])
    at_upper = np.concatenate([basis.at_upper, np.zeros(k, dtype=bool)])
    return Basis(head, at_upper)


CUT_ROUNDS = 10
CUTS_PER_ROUND = 20


def strengthen_root(model: MilpModel, red: ReducedLp, rounds: int = CUT_ROUNDS,
                    per_round: int = CUTS_PER_ROUND) -> tuple[ReducedLp, Relaxation]:
    """Tighten the relaxation with rounds of GMI cuts; returns the final root solve."""
    rel = lp_relax_solve(model, red=red)
    B = red.n_y
    is_int = np.zeros(len(red.c), dtype=bool)
    is_int[:B] = True
    for _ in range(rounds):
        if rel.status != OPTIMAL or rel.basis is None:
            break
        if np.abs(rel.y - np.rint(rel.y)).max() <= INT_TOL:
            break
        cuts = gmi_cuts(red.A, red.row_lo, red.row_hi, red.col_lo, red.col_hi, rel.x, rel.basis,
                        is_int, per_round)
        if not cuts:
            break
        m_old = red.A.shape[0]
        red = _add_cuts(red, cuts)
        nxt = lp_relax_solve(model, red=red, basis=_extend_basis(rel.basis, len(red.c), m_old, len(cuts)))
        gain = nxt.bound - rel.bound
        rel = nxt
        if gain < 1e-4 * max(1.0, abs(rel.bound)):
            break
    return red, rel


def solve_bb(model: MilpModel, gap_tol: float = 1e-6, node_limit: int = 100_000,
             time_limit: float = math.inf, cuts: bool = True) -> MilpSolution:
    """Exact solve by LP-based branch-and-bound.

    Best-first node selection (bound, then deeper first, then creation
    order), branching on the most fractional block binary, incumbents from
    rounding each node's relaxation, repairing temperature violations and
    improving by single flips. The root relaxation is tightened with GMI cuts
    and binaries are fixed by reduced cost against the incumbent.

    A node with a single demand scenario is solved outright by the exact
    temperature dynamic program, so such models close at the root.
    """
    t0 = time.perf_counter()
    B = model.n_blocks
    if B == 0:
        return _solution(model, np.zeros(0), OPTIMAL_STATUS, solve_seconds=time.perf_counter() - t0, bound=0.0)
    base_hi = np.ones(B)
    if model.y0_forced_off:
        base_hi[0] = 0.0
    inc_y = np.zeros(B)
    inc_obj = model.objective_of(inc_y) if model.feasible(inc_y) else math.inf
    lp_its = 0
    root = None
    exact = ScenarioBound(model) if model.n_scenarios == 1 else None
    red = model.reduced() if exact is None else None
    if cuts and exact is None and red.A.shape[0]:
        red, root = strengthen_root(model, red)
        lp_its += root.iterations

    counter = itertools.count()
    heap = [(-math.inf, 0, next(counter), np.zeros(B), base_hi, None)]
    nodes = 0
    status = OPTIMAL_STATUS

    def try_incumbent(y, y_lo, y_hi):
        nonlocal inc_obj, inc_y
        cand = _repair(model, np.where(y >= 0.5, 1.0, 0.0), y_lo)
        if cand is None:
            return
        cand, obj = _local_search(model, cand, y_lo, y_hi)
        if obj < inc_obj:
            inc_obj, inc_y = obj, cand

    while heap:
        bound, negdepth, _, y_lo, y_hi, basis = heapq.heappop(heap)
        if bound >= inc_obj - gap_tol:
            continue
        if nodes >= node_limit or time.perf_counter() - t0 > time_limit:
            heapq.heappush(heap, (bound, negdepth, -1, y_lo, y_hi, basis))
            status = LIMIT_STATUS
            break
        nodes += 1
        if exact is not None:
            value, ys = exact(y_lo, y_hi)
            if value == math.inf:
                continue
            if model.feasible(ys[0]):
                obj = model.objective_of(ys[0])
                if obj < inc_obj:
                    inc_obj, inc_y = obj, ys[0]
                continue
            red = red if red is not None else model.reduced()
        if nodes == 1 and root is not None:
            rel = root
        else:
            rel = lp_relax_solve(model, y_lo, y_hi, basis=basis, red=red)
            lp_its += rel.iterations
        if rel.status != OPTIMAL:
            continue
        y = rel.y
        frac = np.abs(y - np.rint(y))
        if frac.max() <= INT_TOL:
            yi = np.rint(y)
            if model.feasible(yi):
                obj = model.objective_of(yi)
                if obj < inc_obj:
                    inc_obj, inc_y = obj, yi
        else:
            try_incumbent(y, y_lo, y_hi)
        if rel.bound >= inc_obj - gap_tol or frac.max() <= INT_TOL:
            continue
        y_lo, y_hi = _fix_by_reduced_cost(rel, y_lo, y_hi, inc_obj - gap_tol)
        j = int(np.argmax(np.where(y_lo < y_hi, np.round(frac, 12), -1.0)))  # most fractional, lowest index on ties
        if y_lo[j] == y_hi[j]:
            continue
        d = -negdepth + 1
        hi0 = y_hi.copy()
        hi0[j] = 0.0
        lo1 = y_lo.copy()
        lo1[j] = 1.0
        heapq.heappush(heap, (rel.bound, -d, next(counter), y_lo, hi0, rel.basis))
        heapq.heappush(heap, (rel.bound, -d, next(counter), lo1, y_hi, rel.basis))

    open_bounds = [h[0] for h in heap if h[0] < inc_obj - gap_tol]
    best_bound = min(open_bounds) if open_bounds and status == LIMIT_STATUS else inc_obj
    if status == LIMIT_STATUS and not open_bounds:
        status = OPTIMAL_STATUS
    if not math.isfinite(inc_obj):
        return MilpSolution(math.inf, np.zeros(B, bool), np.zeros((model.n_scenarios, model.horizon + 1)),
                            np.zeros((model.n_scenarios, model.horizon)), INFEASIBLE_STATUS, nodes,
                            time.perf_counter() - t0, best_bound, lp_its)
    return _solution(model, inc_y, status, node_count=nodes, solve_seconds=time.perf_counter() - t0,
                     bound=best_bound, lp_iterations=lp_its)


def _fix_by_reduced_cost(rel: Relaxation, y_lo, y_hi, cutoff: float):
    """Fix nonbasic binaries whose flip alone would push the bound past ``cutoff``."""
    if rel.basis is None or rel.reduced_costs is None or not math.isfinite(cutoff):
        return y_lo, y_hi
    B = len(y_lo)
    d = rel.reduced_costs[:B]
    basic = np.zeros(B, dtype=bool)
    hb = rel.basis.head[rel.basis.head < B]
    basic[hb] = True
    slack = cutoff - rel.bound
    free = (y_lo < y_hi) & ~basic
    at0 = free & (rel.y <= INT_TOL) & (d > slack)
    at1 = free & (rel.y >= 1 - INT_TOL) & (-d > slack)
    if not (at0.any() or at1.any()):
        return y_lo, y_hi
    y_lo, y_hi = y_lo.copy(), y_hi.copy()
    y_hi[at0] = 0.0
    y_lo[at1] = 1.0
    return y_lo, y_hi


MAX_BRUTE_BLOCKS = 20


def brute_force_solve(model: MilpModel) -> MilpSolution:
    """Enumerate every block schedule, simulating each scenario minute by minute.

    Independent of the LP machinery: costs come from the plain recursion, not
    from the affine temperature map. Ties go to the lexicographically
    smallest schedule (off before on, earliest block most significant).
    """
    t0 = time.perf_counter()
    B = model.n_blocks
    if B > MAX_BRUTE_BLOCKS:
        raise ValueError(f"brute force refuses {B} > {MAX_BRUTE_BLOCKS} blocks")
    prm = model.params
    L = model.block_len
    Pon = prm.rated_power_Pon
    Y = np.array(list(itertools.product((0.0, 1.0), repeat=B)), dtype=float).reshape(2 ** B, B)
    ok = np.ones(len(Y), dtype=bool)
    if model.y0_forced_off and B:
        ok &= Y[:, 0] < 0.5
    rc = model.schedule.discomfort_rate_rc
    price = model.price
    cost = np.zeros(len(Y))
    for k in range(model.horizon):
        cost += price[k] * Pon * Y[:, k // L]
    for n in range(model.n_scenarios):
        T = np.full(len(Y), float(model.T0))
        cold = np.zeros(len(Y))
        for k in range(model.horizon):
            decay, eq0, rp = step_coefficients(model.demand[n, k] * 60.0, prm)
            eq = eq0 + rp * (BTU_PER_KWH * Pon * Y[:, k // L])
            T = T * decay + eq * (1.0 - decay)
            ok &= T <= prm.temp_upper_Tbar + TEMP_TOL
            cold += rc * model.demand[n, k] * np.maximum(0.0, prm.temp_lower_T - T)
        cost += model.probs[n] * cold
    cost[~ok] = np.inf
    i = int(np.argmin(cost))  # first minimum = lexicographically smallest
    if not np.isfinite(cost[i]):
        return MilpSolution(math.inf, np.zeros(B, bool), np.zeros((model.n_scenarios, model.horizon + 1)),
                            np.zeros((model.n_scenarios, model.horizon)), INFEASIBLE_STATUS,
                            len(Y), time.perf_counter() - t0)
    sol = _solution(model, Y[i], OPTIMAL_STATUS, node_count=len(Y), solve_seconds=time.perf_counter() - t0)
    sol.objective = float(cost[i])
    sol.bound = float(cost[i])
    return sol
