"""
Two-stage stochastic MILP for price-responsive water heating.

First stage: one on/off binary per 10-minute control block, shared by all
demand scenarios. Second stage (per scenario): tank temperatures following
the exact discretised dynamics and non-negative cold-water slacks.

Two linear forms of the same model are produced:

* :meth:`MilpModel.to_sparse` -- every variable of the formulation (block
  binaries, per-minute power and switch-off indicators, per-scenario
  temperatures and slacks), used for LP-file export and external checks.
* :meth:`MilpModel.reduced` -- temperatures substituted out through their
  affine dependence on the block binaries. This is what the embedded
  branch-and-bound solves.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np

from ..ewh import BTU_PER_KWH, EwhParams, EwhState, PriceSchedule, step_coefficients

# temperature feasibility slack used when checking integer schedules
TEMP_TOL = 1e-9


@dataclass
class SparseLp:
    """``min c@x + obj_const`` s.t. ``row_lo <= A@x <= row_hi``, ``col_lo <= x <= col_hi``."""

    c: np.ndarray
    col_lo: np.ndarray
    col_hi: np.ndarray
    rows: np.ndarray  # triplet row indices
    cols: np.ndarray
    vals: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    integer: np.ndarray  # bool per column
    col_names: list[str] = field(default_factory=list)
    row_names: list[str] = field(default_factory=list)
    obj_const: float = 0.0

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.row_lo), len(self.c)

    def dense(self) -> np.ndarray:
        A = np.zeros(self.shape)
        np.add.at(A, (self.rows, self.cols), self.vals)
        return A

    def csr(self):
        from scipy.sparse import coo_matrix
        return coo_matrix((self.vals, (self.rows, self.cols)), shape=self.shape).tocsr()

    def objective(self, x) -> float:
        return float(self.c @ np.asarray(x)) + self.obj_const

    def max_violation(self, x) -> float:
        x = np.asarray(x, float)
        act = self.csr() @ x
        v = [np.max(self.col_lo - x, initial=0.0), np.max(x - self.col_hi, initial=0.0),
             np.max(self.row_lo - act, initial=0.0), np.max(act - self.row_hi, initial=0.0)]
        return float(max(v))


class _Rows:
    def __init__(self):
        self.r, self.c, self.v, self.lo, self.hi, self.names = [], [], [], [], [], []

    def add(self, name, entries, lo, hi):
        i = len(self.lo)
        for col, val in entries:
            self.r.append(i)
            self.c.append(col)
            self.v.append(val)
        self.lo.append(lo)
        self.hi.append(hi)
        self.names.append(name)


@dataclass
class ReducedLp:
    """Condensed relaxation over block binaries ``y`` and active cold slacks ``s``."""

    c: np.ndarray
    A: np.ndarray
    row_lo: np.ndarray
    row_hi: np.ndarray
    col_lo: np.ndarray
    col_hi: np.ndarray
    n_y: int
    obj_const: float


@dataclass
class MilpModel:
    params: EwhParams
    schedule: PriceSchedule
    start_minute: int
    demand: np.ndarray  # (N, K) gal/min
    probs: np.ndarray  # (N,)
    T0: float
    heater_on0: bool
    zbar: np.ndarray  # (DT,) switch-off indicators for minutes -DT..-1
    block_len: int = 10
    min_downtime: int = 10

    @property
    def horizon(self) -> int:
        return self.demand.shape[1]

    @property
    def n_scenarios(self) -> int:
        return self.demand.shape[0]

    @property
    def n_blocks(self) -> int:
        return self.horizon // self.block_len

    @property
    def big_m(self) -> float:
        return self.params.rated_power_Pon

    @cached_property
    def price(self) -> np.ndarray:
        return self.schedule.rates(self.start_minute, self.horizon)

    @cached_property
    def coefficients(self):
        """Per (scenario, minute): decay factor, heater-off drive and per-kW gain.

        ``T[k+1] = decay*T[k] + drive + gain*P[k]``
        """
        N, K = self.demand.shape
        decay = np.empty((N, K))
        eq0 = np.empty((N, K))
        rp = np.empty((N, K))
        cache = {}
        for n in range(N):
            for k in range(K):
                g = self.demand[n, k] * 60.0
                if g not in cache:
                    cache[g] = step_coefficients(g, self.params)
                decay[n, k], eq0[n, k], rp[n, k] = cache[g]
        return decay, eq0 * (1.0 - decay), rp * BTU_PER_KWH * (1.0 - decay), eq0, rp

    @property
    def y0_forced_off(self) -> bool:
        # a switch-off within the last DT-1 minutes blocks switching on now
        return (not self.heater_on0) and bool(np.any(self.zbar[1:]))

    def block_heating_cost(self) -> np.ndarray:
        P = self.params.rated_power_Pon
        return P * self.price.reshape(self.n_blocks, self.block_len).sum(axis=1)

    @cached_property
    def affine(self):
        """``T[n, k] = a[n, k] + G[n, k] @ y`` for k = 0..K."""
        decay, drive, gain, _, _ = self.coefficients
        N, K = self.demand.shape
        B, L = self.n_blocks, self.block_len
        P = self.params.rated_power_Pon
        a = np.empty((N, K + 1))
        G = np.zeros((N, K + 1, B))
        a[:, 0] = self.T0
        for k in range(K):
            a[:, k + 1] = decay[:, k] * a[:, k] + drive[:, k]
            G[:, k + 1] = decay[:, k, None] * G[:, k]
            G[:, k + 1, k // L] += gain[:, k] * P
        return a, G

    # -- evaluation of integer schedules ---------------------------------
    def temperatures(self, y) -> np.ndarray:
        a, G = self.affine
        return a + G @ np.asarray(y, float)

    def feasible(self, y) -> bool:
        y = np.asarray(y, float)
        if self.y0_forced_off and len(y) and y[0] > 0.5:
            return False
        return bool(np.all(self.temperatures(y)[:, 1:] <= self.params.temp_upper_Tbar + TEMP_TOL))

    def objective_of(self, y) -> float:
        """Expected cost of block schedule ``y`` (heating plus discomfort)."""
        y = np.asarray(y, float)
        T = self.temperatures(y)[:, 1:]
        cold = np.maximum(0.0, self.params.temp_lower_T - T)
        rc = self.schedule.discomfort_rate_rc
        per_scen = (rc * self.demand * cold).sum(axis=1)
        return float(self.block_heating_cost() @ y + self.probs @ per_scen)

    def objectives(self, Y) -> tuple[np.ndarray, np.ndarray]:
        """Vectorised :meth:`objective_of` and :meth:`feasible` over rows of ``Y``."""
        Y = np.atleast_2d(np.asarray(Y, float))
        a, G = self.affine
        T = a[None, :, 1:] + np.einsum("nkb,sb->snk", G[:, 1:], Y)
        cold = np.maximum(0.0, self.params.temp_lower_T - T)
        rc = self.schedule.discomfort_rate_rc
        per_scen = (rc * self.demand[None] * cold).sum(axis=2)
        obj = Y @ self.block_heating_cost() + per_scen @ self.probs
        ok = np.all(T <= self.params.temp_upper_Tbar + TEMP_TOL, axis=(1, 2))
        if self.y0_forced_off and Y.shape[1]:
            ok &= Y[:, 0] < 0.5
        return obj, ok

    # -- full formulation ------------------------------------------------
    def column_index(self):
        N, K, B = self.n_scenarios, self.horizon, self.n_blocks
        y = np.arange(B)
        P = B + np.arange(K)
        z = B + K + np.arange(K)
        T = B + 2 * K + np.arange(N * K).reshape(N, K)  # T[n, k] is temperature after step k
        Tc = B + 2 * K + N * K + np.arange(N * K).reshape(N, K)
        return y, P, z, T, Tc

    def to_sparse(self) -> SparseLp:
        N, K, B, L, DT = self.n_scenarios, self.horizon, self.n_blocks, self.block_len, self.min_downtime
        if K == 0:
            raise ValueError("empty horizon")
        iy, iP, iz, iT, iTc = self.column_index()
        ncol = B + 2 * K + 2 * N * K
        decay, drive, gain, _, _ = self.coefficients
        prm, Pon = self.params, self.params.rated_power_Pon
        rc = self.schedule.discomfort_rate_rc
        c = np.zeros(ncol)
        c[iP] = self.price
        for n in range(N):
            c[iTc[n]] = self.probs[n] * rc * self.demand[n]
        lo = np.zeros(ncol)
        hi = np.ones(ncol)
        hi[iP] = Pon
        lo[iT.ravel()] = -np.inf
        hi[iT.ravel()] = prm.temp_upper_Tbar
        hi[iTc.ravel()] = np.inf
        integer = np.zeros(ncol, dtype=bool)
        integer[iy] = True
        names = ([f"y_{b}" for b in range(B)] + [f"P_{k}" for k in range(K)] + [f"z_{k}" for k in range(K)]
                 + [f"T_{n}_{k + 1}" for n in range(N) for k in range(K)]
                 + [f"Tc_{n}_{k + 1}" for n in range(N) for k in range(K)])

        R = _Rows()
        for n in range(N):
            for k in range(K):
                ent = [(iT[n, k], 1.0), (iP[k], -gain[n, k])]
                if k == 0:
                    rhs = drive[n, 0] + decay[n, 0] * self.T0
                else:
                    ent.append((iT[n, k - 1], -decay[n, k]))
                    rhs = drive[n, k]
                R.add(f"dyn_{n}_{k + 1}", ent, rhs, rhs)
        for n in range(N):
            for k in range(K):
                R.add(f"cold_{n}_{k + 1}", [(iT[n, k], 1.0), (iTc[n, k], 1.0)], prm.temp_lower_T, np.inf)
        y_prev = 1.0 if self.heater_on0 else 0.0
        zbar = np.asarray(self.zbar, float)
        for b in range(B):
            k = b * L
            if b == 0:
                R.add("sw_0", [(iy[0], -1.0), (iz[0], -1.0)], -np.inf, -y_prev)
            else:
                R.add(f"sw_{k}", [(iy[b - 1], 1.0), (iy[b], -1.0), (iz[k], -1.0)], -np.inf, 0.0)
        for k in range(K):
            ent = {}
            rhs = 1.0
            if k == 0:
                ent[iy[0]] = 1.0
                rhs += y_prev
            elif k // L != (k - 1) // L:
                ent[iy[k // L]] = 1.0
                ent[iy[(k - 1) // L]] = -1.0
            for i in range(k - DT + 1, k):
                if i >= 0:
                    ent[iz[i]] = ent.get(iz[i], 0.0) + 1.0
                else:
                    rhs -= zbar[i + DT]
            R.add(f"dt_{k}", list(ent.items()), -np.inf, rhs)
        for k in range(K):
            R.add(f"bigm_{k}", [(iP[k], 1.0), (iy[k // L], -self.big_m)], -np.inf, 0.0)
            R.add(f"act_{k}", [(iP[k], 1.0), (iy[k // L], -Pon)], 0.0, np.inf)
        return SparseLp(c, lo, hi, np.array(R.r, int), np.array(R.c, int), np.array(R.v, float),
                        np.array(R.lo, float), np.array(R.hi, float), integer, names, R.names)

    def full_point(self, y) -> np.ndarray:
        """Complete variable vector of the sparse form induced by block schedule ``y``."""
        y = np.asarray(y, float)
        N, K, B, L = self.n_scenarios, self.horizon, self.n_blocks, self.block_len
        iy, iP, iz, iT, iTc = self.column_index()
        x = np.zeros(B + 2 * K + 2 * N * K)
        x[iy] = y
        x[iP] = self.params.rated_power_Pon * np.repeat(y, L)
        prev = np.concatenate([[1.0 if self.heater_on0 else 0.0], np.repeat(y, L)[:-1]])
        x[iz] = np.maximum(0.0, prev - np.repeat(y, L))
        T = self.temperatures(y)[:, 1:]
        x[iT.ravel()] = T.ravel()
        x[iTc.ravel()] = np.maximum(0.0, self.params.temp_lower_T - T).ravel()
        return x

    # -- condensed relaxation --------------------------------------------
    def reduced(self) -> ReducedLp:
        N, K, B, L = self.n_scenarios, self.horizon, self.n_blocks, self.block_len
        a, G = self.affine
        Tlo, Tbar = self.params.temp_lower_T, self.params.temp_upper_Tbar
        rc = self.schedule.discomfort_rate_rc
        yhi = np.ones(B)
        if B and self.y0_forced_off:
            yhi[0] = 0.0
        h = self.block_heating_cost().astype(float).copy()
        const = 0.0
        cold_rows, cold_rhs, weights = [], [], []
        safe_rows, safe_rhs = [], []
        Tmax = a + G @ yhi
        for n in range(N):
            p = self.probs[n]
            if p <= 0:
                continue
            D = self.demand[n]
            for k in range(1, K + 1):
                w = p * rc * D[k - 1]
                if w <= 0 or a[n, k] >= Tlo:
                    continue
                if Tmax[n, k] < Tlo:
                    const += w * (Tlo - a[n, k])
                    h -= w * G[n, k]
                else:
                    cold_rows.append(G[n, k])
                    cold_rhs.append(Tlo - a[n, k])
                    weights.append(w)
            # temperature is monotone on stretches of constant demand and power,
            # so the upper bound only needs checking at stretch ends
            ends = set(range(L, K + 1, L))
            ends.update(k for k in range(1, K) if D[k] != D[k - 1])
            ends.add(K)
            for k in sorted(ends):
                if Tmax[n, k] > Tbar:
                    safe_rows.append(G[n, k])
                    safe_rhs.append(Tbar - a[n, k])
        J, S = len(cold_rows), len(safe_rows)
        A = np.zeros((J + S, B + J))
        if J:
            A[:J, :B] = np.array(cold_rows)
            A[np.arange(J), B + np.arange(J)] = 1.0
        if S:
            A[J:, :B] = np.array(safe_rows)
        row_lo = np.concatenate([np.array(cold_rhs), np.full(S, -np.inf)])
        row_hi = np.concatenate([np.full(J, np.inf), np.array(safe_rhs)])
        c = np.concatenate([h, np.array(weights)])
        col_lo = np.zeros(B + J)
        col_hi = np.concatenate([yhi, np.full(J, np.inf)])
        return ReducedLp(c, A, row_lo, row_hi, col_lo, col_hi, B, const)


def zbar_from_state(state: EwhState, min_downtime: int) -> np.ndarray:
    """Switch-off history for minutes -DT..-1 reconstructed from the live state."""
    z = np.zeros(min_downtime)
    c = state.minutes_since_off
    if not state.heater_on and 1 <= c < min_downtime:
        z[min_downtime - c] = 1.0
    return z


def build_model(params: EwhParams, schedule: PriceSchedule, scenarios, K: int, initial: EwhState,
                zbar=None, start: int = 0, block_len: int = 10, min_downtime: int = 10) -> MilpModel:
    """Assemble the MILP for a ``K``-minute horizon starting at ``initial.minute_of_day``.

    ``scenarios`` is a :class:`~ewhbench.demand.ScenarioSet` (sliced from
    minute ``start`` of each trace) or a ``(demand_matrix, probs)`` pair
    already aligned with the horizon.
    """
    if K <= 0:
        raise ValueError("horizon K must be positive")
    if K % block_len:
        raise ValueError(f"horizon {K} is not a multiple of the {block_len}-minute block")
    if hasattr(scenarios, "traces"):
        D = scenarios.matrix()[:, start:start + K]
        probs = scenarios.probs
    else:
        D, probs = scenarios
        D = np.atleast_2d(np.asarray(D, float))[:, :K]
    if D.shape[1] < K:
        raise ValueError(f"scenario demand covers {D.shape[1]} minutes, horizon needs {K}")
    if zbar is None:
        zbar = zbar_from_state(initial, min_downtime)
    return MilpModel(params, schedule, initial.minute_of_day, D.copy(), np.asarray(probs, float),
                     initial.temp_T, initial.heater_on, np.asarray(zbar, float), block_len, min_downtime)


def sim_objective(model: MilpModel, y) -> float:
    """Expected cost of ``y`` by plain per-minute simulation (no affine algebra)."""
    from ..ewh import thermal_step
    prm = model.params
    rc = model.schedule.discomfort_rate_rc
    heat = 0.0
    P_on = prm.rated_power_Pon
    for k in range(model.horizon):
        heat += model.price[k] * P_on * y[k // model.block_len]
    total = heat
    for n in range(model.n_scenarios):
        T = model.T0
        cold_cost = 0.0
        for k in range(model.horizon):
            T = thermal_step(T, P_on * y[k // model.block_len], model.demand[n, k] * 60.0, prm)
            cold_cost += rc * model.demand[n, k] * max(0.0, prm.temp_lower_T - T)
        total += model.probs[n] * cold_cost
    return total if math.isfinite(total) else math.inf
