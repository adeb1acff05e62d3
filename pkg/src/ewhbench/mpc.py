"""
Model predictive controllers built on the block-schedule MILP.

``pf`` plans on the true future demand, ``mf`` on the probability-weighted
mean of the scenario set, ``ts`` on all scenarios at once (two-stage: one
shared schedule, per-scenario temperatures). Each re-solves once per control
block over ``min(lookahead, minutes left in the day)`` and applies the first
block. ``opt`` solves the whole day once with perfect information and replays
the schedule open loop.
"""

from __future__ import annotations

import csv
import logging
import math
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import DeadbandConfig, prdb_act
from .demand import DemandTrace, ScenarioSet, mean_forecast
from .ewh import (MINUTES_PER_DAY, EnvConfig, EwhParams, EwhState, FixedSchedule, PriceSchedule,
                  Trajectory, initial_state, rollout)
from .milp import build_model
from .milp.solve import OPTIMAL_STATUS, MilpSolution, solve_bb

log = logging.getLogger(__name__)

VARIANTS = ("opt", "pf", "mf", "ts")
SOURCES = ("historical", "kmeans")
EXACTNESS_TOL = 1e-9


@dataclass(frozen=True)
class MpcConfig:
    variant: str
    lookahead_minutes: int = 480
    scenario_source: str = "kmeans"
    scenario_set: ScenarioSet | None = None
    gap_tol: float = 1e-6
    time_limit: float = 600.0
    node_limit: int = 20_000

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown MPC variant {self.variant!r}")
        if self.scenario_source not in SOURCES:
            raise ValueError(f"unknown scenario source {self.scenario_source!r}")
        if self.variant != "opt" and (self.lookahead_minutes <= 0 or self.lookahead_minutes % 10):
            raise ValueError("lookahead must be a positive multiple of 10 minutes")
        if self.variant in ("mf", "ts") and self.scenario_set is None:
            raise ValueError(f"variant {self.variant} needs a scenario set")
        if self.variant == "ts" and len(self.scenario_set) < 2:
            raise ValueError("two-stage MPC needs at least two scenarios")
        if self.gap_tol < 0 or self.time_limit <= 0 or self.node_limit < 1:
            raise ValueError("solver limits must be positive")

    @property
    def label(self) -> str:
        return mpc_label(self.variant, self.lookahead_minutes, self.scenario_source)


def mpc_label(variant: str, lookahead: int, source: str) -> str:
    """``MPC-Opt``, ``MPC-PF(480)``, ``MPC-MF(480)[kmeans]``."""
    if variant == "opt":
        return "MPC-Opt"
    tag = f"MPC-{variant.upper()}({lookahead})"
    return tag if variant == "pf" else f"{tag}[{source}]"


class ForecastProvider:
    """Maps (minute of day, horizon) to an aligned demand matrix and probabilities."""

    def reset(self, day: np.ndarray) -> None:
        pass

    def slice(self, minute: int, K: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError


class PerfectForecast(ForecastProvider):
    def __init__(self):
        self.day: np.ndarray | None = None

    def reset(self, day: np.ndarray) -> None:
        self.day = np.asarray(day, float)

    def slice(self, minute, K):
        if self.day is None:
            raise RuntimeError("perfect forecast used before the evaluation day was set")
        return self.day[None, minute:minute + K].copy(), np.ones(1)


class MeanForecast(ForecastProvider):
    def __init__(self, scenarios: ScenarioSet):
        self.values = mean_forecast(scenarios).values

    def slice(self, minute, K):
        return self.values[None, minute:minute + K].copy(), np.ones(1)


class ScenarioForecast(ForecastProvider):
    """Time-aligned slices of every scenario day."""

    def __init__(self, scenarios: ScenarioSet):
        self.matrix = scenarios.matrix()
        self.probs = scenarios.probs

    def slice(self, minute, K):
        return self.matrix[:, minute:minute + K].copy(), self.probs


def make_provider(config: MpcConfig) -> ForecastProvider:
    if config.variant in ("pf", "opt"):
        return PerfectForecast()
    if config.variant == "mf":
        return MeanForecast(config.scenario_set)
    return ScenarioForecast(config.scenario_set)


@dataclass
class SolveRecord:
    minute: int
    horizon: int
    status: str
    nodes: int
    seconds: float
    fallback: bool


def mpc_act(state: EwhState, minute: int, config: MpcConfig, provider: ForecastProvider,
            params: EwhParams, schedule: PriceSchedule, env: EnvConfig,
            deadband: DeadbandConfig = DeadbandConfig()) -> tuple[bool, SolveRecord]:
    """First-block action of the receding-horizon problem posed at ``minute``."""
    K = min(config.lookahead_minutes, MINUTES_PER_DAY - minute)
    K -= K % env.control_block_minutes
    if K <= 0:
        return False, SolveRecord(minute, 0, OPTIMAL_STATUS, 0, 0.0, False)
    D, probs = provider.slice(minute, K)
    model = build_model(params, schedule, (D, probs), K, state, block_len=env.control_block_minutes,
                        min_downtime=env.min_downtime_DT)
    sol = solve_bb(model, gap_tol=config.gap_tol, node_limit=config.node_limit, time_limit=config.time_limit)
    if sol.status == OPTIMAL_STATUS:
        return bool(sol.block_actions[0]), SolveRecord(minute, K, sol.status, sol.node_count,
                                                        sol.solve_seconds, False)
    action = prdb_act(state, minute, deadband, schedule, state.heater_on)
    log.warning("%s: solver %s at minute %d (nodes=%d), falling back to PR-DB", config.label,
                sol.status, minute, sol.node_count)
    return action, SolveRecord(minute, K, sol.status, sol.node_count, sol.solve_seconds, True)


class MpcController:
    """Receding-horizon controller for the ``pf``, ``mf`` and ``ts`` variants."""

    def __init__(self, config: MpcConfig, params: EwhParams, schedule: PriceSchedule, env: EnvConfig,
                 deadband: DeadbandConfig = DeadbandConfig()):
        if config.variant == "opt":
            raise ValueError("use OptController for the one-shot variant")
        self.config = config
        self.params = params
        self.schedule = schedule
        self.env = env
        self.deadband = deadband
        self.provider = make_provider(config)
        self.name = config.label
        self.records: list[SolveRecord] = []

    def reset(self, demand) -> None:
        self.provider.reset(np.asarray(demand, float))
        self.records = []

    def act(self, state: EwhState) -> bool:
        action, rec = mpc_act(state, state.minute_of_day, self.config, self.provider, self.params,
                              self.schedule, self.env, self.deadband)
        self.records.append(rec)
        return action

    @property
    def fallbacks(self) -> int:
        return sum(r.fallback for r in self.records)


@dataclass
class OptResult:
    trajectory: Trajectory
    solution: MilpSolution
    replay_gap: float  # |simulated cost - MILP objective|


def one_shot_model(day: np.ndarray, params: EwhParams, schedule: PriceSchedule, env: EnvConfig,
                   initial: EwhState):
    K = env.episode_minutes
    return build_model(params, schedule, (np.asarray(day, float)[None, :K], np.ones(1)), K, initial,
                       block_len=env.control_block_minutes, min_downtime=env.min_downtime_DT)


def mpc_opt(day: DemandTrace | np.ndarray, params: EwhParams, schedule: PriceSchedule, env: EnvConfig,
            config: MpcConfig | None = None, initial: EwhState | None = None) -> OptResult:
    """Whole-day solve with the true demand, replayed through the simulator."""
    config = config or MpcConfig("opt")
    values = np.asarray(getattr(day, "values", day), float)
    initial = initial or initial_state(params, env)
    ctrl = OptController(config, params, schedule, env, initial)
    traj = rollout(ctrl, values, params, schedule, env, initial)
    gap = abs(traj.cost - ctrl.solution.objective)
    if ctrl.solution.status == OPTIMAL_STATUS and gap > EXACTNESS_TOL * max(1.0, abs(traj.cost)):
        raise RuntimeError(f"replayed cost {traj.cost!r} differs from the MILP objective "
                           f"{ctrl.solution.objective!r}")
    return OptResult(traj, ctrl.solution, gap)


class OptController:
    """Solves the whole day on the first query, then replays the schedule."""

    def __init__(self, config: MpcConfig, params: EwhParams, schedule: PriceSchedule, env: EnvConfig,
                 initial: EwhState | None = None):
        self.config = config
        self.params = params
        self.schedule = schedule
        self.env = env
        self.initial = initial
        self.name = config.label
        self.day: np.ndarray | None = None
        self.solution: MilpSolution | None = None
        self._replay: FixedSchedule | None = None

    def reset(self, demand) -> None:
        self.day = np.asarray(demand, float)
        self.solution = None
        self._replay = None

    def act(self, state: EwhState) -> bool:
        if self._replay is None:
            start = self.initial or state
            model = one_shot_model(self.day, self.params, self.schedule, self.env, start)
            self.solution = solve_bb(model, gap_tol=self.config.gap_tol, node_limit=self.config.node_limit,
                                     time_limit=self.config.time_limit)
            if self.solution.status != OPTIMAL_STATUS:
                log.warning("MPC-Opt: solver %s (nodes=%d); replaying best incumbent",
                            self.solution.status, self.solution.node_count)
            self._replay = FixedSchedule(self.solution.block_actions)
        return self._replay.act(state)


def make_controller(config: MpcConfig, params: EwhParams, schedule: PriceSchedule, env: EnvConfig):
    if config.variant == "opt":
        return OptController(config, params, schedule, env)
    return MpcController(config, params, schedule, env)


# -- lookahead sweep ---------------------------------------------------------

@dataclass
class SweepRow:
    variant: str
    source: str
    lookahead_min: int
    day: int
    cost: float
    mean_action_seconds: float
    fallbacks: int = 0
    trajectory: Trajectory | None = field(default=None, repr=False)


def _run_cell(args) -> SweepRow:
    config, day_index, values, params, schedule, env, initial_temp = args
    ctrl = make_controller(config, params, schedule, env)
    traj = rollout(ctrl, values, params, schedule, env, initial_state(params, env, initial_temp))
    source = config.scenario_source if config.variant in ("mf", "ts") else "-"
    lookahead = 0 if config.variant == "opt" else config.lookahead_minutes
    return SweepRow(config.variant, source, lookahead, day_index, traj.cost,
                    statistics.fmean(traj.per_action_seconds), getattr(ctrl, "fallbacks", 0), traj)


def horizon_sweep(days: Sequence[DemandTrace], configs: Sequence[MpcConfig], params: EwhParams,
                  schedule: PriceSchedule, env: EnvConfig, initial_temp: float = 120.0,
                  workers: int = 1, day_offset: int = 0) -> list[SweepRow]:
    """Every config on every day; rows ordered by config, then day."""
    jobs = [(cfg, day_offset + i, d.values, params, schedule, env, initial_temp)
            for cfg in configs for i, d in enumerate(days)]
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            return list(pool.map(_run_cell, jobs))
    return [_run_cell(j) for j in jobs]


def sweep_configs(variants: Sequence[str], lookaheads: Sequence[int], sources: Sequence[str],
                  scenario_sets: dict[str, ScenarioSet], **solver) -> list[MpcConfig]:
    out = []
    for v in variants:
        if v == "opt":
            out.append(MpcConfig("opt", **solver))
            continue
        for src in (sources if v in ("mf", "ts") else sources[:1]):
            for la in lookaheads:
                out.append(MpcConfig(v, la, src, scenario_sets.get(src) if v in ("mf", "ts") else None,
                                     **solver))
    return out


def cost_matrix(rows: Sequence[SweepRow]) -> dict[tuple[str, str, int], float]:
    """Mean cost over days per (variant, source, lookahead)."""
    acc: dict[tuple[str, str, int], list[float]] = {}
    for r in rows:
        acc.setdefault((r.variant, r.source, r.lookahead_min), []).append(r.cost)
    return {k: math.fsum(v) / len(v) for k, v in acc.items()}


def write_sweep_csv(rows: Sequence[SweepRow], path: str | Path, timings: bool = True) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        head = ["variant", "source", "lookahead_min", "day", "cost"]
        w.writerow(head + (["mean_action_seconds"] if timings else []))
        for r in rows:
            row = [r.variant, r.source, r.lookahead_min, r.day, repr(r.cost)]
            w.writerow(row + ([f"{r.mean_action_seconds:.6g}"] if timings else []))

