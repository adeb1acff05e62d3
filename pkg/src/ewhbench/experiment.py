"""End-to-end benchmark: data, scenarios, ES training, roster evaluation, report."""

from __future__ import annotations

import configparser
import csv
import json
import logging
import math
import re
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, fields, replace
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .baseline import DeadbandConfig, PrdbController
from .demand import (DemandTrace, FixtureModel, ScenarioSet, generate_demand, historical_scenarios,
                     kmeans_scenarios, load_trace, save_trace, split_days)
from .es import (EsConfig, EsController, PolicyParams, TrainResult, episode_tables, es_train, load_policy,
                 save_policy, write_history)
from .ewh import (MINUTES_PER_DAY, EnvConfig, EwhParams, PriceSchedule, Trajectory, initial_state, rollout)
from .mpc import SOURCES, MpcConfig, MpcController, mpc_label, horizon_sweep, mpc_opt, sweep_configs, write_sweep_csv

log = logging.getLogger(__name__)

STAGES = ("generate", "scenarios", "train-es", "sweep-mpc", "evaluate", "report")
KINDS = ("prdb", "es", "opt", "pf", "mf", "ts")
PRE_PEAK_MINUTES = 120


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage


@dataclass(frozen=True)
class RosterEntry:
    kind: str
    lookahead: int = 0
    source: str = "-"

    @classmethod
    def parse(cls, text: str) -> "RosterEntry":
        """``prdb``, ``es``, ``opt``, ``pf:<min>``, ``mf:<source>:<min>``, ``ts:<source>:<min>``."""
        parts = [p.strip() for p in text.strip().lower().split(":")]
        kind = parts[0]
        if kind not in KINDS:
            raise ValueError(f"unknown controller {text!r}")
        if kind in ("prdb", "es", "opt"):
            if len(parts) != 1:
                raise ValueError(f"{kind} takes no arguments: {text!r}")
            return cls(kind)
        if kind == "pf":
            if len(parts) != 2:
                raise ValueError(f"expected pf:<lookahead>, got {text!r}")
            return cls(kind, int(parts[1]))
        if len(parts) != 3 or parts[1] not in SOURCES:
            raise ValueError(f"expected {kind}:<historical|kmeans>:<lookahead>, got {text!r}")
        return cls(kind, int(parts[2]), parts[1])

    @property
    def label(self) -> str:
        if self.kind == "prdb":
            return "PR-DB"
        if self.kind == "es":
            return "ES"
        return mpc_label(self.kind, self.lookahead, self.source)

    @property
    def is_mpc(self) -> bool:
        return self.kind in ("opt", "pf", "mf", "ts")


def slug(label: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", label.lower()).strip("-")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 1
    train_days: int = 21
    eval_days: int = 7
    scenario_count: int = 7
    scenario_source: str = "kmeans"
    kmeans_seed: int = 0
    initial_temp: float = 120.0
    roster: tuple[RosterEntry, ...] = tuple(RosterEntry.parse(s) for s in (
        "prdb", "es", "opt", "pf:30", "pf:480", "mf:kmeans:480", "ts:historical:120"))
    sweep_lookaheads: tuple[int, ...] = (30, 60, 120, 240, 480)
    workers: int = 1
    params: EwhParams = EwhParams()
    schedule: PriceSchedule = PriceSchedule()
    env: EnvConfig = EnvConfig()
    deadband: DeadbandConfig = DeadbandConfig()
    es: EsConfig = EsConfig(seed=7)
    fixtures: FixtureModel = field(default_factory=FixtureModel.default)
    gap_tol: float = 1e-6
    opt_gap_tol: float = 1e-6
    node_limit: int = 20_000
    time_limit: float = 600.0

    def __post_init__(self):
        if self.train_days < 1 or self.eval_days < 1:
            raise ValueError("training and evaluation windows must be non-empty")
        if not 1 <= self.scenario_count <= self.train_days:
            raise ValueError("scenario_count must lie in [1, train_days]")
        if self.scenario_source not in SOURCES:
            raise ValueError(f"unknown scenario source {self.scenario_source!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.env.episode_minutes != MINUTES_PER_DAY:
            raise ValueError("episodes are single days")
        if len(set(self.roster)) != len(self.roster):
            raise ValueError("duplicate roster entries")
        self.deadband.check(self.params)

    @property
    def total_days(self) -> int:
        return self.train_days + self.eval_days

    def mpc_config(self, entry: RosterEntry, scenario_sets: dict[str, ScenarioSet]) -> MpcConfig:
        if entry.kind == "opt":
            return MpcConfig("opt", gap_tol=self.opt_gap_tol, time_limit=self.time_limit,
                             node_limit=self.node_limit)
        src = entry.source if entry.source != "-" else self.scenario_source
        return MpcConfig(entry.kind, entry.lookahead, src,
                         scenario_sets[src] if entry.kind in ("mf", "ts") else None,
                         gap_tol=self.gap_tol, time_limit=self.time_limit, node_limit=self.node_limit)

    @classmethod
    def from_ini(cls, path: str | Path | None = None, **overrides) -> "ExperimentConfig":
        """Package defaults, overlaid with ``path`` (if given), then ``overrides``."""
        cp = configparser.ConfigParser()
        cp.read_string(resources.files("ewhbench").joinpath("data/default.ini").read_text())
        if path is not None:
            if not Path(path).is_file():
                raise FileNotFoundError(f"config file {path} not found")
            cp.read(path)
        return cls.from_parser(cp, **overrides)

    @classmethod
    def from_parser(cls, cp: configparser.ConfigParser, **overrides) -> "ExperimentConfig":
        ex = cp["experiment"]
        params = EwhParams(**_section(cp, "ewh", EwhParams))
        schedule = PriceSchedule(**_section(cp, "price", PriceSchedule,
                                            lambda k, v: int(v) if k.endswith("minute") else float(v)))
        env = EnvConfig(**_section(cp, "env", EnvConfig, lambda k, v: int(v)))
        deadband = DeadbandConfig(**_section(cp, "deadband", DeadbandConfig))
        es = cp["es"]
        es_cfg = EsConfig(pairs=es.getint("pairs"), sigma=es.getfloat("sigma"),
                          step_size=es.getfloat("step_size"), iterations=es.getint("iterations"),
                          seed=es.getint("seed"), hidden=es.getint("hidden"),
                          workers=ex.getint("workers"))
        mpc = cp["mpc"]
        kw = dict(seed=ex.getint("seed"), train_days=ex.getint("train_days"), eval_days=ex.getint("eval_days"),
                  scenario_count=ex.getint("scenario_count"), scenario_source=ex.get("scenario_source").strip(),
                  kmeans_seed=ex.getint("kmeans_seed"), initial_temp=ex.getfloat("initial_temp"),
                  roster=tuple(RosterEntry.parse(s) for s in ex.get("roster").split(",") if s.strip()),
                  sweep_lookaheads=tuple(int(s) for s in ex.get("sweep_lookaheads").split(",")),
                  workers=ex.getint("workers"), params=params, schedule=schedule, env=env,
                  deadband=deadband, es=es_cfg, fixtures=FixtureModel.from_config(cp),
                  gap_tol=mpc.getfloat("gap_tol"), opt_gap_tol=mpc.getfloat("opt_gap_tol"),
                  node_limit=mpc.getint("node_limit"), time_limit=mpc.getfloat("time_limit"))
        kw.update(overrides)
        if "workers" in overrides:
            kw["es"] = replace(kw["es"], workers=overrides["workers"])
        return cls(**kw)


def _section(cp: configparser.ConfigParser, name: str, cls, convert=lambda k, v: float(v)) -> dict:
    """Keys of ``[name]`` matched case-insensitively to the dataclass fields of ``cls``."""
    by_lower = {f.name.lower(): f.name for f in fields(cls)}
    out = {}
    for key, value in cp[name].items():
        if key.lower() not in by_lower:
            raise ValueError(f"[{name}] has unknown key {key!r}")
        field_name = by_lower[key.lower()]
        out[field_name] = convert(field_name, value)
    return out


# ---------------------------------------------------------------------------
# report

@dataclass
class EvalRow:
    controller: str
    day: int  # 1-based index into the generated dataset
    cost: float
    action_seconds: list[float]
    trajectory_file: str
    fallbacks: int = 0
    trajectory: Trajectory | None = field(default=None, repr=False)

    @property
    def mean_action_seconds(self) -> float:
        return statistics.fmean(self.action_seconds) if self.action_seconds else 0.0

    @property
    def median_action_seconds(self) -> float:
        return statistics.median(self.action_seconds) if self.action_seconds else 0.0


@dataclass
class EvalReport:
    rows: list[EvalRow]
    es_history: TrainResult | None = None

    @property
    def controllers(self) -> list[str]:
        return list(dict.fromkeys(r.controller for r in self.rows))

    @property
    def days(self) -> list[int]:
        return sorted({r.day for r in self.rows})

    def cost(self, controller: str, day: int) -> float:
        for r in self.rows:
            if r.controller == controller and r.day == day:
                return r.cost
        raise KeyError((controller, day))

    def costs(self, controller: str) -> list[float]:
        return [r.cost for r in self.rows if r.controller == controller]

    def mean_cost(self, controller: str) -> float:
        c = self.costs(controller)
        return math.fsum(c) / len(c)

    def median_cost(self, controller: str) -> float:
        return statistics.median(self.costs(controller))

    def opt_violations(self, tol: float = 1e-6) -> list[tuple[int, str, float]]:
        """(day, controller, margin) wherever some controller beats MPC-Opt by more than ``tol``."""
        if "MPC-Opt" not in self.controllers:
            return []
        out = []
        for d in self.days:
            opt = self.cost("MPC-Opt", d)
            for r in self.rows:
                if r.day == d and r.controller != "MPC-Opt" and opt > r.cost + tol:
                    out.append((d, r.controller, opt - r.cost))
        return out

    def write(self, out: str | Path) -> None:
        """``report.csv`` (deterministic) and ``timings.csv`` (wall-clock)."""
        out = Path(out)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["controller", "day", "cost", "fallbacks", "trajectory"])
            for r in self.rows:
                w.writerow([r.controller, r.day, repr(r.cost), r.fallbacks, r.trajectory_file])
            w.writerow([])
            w.writerow(["controller", "mean_cost", "median_cost"])
            for c in self.controllers:
                w.writerow([c, repr(self.mean_cost(c)), repr(self.median_cost(c))])
        with open(out / "timings.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["controller", "day", "actions", "mean_action_seconds", "median_action_seconds"])
            for r in self.rows:
                w.writerow([r.controller, r.day, len(r.action_seconds), f"{r.mean_action_seconds:.6e}",
                            f"{r.median_action_seconds:.6e}"])
        with open(out / "action_seconds.json", "w") as fh:
            json.dump({f"{r.controller}|{r.day}": r.action_seconds for r in self.rows}, fh)

    @classmethod
    def load(cls, out: str | Path, initial_temp: float = 120.0) -> "EvalReport":
        out = Path(out)
        path = out / "report.csv"
        if not path.is_file():
            raise FileNotFoundError(f"{path} not found; run evaluate first")
        with open(path, newline="") as fh:
            lines = list(csv.reader(fh))
        seconds = {}
        if (out / "action_seconds.json").is_file():
            seconds = json.loads((out / "action_seconds.json").read_text())
        rows = []
        for rec in lines[1:]:
            if not rec:
                break
            name, day, cost, fb, traj = rec
            t = Trajectory.from_csv(out / traj, initial_temp) if (out / traj).is_file() else None
            rows.append(EvalRow(name, int(day), float(cost), seconds.get(f"{name}|{day}", []), traj, int(fb), t))
        return cls(rows)


@dataclass(frozen=True)
class SpeedRow:
    controller: str
    median_action_seconds: float
    ratio: float  # this controller's median time over the reference's


def report_speed(report: EvalReport, reference: str = "ES") -> list[SpeedRow]:
    """Median per-action time of each controller relative to ``reference`` (default the ES policy)."""
    if not report.rows:
        raise ValueError("empty report")
    ref = reference if reference in report.controllers else report.controllers[0]
    med = {}
    for c in report.controllers:
        times = [t for r in report.rows if r.controller == c for t in r.action_seconds]
        med[c] = statistics.median(times) if times else math.nan
    base = med[ref]
    return [SpeedRow(c, med[c], med[c] / base if base > 0 else math.nan) for c in report.controllers]


def write_speed(rows: Sequence[SpeedRow], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "median_action_seconds", "ratio_vs_reference"])
        for r in rows:
            w.writerow([r.controller, f"{r.median_action_seconds:.6e}", f"{r.ratio:.4g}"])


def pre_peak_heating(traj: Trajectory, schedule: PriceSchedule, window: int = PRE_PEAK_MINUTES) -> bool:
    """Whether the heater runs at some point in the ``window`` minutes before the peak starts."""
    start = schedule.peak_start_minute
    minutes = (traj.start_minute + np.arange(len(traj.power))) % MINUTES_PER_DAY
    sel = (minutes >= start - window) & (minutes < start)
    return bool(np.any(traj.power[sel] > 0))


def emit_plot_data(report: EvalReport, out: str | Path, schedule: PriceSchedule,
                   sweep_rows=None, focus: str = "ES") -> dict:
    """Write CSV series for cost-vs-lookahead, per-day costs and per-minute trajectories.

    Returns an index of the files written (also saved as ``plot_index.json``).
    """
    if not report.rows:
        raise ValueError("empty report: nothing to plot")
    missing = [f"{r.controller}/day{r.day}" for r in report.rows if r.trajectory is None]
    if missing:
        raise ValueError(f"missing trajectories: {', '.join(missing[:5])}")
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    index: dict = {}

    names = report.controllers
    with open(out / "costs_by_day.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["day"] + names)
        for d in report.days:
            w.writerow([d] + [repr(report.cost(c, d)) for c in names])
        w.writerow(["mean"] + [repr(report.mean_cost(c)) for c in names])
    index["costs_by_day"] = "costs_by_day.csv"

    if sweep_rows:
        with open(out / "cost_vs_lookahead.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["variant", "source", "lookahead_min", "mean_cost", "days"])
            acc: dict = {}
            for r in sweep_rows:
                acc.setdefault((r.variant, r.source, r.lookahead_min), []).append(r.cost)
            for (v, s, la), cs in acc.items():
                w.writerow([v, s, la, repr(math.fsum(cs) / len(cs)), len(cs)])
        index["cost_vs_lookahead"] = "cost_vs_lookahead.csv"

    target = focus if focus in names else names[0]
    mine = [r for r in report.rows if r.controller == target]
    worst = max(mine, key=lambda r: r.cost)
    path = f"trajectory_worst_{slug(target)}_day{worst.day}.csv"
    compare = [r for r in report.rows if r.day == worst.day]
    with open(out / path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "minute", "temp_F", "price_band", "action", "power_kW", "demand_gpm",
                    "cumulative_cost"])
        for r in compare:
            t = r.trajectory
            cum = np.cumsum(-t.rewards)
            for k in range(len(t.rewards)):
                w.writerow([r.controller, t.start_minute + k, repr(float(t.temps[k + 1])), int(t.price_band[k]),
                            int(t.actions[k]), repr(float(t.power[k])), repr(float(t.demand_gpm[k])),
                            repr(float(cum[k]))])
    index["worst_day"] = {"controller": target, "day": worst.day, "file": path,
                          "pre_peak_heating": {r.controller: pre_peak_heating(r.trajectory, schedule)
                                               for r in compare}}
    (out / "plot_index.json").write_text(json.dumps(index, indent=2, sort_keys=True) + "\n")
    return index


# ---------------------------------------------------------------------------
# stages

def _stage(name):
    def deco(fn):
        def run(*a, **kw):
            try:
                return fn(*a, **kw)
            except StageError:
                raise
            except Exception as exc:
                raise StageError(name, exc) from exc
        run.__name__ = fn.__name__
        run.__doc__ = fn.__doc__
        return run
    return deco


@_stage("generate")
def stage_generate(cfg: ExperimentConfig, out: Path | None = None) -> DemandTrace:
    trace = generate_demand(cfg.fixtures, cfg.total_days, cfg.seed)
    if out is not None:
        save_trace(trace, Path(out) / "demand.csv")
    return trace


def _split(cfg: ExperimentConfig, trace: DemandTrace) -> tuple[list[DemandTrace], list[DemandTrace]]:
    days = split_days(trace)
    if len(days) < cfg.total_days:
        raise ValueError(f"demand has {len(days)} days, config needs {cfg.total_days}")
    return days[:cfg.train_days], days[cfg.train_days:cfg.total_days]


@_stage("scenarios")
def stage_scenarios(cfg: ExperimentConfig, trace: DemandTrace, out: Path | None = None) -> dict[str, ScenarioSet]:
    train, _ = _split(cfg, trace)
    sets = {"historical": historical_scenarios(train, cfg.scenario_count),
            "kmeans": kmeans_scenarios(train, cfg.scenario_count, cfg.kmeans_seed)}
    if out is not None:
        for k, s in sets.items():
            s.to_json(Path(out) / f"scenarios_{k}.json")
    return sets


@_stage("train-es")
def stage_train(cfg: ExperimentConfig, scenario_sets: dict[str, ScenarioSet], out: Path | None = None) -> TrainResult:
    tables = episode_tables(scenario_sets[cfg.scenario_source], cfg.params, cfg.schedule, cfg.env,
                            initial_state(cfg.params, cfg.env, cfg.initial_temp))
    result = es_train(cfg.es, tables,
                      progress=lambda r: log.info("es iteration %d: fitness %.4f (best %.4f)",
                                                  r.iteration, r.centre, r.best)
                      if r.iteration % 25 == 0 else None)
    if out is not None:
        save_policy(result.policy, Path(out) / "policy.bin")
        write_history(result.history, Path(out) / "es_history.csv")
    return result


def _run_cell(args) -> tuple[Trajectory, int]:
    entry, values, cfg, sets, policy = args
    init = initial_state(cfg.params, cfg.env, cfg.initial_temp)
    if entry.kind == "prdb":
        return rollout(PrdbController(cfg.schedule, cfg.deadband), values, cfg.params, cfg.schedule, cfg.env, init), 0
    if entry.kind == "es":
        return rollout(EsController(policy, cfg.schedule), values, cfg.params, cfg.schedule, cfg.env, init), 0
    mcfg = cfg.mpc_config(entry, sets)
    if entry.kind == "opt":
        res = mpc_opt(values, cfg.params, cfg.schedule, cfg.env, mcfg, init)
        return res.trajectory, int(res.solution.status != "optimal")
    ctrl = MpcController(mcfg, cfg.params, cfg.schedule, cfg.env, cfg.deadband)
    traj = rollout(ctrl, values, cfg.params, cfg.schedule, cfg.env, init)
    return traj, ctrl.fallbacks


@_stage("evaluate")
def stage_evaluate(cfg: ExperimentConfig, trace: DemandTrace, scenario_sets: dict[str, ScenarioSet],
                   policy: PolicyParams | None, out: Path | None = None) -> EvalReport:
    """Every roster controller on every evaluation day (cells run in parallel, results in roster order)."""
    if any(e.kind == "es" for e in cfg.roster) and policy is None:
        raise ValueError("roster includes ES but no trained policy is available")
    _, evals = _split(cfg, trace)
    cells = [(e, i) for e in cfg.roster for i in range(len(evals))]
    jobs = [(e, evals[i].values, cfg, scenario_sets, policy) for e, i in cells]
    if cfg.workers > 1:
        with ProcessPoolExecutor(cfg.workers) as pool:
            results = list(pool.map(_run_cell, jobs))
    else:
        results = [_run_cell(j) for j in jobs]
    rows = []
    if out is not None:
        (Path(out) / "trajectories").mkdir(parents=True, exist_ok=True)
    for (entry, i), (traj, fb) in zip(cells, results):
        day = cfg.train_days + i + 1
        name = f"trajectories/{slug(entry.label)}_day{day}.csv"
        if out is not None:
            traj.to_csv(Path(out) / name)
        rows.append(EvalRow(entry.label, day, traj.cost, list(traj.per_action_seconds), name, fb, traj))
        if fb:
            log.warning("%s day %d: %d solver fallbacks", entry.label, day, fb)
    report = EvalReport(rows)
    for d, c, margin in report.opt_violations():
        log.warning("day %d: %s beats MPC-Opt by %.3g", d, c, margin)
    if out is not None:
        report.write(out)
    return report


@_stage("sweep-mpc")
def stage_sweep(cfg: ExperimentConfig, trace: DemandTrace, scenario_sets: dict[str, ScenarioSet],
                variants: Sequence[str] = ("pf", "mf"), lookaheads: Sequence[int] | None = None,
                sources: Sequence[str] | None = None, out: Path | None = None):
    _, evals = _split(cfg, trace)
    configs = sweep_configs(variants, lookaheads or cfg.sweep_lookaheads, sources or (cfg.scenario_source,),
                            scenario_sets, gap_tol=cfg.gap_tol, time_limit=cfg.time_limit,
                            node_limit=cfg.node_limit)
    rows = horizon_sweep(evals, configs, cfg.params, cfg.schedule, cfg.env, cfg.initial_temp, cfg.workers,
                         day_offset=cfg.train_days + 1)
    if out is not None:
        write_sweep_csv(rows, Path(out) / "sweep.csv", timings=False)
        write_sweep_csv(rows, Path(out) / "sweep_timings.csv", timings=True)
    return rows


@_stage("report")
def stage_report(cfg: ExperimentConfig, report: EvalReport, out: Path, sweep_rows=None) -> dict:
    write_speed(report_speed(report), Path(out) / "speed.csv")
    return emit_plot_data(report, Path(out) / "plots", cfg.schedule, sweep_rows)


def run_experiment(cfg: ExperimentConfig, out: str | Path | None = None) -> EvalReport:
    """Generate, build scenarios, train ES (if rostered), evaluate, and write the report."""
    path = Path(out) if out is not None else None
    if path is not None:
        path.mkdir(parents=True, exist_ok=True)
    trace = stage_generate(cfg, path)
    sets = stage_scenarios(cfg, trace, path)
    trained = stage_train(cfg, sets, path) if any(e.kind == "es" for e in cfg.roster) else None
    report = stage_evaluate(cfg, trace, sets, trained.policy if trained else None, path)
    report.es_history = trained
    if path is not None:
        stage_report(cfg, report, path)
    return report


def load_artifacts(out: str | Path, need: Sequence[str]) -> dict:
    """Read stage outputs from ``out``; a missing file names the stage that makes it."""
    out = Path(out)
    files = {"demand": ("generate", "demand.csv"), "policy": ("train-es", "policy.bin")}
    got = {}
    for key in need:
        if key == "scenarios":
            sets = {}
            for src in SOURCES:
                p = out / f"scenarios_{src}.json"
                if not p.is_file():
                    raise StageError("scenarios", FileNotFoundError(f"{p} missing; run the scenarios stage"))
                sets[src] = ScenarioSet.from_json(p)
            got[key] = sets
            continue
        stage, name = files[key]
        p = out / name
        if not p.is_file():
            raise StageError(stage, FileNotFoundError(f"{p} missing; run the {stage} stage"))
        got[key] = load_trace(p) if key == "demand" else load_policy(p)
    return got
