"""Acceptance criteria for the benchmark, one test each.

Each test prints a single PASS/FAIL line (collected again in the terminal
summary) before asserting. The default experiment is run once per session and
shared; the determinism check runs it a second time with two workers.
"""

from __future__ import annotations

import math
import statistics
import time
from dataclasses import replace
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from ewhbench.baseline import PrdbController
from ewhbench.demand import FixtureModel, ScenarioSet, generate_demand, split_days
from ewhbench.es import EsController, load_policy, read_history
from ewhbench.ewh import EwhState, FixedSchedule, initial_state, rollout
from ewhbench.experiment import ExperimentConfig, run_experiment
from ewhbench.milp import build_model
from ewhbench.milp.solve import brute_force_solve, solve_bb
from ewhbench.mpc import MpcConfig, make_provider, mpc_act

TIMING_FILES = {"timings.csv", "action_seconds.json", "speed.csv"}


def record(n: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {n}: {title} ({detail})"
    ACCEPTANCE_LINES.append(line)
    print(line)


def artifacts(out: Path) -> dict[str, bytes]:
    return {str(p.relative_to(out)): p.read_bytes() for p in sorted(out.rglob("*"))
            if p.is_file() and p.name not in TIMING_FILES}


@pytest.fixture(scope="session")
def default_cfg():
    return ExperimentConfig.from_ini()


@pytest.fixture(scope="session")
def default_run(default_cfg, tmp_path_factory):
    out = tmp_path_factory.mktemp("default")
    t0 = time.perf_counter()
    report = run_experiment(default_cfg, out)
    return report, out, time.perf_counter() - t0


def feasible_day_schedule(model, rng, p_on):
    """Random block schedule, with the last on-block before any overheating switched off until none remain."""
    y = (rng.random(model.n_blocks) < p_on).astype(float)
    cap = model.params.temp_upper_Tbar
    while True:
        over = np.flatnonzero(model.temperatures(y)[0, 1:] > cap)
        if not len(over):
            return y
        on = np.flatnonzero(y[:over[0] // model.block_len + 1])
        y[on[-1]] = 0.0


def test_criterion_1_exactness_bridge(days, params, schedule, env):
    rng = np.random.default_rng(2024)
    t0 = time.perf_counter()
    worst, infeasible, masked = 0.0, 0, 0
    for _ in range(50):
        d = int(rng.integers(len(days)))
        init = initial_state(params, env, float(rng.uniform(110, 130)))
        model = build_model(params, schedule, (days[d].values[None], np.ones(1)), 1440, init)
        y = feasible_day_schedule(model, rng, rng.uniform(0.05, 0.4))
        traj = rollout(FixedSchedule(y > 0.5), days[d], params, schedule, env, init)
        masked += not np.array_equal(traj.power > 0, np.repeat(y > 0.5, model.block_len))
        lp = model.to_sparse()
        x = model.full_point(y)
        infeasible += lp.max_violation(x) > 1e-9
        worst = max(worst, abs(lp.objective(x) - traj.cost), abs(model.objective_of(y) - traj.cost))
    secs = time.perf_counter() - t0
    ok = worst <= 1e-9 and secs < 60 and not infeasible and not masked
    record(1, "MILP objective equals simulated cost", ok, f"max |diff| {worst:.2e} over 50 days, {secs:.1f}s")
    assert ok


def test_criterion_2_solver_correctness(days, params, schedule, env):
    rng = np.random.default_rng(77)
    t0 = time.perf_counter()
    worst, count = 0.0, 0
    for n_scen in (1, 3, 7):
        for _ in range(8):
            start = int(rng.integers(0, 138)) * 10
            init = replace(initial_state(params, env, float(rng.uniform(105, 139))), minute_of_day=start)
            pick = rng.choice(21, n_scen, replace=False)
            model = build_model(params, schedule, ScenarioSet(tuple(days[i] for i in pick)), 60, init,
                                start=start)
            a, b = solve_bb(model), brute_force_solve(model)
            assert model.n_blocks == 6 and a.status == "optimal"
            worst = max(worst, abs(a.objective - b.objective))
            count += 1
    secs = time.perf_counter() - t0
    ok = worst <= 1e-6 and secs < 120
    record(2, "branch and bound matches enumeration", ok,
           f"{count} six-block instances, max |diff| {worst:.2e}, {secs:.1f}s")
    assert ok


def test_criterion_3_one_shot_is_optimal(default_run):
    report, _, _ = default_run
    margins = []
    for d in report.days:
        opt = report.cost("MPC-Opt", d)
        margins.append(min(report.cost(c, d) - opt for c in report.controllers if c != "MPC-Opt"))
    ok = all(m >= -1e-6 for m in margins)
    record(3, "MPC-Opt is the cheapest controller every day", ok,
           f"smallest margin {min(margins):.4g} over {len(report.days)} days")
    assert ok


def test_criterion_4_lookahead_trend(default_run):
    report, _, _ = default_run
    pf8, pf05, opt = (report.mean_cost(c) for c in ("MPC-PF(480)", "MPC-PF(30)", "MPC-Opt"))
    gap8, gap05 = abs(pf8 - opt), abs(pf05 - opt)
    slack = 0.02 * pf05
    ok = pf8 <= pf05 + slack and gap8 < gap05 + slack
    record(4, "longer perfect-forecast lookahead approaches MPC-Opt", ok,
           f"PF 8h {pf8:.3f}, PF 0.5h {pf05:.3f}, Opt {opt:.3f}")
    assert ok


def test_criterion_5_learning(default_run, default_cfg, params, schedule, env):
    report, out, _ = default_run
    history = read_history(out / "es_history.csv")
    scen = ScenarioSet.from_json(out / f"scenarios_{default_cfg.scenario_source}.json")
    init = initial_state(params, env, default_cfg.initial_temp)
    prdb = math.fsum(p * -rollout(PrdbController(schedule, default_cfg.deadband), t, params, schedule, env,
                                  init).cost for p, t in zip(scen.probs, scen.traces))
    es = history[-1].centre
    policy = load_policy(out / "policy.bin")
    es_check = math.fsum(p * -rollout(EsController(policy, schedule), t, params, schedule, env, init).cost
                         for p, t in zip(scen.probs, scen.traces))
    best = [r.best for r in history]
    monotone = all(b >= a for a, b in zip(best, best[1:]))
    improvement = (es - prdb) / abs(prdb)
    es_eval = report.mean_cost("ES")
    others = {c: report.mean_cost(c) for c in report.controllers if c.startswith(("MPC-MF", "MPC-TS"))}
    target = ", ".join(f"{c} {v:.3f}" for c, v in others.items())
    print(f"  reported: ES mean evaluation cost {es_eval:.3f} vs {target}; "
          f"{'met' if all(es_eval <= v for v in others.values()) else 'not met'}")
    ok = improvement >= 0.10 and monotone and es_check == pytest.approx(es, rel=1e-12, abs=1e-12)
    record(5, "ES beats PR-DB on the training scenarios", ok,
           f"fitness {es:.3f} vs PR-DB {prdb:.3f}, {100 * improvement:.1f}% better")
    assert ok


def states_along(traj, minutes, params, env):
    """Environment state at the start of each listed minute of a recorded trajectory."""
    on = traj.power > 0
    DT = env.min_downtime_DT
    out = []
    for m in minutes:
        k = m - traj.start_minute
        j, off = k - 1, 0
        while j >= 0 and not on[j] and off < DT:
            off, j = off + 1, j - 1
        since = 0 if on[k - 1] else (DT if j < 0 else off)
        out.append(EwhState.make(float(traj.temps[k]), params, heater_on=bool(on[k - 1]), minutes_since_off=since,
                                 minute_of_day=m, demand_gpm=float(traj.demand_gpm[k - 1])))
    return out


def test_criterion_6_speed(default_run, default_cfg, params, schedule, env):
    report, out, _ = default_run
    es_times = [t for r in report.rows if r.controller == "ES" for t in r.action_seconds]
    es_median = statistics.median(es_times)
    scen = ScenarioSet.from_json(out / f"scenarios_{default_cfg.scenario_source}.json")
    # a capped solve understates MPC-TS latency, so the measured ratio is a lower bound
    cfg = MpcConfig("ts", 480, default_cfg.scenario_source, scen, gap_tol=default_cfg.gap_tol, time_limit=20.0)
    es_row = next(r for r in report.rows if r.controller == "ES")
    ts_times = []
    for st in states_along(es_row.trajectory, (180, 420, 660, 900, 1140), params, env):
        t0 = time.perf_counter()
        mpc_act(st, st.minute_of_day, cfg, make_provider(cfg), params, schedule, env)
        ts_times.append(time.perf_counter() - t0)
    ratio = statistics.median(ts_times) / es_median
    ok = ratio >= 50
    record(6, "ES acts much faster than MPC-TS(8h)", ok,
           f"median {es_median * 1e6:.0f}us vs {statistics.median(ts_times):.2f}s, ratio {ratio:.0f}x")
    assert ok


def scan_downtime(power, min_off):
    """Indices where the element comes back on fewer than ``min_off`` minutes after switching off."""
    bad, last_off = [], None
    for k in range(1, len(power)):
        if power[k - 1] > 0 and power[k] == 0:
            last_off = k
        elif power[k - 1] == 0 and power[k] > 0 and last_off is not None and k - last_off < min_off:
            bad.append(k)
    return bad


def test_criterion_7_downtime_and_safety(default_run, params, env):
    report, _, _ = default_run
    downtime = overheat = 0
    for r in report.rows:
        downtime += len(scan_downtime(r.trajectory.power, env.min_downtime_DT))
        overheat += int(np.sum(r.trajectory.temps > params.temp_upper_Tbar + 1e-9))
    ok = downtime == 0 and overheat == 0
    record(7, "no downtime or temperature-cap violations", ok,
           f"{len(report.rows)} trajectories, {downtime} downtime and {overheat} cap violations")
    assert ok


def test_criterion_8_demand_calibration(default_cfg):
    g = generate_demand(FixtureModel.default(), 28, default_cfg.seed).daily_gallons()
    ok = 40 <= g.mean() <= 100 and g.std() > 20 and g.min() >= 0
    record(8, "generated demand within the calibration envelope", ok,
           f"mean {g.mean():.1f}, median {np.median(g):.1f}, std {g.std():.1f}, range {g.min():.1f}-{g.max():.1f}")
    assert ok
    assert len(split_days(generate_demand(FixtureModel.default(), 28, default_cfg.seed))) == 28


def test_criterion_9_determinism(default_run, default_cfg, tmp_path):
    _, out, secs = default_run
    run_experiment(replace(default_cfg, workers=2, es=replace(default_cfg.es, workers=2)), tmp_path)
    a, b = artifacts(out), artifacts(tmp_path)
    differ = sorted(k for k in a.keys() | b.keys() if a.get(k) != b.get(k))
    ok = not differ and (out / "report.csv").read_bytes() == (tmp_path / "report.csv").read_bytes()
    record(9, "rerun with two workers is byte-identical", ok,
           f"{len(a)} files compared, {len(differ)} differ; one run takes {secs:.0f}s")
    assert ok
