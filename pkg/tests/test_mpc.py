from __future__ import annotations

import csv
import logging
from dataclasses import replace

import numpy as np
import pytest

from ewhbench.baseline import DeadbandConfig, PrdbController, prdb_act
from ewhbench.demand import ScenarioSet, kmeans_scenarios
from ewhbench.ewh import EnvConfig, FixedSchedule, initial_state, rollout
from ewhbench.mpc import (MeanForecast, MpcConfig, MpcController, PerfectForecast, ScenarioForecast, cost_matrix,
                          horizon_sweep, make_provider, mpc_act, mpc_label, mpc_opt, sweep_configs,
                          write_sweep_csv)


@pytest.fixture(scope="module")
def kmeans_set(days):
    return kmeans_scenarios(days[:21], 7, 0)


class TestConfig:
    def test_labels(self, week_set):
        assert MpcConfig("opt").label == "MPC-Opt"
        assert MpcConfig("pf", 480).label == "MPC-PF(480)"
        assert MpcConfig("mf", 120, "historical", week_set).label == "MPC-MF(120)[historical]"
        assert mpc_label("ts", 30, "kmeans") == "MPC-TS(30)[kmeans]"

    @pytest.mark.parametrize("kw", [dict(variant="xx"), dict(variant="pf", lookahead_minutes=15),
                                    dict(variant="pf", lookahead_minutes=0), dict(variant="mf"),
                                    dict(variant="pf", scenario_source="weekly"),
                                    dict(variant="pf", time_limit=0.0)])
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            MpcConfig(**kw)

    def test_two_stage_needs_two_scenarios(self, days):
        with pytest.raises(ValueError, match="two"):
            MpcConfig("ts", 60, "kmeans", ScenarioSet((days[0],)))


class TestProviders:
    def test_perfect_slice_is_trace_segment(self, days):
        p = PerfectForecast()
        p.reset(days[5].values)
        for m, K in [(0, 30), (600, 480), (1430, 10)]:
            D, probs = p.slice(m, K)
            assert D.shape == (1, K) and np.array_equal(D[0], days[5].values[m:m + K])
            assert probs.tolist() == [1.0]

    def test_perfect_before_reset(self):
        with pytest.raises(RuntimeError):
            PerfectForecast().slice(0, 10)

    def test_mean_and_scenario_slices(self, week_set):
        D, probs = MeanForecast(week_set).slice(100, 60)
        assert D.shape == (1, 60)
        S, sp = ScenarioForecast(week_set).slice(100, 60)
        assert S.shape == (7, 60) and np.allclose(sp, 1 / 7)
        assert np.array_equal(S[3], week_set.traces[3].values[100:160])
        assert np.allclose(D[0], (sp[:, None] * S).sum(axis=0), rtol=1e-12, atol=1e-15)


class TestReceding:
    def test_zero_forecast_stays_off(self, params, schedule, env):
        cfg = MpcConfig("pf", 30)
        prov = make_provider(cfg)
        prov.reset(np.zeros(1440))
        st = replace(initial_state(params, env, 120.0), minute_of_day=300)
        action, rec = mpc_act(st, 300, cfg, prov, params, schedule, env)
        assert action is False and rec.horizon == 30 and not rec.fallback

    def test_horizon_truncates_at_midnight(self, days, params, schedule, env):
        ctrl = MpcController(MpcConfig("pf", 120), params, schedule, env)
        rollout(ctrl, days[4], params, schedule, env)
        assert len(ctrl.records) == 144
        for r in ctrl.records:
            assert r.horizon == min(120, 1440 - r.minute)
        assert ctrl.records[-1].horizon == 10

    def test_admissible_actions(self, days, params, schedule, env, week_set):
        ctrl = MpcController(MpcConfig("mf", 60, "historical", week_set), params, schedule, env)
        tr = rollout(ctrl, days[22], params, schedule, env)
        from ewhbench.ewh import downtime_violations
        assert downtime_violations(tr.power, env.min_downtime_DT) == []
        assert tr.temps.max() <= params.temp_upper_Tbar + 1e-9
        assert ctrl.fallbacks == 0

    def test_solver_limit_falls_back_to_deadband(self, params, schedule, env, kmeans_set, caplog):
        cfg = MpcConfig("ts", 480, "kmeans", kmeans_set, time_limit=0.2)
        st = replace(initial_state(params, env, 114.0), minute_of_day=300)
        with caplog.at_level(logging.WARNING, logger="ewhbench.mpc"):
            action, rec = mpc_act(st, 300, cfg, make_provider(cfg), params, schedule, env)
        assert rec.status == "limit" and rec.fallback
        assert action == prdb_act(st, 300, DeadbandConfig(), schedule, st.heater_on)
        assert "falling back" in caplog.text

    def test_two_stage_latency_grows_with_lookahead(self, params, schedule, env, kmeans_set):
        st = replace(initial_state(params, env, 118.0), minute_of_day=960)
        times = {}
        for la in (30, 480):
            # a capped solve time only understates the long-horizon latency
            cfg = MpcConfig("ts", la, "kmeans", kmeans_set, time_limit=3.0)
            _, rec = mpc_act(st, 960, cfg, make_provider(cfg), params, schedule, env)
            times[la] = rec.seconds
        assert times[480] > times[30]


class TestOneShot:
    def test_zero_day(self, params, schedule, env):
        res = mpc_opt(np.zeros(1440), params, schedule, env)
        assert res.trajectory.cost == 0.0
        assert not res.solution.block_actions.any()

    @pytest.mark.parametrize("d", [0, 23])
    def test_replay_exact_and_beats_deadband(self, days, params, schedule, env, d):
        res = mpc_opt(days[d], params, schedule, env)
        assert res.solution.status == "optimal"
        assert abs(res.trajectory.cost - res.solution.objective) <= 1e-9 * max(1.0, res.trajectory.cost)
        replay = rollout(FixedSchedule(res.solution.block_actions), days[d], params, schedule, env)
        assert replay.cost == res.trajectory.cost
        prdb = rollout(PrdbController(schedule), days[d], params, schedule, env).cost
        assert res.trajectory.cost <= prdb + 1e-9

    def test_perfect_forecast_eight_hours_no_better_than_one_shot(self, days, params, schedule, env):
        opt = mpc_opt(days[24], params, schedule, env).trajectory.cost
        pf = rollout(MpcController(MpcConfig("pf", 480), params, schedule, env), days[24], params, schedule, env)
        assert pf.cost - opt >= -1e-9


class TestSweep:
    def test_one_by_one_equals_rollout(self, days, params, schedule, env):
        cfg = MpcConfig("pf", 30)
        rows = horizon_sweep([days[22]], [cfg], params, schedule, env)
        assert len(rows) == 1
        direct = rollout(MpcController(cfg, params, schedule, env), days[22], params, schedule, env,
                         initial_state(params, env, 120.0))
        assert rows[0].cost == direct.cost
        assert cost_matrix(rows) == {("pf", "-", 30): direct.cost}
        assert rows[0].mean_action_seconds > 0

    def test_configs_and_csv(self, days, params, schedule, env, week_set, tmp_path):
        cfgs = sweep_configs(["pf", "mf"], [30, 60], ["historical"], {"historical": week_set})
        assert [c.label for c in cfgs] == ["MPC-PF(30)", "MPC-PF(60)", "MPC-MF(30)[historical]",
                                           "MPC-MF(60)[historical]"]
        rows = horizon_sweep(days[21:23], cfgs, params, schedule, env, day_offset=22)
        assert [(r.variant, r.lookahead_min, r.day) for r in rows][:3] == [("pf", 30, 22), ("pf", 30, 23),
                                                                            ("pf", 60, 22)]
        again = horizon_sweep(days[21:23], cfgs, params, schedule, env, day_offset=22)
        assert [r.cost for r in rows] == [r.cost for r in again]
        write_sweep_csv(rows, tmp_path / "s.csv")
        with open(tmp_path / "s.csv", newline="") as fh:
            got = list(csv.reader(fh))
        assert got[0] == ["variant", "source", "lookahead_min", "day", "cost", "mean_action_seconds"]
        assert float(got[1][4]) == rows[0].cost and len(got) == 9
