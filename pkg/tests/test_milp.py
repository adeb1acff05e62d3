from __future__ import annotations

import itertools
import math
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import Bounds, LinearConstraint, linprog, milp

from ewhbench.demand import ScenarioSet
from ewhbench.ewh import EnvConfig, EwhState, FixedSchedule, downtime_violations, initial_state, rollout
from ewhbench.milp import build_model, solve_lp, zbar_from_state
from ewhbench.milp.dp import Pwl, ScenarioDp, add, compose, hinge_sum, minimum
from ewhbench.milp.lpfile import export_lp, read_lp
from ewhbench.milp.model import sim_objective
from ewhbench.milp.solve import (MAX_BRUTE_BLOCKS, brute_force_solve, lp_relax_solve, solve_bb,
                                 strengthen_root)


def random_instance(rng, days, params, schedule, n_scen, K=60, env=EnvConfig()):
    start = int(rng.integers(0, (1440 - K) // 10 + 1)) * 10
    T0 = float(rng.uniform(105, 139))
    on = bool(rng.integers(2))
    state = replace(initial_state(params, env, T0), minute_of_day=start, heater_on=on,
                    minutes_since_off=0 if on else int(rng.integers(0, 11)))
    idx = rng.choice(len(days), n_scen, replace=False)
    return build_model(params, schedule, ScenarioSet(tuple(days[i] for i in idx)), K, state, start=start)


def highs_milp(lp, integral=True):
    A = lp.dense()
    cons = LinearConstraint(A, lp.row_lo, lp.row_hi) if A.shape[0] else ()
    res = milp(lp.c, constraints=cons, bounds=Bounds(lp.col_lo, lp.col_hi),
               integrality=lp.integer.astype(int) if integral else np.zeros(len(lp.c), int),
               options={"mip_rel_gap": 1e-10})
    assert res.status == 0, res.message
    return res.fun + lp.obj_const


def all_schedules(B):
    return [np.array(s, float) for s in itertools.product((0.0, 1.0), repeat=B)]


class TestBuildModel:
    def test_one_block_counts(self, params, schedule, env):
        m = build_model(params, schedule, (np.zeros((1, 10)), np.ones(1)), 10, initial_state(params, env))
        lp = m.to_sparse()
        names = lp.col_names
        count = lambda p: sum(n.split("_")[0] == p for n in names)  # noqa: E731
        assert (count("y"), count("z"), count("T"), count("Tc"), count("P")) == (1, 10, 10, 10, 10)
        assert lp.integer.sum() == 1

    def test_recent_switch_off_blocks_first_block(self, params, schedule, env):
        st_ = replace(initial_state(params, env, 118.0), minutes_since_off=3)
        zbar = zbar_from_state(st_, 10)
        assert zbar.sum() == 1 and zbar[10 - 3] == 1
        m = build_model(params, schedule, (np.full((1, 30), 0.5), np.ones(1)), 30, st_)
        assert m.y0_forced_off
        assert not m.feasible([1, 0, 0])
        lp = m.to_sparse()
        assert lp.max_violation(m.full_point([1, 0, 0])) > 0.5
        assert lp.max_violation(m.full_point([0, 1, 0])) <= 1e-9
        sol = solve_bb(m)
        assert not sol.block_actions[0]

    def test_switch_off_exactly_downtime_ago_is_free(self, params, schedule, env):
        st_ = replace(initial_state(params, env, 118.0), minutes_since_off=10)
        m = build_model(params, schedule, (np.zeros((1, 20)), np.ones(1)), 20, st_)
        assert not m.y0_forced_off

    @pytest.mark.parametrize("K,bad", [(0, "positive"), (15, "multiple")])
    def test_errors(self, params, schedule, env, K, bad):
        with pytest.raises(ValueError, match=bad):
            build_model(params, schedule, (np.zeros((1, 30)), np.ones(1)), K, initial_state(params, env))

    def test_short_scenario(self, params, schedule, env):
        with pytest.raises(ValueError):
            build_model(params, schedule, (np.zeros((1, 20)), np.ones(1)), 30, initial_state(params, env))

    def test_empty_model_export_refused(self, params, schedule, env, tmp_path):
        m = build_model(params, schedule, (np.zeros((1, 10)), np.ones(1)), 10, initial_state(params, env))
        m = replace(m, demand=np.zeros((1, 0)))
        with pytest.raises(ValueError):
            export_lp(m, tmp_path / "x.lp")

    def test_seven_scenarios_eight_hours_match_simulator(self, days, params, schedule, rng):
        K = 480
        start = 360
        scen = ScenarioSet(tuple(days[7:14]))
        s0 = replace(initial_state(params, EnvConfig(), 121.0), minute_of_day=start)
        m = build_model(params, schedule, scen, K, s0, start=start)
        env_k = EnvConfig(episode_minutes=K)
        for _ in range(3):
            y = np.zeros(m.n_blocks)
            for b in rng.permutation(m.n_blocks)[:20]:
                y[b] = 1.0
                if not m.feasible(y):
                    y[b] = 0.0
            assert y.any()
            costs = [rollout(FixedSchedule(y > 0.5), t.values[start:start + K], params, schedule, env_k, s0).cost
                     for t in scen.traces]
            want = math.fsum(p * c for p, c in zip(scen.probs, costs))
            assert abs(m.objective_of(y) - want) <= 1e-9 * max(1.0, want)
            lp = m.to_sparse()
            x = m.full_point(y)
            assert lp.max_violation(x) <= 1e-9
            assert abs(lp.objective(x) - want) <= 1e-9 * max(1.0, want)

    def test_vectorised_objectives(self, days, params, schedule, rng):
        m = random_instance(rng, days, params, schedule, 3, K=120)
        Y = (rng.random((20, m.n_blocks)) < 0.5).astype(float)
        obj, ok = m.objectives(Y)
        for i, y in enumerate(Y):
            assert ok[i] == m.feasible(y)
            assert obj[i] == pytest.approx(m.objective_of(y), rel=1e-12)
            assert obj[i] == pytest.approx(sim_objective(m, y), rel=1e-9)


class TestSimplex:
    @settings(max_examples=40, deadline=None)
    @given(seed=st.integers(0, 10_000), m=st.integers(1, 8), n=st.integers(1, 10))
    def test_matches_highs_and_kkt(self, seed, m, n):
        rng = np.random.default_rng(seed)
        A = rng.normal(size=(m, n))
        x0 = rng.uniform(0, 1, n)
        act = A @ x0
        rl = act - rng.uniform(0, 1, m)
        rh = act + rng.uniform(0, 1, m)
        rl[rng.random(m) < 0.3] = -np.inf
        c = rng.normal(size=n)
        lo = np.where(rng.random(n) < 0.2, -1.0, 0.0)
        hi = np.full(n, 2.0)
        r = solve_lp(c, A, rl, rh, lo, hi)
        fin_h, fin_l = np.isfinite(rh), np.isfinite(rl)
        ref = linprog(c, A_ub=np.vstack([A[fin_h], -A[fin_l]]), b_ub=np.concatenate([rh[fin_h], -rl[fin_l]]),
                      bounds=list(zip(lo, hi)), method="highs")
        assert r.status == "optimal"
        assert r.objective == pytest.approx(ref.fun, abs=1e-7, rel=1e-9)
        x, s = r.x, A @ r.x
        d, y = r.reduced_costs[:n], r.duals
        tol = 1e-7
        assert np.all(x >= lo - tol) and np.all(x <= hi + tol)
        assert np.all(s >= rl - tol) and np.all(s <= rh + tol)
        assert np.abs(c - d - A.T @ y).max() <= tol
        # complementary slackness: positive multipliers only at the matching bound
        assert np.all(np.minimum(np.maximum(d, 0), x - lo) <= tol)
        assert np.all(np.minimum(np.maximum(-d, 0), hi - x) <= tol)
        assert np.all(np.minimum(np.maximum(y, 0), s - rl) <= tol)
        assert np.all(np.minimum(np.maximum(-y, 0), rh - s) <= tol)

    def test_infeasible(self):
        r = solve_lp([1.0], np.array([[1.0]]), [3.0], [4.0], [0.0], [1.0])
        assert r.status == "infeasible"

    def test_unbounded(self):
        r = solve_lp([-1.0, 0.0], np.array([[1.0, -1.0]]), [-np.inf], [1.0], [0.0, 0.0], [np.inf, np.inf])
        assert r.status == "unbounded"

    def test_degenerate_cycling_example(self):
        # Beale's example: cycles under textbook Dantzig pricing without anti-cycling
        c = np.array([-0.75, 150.0, -0.02, 6.0])
        A = np.array([[0.25, -60.0, -0.04, 9.0], [0.5, -90.0, -0.02, 3.0], [0.0, 0.0, 1.0, 0.0]])
        r = solve_lp(c, A, [-np.inf] * 3, [0.0, 0.0, 1.0], np.zeros(4), np.full(4, np.inf))
        assert r.status == "optimal"
        assert r.objective == pytest.approx(-0.05)

    def test_warm_start_reuses_basis(self):
        rng = np.random.default_rng(3)
        A = rng.normal(size=(5, 7))
        rl, rh = np.full(5, -np.inf), np.abs(rng.normal(size=5)) + 1
        c = rng.normal(size=7)
        cold = solve_lp(c, A, rl, rh, np.zeros(7), np.ones(7))
        warm = solve_lp(c, A, rl, rh, np.zeros(7), np.ones(7), basis=cold.basis)
        assert warm.objective == pytest.approx(cold.objective, abs=1e-12)
        assert warm.iterations <= 1


class TestRelaxation:
    def test_zero_demand_off_peak(self, params, schedule, env):
        m = build_model(params, schedule, (np.zeros((1, 60)), np.ones(1)), 60, initial_state(params, env))
        rel = lp_relax_solve(m)
        assert rel.bound == pytest.approx(0.0, abs=1e-9)
        assert np.allclose(rel.y, 0.0)

    def test_single_block_bound(self, days, params, schedule, env):
        s0 = replace(initial_state(params, env, 114.0), minute_of_day=420)
        m = build_model(params, schedule, ScenarioSet((days[2],)), 10, s0, start=420)
        rel = lp_relax_solve(m)
        assert rel.bound <= min(m.objective_of([0]), m.objective_of([1])) + 1e-9

    def test_matches_highs_relaxation(self, days, params, schedule, rng):
        for n in (1, 3):
            m = random_instance(rng, days, params, schedule, n, K=120)
            assert lp_relax_solve(m).bound == pytest.approx(highs_milp(m.to_sparse(), integral=False), abs=1e-6)

    def test_bound_sandwich_reproducible(self, days, params, schedule, rng):
        m = random_instance(rng, days, params, schedule, 3)
        a, b = lp_relax_solve(m), lp_relax_solve(m)
        opt = brute_force_solve(m).objective
        assert a.bound == b.bound
        assert a.bound <= opt + 1e-9


class TestBranchAndBound:
    @pytest.mark.parametrize("n_scen", [1, 3, 7])
    def test_matches_brute_force(self, days, params, schedule, n_scen):
        rng = np.random.default_rng(100 + n_scen)
        for _ in range(7):
            m = random_instance(rng, days, params, schedule, n_scen)
            a, b = solve_bb(m), brute_force_solve(m)
            assert a.status == "optimal"
            assert a.objective == pytest.approx(b.objective, abs=1e-6)
            assert m.feasible(a.block_actions)
            assert a.bound <= a.objective + 1e-9
            prev_off = 10 if not m.heater_on0 else 0
            power = np.repeat(a.block_actions, 10) * params.rated_power_Pon
            hist = 0 if m.heater_on0 else (10 - int(np.flatnonzero(m.zbar)[0]) if m.zbar.any() else prev_off)
            assert downtime_violations(power, 10, history_off=hist) == []

    def test_dominance_one_block(self, params, schedule, env):
        s0 = replace(initial_state(params, env, 135.0), minute_of_day=900)
        m = build_model(params, schedule, (np.zeros((1, 10)), np.ones(1)), 10, s0)
        sol = solve_bb(m)
        assert not sol.block_actions[0] and sol.objective == 0.0

    def test_zero_demand_day(self, params, schedule, env):
        m = build_model(params, schedule, (np.zeros((1, 1440)), np.ones(1)), 1440, initial_state(params, env))
        sol = solve_bb(m)
        assert sol.status == "optimal" and sol.objective == 0.0 and not sol.block_actions.any()

    def test_deterministic(self, days, params, schedule):
        m = random_instance(np.random.default_rng(8), days, params, schedule, 3, K=120)
        a, b = solve_bb(m), solve_bb(m)
        assert a.objective == b.objective and np.array_equal(a.block_actions, b.block_actions)
        assert a.node_count == b.node_count

    def test_node_limit_reports_limit(self, days, params, schedule):
        m = random_instance(np.random.default_rng(21), days, params, schedule, 7, K=240)
        sol = solve_bb(m, node_limit=1, cuts=False)
        assert sol.status in ("limit", "optimal")
        if sol.status == "limit":
            assert math.isfinite(sol.objective) and m.feasible(sol.block_actions)

    def test_json_dump(self, days, params, schedule, tmp_path):
        m = random_instance(np.random.default_rng(2), days, params, schedule, 1)
        sol = solve_bb(m)
        text = sol.to_json(tmp_path / "s.json")
        assert '"status": "optimal"' in text and (tmp_path / "s.json").is_file()


class TestBruteForce:
    def test_zero_blocks(self, params, schedule, env):
        m = build_model(params, schedule, (np.zeros((1, 10)), np.ones(1)), 10, initial_state(params, env))
        m = replace(m, demand=np.zeros((1, 0)))
        assert brute_force_solve(m).objective == 0.0

    def test_one_block(self, days, params, schedule, env):
        s0 = replace(initial_state(params, env, 113.0), minute_of_day=400)
        m = build_model(params, schedule, ScenarioSet((days[0],)), 10, s0, start=400)
        want = min(sim_objective(m, [0.0]), sim_objective(m, [1.0]))
        assert brute_force_solve(m).objective == pytest.approx(want, rel=1e-12)

    def test_refuses_large(self, params, schedule, env):
        K = 10 * (MAX_BRUTE_BLOCKS + 1)
        m = build_model(params, schedule, (np.zeros((1, K)), np.ones(1)), K, initial_state(params, env))
        with pytest.raises(ValueError):
            brute_force_solve(m)

    def test_optimum_resummed(self, days, params, schedule, rng):
        m = random_instance(rng, days, params, schedule, 3)
        sol = brute_force_solve(m)
        assert sol.objective == pytest.approx(sim_objective(m, sol.block_actions.astype(float)), rel=1e-12)
        best = min(sim_objective(m, y) for y in all_schedules(m.n_blocks) if m.feasible(y))
        assert sol.objective == pytest.approx(best, rel=1e-12)


class TestDynamicProgram:
    def test_matches_brute_force(self, days, params, schedule):
        rng = np.random.default_rng(77)
        for _ in range(30):
            m = random_instance(rng, days, params, schedule, 1)
            hi = np.ones(m.n_blocks)
            if m.y0_forced_off:
                hi[0] = 0.0
            v, y = ScenarioDp(m, 0).solve(np.zeros(m.n_blocks), hi)
            ref = brute_force_solve(m).objective
            assert v == pytest.approx(ref, abs=1e-7)
            assert m.objective_of(y) == pytest.approx(v, abs=1e-7)

    def test_respects_fixings(self, days, params, schedule):
        m = random_instance(np.random.default_rng(4), days, params, schedule, 1)
        lo, hi = np.zeros(m.n_blocks), np.ones(m.n_blocks)
        lo[2] = 1.0
        hi[4] = 0.0
        v, y = ScenarioDp(m, 0).solve(lo, hi)
        best = min((m.objective_of(s) for s in all_schedules(m.n_blocks)
                    if m.feasible(s) and s[2] == 1 and s[4] == 0 and not (m.y0_forced_off and s[0])),
                   default=math.inf)
        assert v == pytest.approx(best, abs=1e-7)

    @settings(max_examples=50, deadline=None)
    @given(a=st.floats(-3, 3), b=st.floats(-3, 3), c=st.floats(-3, 3), d=st.floats(-3, 3),
           s=st.floats(0, 10))
    def test_piecewise_primitives(self, a, b, c, d, s):
        f = Pwl(np.array([0.0, 5.0, 10.0]), np.array([a, 0.0]), np.array([b, 5 * a + b]))
        g = Pwl(np.array([0.0, 10.0]), np.array([c]), np.array([d]))
        fv = a * min(s, 5.0) + b
        gv = c * s + d
        assert add(f, g)(s) == pytest.approx(fv + gv, abs=1e-9)
        assert minimum(f, g)[0](s) == pytest.approx(min(fv, gv), abs=1e-9)
        h = compose(g, 0.5, 1.0, 0.0, 10.0)
        assert h(s) == pytest.approx(c * (0.5 * s + 1.0) + d, abs=1e-9)

    def test_hinge_sum(self):
        w = np.array([1.0, 2.0])
        alpha = np.array([1.0, 0.5])
        beta = np.array([0.0, 3.0])
        f = hinge_sum(w, alpha, beta, 10.0, 0.0, 40.0)
        for s in np.linspace(0, 40, 81):
            want = 1.0 * max(0, 10 - s) + 2.0 * max(0, 10 - 0.5 * s - 3.0)
            assert f(s) == pytest.approx(want, abs=1e-12)


class TestCuts:
    def test_root_cuts_keep_every_integer_point(self, days, params, schedule):
        rng = np.random.default_rng(31)
        for _ in range(4):
            m = random_instance(rng, days, params, schedule, 3)
            red0 = m.reduced()
            red, rel = strengthen_root(m, red0)
            assert rel.bound >= lp_relax_solve(m, red=red0).bound - 1e-9
            for y in all_schedules(m.n_blocks):
                if not m.feasible(y):
                    continue
                fixed = lp_relax_solve(m, y, y, red=red)
                assert fixed.status == "optimal"
                assert fixed.bound == pytest.approx(m.objective_of(y), abs=1e-6)


class TestLpFile:
    def test_round_trip_structure(self, days, params, schedule, rng, tmp_path):
        m = random_instance(rng, days, params, schedule, 2, K=40)
        lp = m.to_sparse()
        export_lp(m, tmp_path / "m.lp")
        back = read_lp(tmp_path / "m.lp")
        assert back.col_names == lp.col_names
        assert np.array_equal(back.c, lp.c)
        assert np.array_equal(back.col_lo, lp.col_lo) and np.array_equal(back.col_hi, lp.col_hi)
        assert np.array_equal(back.row_lo, lp.row_lo) and np.array_equal(back.row_hi, lp.row_hi)
        assert np.array_equal(back.integer, lp.integer)
        assert np.array_equal(back.dense(), lp.dense())

    def test_one_block_declares_one_binary(self, params, schedule, env, tmp_path):
        m = build_model(params, schedule, (np.zeros((1, 10)), np.ones(1)), 10, initial_state(params, env))
        export_lp(m, tmp_path / "one.lp")
        text = (tmp_path / "one.lp").read_text().splitlines()
        sections = [ln.strip() for ln in text]
        i = sections.index("Binaries")
        assert sections[i + 1].split() == ["y_0"]
        assert sections[-1] == "End"

    def test_external_solver_agrees_on_twelve_blocks(self, days, params, schedule, tmp_path):
        s0 = replace(initial_state(params, EnvConfig(), 117.0), minute_of_day=600)
        m = build_model(params, schedule, ScenarioSet(tuple(days[10:13])), 120, s0, start=600)
        export_lp(m, tmp_path / "m12.lp")
        ours = solve_bb(m)
        assert ours.status == "optimal"
        assert highs_milp(read_lp(tmp_path / "m12.lp")) == pytest.approx(ours.objective, abs=1e-6)

    def test_rejects_maximise(self, tmp_path):
        (tmp_path / "max.lp").write_text("Maximize\n obj: x\nEnd\n")
        with pytest.raises(ValueError):
            read_lp(tmp_path / "max.lp")


def test_state_roundtrip_history(params, env):
    s = EwhState.make(120.0, params, heater_on=True, minutes_since_off=0)
    assert not zbar_from_state(s, 10).any()
