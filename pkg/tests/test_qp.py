import numpy as np
import pytest

from flexcharge.qp import (
    EvSpec,
    InfeasibleInstanceError,
    QpInstance,
    QpSolution,
    SolverTolerances,
    kkt_residual,
    solve_relaxed,
    verify_kkt,
    water_fill,
)

from qp_oracle import brute_force_objective

DT = 1.0 / 60.0


def make_instance(horizon, base, evs):
    return QpInstance(
        horizon=horizon,
        base_load_kw=np.asarray(base, dtype=float),
        evs=tuple(evs),
        period_hours=DT,
    )


def random_grid_instance(rng, step_kw=0.25):
    """Small random instance whose energy targets are exactly grid-representable."""
    horizon = int(rng.integers(2, 7))
    n_evs = int(rng.integers(1, 3))
    base = rng.uniform(0.0, 6.0, size=horizon).round(2)
    evs = []
    for i in range(n_evs):
        max_units = int(rng.integers(2, 6))  # R in {0.5 .. 1.25} kW
        rate = max_units * step_kw
        deadline = int(rng.integers(1, horizon + 1))
        cap_units = max_units * deadline
        target_units = int(rng.integers(1, min(cap_units, 8) + 1))
        energy = target_units * step_kw * DT
        evs.append(EvSpec(f"ev{i}", rate, energy, deadline))
    return make_instance(horizon, base, evs)


class TestWaterFill:
    def test_flat_base_constant_rate(self):
        r = water_fill(np.full(60, 100.0), 5.0, 120.0)
        assert np.allclose(r, 2.0, atol=1e-12)

    def test_full_capacity_hits_bound_exactly(self):
        r = water_fill(np.array([3.0, 1.0]), 2.0, 4.0)
        assert r.tolist() == [2.0, 2.0]

    def test_fills_valley_first(self):
        r = water_fill(np.array([10.0, 2.0, 2.0]), 5.0, 4.0)
        assert r[0] == 0.0
        assert r[1] == pytest.approx(2.0)
        assert r[2] == pytest.approx(2.0)

    def test_energy_conserved(self):
        rng = np.random.default_rng(5)
        for _ in range(300):
            m = int(rng.integers(1, 50))
            base = rng.uniform(0, 100, m)
            rate = rng.uniform(0.5, 10)
            target = rng.uniform(0, m * rate)
            r = water_fill(base, rate, target)
            assert np.all(r >= 0) and np.all(r <= rate + 1e-12)
            assert r.sum() == pytest.approx(target, rel=1e-9, abs=1e-9)


class TestSolveRelaxed:
    def test_flat_base_single_ev(self):
        # constant-power optimum on a flat base load
        inst = make_instance(60, np.full(60, 100.0), [EvSpec("a", 5.0, 2.0, 60)])
        sol = solve_relaxed(inst)
        assert sol.converged
        assert np.allclose(sol.rates_kw[0], 2.0, atol=1e-9)
        assert sol.objective_value == pytest.approx(60 * 102.0**2)
        assert verify_kkt(inst, sol)

    def test_flat_base_matches_oracle_at_small_scale(self):
        inst = make_instance(4, np.full(4, 100.0), [EvSpec("a", 5.0, 2.0 * 4 / 60, 4)])
        sol = solve_relaxed(inst)
        oracle = brute_force_objective(inst)
        assert sol.objective_value <= oracle * (1 + 1e-6)
        assert np.allclose(sol.rates_kw[0], 2.0, atol=1e-9)

    def test_zero_slack_forced_to_max(self):
        energy = 5.0 * 60 * DT
        inst = make_instance(60, np.full(60, 100.0), [EvSpec("a", 5.0, energy, 60)])
        sol = solve_relaxed(inst)
        assert np.all(sol.rates_kw[0] == 5.0)

    def test_two_level_base_two_evs(self):
        base = np.array([9.0, 9.0, 9.0, 1.0, 1.0, 1.0])
        evs = [EvSpec("a", 5.0, 4 * 0.25 * DT, 6), EvSpec("b", 5.0, 6 * 0.25 * DT, 6)]
        inst = make_instance(6, base, evs)
        sol = solve_relaxed(inst)
        oracle = brute_force_objective(inst)
        assert sol.objective_value <= oracle * (1 + 1e-6)
        # all mass in the low half, levels equalized
        agg = sol.aggregate_kw()
        assert np.all(agg[:3] == 0.0)
        total = base + agg
        assert total[3:].max() - total[3:].min() <= 1e-3
        assert verify_kkt(inst, sol)

    def test_randomized_oracle_equivalence(self):
        rng = np.random.default_rng(123)
        for _ in range(40):
            inst = random_grid_instance(rng)
            sol = solve_relaxed(inst)
            assert sol.converged, inst.to_json()
            oracle = brute_force_objective(inst)
            assert sol.objective_value <= oracle * (1 + 1e-6), inst.to_json()
            assert verify_kkt(inst, sol, kkt_tol_kw=1e-3), inst.to_json()

    def test_empty_instance(self):
        inst = make_instance(4, [1.0, 2.0, 3.0, 4.0], [])
        sol = solve_relaxed(inst)
        assert sol.converged
        assert sol.objective_value == pytest.approx(1 + 4 + 9 + 16)
        assert sol.rates_kw.shape == (0, 4)

    def test_zero_energy_ev(self):
        inst = make_instance(4, np.ones(4), [EvSpec("a", 5.0, 0.0, 4)])
        sol = solve_relaxed(inst)
        assert np.all(sol.rates_kw == 0.0)
        assert sol.converged

    def test_infeasible_names_the_ev(self):
        with pytest.raises(InfeasibleInstanceError) as info:
            make_instance(10, np.zeros(10), [EvSpec("bad", 1.0, 1.0, 2)])
        assert info.value.ev_id == "bad"

    def test_deadline_beyond_horizon_rejected(self):
        with pytest.raises(Exception):
            make_instance(5, np.zeros(5), [EvSpec("a", 5.0, 0.1, 6)])

    def test_budget_exhaustion_returns_unconverged(self):
        base = np.array([9.0, 9.0, 1.0, 1.0])
        evs = [EvSpec("a", 2.0, 4 * 0.25 * DT, 4), EvSpec("b", 2.0, 3 * 0.25 * DT, 4)]
        inst = make_instance(4, base, evs)
        sol = solve_relaxed(inst, SolverTolerances(max_iterations=0))
        assert not sol.converged

    def test_determinism_bitwise(self):
        rng = np.random.default_rng(9)
        inst = random_grid_instance(rng)
        a = solve_relaxed(inst)
        b = solve_relaxed(inst)
        assert np.array_equal(a.rates_kw, b.rates_kw)
        assert a.objective_value == b.objective_value
        assert a.iterations == b.iterations


class TestSolutionProperties:
    def test_permutation_equivariance(self):
        rng = np.random.default_rng(21)
        for _ in range(20):
            horizon = int(rng.integers(2, 7))
            base = rng.uniform(0, 5, horizon)
            deadline_b = int(rng.integers(1, horizon + 1))
            ev_a = EvSpec("a", 1.0, float(rng.uniform(0.001, 1.0 * horizon * DT)), horizon)
            ev_b = EvSpec(
                "b", 2.0, float(rng.uniform(0.001, 2.0 * deadline_b * DT)), deadline_b
            )
            fwd = solve_relaxed(make_instance(horizon, base, [ev_a, ev_b]))
            rev = solve_relaxed(make_instance(horizon, base, [ev_b, ev_a]))
            assert np.allclose(fwd.rates_kw[0], rev.rates_kw[1], atol=1e-6)
            assert np.allclose(fwd.rates_kw[1], rev.rates_kw[0], atol=1e-6)
            assert np.allclose(fwd.aggregate_kw(), rev.aggregate_kw(), atol=1e-9)

    def test_scaling(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            inst = random_grid_instance(rng)
            c = float(rng.uniform(0.1, 30.0))
            scaled = QpInstance(
                horizon=inst.horizon,
                base_load_kw=inst.base_load_kw * c,
                evs=tuple(
                    EvSpec(e.ev_id, e.max_rate_kw * c, e.residual_energy_kwh * c, e.deadline_periods)
                    for e in inst.evs
                ),
                period_hours=inst.period_hours,
            )
            sol = solve_relaxed(inst)
            sol_scaled = solve_relaxed(scaled)
            assert np.allclose(sol_scaled.rates_kw, sol.rates_kw * c, rtol=1e-6, atol=1e-9)

    def test_aggregate_flatness_when_energy_suffices(self):
        rng = np.random.default_rng(41)
        for _ in range(20):
            horizon = int(rng.integers(3, 8))
            base = rng.uniform(1.0, 9.0, horizon)
            # enough energy to lift every period above the base maximum
            needed = float((base.max() + 1.0) * horizon - base.sum()) * DT
            inst = make_instance(
                horizon, base, [EvSpec("a", 1e3, needed, horizon)]
            )
            sol = solve_relaxed(inst)
            total = base + sol.aggregate_kw()
            unclamped = (sol.rates_kw[0] > 1e-9) & (sol.rates_kw[0] < 1e3 - 1e-9)
            assert unclamped.any()
            assert total.max() - total[unclamped].min() <= 1e-3

    def test_warm_start_reaches_same_optimum(self):
        rng = np.random.default_rng(51)
        for _ in range(10):
            inst = random_grid_instance(rng)
            cold = solve_relaxed(inst)
            garbage = {
                e.ev_id: rng.uniform(0, e.max_rate_kw, inst.horizon) for e in inst.evs
            }
            warm = solve_relaxed(inst, warm_start=garbage)
            assert warm.converged
            assert warm.objective_value == pytest.approx(
                cold.objective_value, rel=1e-6
            )
            assert verify_kkt(inst, warm)

    def test_kkt_residual_detects_bad_solution(self):
        inst = make_instance(4, [5.0, 1.0, 1.0, 1.0], [EvSpec("a", 2.0, 3 * 0.25 * DT, 4)])
        good = solve_relaxed(inst)
        assert kkt_residual(inst, good.rates_kw) <= 1e-3
        # intentionally lopsided: all energy in the most expensive period
        bad = np.zeros((1, 4))
        bad[0, 0] = 0.75
        assert kkt_residual(inst, bad) > 1e-1

    def test_debug_dump_round_trip(self, tmp_path):
        inst = make_instance(4, np.ones(4), [EvSpec("a", 5.0, 0.05, 4)])
        text = inst.to_json()
        back = QpInstance.from_json(text)
        assert back.horizon == inst.horizon
        assert np.array_equal(back.base_load_kw, inst.base_load_kw)
        assert back.evs == inst.evs
