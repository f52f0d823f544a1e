import numpy as np
import pytest

from flexcharge.core import LoadProfile, TimeGrid, ValidationError
from flexcharge.simulator import (
    ArrivalComponent,
    EvPlantModel,
    FleetScenario,
    OptInModel,
    SimSession,
    default_baseline_path,
    generate_scenario,
    load_baseline,
    run_closed_loop,
    run_policy,
    tou_profile,
    unmanaged_profile,
)

GRID = TimeGrid()


def sim_session(
    plug_minute,
    unplug_minute,
    energy,
    rate=5.0,
    opt_in=True,
    vehicle="v000",
    pack=60.0,
    soc=0.2,
):
    return SimSession(
        vehicle_id=vehicle,
        plug_in_period=plug_minute,
        unplug_period=unplug_minute,
        energy_kwh=energy,
        max_rate_kw=rate,
        opt_in=opt_in,
        battery_capacity_kwh=pack,
        initial_soc=soc,
    )


class TestGenerateScenario:
    def test_determinism(self):
        scenario = FleetScenario(seed=5)
        assert generate_scenario(scenario) == generate_scenario(scenario)

    def test_empty_fleet(self):
        assert generate_scenario(FleetScenario(n_vehicles=0)) == []

    def test_calibrated_means(self):
        # large sample: sojourn ~11 h, charging ~2 h, slack ~9 h
        scenario = FleetScenario(n_vehicles=1000, seed=42, charge_probability=1.0)
        sessions = generate_scenario(scenario)
        assert len(sessions) >= 900
        slack = np.array([s.slack_hours for s in sessions])
        sojourn = np.array([s.sojourn_hours for s in sessions])
        charge = np.array([s.energy_kwh / s.max_rate_kw for s in sessions])
        assert abs(slack.mean() - 9.0) < 1.0
        assert abs(sojourn.mean() - 11.0) < 1.0
        assert abs(charge.mean() - 2.0) < 0.5
        assert slack.min() >= 0.0

    def test_sessions_are_well_formed(self):
        for s in generate_scenario(FleetScenario(seed=3, duration_days=3)):
            assert s.unplug_period > s.plug_in_period
            assert s.energy_kwh <= s.max_rate_kw * s.sojourn_hours + 1e-9
            assert 0.0 < s.initial_soc < 1.0

    def test_no_overlapping_sessions_per_vehicle(self):
        sessions = generate_scenario(FleetScenario(seed=8, duration_days=5))
        by_vehicle = {}
        for s in sessions:
            by_vehicle.setdefault(s.vehicle_id, []).append(s)
        for group in by_vehicle.values():
            group.sort(key=lambda s: s.plug_in_period)
            for a, b in zip(group, group[1:]):
                assert a.unplug_period <= b.plug_in_period

    def test_opt_in_model_shape(self):
        model = OptInModel()
        assert model.probability(0.0) == pytest.approx(0.1)
        assert model.probability(3.0) == pytest.approx(0.4)
        assert model.probability(9.0) == pytest.approx(0.8)
        assert model.probability(20.0) == pytest.approx(0.8)

    def test_opt_in_table_override(self):
        model = OptInModel(table=((0.0, 0.2), (5.0, 0.9)))
        assert model.probability(1.0) == pytest.approx(0.2)
        assert model.probability(7.0) == pytest.approx(0.9)

    def test_scenario_json_round_trip(self):
        scenario = FleetScenario(
            seed=9,
            arrival_mixture=(ArrivalComponent(0.7, 18.0, 1.5), ArrivalComponent(0.3, 12.0, 2.0)),
        )
        back = FleetScenario.from_json(scenario.to_json())
        assert back == scenario
        assert generate_scenario(back) == generate_scenario(scenario)


class TestUnmanagedProfile:
    def test_full_rate_until_complete(self):
        s = sim_session(18 * 60, 18 * 60 + 600, energy=20.0, rate=5.0)
        profile = unmanaged_profile(s, GRID)
        assert profile.start_period == 18 * 60
        assert np.all(profile.values_kw[:240] == 5.0)
        assert np.all(profile.values_kw[240:] == 0.0)

    def test_zero_energy(self):
        s = sim_session(0, 100, energy=0.0)
        assert np.all(unmanaged_profile(s, GRID).values_kw == 0.0)

    def test_half_hour(self):
        s = sim_session(0, 100, energy=2.5, rate=5.0)
        profile = unmanaged_profile(s, GRID)
        assert np.all(profile.values_kw[:30] == 5.0)
        assert np.all(profile.values_kw[30:] == 0.0)

    def test_partial_last_minute(self):
        s = sim_session(0, 100, energy=0.125, rate=5.0)
        profile = unmanaged_profile(s, GRID)
        assert profile.values_kw[0] == 5.0
        assert profile.values_kw[1] == pytest.approx(2.5)
        assert profile.values_kw.sum() / 60.0 == pytest.approx(0.125)


class TestTouProfile:
    def test_midnight_delay(self):
        # plug in 18:00, unplug 07:00, 2 hours of charge: runs 00:00-02:00
        s = sim_session(18 * 60, 31 * 60, energy=10.0, rate=5.0)
        profile = tou_profile(s, GRID)
        values = profile.values_kw
        offset = 24 * 60 - 18 * 60
        assert np.all(values[:offset] == 0.0)
        assert np.all(values[offset : offset + 120] == 5.0)
        assert np.all(values[offset + 120 :] == 0.0)

    def test_infeasible_delay_falls_back_to_unmanaged(self):
        # plug in 18:00, unplug 01:00: only 1 off-peak hour for 2 hours of charge
        s = sim_session(18 * 60, 25 * 60, energy=10.0, rate=5.0)
        profile = tou_profile(s, GRID)
        expected = unmanaged_profile(s, GRID)
        assert np.array_equal(profile.values_kw, expected.values_kw)

    def test_plug_in_during_off_peak_charges_immediately(self):
        # 00:30 plug-in: the next boundary is a day away, so fall back = now
        s = sim_session(30, 30 + 360, energy=5.0, rate=5.0)
        profile = tou_profile(s, GRID)
        assert profile.values_kw[0] == 5.0

    def test_opt_out_sessions_unchanged(self):
        s = sim_session(18 * 60, 31 * 60, energy=10.0, rate=5.0, opt_in=False)
        assert np.array_equal(
            tou_profile(s, GRID).values_kw, unmanaged_profile(s, GRID).values_kw
        )


class TestLoadBaseline:
    def test_rescale_halves(self, tmp_path):
        from flexcharge.core import write_daily_profile_csv

        path = tmp_path / "b.csv"
        write_daily_profile_csv(path, LoadProfile(0, np.full(1440, 240.0)))
        profile = load_baseline(path, 120.0)
        assert np.all(profile.values_kw == 120.0)

    def test_identity_when_peak_matches(self):
        profile = load_baseline(default_baseline_path(), 120.0)
        assert profile.peak_kw == pytest.approx(120.0)

    def test_constant_profile_rescaled(self, tmp_path):
        from flexcharge.core import write_daily_profile_csv

        path = tmp_path / "c.csv"
        write_daily_profile_csv(path, LoadProfile(0, np.ones(1440)))
        profile = load_baseline(path, 120.0, days=2)
        assert len(profile) == 2880
        assert np.all(profile.values_kw == 120.0)

    def test_non_positive_target_rejected(self, tmp_path):
        from flexcharge.core import write_daily_profile_csv

        path = tmp_path / "d.csv"
        write_daily_profile_csv(path, LoadProfile(0, np.ones(1440)))
        with pytest.raises(ValidationError):
            load_baseline(path, 0.0)


class TestPlant:
    def test_draw_bounds(self):
        from flexcharge.core import ChargingRequest, SessionState

        request = ChargingRequest(energy_kwh=10.0, deadline_hours=5.0, max_rate_kw=6.0)
        state = SessionState(
            session_id="s",
            request=request,
            residual_energy_kwh=10.0,
            remaining_periods=300,
        )
        rng = np.random.default_rng(1)
        plant = EvPlantModel(noise_kw=0.5, noise_mode="symmetric", taper_enabled=False)
        for _ in range(200):
            drawn = plant.draw(6.0, state, rng, 1 / 60)
            assert 5.5 - 1e-12 <= drawn <= 6.0
        assert plant.draw(0.0, state, rng, 1 / 60) == 0.0

    def test_downward_noise_only_reduces(self):
        from flexcharge.core import ChargingRequest, SessionState

        request = ChargingRequest(energy_kwh=10.0, deadline_hours=5.0, max_rate_kw=6.0)
        state = SessionState(
            session_id="s", request=request, residual_energy_kwh=10.0, remaining_periods=300
        )
        rng = np.random.default_rng(2)
        plant = EvPlantModel(noise_kw=0.3, noise_mode="down", taper_enabled=False)
        for _ in range(200):
            assert plant.draw(4.0, state, rng, 1 / 60) <= 4.0

    def test_taper_caps_near_full_pack(self):
        from flexcharge.core import ChargingRequest, SessionState

        request = ChargingRequest(energy_kwh=8.0, deadline_hours=5.0, max_rate_kw=6.0)
        # 6 kWh delivered into a 40 kWh pack from 80%: SOC is 0.95
        state = SessionState(
            session_id="s",
            request=request,
            residual_energy_kwh=2.0,
            remaining_periods=100,
            measured_power_history=tuple([6.0] * 60),
        )
        plant = EvPlantModel(taper_enabled=True)
        rng = np.random.default_rng(3)
        drawn = plant.draw(
            6.0, state, rng, 1 / 60, battery_capacity_kwh=40.0, initial_soc=0.8
        )
        expected_cap = max(1.4, 6.0 * (1 - 0.95) / 0.1)
        assert drawn == pytest.approx(expected_cap)


class TestRunPolicy:
    def flat_baseline(self, level=100.0):
        return LoadProfile(0, np.full(1440, level))

    def test_empty_scenario_all_policies(self):
        scenario = FleetScenario(n_vehicles=0)
        baseline = self.flat_baseline()
        for policy in ("unmanaged", "tou", "optimized"):
            result = run_policy(scenario, policy, baseline)
            assert np.array_equal(
                result.aggregate.values_kw, result.baseline.values_kw
            )

    def test_policy_isolation_same_stream(self):
        scenario = FleetScenario(seed=14, n_vehicles=6)
        streams = [generate_scenario(scenario) for _ in range(3)]
        assert streams[0] == streams[1] == streams[2]

    def test_single_flexible_session_peak_ordering(self):
        scenario = FleetScenario(
            n_vehicles=1,
            seed=1,
            charge_probability=1.0,
            opt_in=OptInModel(floor=1.0, slope_per_hour=0.0, ceiling=1.0),
        )
        baseline = self.flat_baseline()
        unmanaged = run_policy(scenario, "unmanaged", baseline)
        optimized = run_policy(scenario, "optimized", baseline)
        assert optimized.aggregate.peak_kw <= unmanaged.aggregate.peak_kw + 1e-9

    def test_synchronized_scenario_tou_spike(self):
        # ten vehicles plugging in across 18:00-20:00, all feasible for a
        # midnight delay: TOU stacks them all at 00:00
        sessions = [
            sim_session(
                18 * 60 + 12 * i,
                31 * 60,
                energy=5.0 * 1.5,
                rate=5.0,
                vehicle=f"v{i:03d}",
            )
            for i in range(10)
        ]
        base = 100.0
        span = 32 * 60
        tou_total = np.full(span, base)
        unmanaged_total = np.full(span, base)
        for s in sessions:
            tou = tou_profile(s, GRID)
            unm = unmanaged_profile(s, GRID)
            tou_total[s.plug_in_period : s.plug_in_period + len(tou)] += tou.values_kw
            unmanaged_total[s.plug_in_period : s.plug_in_period + len(unm)] += unm.values_kw
        midnight = 24 * 60
        assert tou_total[midnight] == pytest.approx(base + 10 * 5.0)
        assert tou_total.max() > unmanaged_total.max()

    def test_energy_conservation_per_policy(self):
        scenario = FleetScenario(seed=6, n_vehicles=8)
        baseline = self.flat_baseline()
        for policy in ("unmanaged", "tou"):
            result = run_policy(scenario, policy, baseline)
            for o in result.outcomes:
                assert o.delivered_kwh == pytest.approx(o.requested_kwh, abs=1e-6)

    def test_optimized_full_delivery_with_perfect_plant(self):
        scenario = FleetScenario(seed=6, n_vehicles=8)
        baseline = self.flat_baseline()
        plant = EvPlantModel(taper_enabled=False)
        result = run_policy(scenario, "optimized", baseline, plant=plant)
        for o in result.outcomes:
            assert o.status == "completed"
            assert o.delivered_kwh == pytest.approx(o.requested_kwh, abs=1e-4)

    def test_closed_loop_with_noise_and_taper_never_strands_unrepaired(self):
        sessions = [
            sim_session(60 * i, 60 * i + 240, energy=7.0, rate=5.0, vehicle=f"v{i:03d}",
                        pack=40.0, soc=0.75)
            for i in range(4)
        ]
        baseline = LoadProfile(0, np.full(4 * 1440, 50.0))
        plant = EvPlantModel(noise_kw=0.5, noise_mode="symmetric", taper_enabled=True)
        result = run_closed_loop(sessions, baseline, plant=plant, seed=3)
        for o in result.outcomes:
            if o.status == "expired":
                assert o.repaired

    def test_unknown_policy_rejected(self):
        with pytest.raises(ValidationError):
            run_policy(FleetScenario(n_vehicles=0), "greedy", self.flat_baseline())
