import math

import numpy as np
import pytest

from flexcharge.core import (
    ChargingRequest,
    LoadProfile,
    ProfileAlignmentError,
    SessionState,
    SocPair,
    TimeGrid,
    ValidationError,
    add_profiles,
    energy_from_soc,
    read_daily_profile_csv,
    write_daily_profile_csv,
)


class TestEnergyFromSoc:
    def test_partial_range(self):
        assert energy_from_soc(SocPair(0.4, 0.9, 40.0)) == pytest.approx(20.0)

    def test_identity(self):
        assert energy_from_soc(SocPair(0.5, 0.5, 60.0)) == 0.0

    def test_full_range(self):
        assert energy_from_soc(SocPair(0.0, 1.0, 24.0)) == pytest.approx(24.0)

    def test_desired_below_present_rejected(self):
        with pytest.raises(ValidationError):
            SocPair(0.9, 0.4, 40.0)

    def test_soc_bounds(self):
        with pytest.raises(ValidationError):
            SocPair(-0.1, 0.5, 40.0)
        with pytest.raises(ValidationError):
            SocPair(0.1, 1.5, 40.0)


class TestProfiles:
    def test_elementwise_sum(self):
        a = LoadProfile(0, np.array([1.0, 2.0, 3.0]))
        b = LoadProfile(0, np.array([4.0, 5.0, 6.0]))
        assert add_profiles(a, b).values_kw.tolist() == [5.0, 7.0, 9.0]

    def test_zero_identity(self):
        p = LoadProfile(5, np.array([1.0, 2.0]))
        z = LoadProfile(5, np.zeros(2))
        assert add_profiles(p, z).values_kw.tolist() == [1.0, 2.0]

    def test_length_mismatch_is_error(self):
        a = LoadProfile(0, np.zeros(3))
        b = LoadProfile(0, np.zeros(4))
        with pytest.raises(ProfileAlignmentError):
            add_profiles(a, b)

    def test_start_mismatch_is_error(self):
        a = LoadProfile(0, np.zeros(3))
        b = LoadProfile(1, np.zeros(3))
        with pytest.raises(ProfileAlignmentError):
            add_profiles(a, b)

    def test_negative_values_rejected(self):
        with pytest.raises(ValidationError):
            LoadProfile(0, np.array([1.0, -0.1]))

    def test_nan_rejected(self):
        with pytest.raises(ValidationError):
            LoadProfile(0, np.array([1.0, float("nan")]))

    def test_window_coverage(self):
        p = LoadProfile(10, np.arange(5, dtype=float))
        assert p.window(11, 3).tolist() == [1.0, 2.0, 3.0]
        with pytest.raises(ProfileAlignmentError):
            p.window(13, 3)

    def test_values_immutable(self):
        p = LoadProfile(0, np.array([1.0]))
        with pytest.raises(ValueError):
            p.values_kw[0] = 2.0


class TestTimeGrid:
    def test_floor_conversion(self):
        grid = TimeGrid()
        assert grid.periods_from_hours(10.0) == 600
        assert grid.periods_from_hours(0.99 / 60) == 0
        assert grid.periods_from_hours(1.5) == 90

    def test_conversion_is_floor_not_round(self):
        grid = TimeGrid()
        assert grid.periods_from_hours(1.9999 / 60) == 1

    def test_minute_of_day_bijection_over_run(self):
        grid = TimeGrid(epoch_minute_of_day=300)
        seen = [grid.minute_of_day(p) for p in range(1440)]
        assert sorted(seen) == list(range(1440))

    def test_invariants(self):
        with pytest.raises(ValidationError):
            TimeGrid(period_hours=0.0)
        with pytest.raises(ValidationError):
            TimeGrid(horizon_periods=0)

    def test_negative_hours_rejected(self):
        with pytest.raises(ValidationError):
            TimeGrid().periods_from_hours(-1.0)


class TestChargingRequest:
    def test_invariants(self):
        with pytest.raises(ValidationError):
            ChargingRequest(energy_kwh=-1.0, deadline_hours=1.0, max_rate_kw=5.0)
        with pytest.raises(ValidationError):
            ChargingRequest(energy_kwh=1.0, deadline_hours=1.0, max_rate_kw=0.0)
        with pytest.raises(ValidationError):
            ChargingRequest(
                energy_kwh=float("inf"), deadline_hours=1.0, max_rate_kw=5.0
            )

    def test_admitted_managed_request_has_nonnegative_slack(self):
        # slack sign check for a batch of admitted-shaped requests
        rng = np.random.default_rng(0)
        for _ in range(200):
            rate = rng.uniform(1.5, 8.0)
            energy = rng.uniform(0.0, 20.0)
            slack = rng.uniform(0.0, 12.0)
            req = ChargingRequest(
                energy_kwh=energy,
                deadline_hours=energy / rate + slack,
                max_rate_kw=rate,
            )
            assert req.deadline_hours - req.energy_kwh / req.max_rate_kw >= 0.0


class TestSessionReplay:
    def test_history_fold_reproduces_residual(self):
        rng = np.random.default_rng(7)
        for _ in range(100):
            energy = rng.uniform(0.0, 10.0)
            request = ChargingRequest(
                energy_kwh=energy, deadline_hours=6.0, max_rate_kw=7.2
            )
            history = []
            residual = energy
            for _ in range(rng.integers(0, 50)):
                drawn = rng.uniform(0.0, 7.2)
                history.append(drawn)
                residual = max(0.0, residual - drawn / 60.0)
            state = SessionState(
                session_id="s",
                request=request,
                residual_energy_kwh=residual,
                remaining_periods=10,
                measured_power_history=tuple(history),
            )
            assert state.replay_residual() == pytest.approx(residual, abs=1e-9)


class TestCsv:
    def test_round_trip(self, tmp_path):
        values = np.linspace(1.0, 100.0, 1440)
        profile = LoadProfile(0, values)
        path = tmp_path / "day.csv"
        write_daily_profile_csv(path, profile)
        back = read_daily_profile_csv(path)
        assert np.array_equal(back.values_kw, values)

    def test_header_required(self, tmp_path):
        path = tmp_path / "bad.csv"
        path.write_text("0,1.0\n")
        with pytest.raises(ValidationError):
            read_daily_profile_csv(path)

    def test_row_count_enforced(self, tmp_path):
        path = tmp_path / "short.csv"
        path.write_text("minute_of_day,kw\n" + "\n".join(f"{m},1.0" for m in range(10)))
        with pytest.raises(ValidationError):
            read_daily_profile_csv(path)
