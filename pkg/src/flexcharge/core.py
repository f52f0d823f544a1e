"""Shared domain vocabulary: time grid, charging requests, sessions, load profiles.

All power values are kilowatts, all energies kilowatt-hours, and internal time
is an integer period index at one-minute resolution. Hour-valued user inputs
are converted by rounding down to whole periods, which never over-promises
deadline time.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

MINUTES_PER_DAY = 1440
PERIOD_HOURS = 1.0 / 60.0

# Residual at or below this is a completed session; avoids chattering near zero.
COMPLETION_THRESHOLD_KWH = 1e-6
# Slop allowed when checking deliverable-energy feasibility (float division noise).
FEASIBILITY_TOL_KWH = 1e-9


class ValidationError(ValueError):
    """An input violates a documented contract."""


class ProfileAlignmentError(ValidationError):
    """Two load profiles do not cover identical periods."""


@dataclass(frozen=True)
class TimeGrid:
    """Discrete scheduling clock: period length, horizon, wall-clock anchor.

    ``epoch_minute_of_day`` is the minute-of-day at which period index 0
    occurs; it makes period indices convertible to wall-clock minutes, which
    the time-of-use logic needs.
    """

    period_hours: float = PERIOD_HOURS
    horizon_periods: int = MINUTES_PER_DAY
    epoch_minute_of_day: int = 0

    def __post_init__(self) -> None:
        if not (self.period_hours > 0 and math.isfinite(self.period_hours)):
            raise ValidationError(f"period_hours must be positive, got {self.period_hours}")
        if self.horizon_periods < 1:
            raise ValidationError(f"horizon_periods must be >= 1, got {self.horizon_periods}")
        if not 0 <= self.epoch_minute_of_day < MINUTES_PER_DAY:
            raise ValidationError(
                f"epoch_minute_of_day must be in [0, {MINUTES_PER_DAY}), got {self.epoch_minute_of_day}"
            )

    def periods_from_hours(self, hours: float) -> int:
        """Whole periods contained in ``hours``, rounded down."""
        if not math.isfinite(hours) or hours < 0:
            raise ValidationError(f"hours must be finite and non-negative, got {hours}")
        return int(math.floor(hours / self.period_hours + 1e-9))

    def hours_from_periods(self, periods: int) -> float:
        return periods * self.period_hours

    def minute_of_day(self, period: int) -> int:
        return (self.epoch_minute_of_day + period) % MINUTES_PER_DAY


@dataclass(frozen=True)
class ChargingRequest:
    """A customer's charging request: energy, deadline, rate limit, opt-in choice."""

    energy_kwh: float
    deadline_hours: float
    max_rate_kw: float
    opt_in: bool = True
    submitted_at: int = 0

    def __post_init__(self) -> None:
        for name in ("energy_kwh", "deadline_hours", "max_rate_kw"):
            if not math.isfinite(getattr(self, name)):
                raise ValidationError(f"{name} must be finite")
        if self.energy_kwh < 0:
            raise ValidationError(f"energy_kwh must be >= 0, got {self.energy_kwh}")
        if self.deadline_hours < 0:
            raise ValidationError(f"deadline_hours must be >= 0, got {self.deadline_hours}")
        if self.max_rate_kw <= 0:
            raise ValidationError(f"max_rate_kw must be > 0, got {self.max_rate_kw}")

    @property
    def min_charge_hours(self) -> float:
        """Minimum time to deliver the requested energy at full rate."""
        return self.energy_kwh / self.max_rate_kw


@dataclass(frozen=True)
class SocPair:
    """Present and desired state-of-charge plus pack size; yields an energy requirement."""

    present_soc: float
    desired_soc: float
    battery_capacity_kwh: float

    def __post_init__(self) -> None:
        for name in ("present_soc", "desired_soc"):
            value = getattr(self, name)
            if not (0.0 <= value <= 1.0):
                raise ValidationError(f"{name} must be in [0, 1], got {value}")
        if self.battery_capacity_kwh <= 0:
            raise ValidationError("battery_capacity_kwh must be > 0")
        if self.desired_soc < self.present_soc:
            raise ValidationError(
                f"desired_soc {self.desired_soc} below present_soc {self.present_soc}"
            )


def energy_from_soc(soc: SocPair) -> float:
    """Energy requirement implied by a state-of-charge pair, in kWh."""
    return (soc.desired_soc - soc.present_soc) * soc.battery_capacity_kwh


class SessionStatus(str, Enum):
    ACTIVE = "active"
    COMPLETED = "completed"
    EXPIRED = "expired"
    OPTED_OUT = "opted_out"


@dataclass(frozen=True)
class SessionState:
    """Live bookkeeping for one charging session.

    Immutable: updates produce new instances. ``repaired`` is sticky once set.
    """

    session_id: str
    request: ChargingRequest
    residual_energy_kwh: float
    remaining_periods: int
    measured_power_history: tuple[float, ...] = ()
    status: SessionStatus = SessionStatus.ACTIVE
    repaired: bool = False

    def __post_init__(self) -> None:
        if self.residual_energy_kwh < 0:
            raise ValidationError("residual_energy_kwh must be >= 0")
        if self.remaining_periods < 0:
            raise ValidationError("remaining_periods must be >= 0")

    @property
    def managed(self) -> bool:
        """True while the session is actively coordinated (opt-in and not terminal)."""
        return self.request.opt_in and self.status is SessionStatus.ACTIVE

    @property
    def drawing(self) -> bool:
        """True while the vehicle may still draw power (managed or unmanaged)."""
        return (
            self.status in (SessionStatus.ACTIVE, SessionStatus.OPTED_OUT)
            and self.residual_energy_kwh > COMPLETION_THRESHOLD_KWH
        )

    @property
    def delivered_kwh(self) -> float:
        """Energy actually metered, folded from the measurement history.

        Kept separate from the residual requirement: a feasibility repair
        reduces the requirement without delivering anything.
        """
        return sum(self.measured_power_history) * PERIOD_HOURS

    def replay_residual(self, period_hours: float = PERIOD_HOURS) -> float:
        """Fold the measured-power history over the initial request.

        Reproduces the current residual (absent repairs), clamping at zero the
        same way live accounting does.
        """
        residual = self.request.energy_kwh
        for measured in self.measured_power_history:
            residual = max(0.0, residual - measured * period_hours)
        return residual


@dataclass(frozen=True)
class LoadProfile:
    """Minute-resolution kW time series anchored at a period index."""

    start_period: int
    values_kw: np.ndarray

    def __post_init__(self) -> None:
        arr = np.array(self.values_kw, dtype=float, copy=True)
        if arr.ndim != 1:
            raise ValidationError("values_kw must be one-dimensional")
        if arr.size and not np.all(np.isfinite(arr)):
            raise ValidationError("values_kw must be finite")
        if arr.size and np.any(arr < 0):
            raise ValidationError("values_kw must be non-negative")
        arr.flags.writeable = False
        object.__setattr__(self, "values_kw", arr)

    def __len__(self) -> int:
        return int(self.values_kw.size)

    @property
    def end_period(self) -> int:
        """One past the last covered period."""
        return self.start_period + len(self)

    @property
    def peak_kw(self) -> float:
        if len(self) == 0:
            raise ValidationError("empty profile has no peak")
        return float(self.values_kw.max())

    def covers(self, start: int, length: int) -> bool:
        return self.start_period <= start and start + length <= self.end_period

    def window(self, start: int, length: int) -> np.ndarray:
        """Raw kW values over [start, start+length); errors on coverage shortfall."""
        if length < 0:
            raise ValidationError("window length must be >= 0")
        if not self.covers(start, length):
            raise ProfileAlignmentError(
                f"profile covers [{self.start_period}, {self.end_period}), "
                f"requested [{start}, {start + length})"
            )
        offset = start - self.start_period
        return self.values_kw[offset : offset + length]


def add_profiles(a: LoadProfile, b: LoadProfile) -> LoadProfile:
    """Elementwise sum of two profiles covering identical periods."""
    if a.start_period != b.start_period or len(a) != len(b):
        raise ProfileAlignmentError(
            f"cannot add profiles [{a.start_period}, {a.end_period}) "
            f"and [{b.start_period}, {b.end_period})"
        )
    return LoadProfile(a.start_period, a.values_kw + b.values_kw)


def read_daily_profile_csv(path: str | Path) -> LoadProfile:
    """Read a one-day profile: header ``minute_of_day,kw`` and exactly 1440 rows."""
    path = Path(path)
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty profile file") from None
        if [h.strip().lower() for h in header] != ["minute_of_day", "kw"]:
            raise ValidationError(f"{path}: expected header 'minute_of_day,kw', got {header}")
        values = np.zeros(MINUTES_PER_DAY)
        count = 0
        for row in reader:
            if not row:
                continue
            if count >= MINUTES_PER_DAY:
                raise ValidationError(f"{path}: more than {MINUTES_PER_DAY} rows")
            try:
                minute = int(row[0])
                kw = float(row[1])
            except (ValueError, IndexError) as exc:
                raise ValidationError(f"{path}: bad row {row!r}") from exc
            if minute != count:
                raise ValidationError(f"{path}: expected minute {count}, got {minute}")
            values[count] = kw
            count += 1
    if count != MINUTES_PER_DAY:
        raise ValidationError(f"{path}: expected {MINUTES_PER_DAY} rows, got {count}")
    return LoadProfile(0, values)


def write_daily_profile_csv(path: str | Path, profile: LoadProfile) -> None:
    if len(profile) != MINUTES_PER_DAY:
        raise ValidationError(f"daily profile must have {MINUTES_PER_DAY} values")
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["minute_of_day", "kw"])
        for minute, kw in enumerate(profile.values_kw):
            writer.writerow([minute, repr(float(kw))])


def write_profile_csv(path: str | Path, profile: LoadProfile) -> None:
    """Write an arbitrary-length profile with absolute minute indices."""
    with Path(path).open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["minute", "kw"])
        for i, kw in enumerate(profile.values_kw):
            writer.writerow([profile.start_period + i, repr(float(kw))])


def read_profile_csv(path: str | Path) -> LoadProfile:
    """Read a profile written by :func:`write_profile_csv`."""
    path = Path(path)
    with path.open(newline="") as handle:
        reader = csv.reader(handle)
        header = next(reader, None)
        if header is None or [h.strip().lower() for h in header] != ["minute", "kw"]:
            raise ValidationError(f"{path}: expected header 'minute,kw', got {header}")
        minutes: list[int] = []
        values: list[float] = []
        for row in reader:
            if not row:
                continue
            minutes.append(int(row[0]))
            values.append(float(row[1]))
    if not minutes:
        raise ValidationError(f"{path}: no rows")
    start = minutes[0]
    if minutes != list(range(start, start + len(minutes))):
        raise ValidationError(f"{path}: minute column must be consecutive")
    return LoadProfile(start, np.array(values))
