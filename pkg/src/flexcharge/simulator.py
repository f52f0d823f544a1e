"""Closed-loop fleet simulator.

Generates synthetic charging sessions from behavior distributions and replays
the identical session stream under three policies:

* ``unmanaged``: every vehicle draws its maximum rate from plug-in until its
  energy requirement is met.
* ``tou``: opt-in sessions wait for the midnight off-peak boundary when that
  still allows full delivery by departure, then draw at maximum rate; all
  other sessions behave as unmanaged.
* ``optimized``: opt-in sessions are driven by the model-predictive scheduler
  in closed loop through a plant model; opt-out sessions behave as unmanaged
  and appear to the optimizer as part of the inflexible load.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, asdict
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .core import (
    COMPLETION_THRESHOLD_KWH,
    MINUTES_PER_DAY,
    ChargingRequest,
    LoadProfile,
    SessionState,
    SessionStatus,
    TimeGrid,
    ValidationError,
    read_daily_profile_csv,
)
from .scheduler import (
    RateLimits,
    RepairEvent,
    SchedulePlan,
    ingest_measurement,
    mpc_tick,
    repair_request,
    unmanaged_forecast,
)
from .qp import SolverTolerances

POLICIES = ("unmanaged", "tou", "optimized")

DEFAULT_TARGET_PEAK_KW = 120.0


@dataclass(frozen=True)
class ArrivalComponent:
    """One mode of the plug-in time-of-day mixture."""

    weight: float
    mean_hour: float
    std_hours: float


@dataclass(frozen=True)
class OptInModel:
    """Opt-in probability as a function of realized slack: a linear rise from
    a floor to a plateau. A table override wins when present, as a list of
    ``[slack_lo_hours, probability]`` steps."""

    floor: float = 0.1
    slope_per_hour: float = 0.1
    ceiling: float = 0.8
    table: tuple[tuple[float, float], ...] | None = None

    def probability(self, slack_hours: float) -> float:
        if self.table:
            prob = self.table[0][1]
            for lo, p in self.table:
                if slack_hours >= lo:
                    prob = p
            return float(min(max(prob, 0.0), 1.0))
        raw = self.floor + self.slope_per_hour * max(slack_hours, 0.0)
        return float(min(max(raw, self.floor), self.ceiling))


@dataclass(frozen=True)
class EvPlantModel:
    """How a vehicle responds to a power command.

    Tracking noise is off, one-sided (downward), or symmetric; drawn power is
    always inside ``[0, R_i]``, never above the remaining requirement, and
    exactly zero when commanded zero. Near-full packs taper: above the taper
    SOC threshold the drawable power decays linearly toward zero at 100% SOC,
    floored at the minimum pilot rate.
    """

    noise_kw: float = 0.0
    noise_mode: str = "none"  # none | down | symmetric
    taper_enabled: bool = True
    taper_start_soc: float = 0.9
    taper_floor_kw: float = 1.4

    def __post_init__(self) -> None:
        if self.noise_mode not in ("none", "down", "symmetric"):
            raise ValidationError(f"unknown noise_mode {self.noise_mode!r}")
        if self.noise_kw < 0:
            raise ValidationError("noise_kw must be >= 0")
        if not 0.0 < self.taper_start_soc < 1.0:
            raise ValidationError("taper_start_soc must be in (0, 1)")

    def draw(
        self,
        command_kw: float,
        session: SessionState,
        rng: np.random.Generator,
        period_hours: float,
        battery_capacity_kwh: float | None = None,
        initial_soc: float = 0.5,
    ) -> float:
        if command_kw <= 0.0:
            return 0.0
        rate_cap = session.request.max_rate_kw
        if self.taper_enabled and battery_capacity_kwh:
            soc = initial_soc + session.delivered_kwh / battery_capacity_kwh
            if soc >= self.taper_start_soc:
                decayed = (
                    session.request.max_rate_kw
                    * max(1.0 - soc, 0.0)
                    / (1.0 - self.taper_start_soc)
                )
                rate_cap = min(rate_cap, max(self.taper_floor_kw, decayed))
        drawn = min(command_kw, rate_cap)
        if self.noise_kw > 0 and self.noise_mode != "none":
            if self.noise_mode == "down":
                drawn -= rng.uniform(0.0, self.noise_kw)
            else:
                drawn += rng.uniform(-self.noise_kw, self.noise_kw)
        drawn = min(drawn, rate_cap, session.residual_energy_kwh / period_hours)
        return max(drawn, 0.0)


@dataclass(frozen=True)
class FleetScenario:
    """Behavior distributions and knobs for synthetic session generation.

    Functional forms follow the calibration targets: vehicles plug in mostly
    in the early evening, stay connected about 11 hours, actively charge
    about 2 hours, leaving around 9 hours of slack on average.
    """

    n_vehicles: int = 34
    duration_days: int = 1
    seed: int = 0
    arrival_mixture: tuple[ArrivalComponent, ...] = (ArrivalComponent(1.0, 18.0, 1.5),)
    sojourn_mean_hours: float = 11.0
    sojourn_sigma_log: float = 0.25
    min_sojourn_hours: float = 1.0
    max_sojourn_hours: float = 23.5
    charge_mean_hours: float = 2.0
    charge_sigma_log: float = 0.5
    min_energy_kwh: float = 0.5
    # Cap requested energy at this fraction of what the sojourn can deliver;
    # 1.0 permits zero-slack sessions, lower values force flexibility.
    energy_cap_fraction: float = 1.0
    rate_choices_kw: tuple[float, ...] = (3.3, 6.6, 7.2)
    rate_weights: tuple[float, ...] = (0.3, 0.5, 0.2)
    pack_choices_kwh: tuple[float, ...] = (40.0, 60.0, 80.0)
    pack_weights: tuple[float, ...] = (0.3, 0.5, 0.2)
    initial_soc_range: tuple[float, float] = (0.2, 0.8)
    charge_probability: float = 0.8
    opt_in: OptInModel = OptInModel()
    vehicle_rates_kw: tuple[float, ...] | None = None  # explicit per-vehicle override

    def __post_init__(self) -> None:
        if self.n_vehicles < 0:
            raise ValidationError("n_vehicles must be >= 0")
        if self.duration_days < 1:
            raise ValidationError("duration_days must be >= 1")
        if not self.arrival_mixture:
            raise ValidationError("arrival_mixture must be non-empty")
        if abs(sum(c.weight for c in self.arrival_mixture) - 1.0) > 1e-9:
            raise ValidationError("arrival mixture weights must sum to 1")
        if len(self.rate_choices_kw) != len(self.rate_weights):
            raise ValidationError("rate_choices_kw and rate_weights must align")
        if not 0.0 <= self.charge_probability <= 1.0:
            raise ValidationError("charge_probability must be in [0, 1]")
        if not 0.0 < self.energy_cap_fraction <= 1.0:
            raise ValidationError("energy_cap_fraction must be in (0, 1]")
        if self.sojourn_mean_hours <= 0 or self.charge_mean_hours <= 0:
            raise ValidationError("mean hours must be positive")
        if self.max_sojourn_hours > 23.9:
            raise ValidationError("max_sojourn_hours must stay below one day")
        if self.vehicle_rates_kw is not None and len(self.vehicle_rates_kw) != self.n_vehicles:
            raise ValidationError("vehicle_rates_kw must list one rate per vehicle")

    @classmethod
    def from_json(cls, text: str) -> "FleetScenario":
        data = json.loads(text)
        if "arrival_mixture" in data:
            data["arrival_mixture"] = tuple(
                ArrivalComponent(**c) for c in data["arrival_mixture"]
            )
        if "opt_in" in data:
            opt = dict(data["opt_in"])
            if opt.get("table") is not None:
                opt["table"] = tuple((float(lo), float(p)) for lo, p in opt["table"])
            data["opt_in"] = OptInModel(**opt)
        for key in ("rate_choices_kw", "rate_weights", "vehicle_rates_kw"):
            if data.get(key) is not None:
                data[key] = tuple(data[key])
        return cls(**data)

    def to_json(self) -> str:
        data = asdict(self)
        return json.dumps(data, sort_keys=True, indent=2)


@dataclass(frozen=True)
class SimSession:
    """One generated charging session."""

    vehicle_id: str
    plug_in_period: int
    unplug_period: int
    energy_kwh: float
    max_rate_kw: float
    opt_in: bool
    battery_capacity_kwh: float = 60.0
    initial_soc: float = 0.5

    @property
    def sojourn_hours(self) -> float:
        return (self.unplug_period - self.plug_in_period) / 60.0

    @property
    def slack_hours(self) -> float:
        return self.sojourn_hours - self.energy_kwh / self.max_rate_kw


def generate_scenario(scenario: FleetScenario, seed: int | None = None) -> list[SimSession]:
    """Sample the session stream. Identical seed, identical stream."""
    rng = np.random.default_rng(scenario.seed if seed is None else seed)
    if scenario.vehicle_rates_kw is not None:
        rates = np.asarray(scenario.vehicle_rates_kw, dtype=float)
    else:
        rates = rng.choice(
            scenario.rate_choices_kw, size=scenario.n_vehicles, p=scenario.rate_weights
        )
    packs = rng.choice(
        scenario.pack_choices_kwh, size=max(scenario.n_vehicles, 1), p=scenario.pack_weights
    )
    sojourn_mu = math.log(scenario.sojourn_mean_hours) - scenario.sojourn_sigma_log**2 / 2
    charge_mu = math.log(scenario.charge_mean_hours) - scenario.charge_sigma_log**2 / 2
    weights = np.array([c.weight for c in scenario.arrival_mixture])

    sessions: list[SimSession] = []
    busy_until = np.zeros(scenario.n_vehicles, dtype=int)
    for day in range(scenario.duration_days):
        for v in range(scenario.n_vehicles):
            if rng.random() > scenario.charge_probability:
                continue
            component = scenario.arrival_mixture[rng.choice(len(weights), p=weights)]
            arrival_hour = rng.normal(component.mean_hour, component.std_hours)
            arrival_hour = float(np.clip(arrival_hour, 0.0, 23.95))
            plug_in = day * MINUTES_PER_DAY + int(arrival_hour * 60)
            if plug_in < busy_until[v]:
                continue  # previous session still connected
            sojourn = float(
                np.clip(
                    rng.lognormal(sojourn_mu, scenario.sojourn_sigma_log),
                    scenario.min_sojourn_hours,
                    scenario.max_sojourn_hours,
                )
            )
            unplug = plug_in + max(1, int(sojourn * 60))
            rate = float(rates[v])
            pack = float(packs[v])
            charge_hours = rng.lognormal(charge_mu, scenario.charge_sigma_log)
            initial_soc = float(rng.uniform(*scenario.initial_soc_range))
            sojourn_h = (unplug - plug_in) / 60.0
            energy = min(
                charge_hours * rate,
                scenario.energy_cap_fraction * rate * sojourn_h,
                (1.0 - initial_soc) * pack,
            )
            energy = max(energy, scenario.min_energy_kwh)
            energy = min(energy, rate * sojourn_h)  # realized slack >= 0
            slack = sojourn_h - energy / rate
            opt_in = bool(rng.random() < scenario.opt_in.probability(slack))
            busy_until[v] = unplug
            sessions.append(
                SimSession(
                    vehicle_id=f"v{v:03d}",
                    plug_in_period=plug_in,
                    unplug_period=unplug,
                    energy_kwh=float(energy),
                    max_rate_kw=rate,
                    opt_in=opt_in,
                    battery_capacity_kwh=pack,
                    initial_soc=initial_soc,
                )
            )
    sessions.sort(key=lambda s: (s.plug_in_period, s.vehicle_id))
    return sessions


def _fill_full_rate(
    values: np.ndarray, offset: int, energy_kwh: float, rate_kw: float, dt: float
) -> None:
    """Write a max-rate charging block starting at ``offset``; the final minute
    is partial when the energy is not a whole number of periods."""
    if energy_kwh <= 0:
        return
    full = int(math.floor(energy_kwh / (rate_kw * dt) + 1e-9))
    full = min(full, values.size - offset)
    values[offset : offset + full] = rate_kw
    remainder = energy_kwh - full * rate_kw * dt
    if remainder > 1e-9 and offset + full < values.size:
        values[offset + full] = remainder / dt


def unmanaged_profile(session: SimSession, grid: TimeGrid) -> LoadProfile:
    """Full rate from plug-in until the requirement is met; partial last minute."""
    length = session.unplug_period - session.plug_in_period
    values = np.zeros(length)
    _fill_full_rate(values, 0, session.energy_kwh, session.max_rate_kw, grid.period_hours)
    return LoadProfile(session.plug_in_period, values)


def tou_profile(
    session: SimSession, grid: TimeGrid, offpeak_start_minute: int = 0
) -> LoadProfile:
    """Delay to the next off-peak boundary when full delivery still fits before
    departure; otherwise fall back to the unmanaged shape. Opt-out sessions
    are never delayed."""
    if not session.opt_in:
        return unmanaged_profile(session, grid)
    minute = grid.minute_of_day(session.plug_in_period)
    wait = (offpeak_start_minute - minute) % MINUTES_PER_DAY
    start = session.plug_in_period + wait
    available_h = (session.unplug_period - start) * grid.period_hours
    if start >= session.unplug_period or available_h * session.max_rate_kw < (
        session.energy_kwh - 1e-9
    ):
        return unmanaged_profile(session, grid)
    length = session.unplug_period - session.plug_in_period
    values = np.zeros(length)
    offset = start - session.plug_in_period
    _fill_full_rate(values, offset, session.energy_kwh, session.max_rate_kw, grid.period_hours)
    return LoadProfile(session.plug_in_period, values)


@dataclass(frozen=True)
class SessionOutcome:
    session_id: str
    vehicle_id: str
    opt_in: bool
    plug_in_period: int
    unplug_period: int
    requested_kwh: float
    delivered_kwh: float
    max_rate_kw: float
    status: str
    repaired: bool
    realized_slack_hours: float

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PolicyRunResult:
    policy: str
    baseline: LoadProfile
    aggregate: LoadProfile
    ev_load: LoadProfile
    per_vehicle: dict[str, LoadProfile]
    outcomes: tuple[SessionOutcome, ...]
    repair_events: tuple[RepairEvent, ...]


def load_baseline(
    csv_path: str | Path, target_peak_kw: float = DEFAULT_TARGET_PEAK_KW, days: int = 1
) -> LoadProfile:
    """Load a one-day baseline CSV, rescale its peak, and tile it over ``days``."""
    daily = read_daily_profile_csv(csv_path)
    peak = daily.peak_kw
    if peak <= 0:
        raise ValidationError(f"{csv_path}: baseline peak must be positive")
    if target_peak_kw <= 0:
        raise ValidationError("target_peak_kw must be positive")
    values = daily.values_kw * (target_peak_kw / peak)
    return LoadProfile(0, np.tile(values, days))


def default_baseline_path() -> Path:
    """Packaged one-day baseline shape (residential circuit, winter weekday)."""
    return Path(resources.files("flexcharge.data") / "baseline_day.csv")


def _simulation_span(scenario: FleetScenario) -> int:
    return (scenario.duration_days + 1) * MINUTES_PER_DAY


def _tiled_baseline(baseline: LoadProfile, needed: int) -> np.ndarray:
    if len(baseline) >= needed and baseline.start_period == 0:
        return baseline.values_kw[:needed]
    if len(baseline) % MINUTES_PER_DAY != 0 or baseline.start_period != 0:
        raise ValidationError(
            "baseline must start at period 0 and cover whole days for tiling"
        )
    reps = int(np.ceil(needed / len(baseline)))
    return np.tile(baseline.values_kw, reps)[:needed]


def _open_loop_run(
    policy: str,
    scenario: FleetScenario,
    sessions: Sequence[SimSession],
    base: np.ndarray,
    grid: TimeGrid,
    span: int,
) -> PolicyRunResult:
    per_vehicle: dict[str, np.ndarray] = {}
    outcomes = []
    for idx, sim in enumerate(sessions):
        if policy == "unmanaged":
            profile = unmanaged_profile(sim, grid)
        else:
            profile = tou_profile(sim, grid)
        lane = per_vehicle.setdefault(sim.vehicle_id, np.zeros(span))
        lane[sim.plug_in_period : sim.plug_in_period + len(profile)] += profile.values_kw
        delivered = float(profile.values_kw.sum()) * grid.period_hours
        outcomes.append(
            SessionOutcome(
                session_id=f"s{idx:04d}",
                vehicle_id=sim.vehicle_id,
                opt_in=sim.opt_in,
                plug_in_period=sim.plug_in_period,
                unplug_period=sim.unplug_period,
                requested_kwh=sim.energy_kwh,
                delivered_kwh=delivered,
                max_rate_kw=sim.max_rate_kw,
                status=SessionStatus.COMPLETED.value,
                repaired=False,
                realized_slack_hours=sim.sojourn_hours - delivered / sim.max_rate_kw,
            )
        )
    ev_total = np.zeros(span)
    for lane in per_vehicle.values():
        ev_total += lane
    return PolicyRunResult(
        policy=policy,
        baseline=LoadProfile(0, base[:span]),
        aggregate=LoadProfile(0, base[:span] + ev_total),
        ev_load=LoadProfile(0, ev_total),
        per_vehicle={v: LoadProfile(0, lane) for v, lane in per_vehicle.items()},
        outcomes=tuple(outcomes),
        repair_events=(),
    )


def _closed_loop_run(
    seed: int,
    sessions: Sequence[SimSession],
    base: np.ndarray,
    grid: TimeGrid,
    span: int,
    plant: EvPlantModel,
    limits: RateLimits,
    tolerances: SolverTolerances,
) -> PolicyRunResult:
    rng = np.random.default_rng(seed + 1)
    per_vehicle: dict[str, np.ndarray] = {s.vehicle_id: np.zeros(span) for s in sessions}
    arrivals = list(sessions)
    active: dict[str, SessionState] = {}
    vehicle_of: dict[str, str] = {}
    sim_of: dict[str, SimSession] = {}
    finished: list[SessionState] = []
    repair_log: list[RepairEvent] = []
    repaired_ids: set[str] = set()
    previous_plan: SchedulePlan | None = None
    next_arrival = 0

    for t in range(span):
        while next_arrival < len(arrivals) and arrivals[next_arrival].plug_in_period == t:
            sim = arrivals[next_arrival]
            sid = f"s{next_arrival:04d}"
            request = ChargingRequest(
                energy_kwh=sim.energy_kwh,
                deadline_hours=(sim.unplug_period - sim.plug_in_period) * grid.period_hours,
                max_rate_kw=sim.max_rate_kw,
                opt_in=sim.opt_in,
                submitted_at=t,
            )
            active[sid] = SessionState(
                session_id=sid,
                request=request,
                residual_energy_kwh=sim.energy_kwh,
                remaining_periods=sim.unplug_period - sim.plug_in_period,
            )
            vehicle_of[sid] = sim.vehicle_id
            sim_of[sid] = sim
            next_arrival += 1

        if not active:
            if next_arrival >= len(arrivals):
                break
            continue

        has_managed = any(s.managed for s in active.values())
        commands: dict[str, float] = {}
        if not has_managed:
            previous_plan = None
        else:
            window = LoadProfile(t, base[t : t + grid.horizon_periods])
            forecast = unmanaged_forecast(active.values(), grid, t)
            warm = None
            if previous_plan is not None:
                warm = {
                    sid: rates[1:]
                    for sid, rates in previous_plan.rates_kw.items()
                    if sid in active
                }
            result = mpc_tick(
                active,
                window,
                forecast,
                grid,
                limits=limits,
                tolerances=tolerances,
                now_period=t,
                previous_plan=previous_plan,
                warm_start=warm,
            )
            for state in result.repaired:
                active[state.session_id] = state
                repaired_ids.add(state.session_id)
            repair_log.extend(result.repair_events)
            previous_plan = result.plan
            commands = result.commands_kw

        for sid in sorted(active):
            state = active[sid]
            if state.managed:
                sim = sim_of[sid]
                drawn = plant.draw(
                    commands.get(sid, 0.0),
                    state,
                    rng,
                    grid.period_hours,
                    battery_capacity_kwh=sim.battery_capacity_kwh,
                    initial_soc=sim.initial_soc,
                )
            elif state.drawing:
                drawn = min(
                    state.request.max_rate_kw,
                    state.residual_energy_kwh / grid.period_hours,
                )
            else:
                drawn = 0.0
            per_vehicle[vehicle_of[sid]][t] += drawn
            updated = ingest_measurement(state, drawn, grid)
            if (
                updated.status is SessionStatus.EXPIRED
                and updated.residual_energy_kwh > COMPLETION_THRESHOLD_KWH
            ):
                # Out of time with energy still owed: clamp the requirement
                # to what remains deliverable (nothing) via the repair path.
                updated, event = repair_request(updated, grid, period=t)
                repair_log.append(event)
                repaired_ids.add(sid)
            active[sid] = updated

        for sid in list(active):
            state = active[sid]
            done = state.status in (SessionStatus.COMPLETED, SessionStatus.EXPIRED)
            unplugged = t + 1 >= sim_of[sid].unplug_period
            if done or unplugged:
                finished.append(state)
                del active[sid]

    finished.extend(active.values())
    outcomes = []
    for state in sorted(finished, key=lambda s: s.session_id):
        sim = sim_of[state.session_id]
        delivered = state.delivered_kwh
        outcomes.append(
            SessionOutcome(
                session_id=state.session_id,
                vehicle_id=vehicle_of[state.session_id],
                opt_in=sim.opt_in,
                plug_in_period=sim.plug_in_period,
                unplug_period=sim.unplug_period,
                requested_kwh=sim.energy_kwh,
                delivered_kwh=delivered,
                max_rate_kw=sim.max_rate_kw,
                status=state.status.value,
                repaired=state.repaired or state.session_id in repaired_ids,
                realized_slack_hours=sim.sojourn_hours - delivered / sim.max_rate_kw,
            )
        )
    ev_total = np.zeros(span)
    for lane in per_vehicle.values():
        ev_total += lane
    return PolicyRunResult(
        policy="optimized",
        baseline=LoadProfile(0, base[:span]),
        aggregate=LoadProfile(0, base[:span] + ev_total),
        ev_load=LoadProfile(0, ev_total),
        per_vehicle={v: LoadProfile(0, lane) for v, lane in per_vehicle.items()},
        outcomes=tuple(outcomes),
        repair_events=tuple(repair_log),
    )


def run_policy(
    scenario: FleetScenario,
    policy: str,
    baseline: LoadProfile,
    grid: TimeGrid | None = None,
    plant: EvPlantModel | None = None,
    limits: RateLimits | None = None,
    tolerances: SolverTolerances | None = None,
) -> PolicyRunResult:
    """Run one policy over the scenario's session stream.

    All policies regenerate the identical stream from the scenario seed, so
    per-seed results are paired across policies.
    """
    if policy not in POLICIES:
        raise ValidationError(f"policy must be one of {POLICIES}, got {policy!r}")
    grid = grid or TimeGrid()
    plant = plant or EvPlantModel()
    limits = limits or RateLimits()
    tolerances = tolerances or SolverTolerances()
    span = _simulation_span(scenario)
    base = _tiled_baseline(baseline, span + grid.horizon_periods)
    sessions = generate_scenario(scenario)
    if policy in ("unmanaged", "tou"):
        return _open_loop_run(policy, scenario, sessions, base, grid, span)
    return _closed_loop_run(
        scenario.seed, sessions, base, grid, span, plant, limits, tolerances
    )


def run_closed_loop(
    sessions: Sequence[SimSession],
    baseline: LoadProfile,
    grid: TimeGrid | None = None,
    plant: EvPlantModel | None = None,
    limits: RateLimits | None = None,
    tolerances: SolverTolerances | None = None,
    seed: int = 0,
) -> PolicyRunResult:
    """Drive an explicit session list through the scheduler in closed loop.

    Lower-level companion to :func:`run_policy` for constructed scenarios:
    the caller supplies the sessions instead of sampling them.
    """
    grid = grid or TimeGrid()
    plant = plant or EvPlantModel()
    limits = limits or RateLimits()
    tolerances = tolerances or SolverTolerances()
    ordered = sorted(sessions, key=lambda s: (s.plug_in_period, s.vehicle_id))
    span = max((s.unplug_period for s in ordered), default=0) + 1
    base = _tiled_baseline(baseline, span + grid.horizon_periods)
    return _closed_loop_run(seed, ordered, base, grid, span, plant, limits, tolerances)


def run_all_policies(
    scenario: FleetScenario,
    baseline: LoadProfile,
    grid: TimeGrid | None = None,
    plant: EvPlantModel | None = None,
) -> dict[str, PolicyRunResult]:
    return {p: run_policy(scenario, p, baseline, grid=grid, plant=plant) for p in POLICIES}
