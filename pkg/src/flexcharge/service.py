"""Coordination service: session lifecycle over a wire API plus the tick loop.

One logical writer: every mutation (vehicle registry, submissions, opt-outs,
telemetry, the tick itself) runs under a single lock, and API reads observe
the state as of the last completed tick. Submissions and opt-outs received
between ticks take effect at the next tick boundary; telemetry for period
``t`` is folded in at the start of tick ``t+1``.

Every externally supplied event and every tick is appended to a JSON-lines
event log. Replaying the log through the same code path reproduces the run
exactly: telemetry comes from the recorded events rather than the simulated
plant, and everything else is recomputed.

Simulation mode and live mode share this code path; in simulation mode the
service's plant posts perfect-tracking telemetry automatically.
"""

from __future__ import annotations

import dataclasses
import json
import math
import os
import threading
import time
from dataclasses import dataclass, field
from decimal import Decimal
from pathlib import Path
from typing import Any, Iterable

import numpy as np

from .core import (
    COMPLETION_THRESHOLD_KWH,
    MINUTES_PER_DAY,
    ChargingRequest,
    LoadProfile,
    SessionState,
    SessionStatus,
    SocPair,
    TimeGrid,
    ValidationError,
    energy_from_soc,
    read_daily_profile_csv,
)
from .pricing import DiscountSchedule, compute_slack, price_menu, session_discount
from .qp import SolverTolerances
from .scheduler import (
    RateLimits,
    SchedulePlan,
    ingest_measurement,
    mpc_tick,
    repair_request,
    unmanaged_forecast,
)
from .simulator import default_baseline_path, load_baseline


class ServiceError(Exception):
    status_code = 400

    def __init__(self, message: str, payload: dict | None = None):
        super().__init__(message)
        self.payload = payload or {}


class NotFoundError(ServiceError):
    status_code = 404


class ConflictError(ServiceError):
    status_code = 409


class RejectedError(ServiceError):
    status_code = 422


class UnauthorizedError(ServiceError):
    status_code = 401


@dataclass(frozen=True)
class VehicleProfile:
    vehicle_id: str
    max_rate_kw: float
    battery_capacity_kwh: float
    default_deadline_hours: float | None = None
    default_desired_soc: float | None = None


@dataclass
class ServiceConfig:
    min_nonzero_rate_kw: float = 1.4
    max_discount_per_kwh: str = "0.043"
    max_rewarded_slack_hours: float = 10.0
    horizon_periods: int = MINUTES_PER_DAY
    epoch_minute_of_day: int = 0
    baseline_csv: str | None = None  # None -> packaged default shape
    baseline_target_peak_kw: float = 120.0
    simulation_mode: bool = True
    admin_token: str = "change-me"
    opt_out_forfeits_discount: bool = True
    clock_mode: str = "step"  # step | realtime | accelerated
    clock_factor: float = 1.0

    @classmethod
    def from_file(cls, path: str | Path) -> "ServiceConfig":
        data = json.loads(Path(path).read_text())
        return cls(**data)

    def apply_env(self, environ: dict | None = None) -> "ServiceConfig":
        env = os.environ if environ is None else environ
        mapping = {
            "FLEXCHARGE_R_MIN": ("min_nonzero_rate_kw", float),
            "FLEXCHARGE_P_MAX": ("max_discount_per_kwh", str),
            "FLEXCHARGE_S_MAX": ("max_rewarded_slack_hours", float),
            "FLEXCHARGE_HORIZON": ("horizon_periods", int),
            "FLEXCHARGE_BASELINE": ("baseline_csv", str),
            "FLEXCHARGE_CLOCK": ("clock_mode", str),
            "FLEXCHARGE_ADMIN_TOKEN": ("admin_token", str),
        }
        out = dataclasses.replace(self)
        for key, (attr, cast) in mapping.items():
            if key in env:
                setattr(out, attr, cast(env[key]))
        return out


def _quantize_money(value: Decimal) -> str:
    return str(value)


class CoordinationService:
    """State machine behind the API. All public methods are thread-safe."""

    def __init__(
        self,
        config: ServiceConfig | None = None,
        baseline: LoadProfile | None = None,
        log_path: str | Path | None = None,
        replay_mode: bool = False,
    ):
        self.config = config or ServiceConfig()
        self.grid = TimeGrid(
            horizon_periods=self.config.horizon_periods,
            epoch_minute_of_day=self.config.epoch_minute_of_day,
        )
        self.limits = RateLimits(self.config.min_nonzero_rate_kw)
        self.schedule = DiscountSchedule(
            Decimal(self.config.max_discount_per_kwh),
            self.config.max_rewarded_slack_hours,
        )
        self.tolerances = SolverTolerances()
        if baseline is None:
            path = self.config.baseline_csv or default_baseline_path()
            baseline = load_baseline(path, self.config.baseline_target_peak_kw, days=1)
        if len(baseline) % MINUTES_PER_DAY != 0 or baseline.start_period != 0:
            raise ValidationError("service baseline must be whole days starting at period 0")
        self._baseline_day = baseline.values_kw[:MINUTES_PER_DAY]
        self._replay_mode = replay_mode

        self._lock = threading.RLock()
        self.period = 0
        self.sessions: dict[str, SessionState] = {}
        self.vehicles: dict[str, VehicleProfile] = {}
        self._session_seq = 0
        self._session_vehicle: dict[str, str] = {}
        self._quotes: dict[str, dict] = {}
        self._commands: dict[str, float] = {}
        self._pending_optout: set[str] = set()
        self._pending_telemetry: dict[str, tuple[int, float]] = {}
        self._awaiting: dict[str, int] = {}
        self._was_managed: dict[str, bool] = {}
        self._prev_plan: SchedulePlan | None = None
        self._realized_total: list[float] = []
        self._realized_managed: list[float] = []
        self._realized_unmanaged: list[float] = []
        self._tick_meta: list[dict] = []
        self.events: list[dict] = []
        self._log_handle = None
        if log_path is not None:
            self._log_handle = Path(log_path).open("a")
        self._clock_thread: threading.Thread | None = None
        self._clock_stop = threading.Event()
        self._log(
            {
                "type": "config",
                "min_nonzero_rate_kw": self.config.min_nonzero_rate_kw,
                "max_discount_per_kwh": self.config.max_discount_per_kwh,
                "max_rewarded_slack_hours": self.config.max_rewarded_slack_hours,
                "horizon_periods": self.config.horizon_periods,
                "epoch_minute_of_day": self.config.epoch_minute_of_day,
                "baseline_day_kw": [float(v) for v in self._baseline_day],
                "simulation_mode": self.config.simulation_mode,
            }
        )

    # ------------------------------------------------------------------ log

    def _log(self, event: dict) -> None:
        self.events.append(event)
        if self._log_handle is not None:
            self._log_handle.write(json.dumps(event, sort_keys=True) + "\n")
            self._log_handle.flush()

    # ------------------------------------------------------------ vehicles

    def register_vehicle(
        self,
        vehicle_id: str,
        max_rate_kw: float,
        battery_capacity_kwh: float,
        default_deadline_hours: float | None = None,
        default_desired_soc: float | None = None,
        _log: bool = True,
    ) -> dict:
        with self._lock:
            if max_rate_kw < self.limits.min_nonzero_rate_kw:
                raise ValidationError(
                    f"max_rate_kw must be at least {self.limits.min_nonzero_rate_kw} kW"
                )
            if battery_capacity_kwh <= 0:
                raise ValidationError("battery_capacity_kwh must be positive")
            profile = VehicleProfile(
                vehicle_id,
                max_rate_kw,
                battery_capacity_kwh,
                default_deadline_hours,
                default_desired_soc,
            )
            self.vehicles[vehicle_id] = profile
            if _log:
                self._log(
                    {
                        "type": "register_vehicle",
                        "period": self.period,
                        "vehicle_id": vehicle_id,
                        "max_rate_kw": max_rate_kw,
                        "battery_capacity_kwh": battery_capacity_kwh,
                        "default_deadline_hours": default_deadline_hours,
                        "default_desired_soc": default_desired_soc,
                    }
                )
            return dataclasses.asdict(profile)

    def list_vehicles(self) -> list[dict]:
        with self._lock:
            return [dataclasses.asdict(v) for v in self.vehicles.values()]

    # ------------------------------------------------------------ sessions

    def _active_session_for(self, vehicle_id: str) -> str | None:
        for sid, session in self.sessions.items():
            if self._session_vehicle[sid] != vehicle_id:
                continue
            if session.status is SessionStatus.ACTIVE or (
                session.status is SessionStatus.OPTED_OUT and session.drawing
            ):
                return sid
        return None

    def submit_request(
        self,
        vehicle_id: str,
        opt_in: bool,
        energy_kwh: float | None = None,
        present_soc: float | None = None,
        desired_soc: float | None = None,
        deadline_hours: float | None = None,
        deadline_minute_of_day: int | None = None,
        session_id: str | None = None,
        _log: bool = True,
    ) -> dict:
        with self._lock:
            vehicle = self.vehicles.get(vehicle_id)
            if vehicle is None:
                raise NotFoundError(f"vehicle {vehicle_id!r} is not registered")
            existing = self._active_session_for(vehicle_id)
            if existing is not None:
                raise ConflictError(
                    f"vehicle {vehicle_id!r} already has active session {existing}",
                    {"active_session_id": existing},
                )
            if energy_kwh is None:
                if present_soc is None or desired_soc is None:
                    raise ValidationError("provide energy_kwh or both SOC values")
                soc = SocPair(present_soc, desired_soc, vehicle.battery_capacity_kwh)
                energy_kwh = energy_from_soc(soc)
            if deadline_hours is None:
                if deadline_minute_of_day is not None:
                    now_minute = self.grid.minute_of_day(self.period)
                    delta = (deadline_minute_of_day - now_minute) % MINUTES_PER_DAY
                    if delta == 0:
                        delta = MINUTES_PER_DAY
                    deadline_hours = delta / 60.0
                elif vehicle.default_deadline_hours is not None:
                    deadline_hours = vehicle.default_deadline_hours
                else:
                    raise ValidationError("provide deadline_hours or deadline_minute_of_day")

            request = ChargingRequest(
                energy_kwh=energy_kwh,
                deadline_hours=deadline_hours,
                max_rate_kw=vehicle.max_rate_kw,
                opt_in=opt_in,
                submitted_at=self.period,
            )
            remaining = self.grid.periods_from_hours(deadline_hours)
            deliverable = remaining * self.grid.period_hours * vehicle.max_rate_kw
            quoted = Decimal("0")
            if opt_in:
                slack = compute_slack(request)
                if slack < 0 or energy_kwh > deliverable + 1e-9:
                    min_periods = math.ceil(
                        energy_kwh / (vehicle.max_rate_kw * self.grid.period_hours) - 1e-9
                    )
                    raise RejectedError(
                        "negative slack: deadline too tight for requested energy",
                        {
                            "min_feasible_deadline_hours": min_periods
                            * self.grid.period_hours
                        },
                    )
                quoted = session_discount(request, self.schedule)

            if session_id is None:
                session_id = f"s{self._session_seq:06d}"
            self._session_seq += 1
            state = SessionState(
                session_id=session_id,
                request=request,
                residual_energy_kwh=energy_kwh,
                remaining_periods=remaining,
            )
            self.sessions[session_id] = state
            self._session_vehicle[session_id] = vehicle_id
            self._quotes[session_id] = {
                "quoted_discount_usd": _quantize_money(quoted),
                "forfeited": False,
            }
            if _log:
                self._log(
                    {
                        "type": "submit",
                        "period": self.period,
                        "session_id": session_id,
                        "vehicle_id": vehicle_id,
                        "energy_kwh": energy_kwh,
                        "deadline_hours": deadline_hours,
                        "opt_in": opt_in,
                    }
                )
            return self._record(session_id)

    def opt_out(self, session_id: str, _log: bool = True) -> dict:
        with self._lock:
            session = self.sessions.get(session_id)
            if session is None:
                raise NotFoundError(f"unknown session {session_id!r}")
            if session.status in (SessionStatus.COMPLETED, SessionStatus.EXPIRED):
                raise ConflictError(f"session {session_id} already {session.status.value}")
            if session.status is SessionStatus.OPTED_OUT or session_id in self._pending_optout:
                return self._record(session_id)  # idempotent
            if not session.request.opt_in:
                raise ConflictError(f"session {session_id} is already unmanaged")
            self._pending_optout.add(session_id)
            if _log:
                self._log(
                    {"type": "opt_out", "period": self.period, "session_id": session_id}
                )
            return self._record(session_id)

    def post_telemetry(
        self, session_id: str, period: int, measured_kw: float, _log: bool = True
    ) -> dict:
        with self._lock:
            if measured_kw < 0 or not math.isfinite(measured_kw):
                raise ValidationError("measured_kw must be finite and >= 0")
            if session_id not in self.sessions:
                raise NotFoundError(f"unknown session {session_id!r}")
            expected = self.period - 1
            if period != expected:
                raise RejectedError(
                    "stale or early telemetry", {"expected_period": expected}
                )
            self._pending_telemetry[session_id] = (period, float(measured_kw))
            if _log:
                self._log(
                    {
                        "type": "telemetry",
                        "period": period,
                        "session_id": session_id,
                        "measured_kw": float(measured_kw),
                    }
                )
            return {"ok": True, "period": period}

    # ------------------------------------------------------------- queries

    def _record(self, session_id: str) -> dict:
        session = self.sessions[session_id]
        quote = self._quotes[session_id]
        return {
            "session_id": session_id,
            "vehicle_id": self._session_vehicle[session_id],
            "request": {
                "energy_kwh": session.request.energy_kwh,
                "deadline_hours": session.request.deadline_hours,
                "max_rate_kw": session.request.max_rate_kw,
                "opt_in": session.request.opt_in,
                "submitted_at": session.request.submitted_at,
            },
            "quoted_discount_usd": quote["quoted_discount_usd"],
            "discount_forfeited": quote["forfeited"],
            "status": session.status.value,
            "repaired": session.repaired,
            "energy_delivered_kwh": session.delivered_kwh,
            "residual_kwh": session.residual_energy_kwh,
            "elapsed_periods": len(session.measured_power_history),
            "remaining_periods": session.remaining_periods,
            "current_command_kw": self._commands.get(session_id, 0.0),
            "opt_out_pending": session_id in self._pending_optout,
        }

    def get_status(self, session_id: str) -> dict:
        with self._lock:
            if session_id not in self.sessions:
                raise NotFoundError(f"unknown session {session_id!r}")
            return self._record(session_id)

    def list_sessions(self, status: str | None = None) -> list[dict]:
        with self._lock:
            records = [self._record(sid) for sid in sorted(self.sessions)]
            if status is not None:
                records = [r for r in records if r["status"] == status]
            return records

    def get_aggregate(self, start: int = 0, length: int | None = None) -> dict:
        """Realized load over fully measured periods, split by management."""
        with self._lock:
            available = len(self._realized_total)
            if length is None:
                length = available - start
            end = min(start + max(length, 0), available)
            start = min(max(start, 0), available)
            idx = np.arange(start, end)
            baseline = [float(self._baseline_minute(p)) for p in idx]
            total = self._realized_total[start:end]
            managed = self._realized_managed[start:end]
            unmanaged = self._realized_unmanaged[start:end]
            return {
                "start_period": start,
                "baseline_kw": baseline,
                "aggregate_kw": [b + t for b, t in zip(baseline, total)],
                "managed_ev_kw": managed,
                "unmanaged_ev_kw": unmanaged,
                "baseline_peak_kw": float(self._baseline_day.max()),
            }

    def price_menu_quote(
        self, energy_kwh: float, max_rate_kw: float, deadlines: Iterable[float]
    ) -> dict:
        rows = price_menu(energy_kwh, max_rate_kw, list(deadlines), self.schedule)
        min_periods = math.ceil(
            energy_kwh / (max_rate_kw * self.grid.period_hours) - 1e-9
        )
        return {
            "rows": [r.to_dict() for r in rows],
            "min_feasible_deadline_hours": min_periods * self.grid.period_hours,
        }

    def health(self) -> dict:
        with self._lock:
            last = self._tick_meta[-1] if self._tick_meta else None
            return {
                "period": self.period,
                "minute_of_day": self.grid.minute_of_day(self.period),
                "sessions": len(self.sessions),
                "active_sessions": sum(
                    1 for s in self.sessions.values() if s.status is SessionStatus.ACTIVE
                ),
                "last_tick": last,
            }

    # ---------------------------------------------------------------- tick

    def _baseline_minute(self, period: int) -> float:
        return self._baseline_day[self.grid.minute_of_day(period)]

    def _baseline_window(self, start: int) -> LoadProfile:
        minutes = (self.grid.epoch_minute_of_day + start + np.arange(self.grid.horizon_periods)) % MINUTES_PER_DAY
        return LoadProfile(start, self._baseline_day[minutes])

    def tick(self, steps: int = 1) -> list[dict]:
        """Advance the loop by ``steps`` periods. Returns tick summaries."""
        summaries = []
        for _ in range(steps):
            with self._lock:
                summaries.append(self._tick_locked())
        return summaries

    def _tick_locked(self) -> dict:
        now = self.period

        for sid in sorted(self._pending_optout):
            session = self.sessions.get(sid)
            if session is not None and session.status is SessionStatus.ACTIVE:
                self.sessions[sid] = dataclasses.replace(
                    session, status=SessionStatus.OPTED_OUT
                )
                if self.config.opt_out_forfeits_discount:
                    self._quotes[sid]["forfeited"] = True
        self._pending_optout.clear()

        expiry_repairs = []
        if self._awaiting:
            total = managed_kw = unmanaged_kw = 0.0
            for sid in sorted(self._awaiting):
                pending = self._pending_telemetry.pop(sid, None)
                measured = pending[1] if pending is not None else 0.0
                state = self.sessions[sid]
                updated = ingest_measurement(state, measured, self.grid)
                if (
                    updated.status is SessionStatus.EXPIRED
                    and updated.residual_energy_kwh > COMPLETION_THRESHOLD_KWH
                ):
                    updated, event = repair_request(updated, self.grid, period=now)
                    expiry_repairs.append(event)
                self.sessions[sid] = updated
                total += measured
                if self._was_managed.get(sid, False):
                    managed_kw += measured
                else:
                    unmanaged_kw += measured
            self._realized_total.append(total)
            self._realized_managed.append(managed_kw)
            self._realized_unmanaged.append(unmanaged_kw)
        elif now > 0:
            self._realized_total.append(0.0)
            self._realized_managed.append(0.0)
            self._realized_unmanaged.append(0.0)
        self._awaiting = {}
        self._pending_telemetry.clear()

        participants = {
            sid: s
            for sid, s in self.sessions.items()
            if s.status in (SessionStatus.ACTIVE, SessionStatus.OPTED_OUT)
        }
        window = self._baseline_window(now)
        forecast = unmanaged_forecast(participants.values(), self.grid, now)
        warm = None
        if self._prev_plan is not None:
            warm = {
                sid: rates[1:]
                for sid, rates in self._prev_plan.rates_kw.items()
                if sid in participants
            }
        result = mpc_tick(
            participants,
            window,
            forecast,
            self.grid,
            limits=self.limits,
            tolerances=self.tolerances,
            now_period=now,
            previous_plan=self._prev_plan,
            warm_start=warm,
        )
        for state in result.repaired:
            self.sessions[state.session_id] = state
        self._prev_plan = result.plan
        self._commands = dict(result.commands_kw)

        self._was_managed = {}
        for sid in sorted(participants):
            state = self.sessions[sid]
            if state.drawing or state.managed:
                self._awaiting[sid] = now
                self._was_managed[sid] = state.managed

        meta = {
            "type": "tick",
            "period": now,
            "instance_objective": None
            if result.relaxed is None
            else result.relaxed.objective_value,
            "commands_kw": {k: float(v) for k, v in sorted(result.commands_kw.items())},
            "repairs": [
                {
                    "session_id": e.session_id,
                    "residual_before_kwh": e.residual_before_kwh,
                    "residual_after_kwh": e.residual_after_kwh,
                }
                for e in list(expiry_repairs) + list(result.repair_events)
            ],
            "fallback": result.used_fallback,
        }
        self._log(meta)
        self._tick_meta.append(
            {
                "period": now,
                "fallback": result.used_fallback,
                "repairs": len(result.repair_events),
                "objective": meta["instance_objective"],
            }
        )

        if self.config.simulation_mode and not self._replay_mode:
            for sid in sorted(self._awaiting):
                state = self.sessions[sid]
                if state.managed:
                    command = self._commands.get(sid, 0.0)
                    drawn = min(command, state.residual_energy_kwh / self.grid.period_hours)
                else:
                    drawn = min(
                        state.request.max_rate_kw,
                        state.residual_energy_kwh / self.grid.period_hours,
                    )
                drawn = max(drawn, 0.0)
                self._pending_telemetry[sid] = (now, drawn)
                self._log(
                    {
                        "type": "telemetry",
                        "period": now,
                        "session_id": sid,
                        "measured_kw": float(drawn),
                    }
                )

        self.period = now + 1
        return meta

    # --------------------------------------------------------------- clock

    def clock_control(self, mode: str, factor: float = 1.0, steps: int = 1) -> dict:
        if mode == "step":
            if steps < 1:
                raise ValidationError("steps must be >= 1")
            self.tick(steps)
            return {"mode": "step", "executed": steps, "period": self.period}
        if mode in ("realtime", "accelerated"):
            if factor <= 0 or not math.isfinite(factor):
                raise ValidationError("factor must be a positive finite number")
            if mode == "realtime":
                factor = 1.0
            self.stop_clock()
            interval = 60.0 / factor
            self._clock_stop.clear()

            def _run() -> None:
                while not self._clock_stop.wait(interval):
                    self.tick(1)

            self._clock_thread = threading.Thread(target=_run, daemon=True)
            self._clock_thread.start()
            return {"mode": mode, "factor": factor, "period": self.period}
        if mode == "stop":
            self.stop_clock()
            return {"mode": "stop", "period": self.period}
        raise ValidationError(f"unknown clock mode {mode!r}")

    def stop_clock(self) -> None:
        if self._clock_thread is not None:
            self._clock_stop.set()
            self._clock_thread.join(timeout=5)
            self._clock_thread = None

    # -------------------------------------------------------------- replay

    def snapshot(self) -> dict:
        """Canonical end-state for replay comparison: exact floats throughout."""
        with self._lock:
            return {
                "period": self.period,
                "sessions": {
                    sid: {
                        "status": s.status.value,
                        "repaired": s.repaired,
                        "residual_kwh": repr(s.residual_energy_kwh),
                        "delivered_kwh": repr(s.delivered_kwh),
                        "remaining_periods": s.remaining_periods,
                        "history": [repr(v) for v in s.measured_power_history],
                    }
                    for sid, s in sorted(self.sessions.items())
                },
                "realized_total_kw": [repr(v) for v in self._realized_total],
                "realized_managed_kw": [repr(v) for v in self._realized_managed],
                "realized_unmanaged_kw": [repr(v) for v in self._realized_unmanaged],
            }

    @classmethod
    def replay(cls, events: Iterable[dict | str]) -> "CoordinationService":
        """Rebuild a service by replaying an event log.

        Input events (registrations, submissions, opt-outs, telemetry) are
        re-applied verbatim; every tick is recomputed through the normal code
        path. The resulting state matches the original run bit for bit.
        """
        service: CoordinationService | None = None
        for raw in events:
            event = json.loads(raw) if isinstance(raw, str) else raw
            etype = event["type"]
            if etype == "config":
                config = ServiceConfig(
                    min_nonzero_rate_kw=event["min_nonzero_rate_kw"],
                    max_discount_per_kwh=event["max_discount_per_kwh"],
                    max_rewarded_slack_hours=event["max_rewarded_slack_hours"],
                    horizon_periods=event["horizon_periods"],
                    epoch_minute_of_day=event["epoch_minute_of_day"],
                    simulation_mode=event["simulation_mode"],
                )
                baseline = LoadProfile(0, np.array(event["baseline_day_kw"]))
                service = cls(config, baseline=baseline, replay_mode=True)
                continue
            if service is None:
                raise ValidationError("event log must start with a config record")
            if etype == "register_vehicle":
                service.register_vehicle(
                    event["vehicle_id"],
                    event["max_rate_kw"],
                    event["battery_capacity_kwh"],
                    event.get("default_deadline_hours"),
                    event.get("default_desired_soc"),
                    _log=False,
                )
            elif etype == "submit":
                service.submit_request(
                    vehicle_id=event["vehicle_id"],
                    opt_in=event["opt_in"],
                    energy_kwh=event["energy_kwh"],
                    deadline_hours=event["deadline_hours"],
                    session_id=event["session_id"],
                    _log=False,
                )
            elif etype == "opt_out":
                service.opt_out(event["session_id"], _log=False)
            elif etype == "telemetry":
                with service._lock:
                    service._pending_telemetry[event["session_id"]] = (
                        event["period"],
                        float(event["measured_kw"]),
                    )
            elif etype == "tick":
                service.tick(1)
        if service is None:
            raise ValidationError("empty event log")
        return service

    @classmethod
    def replay_file(cls, path: str | Path) -> "CoordinationService":
        with Path(path).open() as handle:
            return cls.replay(line for line in handle if line.strip())

    def close(self) -> None:
        self.stop_clock()
        if self._log_handle is not None:
            self._log_handle.close()
            self._log_handle = None


def create_app(service: CoordinationService):
    """FastAPI wrapper exposing the service endpoints."""
    from fastapi import FastAPI, Header, HTTPException, Query, Request
    from fastapi.responses import JSONResponse

    app = FastAPI(title="flexcharge coordination service")

    def _guard(call, *args, **kwargs):
        try:
            return call(*args, **kwargs)
        except ServiceError as exc:
            raise HTTPException(
                status_code=exc.status_code,
                detail={"message": str(exc), **exc.payload},
            ) from exc
        except ValidationError as exc:
            raise HTTPException(status_code=400, detail={"message": str(exc)}) from exc

    def _check_admin(token: str | None) -> None:
        if token != service.config.admin_token:
            raise HTTPException(status_code=401, detail={"message": "admin token required"})

    @app.get("/health")
    def health():
        return service.health()

    @app.post("/vehicles")
    def register_vehicle(body: dict):
        return _guard(
            service.register_vehicle,
            body["vehicle_id"],
            body["max_rate_kw"],
            body["battery_capacity_kwh"],
            body.get("default_deadline_hours"),
            body.get("default_desired_soc"),
        )

    @app.get("/vehicles")
    def list_vehicles():
        return service.list_vehicles()

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        return _guard(
            service.submit_request,
            vehicle_id=body["vehicle_id"],
            opt_in=body.get("opt_in", True),
            energy_kwh=body.get("energy_kwh"),
            present_soc=body.get("present_soc"),
            desired_soc=body.get("desired_soc"),
            deadline_hours=body.get("deadline_hours"),
            deadline_minute_of_day=body.get("deadline_minute_of_day"),
        )

    @app.get("/sessions")
    def list_sessions(status: str | None = Query(default=None)):
        return service.list_sessions(status)

    @app.get("/sessions/{session_id}")
    def session_status(session_id: str):
        return _guard(service.get_status, session_id)

    @app.post("/sessions/{session_id}/opt-out")
    def opt_out(session_id: str):
        return _guard(service.opt_out, session_id)

    @app.post("/sessions/{session_id}/telemetry")
    def telemetry(session_id: str, body: dict):
        return _guard(
            service.post_telemetry, session_id, body["period"], body["measured_kw"]
        )

    @app.get("/aggregate")
    def aggregate(start: int = 0, length: int | None = None):
        return service.get_aggregate(start, length)

    @app.get("/menu")
    def menu(
        energy_kwh: float,
        max_rate_kw: float,
        deadlines: str = Query(..., description="comma-separated hours"),
    ):
        parsed = [float(x) for x in deadlines.split(",") if x.strip()]
        return _guard(service.price_menu_quote, energy_kwh, max_rate_kw, parsed)

    @app.post("/clock")
    def clock(body: dict, x_admin_token: str | None = Header(default=None)):
        _check_admin(x_admin_token)
        return _guard(
            service.clock_control,
            body.get("mode", "step"),
            body.get("factor", 1.0),
            body.get("steps", 1),
        )

    return app
