"""Per-minute model-predictive scheduling loop.

Each tick, in order: repair any sessions whose residual energy can no longer
be delivered by deadline, assemble a QP instance from live session state,
solve the relaxation, round rates back onto the ``{0} u [R_min, R_i]``
disjunction, and emit each vehicle's first-period command. Measurements of
actually drawn power are folded back into session state between ticks.
"""

from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .core import (
    COMPLETION_THRESHOLD_KWH,
    FEASIBILITY_TOL_KWH,
    LoadProfile,
    ProfileAlignmentError,
    SessionState,
    SessionStatus,
    TimeGrid,
    ValidationError,
)
from .qp import EvSpec, QpInstance, QpSolution, SolverTolerances, solve_relaxed

# SAE J1772 minimum pilot at 240 V is 6 A, about 1.4 kW.
DEFAULT_MIN_NONZERO_RATE_KW = 1.4


@dataclass(frozen=True)
class RateLimits:
    min_nonzero_rate_kw: float = DEFAULT_MIN_NONZERO_RATE_KW

    def __post_init__(self) -> None:
        if self.min_nonzero_rate_kw <= 0:
            raise ValidationError("min_nonzero_rate_kw must be > 0")

    def validate_against(self, sessions: Iterable[SessionState]) -> None:
        for session in sessions:
            if session.request.max_rate_kw < self.min_nonzero_rate_kw:
                raise ValidationError(
                    f"{session.session_id}: max rate {session.request.max_rate_kw} kW "
                    f"below minimum non-zero rate {self.min_nonzero_rate_kw} kW"
                )


@dataclass(frozen=True)
class SchedulePlan:
    """Rounded per-session rate sequences over the horizon, from one tick."""

    created_at_period: int
    rates_kw: dict[str, np.ndarray]
    objective_value: float

    def command_at(self, session_id: str, offset: int) -> float:
        rates = self.rates_kw.get(session_id)
        if rates is None or offset >= rates.size:
            return 0.0
        return float(rates[offset])


@dataclass(frozen=True)
class RepairEvent:
    session_id: str
    period: int
    residual_before_kwh: float
    residual_after_kwh: float


@dataclass(frozen=True)
class TickResult:
    period: int
    commands_kw: dict[str, float]
    plan: SchedulePlan
    repaired: tuple[SessionState, ...]
    repair_events: tuple[RepairEvent, ...]
    projected_aggregate: LoadProfile
    relaxed: QpSolution | None
    used_fallback: bool = False


def check_feasibility(session: SessionState, grid: TimeGrid) -> bool:
    """True iff the residual energy is deliverable by the deadline at full rate."""
    deliverable = (
        session.remaining_periods * grid.period_hours * session.request.max_rate_kw
    )
    return session.residual_energy_kwh <= deliverable + FEASIBILITY_TOL_KWH


def repair_request(session: SessionState, grid: TimeGrid, period: int = 0) -> tuple[SessionState, RepairEvent]:
    """Clamp an infeasible session's residual to the maximum deliverable energy.

    The repaired flag is sticky. A session with no time left is expired with
    zero residual requirement.
    """
    if check_feasibility(session, grid):
        raise ValidationError(f"{session.session_id}: session is feasible, nothing to repair")
    deliverable = (
        session.remaining_periods * grid.period_hours * session.request.max_rate_kw
    )
    status = session.status
    if session.remaining_periods == 0:
        deliverable = 0.0
        status = SessionStatus.EXPIRED
    event = RepairEvent(
        session_id=session.session_id,
        period=period,
        residual_before_kwh=session.residual_energy_kwh,
        residual_after_kwh=deliverable,
    )
    repaired = dataclasses.replace(
        session, residual_energy_kwh=deliverable, status=status, repaired=True
    )
    return repaired, event


def ingest_measurement(
    session: SessionState, measured_kw: float, grid: TimeGrid
) -> SessionState:
    """Fold one period's measured draw into session state.

    Decrements the remaining-period count, debits residual energy (clamped at
    zero), and applies the completion / expiry transition.
    """
    if measured_kw < 0 or not math.isfinite(measured_kw):
        raise ValidationError(f"measured_kw must be finite and >= 0, got {measured_kw}")
    if session.status not in (SessionStatus.ACTIVE, SessionStatus.OPTED_OUT):
        raise ValidationError(f"{session.session_id}: cannot ingest into {session.status}")
    residual = max(0.0, session.residual_energy_kwh - measured_kw * grid.period_hours)
    remaining = max(0, session.remaining_periods - 1)
    status = session.status
    if status is SessionStatus.ACTIVE:
        if residual <= COMPLETION_THRESHOLD_KWH:
            residual = 0.0
            status = SessionStatus.COMPLETED
        elif remaining == 0:
            status = SessionStatus.EXPIRED
    elif residual <= COMPLETION_THRESHOLD_KWH:
        residual = 0.0
    return dataclasses.replace(
        session,
        residual_energy_kwh=residual,
        remaining_periods=remaining,
        measured_power_history=session.measured_power_history + (float(measured_kw),),
        status=status,
    )


def unmanaged_forecast(
    sessions: Iterable[SessionState], grid: TimeGrid, start_period: int
) -> LoadProfile:
    """Predicted draw of unmanaged sessions: full rate until residual exhausted."""
    values = np.zeros(grid.horizon_periods)
    for session in sessions:
        if not session.drawing or session.managed:
            continue
        rate = session.request.max_rate_kw
        full, part = divmod(session.residual_energy_kwh, rate * grid.period_hours)
        full = int(full)
        full = min(full, grid.horizon_periods)
        values[:full] += rate
        if full < grid.horizon_periods and part > 0:
            values[full] += part / grid.period_hours
    return LoadProfile(start_period, values)


def build_instance(
    active_sessions: Sequence[SessionState],
    baseline: LoadProfile,
    unmanaged_load: LoadProfile,
    grid: TimeGrid,
    start_period: int | None = None,
) -> QpInstance:
    """Assemble the QP for one tick from managed sessions and the load forecast."""
    start = baseline.start_period if start_period is None else start_period
    horizon = grid.horizon_periods
    if not baseline.covers(start, horizon):
        raise ProfileAlignmentError(
            f"baseline covers [{baseline.start_period}, {baseline.end_period}), "
            f"tick needs [{start}, {start + horizon})"
        )
    if not unmanaged_load.covers(start, horizon):
        raise ProfileAlignmentError(
            f"unmanaged forecast covers [{unmanaged_load.start_period}, "
            f"{unmanaged_load.end_period}), tick needs [{start}, {start + horizon})"
        )
    base = baseline.window(start, horizon) + unmanaged_load.window(start, horizon)
    evs = []
    for session in active_sessions:
        if not session.managed:
            raise ValidationError(f"{session.session_id}: not an active managed session")
        if session.residual_energy_kwh <= COMPLETION_THRESHOLD_KWH:
            continue
        evs.append(
            EvSpec(
                ev_id=session.session_id,
                max_rate_kw=session.request.max_rate_kw,
                residual_energy_kwh=session.residual_energy_kwh,
                deadline_periods=min(session.remaining_periods, horizon),
            )
        )
    return QpInstance(
        horizon=horizon, base_load_kw=base, evs=tuple(evs), period_hours=grid.period_hours
    )


def round_plan(
    relaxed: QpSolution, limits: RateLimits, instance: QpInstance
) -> SchedulePlan:
    """Round relaxed rates onto the ``{0} u [R_min, R_i]`` disjunction.

    Per vehicle: rates already at or above the minimum are kept; sub-minimum
    rates are zeroed and their energy consolidated into the fewest periods,
    placed where the planned total load is lowest (ties to the earliest
    period), each at a legal rate. The load level is updated as parcels land
    so consolidations from different vehicles spread out instead of stacking
    on one cheap minute. Consolidation can only round the last parcel up to
    the minimum rate, so delivered energy moves by less than one period of
    minimum-rate energy and never moves past the deadline.
    """
    total = (instance.base_load_kw + relaxed.aggregate_kw()).copy()
    plan_rates: dict[str, np.ndarray] = {}
    for i, ev in enumerate(instance.evs):
        r = relaxed.rates_kw[i].copy()
        d = ev.deadline_periods
        r[d:] = 0.0
        sub = (r > 0.0) & (r < limits.min_nonzero_rate_kw)
        sub[d:] = False
        if sub.any():
            carried = float(r[sub].sum())
            total[sub] -= r[sub]
            r[sub] = 0.0
            open_slots = np.flatnonzero(r[:d] == 0.0)
            order = np.lexsort((open_slots, total[open_slots]))
            slots = open_slots[order]
            parcels = int(np.ceil(carried / ev.max_rate_kw - 1e-12))
            parcels = max(parcels, 1)
            for j in range(parcels - 1):
                r[slots[j]] = ev.max_rate_kw
                total[slots[j]] += ev.max_rate_kw
            remainder = carried - (parcels - 1) * ev.max_rate_kw
            last_rate = max(limits.min_nonzero_rate_kw, remainder)
            r[slots[parcels - 1]] = last_rate
            total[slots[parcels - 1]] += last_rate
        plan_rates[ev.ev_id] = r
    projected = instance.base_load_kw.copy()
    for r in plan_rates.values():
        projected = projected + r
    objective = float(np.sum(projected**2))
    return SchedulePlan(created_at_period=0, rates_kw=plan_rates, objective_value=objective)


def _fallback_plan(
    managed: Sequence[SessionState],
    previous_plan: SchedulePlan | None,
    grid: TimeGrid,
    now: int,
) -> SchedulePlan:
    """Plan used when the solver fails to certify: shift the previous plan by
    one period; lacking one, run zero-slack sessions at full rate."""
    rates: dict[str, np.ndarray] = {}
    for session in managed:
        shifted = np.zeros(grid.horizon_periods)
        if previous_plan is not None and session.session_id in previous_plan.rates_kw:
            prev = previous_plan.rates_kw[session.session_id]
            shifted[: prev.size - 1] = prev[1:]
        else:
            deliverable = (
                session.remaining_periods
                * grid.period_hours
                * session.request.max_rate_kw
            )
            if session.residual_energy_kwh >= deliverable - FEASIBILITY_TOL_KWH:
                d = min(session.remaining_periods, grid.horizon_periods)
                shifted[:d] = session.request.max_rate_kw
        rates[session.session_id] = shifted
    return SchedulePlan(created_at_period=now, rates_kw=rates, objective_value=float("nan"))


def mpc_tick(
    sessions: Mapping[str, SessionState],
    baseline: LoadProfile,
    unmanaged: LoadProfile,
    grid: TimeGrid,
    limits: RateLimits | None = None,
    tolerances: SolverTolerances | None = None,
    now_period: int | None = None,
    previous_plan: SchedulePlan | None = None,
    warm_start: Mapping[str, np.ndarray] | None = None,
) -> TickResult:
    """One pass of the real-time loop over the given session states.

    Order of operations: repair infeasible managed sessions, build the
    instance against baseline-plus-unmanaged load, solve the relaxation,
    round, and emit first-period commands. Deterministic given its inputs.
    Repaired session states are returned for the caller to adopt; this
    function never mutates its inputs.
    """
    limits = limits or RateLimits()
    tolerances = tolerances or SolverTolerances()
    now = baseline.start_period if now_period is None else now_period

    managed = [s for s in sessions.values() if s.managed]
    managed.sort(key=lambda s: s.session_id)
    limits.validate_against(managed)

    repaired_states: list[SessionState] = []
    repair_events: list[RepairEvent] = []
    working: list[SessionState] = []
    for session in managed:
        if not check_feasibility(session, grid):
            fixed, event = repair_request(session, grid, period=now)
            repaired_states.append(fixed)
            repair_events.append(event)
            if fixed.managed:
                working.append(fixed)
        else:
            working.append(session)

    instance = build_instance(working, baseline, unmanaged, grid, start_period=now)
    relaxed = solve_relaxed(instance, tolerances, warm_start=warm_start)

    used_fallback = False
    if relaxed.converged:
        plan = round_plan(relaxed, limits, instance)
        plan = dataclasses.replace(plan, created_at_period=now)
    else:
        plan = _fallback_plan(working, previous_plan, grid, now)
        used_fallback = True

    commands = {s.session_id: plan.command_at(s.session_id, 0) for s in working}
    projected = instance.base_load_kw.copy()
    for r in plan.rates_kw.values():
        projected = projected + r
    return TickResult(
        period=now,
        commands_kw=commands,
        plan=plan,
        repaired=tuple(repaired_states),
        repair_events=tuple(repair_events),
        projected_aggregate=LoadProfile(now, np.maximum(projected, 0.0)),
        relaxed=relaxed if not used_fallback else None,
        used_fallback=used_fallback,
    )
