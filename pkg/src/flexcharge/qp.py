"""Valley-filling quadratic program over relaxed charging rates.

The relaxed problem: choose per-vehicle rate sequences ``r_i(k)`` minimizing

    sum_k ( base(k) + sum_i r_i(k) )^2

subject to, for each vehicle ``i``,

    sum_{k <= d_i} r_i(k) * dt = E_i        (energy delivered by deadline)
    0 <= r_i(k) <= R_i   for k <= d_i       (relaxed box constraint)
    r_i(k) = 0           for k >  d_i

The minimum-rate disjunction is relaxed away here; rounding back to
``{0} u [R_min, R_i]`` happens downstream in the scheduler.

Method: cyclic block-coordinate descent where each block update solves one
vehicle's subproblem exactly by water filling. Holding the other vehicles
fixed, vehicle ``i`` faces ``min sum_k (b(k) + r(k))^2`` over its box and
energy constraints, whose solution is ``r(k) = clip(lam - b(k), 0, R_i)`` for
the unique water level ``lam`` delivering the required energy. Each update is
exact and deterministic, the objective never increases, and at a fixed point
the per-vehicle KKT conditions hold simultaneously, which is the water-filling
optimality certificate ``verify_kkt`` checks:

  * all periods where a vehicle is strictly between its bounds see a common
    total load level,
  * periods where it sits at zero see total load at or above that level,
  * periods where it sits at its max rate see total load at or below it.

Iteration order is fixed by instance order and nothing is randomized, so
identical inputs produce bitwise-identical outputs.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .core import PERIOD_HOURS, FEASIBILITY_TOL_KWH, ValidationError

# Rates this close to a bound are classified as being on the bound when
# checking the certificate. Water-filling hits bounds exactly via clip, so
# this only has to absorb representation noise.
BOUND_CLASSIFY_TOL_KW = 1e-9


class InfeasibleInstanceError(ValidationError):
    """The instance violates the deliverable-energy precondition for some EV."""

    def __init__(self, ev_id: str, message: str):
        super().__init__(message)
        self.ev_id = ev_id


@dataclass(frozen=True)
class EvSpec:
    """One vehicle's contribution to a QP instance."""

    ev_id: str
    max_rate_kw: float
    residual_energy_kwh: float
    deadline_periods: int


@dataclass(frozen=True)
class SolverTolerances:
    kkt_tol_kw: float = 1e-3
    energy_tol_kwh: float = 1e-4
    max_iterations: int = 10_000
    # Sweep-to-sweep rate change below which the iteration is declared stationary.
    stationarity_tol_kw: float = 1e-6


@dataclass(frozen=True)
class QpInstance:
    horizon: int
    base_load_kw: np.ndarray
    evs: tuple[EvSpec, ...]
    period_hours: float = PERIOD_HOURS

    def __post_init__(self) -> None:
        base = np.array(self.base_load_kw, dtype=float, copy=True)
        base.flags.writeable = False
        object.__setattr__(self, "base_load_kw", base)
        object.__setattr__(self, "evs", tuple(self.evs))
        if self.horizon < 1:
            raise ValidationError("horizon must be >= 1")
        if base.ndim != 1 or base.size != self.horizon:
            raise ValidationError(
                f"base_load_kw must have length horizon={self.horizon}, got {base.size}"
            )
        if base.size and not np.all(np.isfinite(base)):
            raise ValidationError("base_load_kw must be finite")
        if self.period_hours <= 0:
            raise ValidationError("period_hours must be > 0")
        seen: set[str] = set()
        for ev in self.evs:
            if ev.ev_id in seen:
                raise ValidationError(f"duplicate ev_id {ev.ev_id!r}")
            seen.add(ev.ev_id)
            if ev.max_rate_kw <= 0 or not np.isfinite(ev.max_rate_kw):
                raise ValidationError(f"{ev.ev_id}: max_rate_kw must be positive")
            if ev.residual_energy_kwh < 0 or not np.isfinite(ev.residual_energy_kwh):
                raise ValidationError(f"{ev.ev_id}: residual_energy_kwh must be >= 0")
            if not 0 <= ev.deadline_periods <= self.horizon:
                raise ValidationError(
                    f"{ev.ev_id}: deadline_periods must be in [0, horizon], "
                    f"got {ev.deadline_periods}"
                )
            deliverable = ev.deadline_periods * self.period_hours * ev.max_rate_kw
            if ev.residual_energy_kwh > deliverable + FEASIBILITY_TOL_KWH:
                raise InfeasibleInstanceError(
                    ev.ev_id,
                    f"{ev.ev_id}: requires {ev.residual_energy_kwh} kWh but at most "
                    f"{deliverable} kWh is deliverable by its deadline",
                )

    def to_json(self) -> str:
        return json.dumps(
            {
                "horizon": self.horizon,
                "period_hours": self.period_hours,
                "base_load_kw": [float(v) for v in self.base_load_kw],
                "evs": [
                    {
                        "ev_id": ev.ev_id,
                        "max_rate_kw": ev.max_rate_kw,
                        "residual_energy_kwh": ev.residual_energy_kwh,
                        "deadline_periods": ev.deadline_periods,
                    }
                    for ev in self.evs
                ],
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "QpInstance":
        data = json.loads(text)
        return cls(
            horizon=data["horizon"],
            base_load_kw=np.array(data["base_load_kw"], dtype=float),
            evs=tuple(
                EvSpec(
                    ev_id=e["ev_id"],
                    max_rate_kw=e["max_rate_kw"],
                    residual_energy_kwh=e["residual_energy_kwh"],
                    deadline_periods=e["deadline_periods"],
                )
                for e in data["evs"]
            ),
            period_hours=data.get("period_hours", PERIOD_HOURS),
        )


@dataclass(frozen=True)
class QpSolution:
    """Relaxed rates per EV (rows follow instance EV order) plus diagnostics."""

    rates_kw: np.ndarray  # shape (n_evs, horizon)
    objective_value: float
    kkt_residual_kw: float
    iterations: int
    converged: bool

    def __post_init__(self) -> None:
        arr = np.array(self.rates_kw, dtype=float, copy=True)
        arr.flags.writeable = False
        object.__setattr__(self, "rates_kw", arr)

    def aggregate_kw(self) -> np.ndarray:
        if self.rates_kw.shape[0] == 0:
            return np.zeros(self.rates_kw.shape[1])
        return self.rates_kw.sum(axis=0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "rates_kw": [[float(v) for v in row] for row in self.rates_kw],
                "objective_value": self.objective_value,
                "kkt_residual_kw": self.kkt_residual_kw,
                "iterations": self.iterations,
                "converged": self.converged,
            },
            sort_keys=True,
        )


def water_fill(base_kw: np.ndarray, max_rate_kw: float, target_rate_sum: float) -> np.ndarray:
    """Exact single-vehicle water fill.

    Returns ``r`` with ``r(k) = clip(lam - base(k), 0, max_rate)`` where the
    water level ``lam`` is chosen so ``sum r = target_rate_sum`` (rates in kW,
    target in kW-periods). Assumes ``target_rate_sum <= len(base) * max_rate``.
    """
    m = base_kw.size
    if m == 0 or target_rate_sum <= 0.0:
        return np.zeros(m)
    cap = m * max_rate_kw
    if target_rate_sum >= cap - 1e-12 * max(1.0, cap):
        return np.full(m, max_rate_kw)
    positions = np.concatenate([base_kw, base_kw + max_rate_kw])
    deltas = np.concatenate([np.ones(m), -np.ones(m)])
    order = np.argsort(positions, kind="stable")
    xs = positions[order]
    slopes = np.cumsum(deltas[order])
    # Cumulative water volume at each breakpoint.
    volumes = np.concatenate([[0.0], np.cumsum(slopes[:-1] * np.diff(xs))])
    idx = int(np.searchsorted(volumes, target_rate_sum, side="left"))
    if idx == 0:
        level = xs[0]
    elif idx >= volumes.size:
        level = xs[-1]  # numerically full; clip handles the rest
    else:
        slope = slopes[idx - 1]
        if slope <= 0:
            level = xs[idx]
        else:
            level = xs[idx - 1] + (target_rate_sum - volumes[idx - 1]) / slope
    return np.clip(level - base_kw, 0.0, max_rate_kw)


def solve_relaxed(
    instance: QpInstance,
    tolerances: SolverTolerances | None = None,
    warm_start: Mapping[str, np.ndarray] | None = None,
) -> QpSolution:
    """Solve the relaxed valley-filling QP to the water-filling certificate.

    Deterministic: vehicles are visited in instance order every sweep. A warm
    start (per-EV rate arrays, any length; extra tail ignored, missing tail
    zero-filled) only changes the iteration path, not the certified optimum.
    """
    tol = tolerances or SolverTolerances()
    n = len(instance.evs)
    horizon = instance.horizon
    rates = np.zeros((n, horizon))
    if n == 0:
        objective = float(np.sum(instance.base_load_kw**2))
        return QpSolution(rates, objective, 0.0, 0, True)

    if warm_start:
        for i, ev in enumerate(instance.evs):
            start = warm_start.get(ev.ev_id)
            if start is None:
                continue
            start = np.asarray(start, dtype=float)
            take = min(start.size, ev.deadline_periods)
            rates[i, :take] = np.clip(start[:take], 0.0, ev.max_rate_kw)

    targets = np.array(
        [ev.residual_energy_kwh / instance.period_hours for ev in instance.evs]
    )
    deadlines = [ev.deadline_periods for ev in instance.evs]
    span = max(deadlines) if deadlines else 0
    base = instance.base_load_kw
    agg = rates[:, :span].sum(axis=0) if span else np.zeros(0)

    # Visit vehicles in a content-derived order so the (degenerate) per-EV
    # split does not depend on how the instance happens to list them.
    visit = sorted(
        range(n),
        key=lambda i: (
            instance.evs[i].deadline_periods,
            instance.evs[i].max_rate_kw,
            instance.evs[i].residual_energy_kwh,
            instance.evs[i].ev_id,
        ),
    )

    sweeps = 0
    stationary = False
    for sweeps in range(1, tol.max_iterations + 1):
        max_change = 0.0
        for i in visit:
            ev = instance.evs[i]
            d = deadlines[i]
            if d == 0 or targets[i] <= 0.0:
                continue
            old = rates[i, :d]
            others = agg[:d] - old
            new = water_fill(base[:d] + others, ev.max_rate_kw, targets[i])
            change = float(np.max(np.abs(new - old))) if d else 0.0
            if change > max_change:
                max_change = change
            agg[:d] = others + new
            rates[i, :d] = new
        if max_change <= tol.stationarity_tol_kw:
            stationary = True
            break

    total = base.copy()
    if span:
        total[:span] = base[:span] + agg
    objective = float(np.sum(total**2))
    residual = kkt_residual(instance, rates)
    energy_ok = _energy_feasible(instance, rates, tol.energy_tol_kwh)
    converged = stationary and energy_ok and residual <= tol.kkt_tol_kw
    return QpSolution(rates, objective, residual, sweeps, converged)


def _energy_feasible(instance: QpInstance, rates: np.ndarray, energy_tol: float) -> bool:
    for i, ev in enumerate(instance.evs):
        delivered = float(rates[i, : ev.deadline_periods].sum()) * instance.period_hours
        if abs(delivered - ev.residual_energy_kwh) > energy_tol:
            return False
        if ev.deadline_periods < instance.horizon and np.any(
            rates[i, ev.deadline_periods :] != 0.0
        ):
            return False
    return True


def _level_violation(
    interior: np.ndarray, at_zero: np.ndarray, at_max: np.ndarray
) -> float:
    """Worst certificate violation for one EV given total-load samples by class."""
    if interior.size:
        level = float(interior.mean())
        worst = float(np.max(np.abs(interior - level)))
    else:
        lo = float(at_max.max()) if at_max.size else -np.inf
        hi = float(at_zero.min()) if at_zero.size else np.inf
        if lo <= hi:
            return 0.0
        return (lo - hi) / 2.0
    if at_zero.size:
        worst = max(worst, level - float(at_zero.min()))
    if at_max.size:
        worst = max(worst, float(at_max.max()) - level)
    return max(worst, 0.0)


def kkt_residual(instance: QpInstance, rates: np.ndarray) -> float:
    """Max water-filling certificate violation across EVs, in kW."""
    n = len(instance.evs)
    if n == 0:
        return 0.0
    total = instance.base_load_kw + rates.sum(axis=0)
    worst = 0.0
    for i, ev in enumerate(instance.evs):
        d = ev.deadline_periods
        if d == 0 or ev.residual_energy_kwh <= 0.0:
            continue
        r = rates[i, :d]
        load = total[:d]
        at_zero = r <= BOUND_CLASSIFY_TOL_KW
        at_max = r >= ev.max_rate_kw - BOUND_CLASSIFY_TOL_KW
        interior = ~(at_zero | at_max)
        violation = _level_violation(load[interior], load[at_zero], load[at_max])
        if violation > worst:
            worst = violation
    return worst


def verify_kkt(
    instance: QpInstance,
    solution: QpSolution,
    kkt_tol_kw: float = 1e-3,
    energy_tol_kwh: float = 1e-4,
) -> bool:
    """Check primal feasibility and the water-filling certificate."""
    rates = solution.rates_kw
    for i, ev in enumerate(instance.evs):
        if np.any(rates[i] < -BOUND_CLASSIFY_TOL_KW):
            return False
        if np.any(rates[i] > ev.max_rate_kw + BOUND_CLASSIFY_TOL_KW):
            return False
    if not _energy_feasible(instance, rates, energy_tol_kwh):
        return False
    return kkt_residual(instance, rates) <= kkt_tol_kw


def load_instance(path: str | Path) -> QpInstance:
    return QpInstance.from_json(Path(path).read_text())


def dump_debug(path: str | Path, instance: QpInstance, solution: QpSolution) -> None:
    """Write a reproducible instance + solution bundle."""
    payload = {
        "instance": json.loads(instance.to_json()),
        "solution": json.loads(solution.to_json()),
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2))
