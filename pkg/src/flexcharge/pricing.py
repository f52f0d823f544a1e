"""Slack-differentiated pricing: slack time, discount schedule, deadline menus.

A request's slack is the extra time available beyond the minimum needed to
charge at full rate: ``s = d - E/R``. The discount rate ramps linearly from
zero at zero slack to a maximum rate at a saturation slack, and is flat
beyond. Currency arithmetic uses ``decimal.Decimal`` end to end so quoted
discounts are exact; floats appear only at display edges.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal
from typing import Sequence

from .core import ChargingRequest, ValidationError

DEFAULT_MAX_DISCOUNT_PER_KWH = Decimal("0.043")
DEFAULT_MAX_REWARDED_SLACK_HOURS = 10.0


@dataclass(frozen=True)
class DiscountSchedule:
    """Piecewise-linear discount rate: 0 at zero slack, ``max_discount_per_kwh``
    at and beyond ``max_rewarded_slack_hours``."""

    max_discount_per_kwh: Decimal = DEFAULT_MAX_DISCOUNT_PER_KWH
    max_rewarded_slack_hours: float = DEFAULT_MAX_REWARDED_SLACK_HOURS

    def __post_init__(self) -> None:
        if not isinstance(self.max_discount_per_kwh, Decimal):
            object.__setattr__(
                self, "max_discount_per_kwh", Decimal(str(self.max_discount_per_kwh))
            )
        if self.max_discount_per_kwh < 0:
            raise ValidationError("max_discount_per_kwh must be >= 0")
        if self.max_rewarded_slack_hours <= 0:
            raise ValidationError("max_rewarded_slack_hours must be > 0")


def compute_slack(request: ChargingRequest) -> float:
    """Slack time in hours: deadline minus minimum full-rate charge time.

    May be negative; admissibility is the caller's decision.
    """
    if request.max_rate_kw <= 0:
        raise ValidationError("max_rate_kw must be > 0")
    return request.deadline_hours - request.energy_kwh / request.max_rate_kw


def discount_rate(slack_hours: float, schedule: DiscountSchedule | None = None) -> Decimal:
    """Discount per kWh for a given non-negative slack, in dollars."""
    schedule = schedule or DiscountSchedule()
    if slack_hours < 0:
        raise ValidationError(f"slack must be >= 0 for pricing, got {slack_hours}")
    s_max = schedule.max_rewarded_slack_hours
    if slack_hours >= s_max:
        return schedule.max_discount_per_kwh
    return (
        schedule.max_discount_per_kwh * Decimal(str(slack_hours)) / Decimal(str(s_max))
    )


def session_discount(
    request: ChargingRequest, schedule: DiscountSchedule | None = None
) -> Decimal:
    """Total session discount in dollars: rate(slack) x requested energy."""
    slack = compute_slack(request)
    rate = discount_rate(slack, schedule)
    return rate * Decimal(str(request.energy_kwh))


@dataclass(frozen=True)
class MenuRow:
    """One deadline option quoted to a customer. Infeasible options are kept,
    flagged, and carry no price."""

    deadline_hours: float
    feasible: bool
    slack_hours: float | None = None
    rate_per_kwh: Decimal | None = None
    total_discount: Decimal | None = None

    def to_dict(self) -> dict:
        return {
            "deadline_hours": self.deadline_hours,
            "feasible": self.feasible,
            "slack_hours": self.slack_hours,
            "rate_per_kwh": None if self.rate_per_kwh is None else str(self.rate_per_kwh),
            "total_discount": None if self.total_discount is None else str(self.total_discount),
        }


def price_menu(
    energy_kwh: float,
    max_rate_kw: float,
    candidate_deadlines: Sequence[float],
    schedule: DiscountSchedule | None = None,
) -> list[MenuRow]:
    """Quote a menu of deadline options for one request.

    Rows come back sorted by deadline. Deadlines with negative slack are
    marked infeasible rather than dropped.
    """
    if energy_kwh < 0:
        raise ValidationError("energy_kwh must be >= 0")
    if max_rate_kw <= 0:
        raise ValidationError("max_rate_kw must be > 0")
    if not candidate_deadlines:
        raise ValidationError("candidate_deadlines must be non-empty")
    schedule = schedule or DiscountSchedule()
    rows = []
    for deadline in sorted(candidate_deadlines):
        slack = deadline - energy_kwh / max_rate_kw
        if slack < 0:
            rows.append(MenuRow(deadline_hours=deadline, feasible=False))
            continue
        rate = discount_rate(slack, schedule)
        total = rate * Decimal(str(energy_kwh))
        rows.append(
            MenuRow(
                deadline_hours=deadline,
                feasible=True,
                slack_hours=slack,
                rate_per_kwh=rate,
                total_discount=total,
            )
        )
    return rows


def min_feasible_deadline_hours(energy_kwh: float, max_rate_kw: float) -> float:
    """Smallest deadline with non-negative slack."""
    if max_rate_kw <= 0:
        raise ValidationError("max_rate_kw must be > 0")
    return energy_kwh / max_rate_kw
