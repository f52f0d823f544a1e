"""Evaluation metrics over simulation outputs.

Percentile convention everywhere: linear interpolation between order
statistics (numpy's default), which matters for small day counts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .core import MINUTES_PER_DAY, LoadProfile, ValidationError
from .simulator import SessionOutcome


@dataclass(frozen=True)
class PeakIncrease:
    per_day: tuple[float, ...]
    median: float


def peak_increase(aggregate: LoadProfile, baseline_peak_kw: float) -> PeakIncrease:
    """Per-day fractional peak increase over the baseline peak, plus the median.

    Negative values mean the day peaked below the baseline peak; they are not
    clipped.
    """
    if len(aggregate) == 0:
        raise ValidationError("empty profile")
    if len(aggregate) % MINUTES_PER_DAY != 0:
        raise ValidationError(
            f"aggregate must span whole days, got {len(aggregate)} minutes"
        )
    if baseline_peak_kw <= 0:
        raise ValidationError("baseline_peak_kw must be positive")
    days = aggregate.values_kw.reshape(-1, MINUTES_PER_DAY)
    per_day = (days.max(axis=1) - baseline_peak_kw) / baseline_peak_kw
    return PeakIncrease(tuple(float(x) for x in per_day), float(np.median(per_day)))


@dataclass(frozen=True)
class LoadDurationCurve:
    """(threshold kW, minutes at-or-above) pairs, sorted by threshold."""

    entries: tuple[tuple[float, int], ...]
    label: str = ""

    def minutes_at_or_above(self, threshold_kw: float) -> int:
        for t, minutes in self.entries:
            if t == threshold_kw:
                return minutes
        raise KeyError(threshold_kw)


def duration_curve(
    aggregate: LoadProfile, thresholds: Sequence[float], label: str = ""
) -> LoadDurationCurve:
    """Minutes during which load is at or above each threshold."""
    if len(aggregate) == 0:
        raise ValidationError("empty profile")
    values = aggregate.values_kw
    entries = tuple(
        (float(t), int(np.count_nonzero(values >= t))) for t in sorted(thresholds)
    )
    return LoadDurationCurve(entries, label)


@dataclass(frozen=True)
class BandSummary:
    """Pointwise order statistics per minute-of-day across days."""

    minimum: np.ndarray
    p10: np.ndarray
    median: np.ndarray
    p90: np.ndarray
    maximum: np.ndarray


def band_summary(daily_profiles: Sequence[LoadProfile | np.ndarray]) -> BandSummary:
    if not daily_profiles:
        raise ValidationError("need at least one day")
    rows = []
    for p in daily_profiles:
        values = p.values_kw if isinstance(p, LoadProfile) else np.asarray(p, dtype=float)
        if values.size != MINUTES_PER_DAY:
            raise ValidationError("each daily profile must have 1440 values")
        rows.append(values)
    stack = np.vstack(rows)
    return BandSummary(
        minimum=stack.min(axis=0),
        p10=np.percentile(stack, 10, axis=0),
        median=np.percentile(stack, 50, axis=0),
        p90=np.percentile(stack, 90, axis=0),
        maximum=stack.max(axis=0),
    )


@dataclass(frozen=True)
class OptInBin:
    slack_lo_hours: float
    slack_hi_hours: float
    sessions: int
    opt_in_rate: float | None  # None marks an empty bin, distinct from zero


@dataclass(frozen=True)
class OptInCurve:
    bins: tuple[OptInBin, ...]
    beyond_sessions: int
    beyond_rate: float | None


def opt_in_curve(
    outcomes: Iterable[SessionOutcome],
    bin_width_hours: float = 1.0,
    max_slack_hours: float = 24.0,
) -> OptInCurve:
    """Empirical opt-in frequency binned by realized slack.

    Sessions with realized slack beyond ``max_slack_hours`` are summarized as
    a single aggregate rate rather than binned.
    """
    if bin_width_hours <= 0:
        raise ValidationError("bin_width_hours must be positive")
    n_bins = int(np.ceil(max_slack_hours / bin_width_hours))
    counts = np.zeros(n_bins, dtype=int)
    opted = np.zeros(n_bins, dtype=int)
    beyond_count = 0
    beyond_opted = 0
    for outcome in outcomes:
        slack = outcome.realized_slack_hours
        if slack < 0:
            slack = 0.0
        if slack > max_slack_hours:
            beyond_count += 1
            beyond_opted += int(outcome.opt_in)
            continue
        idx = min(int(slack / bin_width_hours), n_bins - 1)
        counts[idx] += 1
        opted[idx] += int(outcome.opt_in)
    bins = tuple(
        OptInBin(
            slack_lo_hours=i * bin_width_hours,
            slack_hi_hours=min((i + 1) * bin_width_hours, max_slack_hours),
            sessions=int(counts[i]),
            opt_in_rate=(float(opted[i] / counts[i]) if counts[i] else None),
        )
        for i in range(n_bins)
    )
    beyond_rate = float(beyond_opted / beyond_count) if beyond_count else None
    return OptInCurve(bins, beyond_count, beyond_rate)


def write_metrics_dir(
    out_dir: str | Path,
    aggregates: dict[str, LoadProfile],
    outcomes: dict[str, Sequence[SessionOutcome]],
    baseline_peak_kw: float,
    thresholds: Sequence[float] | None = None,
) -> None:
    """Write duration_curve.csv, bands.csv, peaks.csv, opt_in.csv for a run."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if thresholds is None:
        top = max(p.peak_kw for p in aggregates.values())
        thresholds = np.round(np.arange(0.0, top + 5.0, 5.0), 6)

    with (out / "duration_curve.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["policy", "threshold_kw", "minutes_at_or_above"])
        for policy, aggregate in sorted(aggregates.items()):
            curve = duration_curve(aggregate, thresholds, label=policy)
            for threshold, minutes in curve.entries:
                writer.writerow([policy, threshold, minutes])

    with (out / "peaks.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["policy", "day", "peak_increase_fraction"])
        medians = {}
        for policy, aggregate in sorted(aggregates.items()):
            usable = (len(aggregate) // MINUTES_PER_DAY) * MINUTES_PER_DAY
            trimmed = LoadProfile(aggregate.start_period, aggregate.values_kw[:usable])
            result = peak_increase(trimmed, baseline_peak_kw)
            medians[policy] = result.median
            for day, frac in enumerate(result.per_day):
                writer.writerow([policy, day, repr(frac)])
        writer.writerow([])
        writer.writerow(["policy", "median", ""])
        for policy, med in sorted(medians.items()):
            writer.writerow([policy, repr(med), ""])

    with (out / "bands.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["policy", "minute_of_day", "min", "p10", "median", "p90", "max"])
        for policy, aggregate in sorted(aggregates.items()):
            usable = (len(aggregate) // MINUTES_PER_DAY) * MINUTES_PER_DAY
            days = aggregate.values_kw[:usable].reshape(-1, MINUTES_PER_DAY)
            summary = band_summary(list(days))
            for minute in range(MINUTES_PER_DAY):
                writer.writerow(
                    [
                        policy,
                        minute,
                        repr(float(summary.minimum[minute])),
                        repr(float(summary.p10[minute])),
                        repr(float(summary.median[minute])),
                        repr(float(summary.p90[minute])),
                        repr(float(summary.maximum[minute])),
                    ]
                )

    with (out / "opt_in.csv").open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["policy", "slack_lo_h", "slack_hi_h", "sessions", "opt_in_rate"])
        for policy, policy_outcomes in sorted(outcomes.items()):
            curve = opt_in_curve(policy_outcomes)
            for b in curve.bins:
                writer.writerow(
                    [
                        policy,
                        b.slack_lo_hours,
                        b.slack_hi_hours,
                        b.sessions,
                        "" if b.opt_in_rate is None else repr(b.opt_in_rate),
                    ]
                )
            writer.writerow(
                [
                    policy,
                    f">{curve.bins[-1].slack_hi_hours}",
                    "",
                    curve.beyond_sessions,
                    "" if curve.beyond_rate is None else repr(curve.beyond_rate),
                ]
            )
