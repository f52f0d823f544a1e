"""Generate the packaged one-day baseline load shape.

A smooth winter-weekday residential circuit: a dominant morning peak driven
by electric heating, a broad evening shoulder, and a deep overnight trough.
Values are scaled so the daily peak is exactly 120 kW.
"""

from pathlib import Path

import numpy as np

OUT = Path(__file__).resolve().parents[1] / "src" / "flexcharge" / "data" / "baseline_day.csv"

BASE = 0.42
MORNING_AMPLITUDE = 0.58
MORNING_PEAK_HOUR = 7.5
MORNING_WIDTH_H = 1.7
EVENING_AMPLITUDE = 0.34
EVENING_PEAK_HOUR = 18.5
EVENING_WIDTH_H = 2.3
TARGET_PEAK_KW = 120.0


def circular_hours(hours: np.ndarray, center: float) -> np.ndarray:
    delta = np.abs(hours - center)
    return np.minimum(delta, 24.0 - delta)


def main() -> None:
    hours = np.arange(1440) / 60.0
    shape = (
        BASE
        + MORNING_AMPLITUDE
        * np.exp(-0.5 * (circular_hours(hours, MORNING_PEAK_HOUR) / MORNING_WIDTH_H) ** 2)
        + EVENING_AMPLITUDE
        * np.exp(-0.5 * (circular_hours(hours, EVENING_PEAK_HOUR) / EVENING_WIDTH_H) ** 2)
    )
    kw = np.round(shape / shape.max() * TARGET_PEAK_KW, 3)
    OUT.parent.mkdir(parents=True, exist_ok=True)
    with OUT.open("w") as handle:
        handle.write("minute_of_day,kw\n")
        for minute, value in enumerate(kw):
            handle.write(f"{minute},{value}\n")
    print(f"wrote {OUT} (peak {kw.max():.3f} kW, trough {kw.min():.3f} kW)")


if __name__ == "__main__":
    main()
