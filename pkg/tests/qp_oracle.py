"""Brute-force reference for small valley-filling instances.

Enumerates every per-EV rate profile on a fixed kW grid that meets the
energy-equality constraint exactly, then minimizes the quadratic objective
over the full cross product. Independent of the production solver: no water
filling, no iteration, just exhaustive search. Only usable for tiny horizons.
"""

from __future__ import annotations

from itertools import product

import numpy as np

from flexcharge.qp import QpInstance


def grid_profiles(
    horizon: int, max_rate_kw: float, target_units: int, step_kw: float
) -> np.ndarray:
    """All length-``horizon`` profiles with entries in {0, step, 2*step, ..., R}
    summing to exactly ``target_units`` grid steps. Returns shape (n, horizon) in kW."""
    max_units = int(round(max_rate_kw / step_kw))
    rows: list[tuple[int, ...]] = []

    def extend(prefix: list[int], remaining: int, slots: int) -> None:
        if slots == 0:
            if remaining == 0:
                rows.append(tuple(prefix))
            return
        # prune: remaining must fit in the slots left
        if remaining > slots * max_units:
            return
        for units in range(min(max_units, remaining) + 1):
            prefix.append(units)
            extend(prefix, remaining - units, slots - 1)
            prefix.pop()

    extend([], target_units, horizon)
    return np.array(rows, dtype=float) * step_kw


def brute_force_objective(instance: QpInstance, step_kw: float = 0.25) -> float:
    """Minimum objective over all grid-feasible rate assignments."""
    base = instance.base_load_kw.copy()
    candidate_sets = []
    for ev in instance.evs:
        units = ev.residual_energy_kwh / instance.period_hours / step_kw
        target = int(round(units))
        assert abs(units - target) < 1e-9, "oracle instance must be grid-aligned"
        profiles = grid_profiles(ev.deadline_periods, ev.max_rate_kw, target, step_kw)
        assert profiles.size, "oracle instance must be grid-feasible"
        padded = np.zeros((profiles.shape[0], instance.horizon))
        padded[:, : ev.deadline_periods] = profiles
        candidate_sets.append(padded)
    if not candidate_sets:
        return float(np.sum(base**2))
    best = np.inf
    if len(candidate_sets) == 1:
        totals = base[None, :] + candidate_sets[0]
        return float(np.min(np.sum(totals**2, axis=1)))
    a, b = candidate_sets
    # chunk the cross product to keep memory bounded
    for start in range(0, a.shape[0], 256):
        block = a[start : start + 256]
        totals = base[None, None, :] + block[:, None, :] + b[None, :, :]
        best = min(best, float(np.min(np.sum(totals**2, axis=2))))
    return best
