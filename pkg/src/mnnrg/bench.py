"""Per-step execution-time measurements for governors.

Each configuration is run ``repeats`` times; for every sample the fastest
of the repeats is kept (suppressing scheduler noise), and the mean and
maximum of those per-sample minima are reported as average and worst-case
step time.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .closedloop import run_closed_loop


@dataclass(frozen=True)
class Timing:
    governor: str
    L: int
    mean_s: float
    max_s: float
    n_steps: int


def per_step_minimum(plant, make_governor, profile, x0, repeats):
    """Fastest observed time per sample over ``repeats`` identical runs."""
    best = None
    for _ in range(repeats):
        log = run_closed_loop(plant, make_governor(), profile, x0, timed=True)
        best = log.step_times if best is None else np.minimum(best, log.step_times)
    return best


def time_governor(name, L, plant, make_governor, profile, x0, repeats):
    times = per_step_minimum(plant, make_governor, profile, x0, repeats)
    return Timing(name, L, float(times.mean()), float(times.max()), len(times))


def slope(timings, attr="mean_s"):
    """Least-squares slope of a timing statistic against ``L``."""
    ls = np.array([t.L for t in timings], dtype=float)
    ys = np.array([getattr(t, attr) for t in timings])
    return float(np.polyfit(ls, ys, 1)[0])


def warm_up(plant, make_governor, profile, x0, n=5):
    """Run a few samples first so compilation does not land in a timing."""
    run_closed_loop(plant, make_governor(), profile[:n], x0)
