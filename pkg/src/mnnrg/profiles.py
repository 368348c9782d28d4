"""Reference profiles: step sequences, random step series and smooth cycles."""

from __future__ import annotations

import numpy as np

from .errors import ContractViolation


def step_profile(levels, durations):
    """Piecewise-constant profile holding ``levels[i]`` for ``durations[i]`` samples."""
    if len(levels) != len(durations):
        raise ContractViolation("levels and durations differ in length")
    if any(int(d) < 1 for d in durations):
        raise ContractViolation("every duration must be at least one sample")
    return np.concatenate([np.full(int(d), float(lv)) for lv, d in zip(levels, durations)])


def random_steps(rng, n_samples, low, high, hold_min, hold_max):
    """Random step series: uniform levels in ``[low, high]``, uniform hold times."""
    if hold_min < 1 or hold_max < hold_min:
        raise ContractViolation("need 1 <= hold_min <= hold_max")
    out = np.empty(n_samples)
    k = 0
    while k < n_samples:
        hold = int(rng.integers(hold_min, hold_max + 1))
        out[k : k + hold] = rng.uniform(low, high)
        k += hold
    return out


def smooth_cycle(rng, n_samples, low, high, n_knots=12):
    """Drive-cycle-like profile: cubic interpolation through random knots."""
    from scipy.interpolate import PchipInterpolator

    knots_t = np.linspace(0, n_samples - 1, n_knots)
    knots_v = rng.uniform(low, high, n_knots)
    return PchipInterpolator(knots_t, knots_v)(np.arange(n_samples))


def check_profile(profile, v_min, v_max):
    profile = np.asarray(profile, dtype=float)
    if profile.ndim != 1 or profile.size == 0:
        raise ContractViolation("profile must be a non-empty 1-D sequence")
    if np.any(~np.isfinite(profile)) or profile.min() < v_min or profile.max() > v_max:
        raise ContractViolation(
            f"profile range [{profile.min()}, {profile.max()}] leaves [{v_min}, {v_max}]"
        )
    return profile


def fc_step_profile(low=150.0, high=250.0, lead=100, hold=300):
    """Current step up and back down, the standard fuel-cell stress test."""
    return step_profile([low, high, low], [lead, hold, hold])
