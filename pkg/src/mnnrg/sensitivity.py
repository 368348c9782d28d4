"""Trajectory sensitivities of constant-input predictions.

For a nominal command ``v_n`` the state sensitivity obeys
``S_x(j+1) = f_x S_x(j) + f_v`` with ``S_x(0) = 0`` and the output
sensitivity is ``S_y(j) = h_x S_x(j) + h_v``, all Jacobians taken along the
nominal prediction.  Plants that integrate their own variational equations
(the fuel cell) expose ``sensitivity_trajectory(x0, v, n)``.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import ContractViolation, DivergedSensitivityError
from .simcore import Trajectory, predict_constant


@dataclass
class SensitivityTrajectory:
    base: Trajectory
    S_x: np.ndarray
    S_y: np.ndarray
    v_n: float

    @property
    def y_nominal(self):
        return self.base.outputs

    def to_csv(self, path):
        ny = self.S_y.shape[1]
        header = ["j"] + [f"yhat_{i + 1}" for i in range(ny)] + [f"Sy_{i + 1}" for i in range(ny)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for j in range(len(self.S_y)):
                w.writerow(
                    [str(j)]
                    + [f"{val:.17g}" for val in self.base.outputs[j]]
                    + [f"{val:.17g}" for val in self.S_y[j]]
                )


@dataclass(frozen=True)
class CurvatureBound:
    """Per-output second-derivative bound ``M_bar`` (may be negative once tuned)."""

    values: tuple

    def __init__(self, values):
        arr = np.atleast_1d(np.asarray(values, dtype=float))
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("curvature bound must be finite")
        object.__setattr__(self, "values", tuple(float(a) for a in arr))

    def as_array(self):
        return np.array(self.values)


@dataclass(frozen=True)
class ResidualBound:
    """Per-output constant remainder bound ``R_bar``."""

    values: tuple

    def __init__(self, values):
        arr = np.atleast_1d(np.asarray(values, dtype=float))
        if not np.all(np.isfinite(arr)):
            raise ContractViolation("residual bound must be finite")
        object.__setattr__(self, "values", tuple(float(a) for a in arr))

    def as_array(self):
        return np.array(self.values)


def _recursive_sensitivity(plant, states, v_n):
    n1 = len(states)
    nx = states.shape[1]
    S_x = np.zeros((n1, nx))
    S_y = np.empty((n1, plant.output_dim))
    for j in range(n1):
        x = states[j]
        hx, hv = plant.jac_h(x, v_n)
        S_y[j] = hx @ S_x[j] + hv
        if not np.all(np.isfinite(S_y[j])):
            raise DivergedSensitivityError(j)
        if j + 1 < n1:
            fx, fv = plant.jac_f(x, v_n)
            S_x[j + 1] = fx @ S_x[j] + fv
            if not np.all(np.isfinite(S_x[j + 1])):
                raise DivergedSensitivityError(j + 1)
    return S_x, S_y


def propagate(plant, x0, v_n, j_star):
    """Nominal prediction at ``v_n`` bundled with its sensitivities."""
    custom = getattr(plant, "sensitivity_trajectory", None)
    if custom is not None:
        plant.check_input(v_n)
        states, outputs, S_x, S_y = custom(np.asarray(x0, dtype=float), v_n, j_star)
        base = Trajectory(states=states, outputs=outputs, v=v_n)
        return SensitivityTrajectory(base=base, S_x=S_x, S_y=S_y, v_n=v_n)
    base = predict_constant(plant, x0, v_n, j_star)
    S_x, S_y = _recursive_sensitivity(plant, base.states, v_n)
    return SensitivityTrajectory(base=base, S_x=S_x, S_y=S_y, v_n=v_n)


def taylor_bound_eval(sens, mbar, v):
    """``y_n(j) + S_y(j) dv + M_bar/2 dv^2`` per step and output."""
    dv = v - sens.v_n
    m = mbar.as_array() if isinstance(mbar, CurvatureBound) else np.atleast_1d(mbar)
    return sens.y_nominal + sens.S_y * dv + 0.5 * m * dv * dv


def finite_diff_sensitivity(plant, x0, v_n, j_star, h_fd):
    """Central-difference estimate of ``S_y(j)`` from two predictions."""
    lo, hi = v_n - h_fd, v_n + h_fd
    if lo < plant.v_min or hi > plant.v_max:
        raise ContractViolation(f"v_n +/- h_fd leaves [{plant.v_min}, {plant.v_max}]")
    y_hi = predict_constant(plant, x0, hi, j_star).outputs
    y_lo = predict_constant(plant, x0, lo, j_star).outputs
    return (y_hi - y_lo) / (2.0 * h_fd)


def estimate_curvature(plant, x0s, v_grid, j_star, h=1e-3):
    """Largest ``|d^2 y(j)/dv^2|`` over the given starts, inputs and horizon.

    Second differences of constant-input predictions; a numerical stand-in
    for the global bound, restricted to the sampled region.
    """
    worst = np.zeros(plant.output_dim)
    for x0 in x0s:
        for v in v_grid:
            v_c = min(max(v, plant.v_min + h), plant.v_max - h)
            y_p = predict_constant(plant, x0, v_c + h, j_star).outputs
            y_0 = predict_constant(plant, x0, v_c, j_star).outputs
            y_m = predict_constant(plant, x0, v_c - h, j_star).outputs
            d2 = np.abs(y_p - 2 * y_0 + y_m) / (h * h)
            worst = np.maximum(worst, d2.max(axis=0))
    return worst
