"""Discrete-time plants, constant-input prediction and admissibility tests.

A plant is ``x(t+1) = f(x(t), v)`` with constrained outputs ``y = h(x, v)``;
an output vector is feasible when every component is ``<= 0``.  The
admissible set used throughout is the finite-horizon inner approximation:
``(x0, v)`` is admissible when the constant-input prediction satisfies
``y(j) <= 0`` for ``j = 0..j_star`` and the equilibrium output satisfies
``y_bar <= -epsilon`` componentwise.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import (
    ContractViolation,
    DivergedTrajectoryError,
    GovernorError,
    NonConvergentEquilibriumError,
)


class PlantModel:
    """Base class for governed closed-loop plants with a scalar command.

    Subclasses implement :meth:`step` and :meth:`output`.  Jacobians default
    to central differences; :meth:`predict` and :meth:`equilibrium` may be
    overridden with faster or exact versions.
    """

    state_dim: int = 0
    output_dim: int = 0
    v_min: float = -np.inf
    v_max: float = np.inf
    output_names: tuple = ()

    def step(self, x, v):
        raise NotImplementedError

    def output(self, x, v):
        raise NotImplementedError

    def initial_state(self, v):
        """Starting point for settling simulations."""
        return np.zeros(self.state_dim)

    def equilibrium(self, v):
        """Exact equilibrium state for constant ``v``, or None if unavailable."""
        return None

    def check_input(self, v):
        tol = 1e-9 * (1.0 + abs(v))
        if not (self.v_min - tol <= v <= self.v_max + tol):
            raise ContractViolation(
                f"input {v!r} outside [{self.v_min}, {self.v_max}]"
            )

    @staticmethod
    def _fd_step(value):
        return 1e-6 * max(1.0, abs(value))

    def jac_f(self, x, v):
        """Return ``(df/dx, df/dv)`` at ``(x, v)``."""
        x = np.asarray(x, dtype=float)
        n = x.size
        fx = np.empty((n, n))
        for i in range(n):
            h = self._fd_step(x[i])
            e = np.zeros(n)
            e[i] = h
            fx[:, i] = (self.step(x + e, v) - self.step(x - e, v)) / (2 * h)
        h = self._fd_step(v)
        fv = (self.step(x, v + h) - self.step(x, v - h)) / (2 * h)
        return fx, fv

    def jac_h(self, x, v):
        """Return ``(dh/dx, dh/dv)`` at ``(x, v)``."""
        x = np.asarray(x, dtype=float)
        n = x.size
        hx = np.empty((self.output_dim, n))
        for i in range(n):
            h = self._fd_step(x[i])
            e = np.zeros(n)
            e[i] = h
            hx[:, i] = (self.output(x + e, v) - self.output(x - e, v)) / (2 * h)
        h = self._fd_step(v)
        hv = (self.output(x, v + h) - self.output(x, v - h)) / (2 * h)
        return hx, hv

    def predict(self, x0, v, n):
        """States and outputs for ``j = 0..n`` under constant ``v``."""
        states = np.empty((n + 1, self.state_dim))
        outputs = np.empty((n + 1, self.output_dim))
        x = np.array(x0, dtype=float)
        for j in range(n + 1):
            if not np.all(np.isfinite(x)):
                raise DivergedTrajectoryError(j)
            states[j] = x
            outputs[j] = self.output(x, v)
            if j < n:
                x = self.step(x, v)
        return states, outputs


class ToyTanhPlant(PlantModel):
    """Scalar test plant ``x+ = 0.5 x + 0.5 tanh(v)``, ``y = x - 0.8``."""

    state_dim = 1
    output_dim = 1
    v_min = -3.0
    v_max = 3.0
    output_names = ("y",)

    def __init__(self, limit=0.8):
        self.limit = limit

    def step(self, x, v):
        return 0.5 * np.asarray(x, dtype=float) + 0.5 * np.tanh(v)

    def output(self, x, v):
        return np.asarray(x, dtype=float) - self.limit

    def jac_f(self, x, v):
        return np.array([[0.5]]), np.array([0.5 / np.cosh(v) ** 2])

    def jac_h(self, x, v):
        return np.array([[1.0]]), np.array([0.0])

    def equilibrium(self, v):
        return np.array([np.tanh(v)])


class LinearPlant(PlantModel):
    """``x+ = A x + B v``, ``y = C x + D v + offset``."""

    def __init__(self, A, B, C, D=None, offset=None, v_min=-np.inf, v_max=np.inf):
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        self.B = np.asarray(B, dtype=float).reshape(-1)
        self.C = np.atleast_2d(np.asarray(C, dtype=float))
        ny = self.C.shape[0]
        self.D = np.zeros(ny) if D is None else np.asarray(D, dtype=float).reshape(-1)
        self.offset = (
            np.zeros(ny) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
        )
        self.state_dim = self.A.shape[0]
        self.output_dim = ny
        self.v_min = float(v_min)
        self.v_max = float(v_max)
        self.output_names = tuple(f"y{i + 1}" for i in range(ny))

    def step(self, x, v):
        return self.A @ np.asarray(x, dtype=float) + self.B * v

    def output(self, x, v):
        return self.C @ np.asarray(x, dtype=float) + self.D * v + self.offset

    def jac_f(self, x, v):
        return self.A.copy(), self.B.copy()

    def jac_h(self, x, v):
        return self.C.copy(), self.D.copy()

    def equilibrium(self, v):
        n = self.state_dim
        return np.linalg.solve(np.eye(n) - self.A, self.B * v)


def linear_test_plant():
    """Two-state plant with steady gain 0.5 onto ``y = x1 - 1``, inputs in [0, 3]."""
    return LinearPlant(
        A=[[0.8, 0.1], [0.0, 0.9]],
        B=[0.0, 0.1],
        C=[[1.0, 0.0]],
        D=[0.0],
        offset=[-1.0],
        v_min=0.0,
        v_max=3.0,
    )


@dataclass(frozen=True)
class AdmissibilityConfig:
    j_star: int
    epsilon: float = 0.05
    ss_tol: float = 1e-9
    ss_max_steps: int = 10**6

    def __post_init__(self):
        if self.j_star < 1:
            raise ContractViolation("j_star must be >= 1")
        if not self.epsilon > 0:
            raise ContractViolation("epsilon must be > 0")
        if not self.ss_tol > 0:
            raise ContractViolation("ss_tol must be > 0")


@dataclass
class Trajectory:
    states: np.ndarray
    outputs: np.ndarray
    v: float

    def __len__(self):
        return len(self.states)

    def to_csv(self, path):
        write_trajectory_csv(self, path)


def write_trajectory_csv(traj, path):
    nx = traj.states.shape[1]
    ny = traj.outputs.shape[1]
    header = ["j"] + [f"x{i + 1}" for i in range(nx)] + [f"y{i + 1}" for i in range(ny)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for j in range(len(traj.states)):
            row = [str(j)] + [f"{val:.17g}" for val in traj.states[j]]
            row += [f"{val:.17g}" for val in traj.outputs[j]]
            w.writerow(row)


def predict_constant(plant, x0, v, j_star):
    """Predict states and outputs over ``j = 0..j_star`` holding ``v`` constant."""
    if j_star < 1:
        raise ContractViolation("j_star must be >= 1")
    plant.check_input(v)
    states, outputs = plant.predict(np.asarray(x0, dtype=float), v, j_star)
    return Trajectory(states=states, outputs=outputs, v=v)


def steady_state(plant, v, cfg, x_start=None):
    """Equilibrium ``(x_bar, y_bar)`` for constant input ``v``.

    Uses the plant's exact equilibrium when it has one, otherwise iterates
    the dynamics until ``max|x(k+1) - x(k)| <= cfg.ss_tol``.
    """
    plant.check_input(v)
    x_bar = plant.equilibrium(v)
    if x_bar is not None:
        x_bar = np.asarray(x_bar, dtype=float)
        return x_bar, np.asarray(plant.output(x_bar, v), dtype=float)

    x = plant.initial_state(v) if x_start is None else np.array(x_start, dtype=float)
    for k in range(cfg.ss_max_steps):
        x_next = plant.step(x, v)
        if not np.all(np.isfinite(x_next)):
            raise DivergedTrajectoryError(k + 1)
        if np.max(np.abs(x_next - x)) <= cfg.ss_tol:
            return x_next, np.asarray(plant.output(x_next, v), dtype=float)
        x = x_next
    raise NonConvergentEquilibriumError(v, cfg.ss_max_steps)


@dataclass
class Admissibility:
    ok: bool
    max_output: float = np.nan
    steady_output: np.ndarray | None = None
    cause: str | None = None

    def __bool__(self):
        return self.ok


def admissibility(plant, x0, v, cfg):
    """Detailed admissibility verdict; simulation failures count as inadmissible."""
    try:
        traj = predict_constant(plant, x0, v, cfg.j_star)
        _, y_bar = steady_state(plant, v, cfg)
    except GovernorError as exc:
        return Admissibility(ok=False, cause=f"{type(exc).__name__}: {exc}")
    max_y = float(np.max(traj.outputs))
    ok = bool(max_y <= 0.0 and np.all(y_bar <= -cfg.epsilon))
    return Admissibility(ok=ok, max_output=max_y, steady_output=y_bar)


def is_admissible(plant, x0, v, cfg):
    return admissibility(plant, x0, v, cfg).ok


def steady_state_ok(plant, v, cfg):
    try:
        _, y_bar = steady_state(plant, v, cfg)
    except GovernorError:
        return False
    return bool(np.all(y_bar <= -cfg.epsilon))


def admissible_interval(plant, cfg, n_grid=65):
    """Inputs whose equilibrium output is tightened-feasible, as ``(v_lo, v_hi)``.

    Assumes the admissible steady inputs form one interval (monotone steady
    map).  Both ends are refined by bisection to floating-point resolution
    and always lie on the admissible side.
    """
    grid = np.linspace(plant.v_min, plant.v_max, n_grid)
    ok = np.array([steady_state_ok(plant, v, cfg) for v in grid])
    if not ok.any():
        raise GovernorError("no steady-state admissible input on the grid")
    idx = np.flatnonzero(ok)
    i_lo, i_hi = idx[0], idx[-1]

    def refine(good, bad):
        while True:
            mid = 0.5 * (good + bad)
            if mid == good or mid == bad:
                return good
            if steady_state_ok(plant, mid, cfg):
                good = mid
            else:
                bad = mid

    v_lo = grid[i_lo] if i_lo == 0 else refine(grid[i_lo], grid[i_lo - 1])
    v_hi = grid[i_hi] if i_hi == n_grid - 1 else refine(grid[i_hi], grid[i_hi + 1])
    return float(v_lo), float(v_hi)
