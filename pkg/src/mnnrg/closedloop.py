"""Closed-loop simulation of a governed plant over a reference profile."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from .governor import StepDiagnostics


@dataclass
class ClosedLoopLog:
    """Per-sample record of a governed run.

    ``states[t]`` is the plant state when the command ``v[t]`` is chosen and
    ``outputs[t] = h(states[t], v[t])``.  ``v_prev[t]`` is the command that
    was in force before sample ``t``.
    """

    r: np.ndarray
    v_prev: np.ndarray
    v: np.ndarray
    kappa: np.ndarray
    states: np.ndarray
    outputs: np.ndarray
    diagnostics: list = field(default_factory=list)
    step_times: np.ndarray | None = None
    dt: float = 1.0

    def __len__(self):
        return len(self.r)

    @property
    def t(self):
        return np.arange(len(self.r)) * self.dt

    def violations(self):
        """Sample indices where any output is strictly positive."""
        return np.flatnonzero(np.any(self.outputs > 0.0, axis=1))

    def violated(self):
        return bool(np.any(self.outputs > 0.0))

    def kappa_saturated(self):
        """True when every sample applied the full step toward the reference."""
        return bool(np.all(self.kappa >= 1.0))

    def to_csv(self, path):
        """Run log with columns ``t,r,v_prev,v,x1..xn,y1..yny``."""
        nx, ny = self.states.shape[1], self.outputs.shape[1]
        header = ["t", "r", "v_prev", "v"] + [f"x{i + 1}" for i in range(nx)]
        header += [f"y{i + 1}" for i in range(ny)]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(header)
            for k in range(len(self)):
                row = [self.t[k], self.r[k], self.v_prev[k], self.v[k], *self.states[k], *self.outputs[k]]
                w.writerow([f"{val:.17g}" for val in row])

    def diagnostics_to_csv(self, path):
        fields = ("t",) + StepDiagnostics.CSV_FIELDS
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(fields)
            for k, diag in enumerate(self.diagnostics):
                row = [f"{self.t[k]:.17g}"]
                for name in StepDiagnostics.CSV_FIELDS:
                    val = getattr(diag, name)
                    row.append(val if isinstance(val, str) else f"{val:.17g}")
                w.writerow(row)

    @classmethod
    def from_csv(cls, path, dt=None):
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        header, body = rows[0], np.array(rows[1:], dtype=float)
        nx = sum(1 for h in header if h.startswith("x"))
        ny = sum(1 for h in header if h.startswith("y"))
        t = body[:, 0]
        if dt is None:
            dt = float(t[1] - t[0]) if len(t) > 1 else 1.0
        return cls(
            r=body[:, 1],
            v_prev=body[:, 2],
            v=body[:, 3],
            kappa=np.full(len(body), np.nan),
            states=body[:, 4 : 4 + nx],
            outputs=body[:, 4 + nx : 4 + nx + ny],
            dt=dt,
        )


def run_closed_loop(plant, governor, r_profile, x0, v0=None, dt=None, timed=False, measure=None):
    """Drive ``plant`` with ``governor`` along ``r_profile``.

    The governor is reset to ``v0`` (default: the first reference value)
    and queried once per sample with the current state and reference.
    ``measure(x)``, when given, returns the state the governor sees (for
    example with sensor noise added); the plant and the log keep the true
    state.
    """
    r_profile = np.asarray(r_profile, dtype=float)
    n = len(r_profile)
    v0 = r_profile[0] if v0 is None else v0
    governor.reset(v0)
    x = np.array(x0, dtype=float)

    states = np.empty((n, plant.state_dim))
    outputs = np.empty((n, plant.output_dim))
    v_prev = np.empty(n)
    v = np.empty(n)
    kappa = np.empty(n)
    times = np.empty(n) if timed else None
    diags = []
    for k in range(n):
        states[k] = x
        v_prev[k] = governor.state.v_prev
        seen = x if measure is None else measure(x)
        if timed:
            t0 = time.perf_counter()
            v[k] = governor(seen, r_profile[k])
            times[k] = time.perf_counter() - t0
        else:
            v[k] = governor(seen, r_profile[k])
        diags.append(governor.last)
        kappa[k] = governor.last.kappa if governor.last is not None else np.nan
        outputs[k] = plant.output(x, v[k])
        x = plant.step(x, v[k])
    return ClosedLoopLog(
        r=r_profile,
        v_prev=v_prev,
        v=v,
        kappa=kappa,
        states=states,
        outputs=outputs,
        diagnostics=diags,
        step_times=times,
        dt=getattr(plant, "dt", 1.0) if dt is None else dt,
    )


def command_rmse(a, b):
    """Root-mean-square difference between two command histories."""
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    if a.shape != b.shape:
        raise ValueError("command histories differ in length")
    return float(np.sqrt(np.mean((a - b) ** 2)))
