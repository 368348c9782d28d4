"""Empirical calibration of the Taylor remainder used by the MNN-RG.

Two procedures are provided.  :func:`calibrate_mbar` adjusts a curvature
coefficient per governed output by repeated closed-loop runs: it grows the
coefficient while violations occur and otherwise shrinks it until the
first violation (then steps back) or until the governor stops acting.
:func:`compute_rbar` replays a recorded PRG run and takes the largest
observed first-order residual as a constant tightening.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, TuningNonTerminationError
from .governor import GovernorState, dynamic_saturation, governed_values, governed_view
from .sensitivity import ResidualBound, propagate
from .simcore import predict_constant


@dataclass(frozen=True)
class RunOutcome:
    """What the calibration needs from one closed-loop run."""

    violated: np.ndarray
    kappa_saturated: bool
    inactive: np.ndarray | None = None

    def output_inactive(self, i):
        """Whether output ``i`` never limited kappa (all-saturated implies it)."""
        if self.kappa_saturated:
            return True
        return bool(self.inactive[i]) if self.inactive is not None else False

    @property
    def any_violated(self):
        return bool(np.any(self.violated))


def outcome_from_log(log, output_columns, labels=None):
    """Per-governed-output violation flags (strict ``y > 0``) from a run log.

    ``output_columns[i]`` lists the log output columns whose violation is
    charged to the ``i``-th tuned coefficient; ``labels[i]`` is the
    constraint label that coefficient governs, used to detect outputs that
    never limited kappa.
    """
    flags = np.array([bool(np.any(log.outputs[:, cols] > 0.0)) for cols in output_columns])
    inactive = None
    if labels is not None:
        active = {d.active_constraint for d in log.diagnostics if d is not None}
        inactive = np.array([lab not in active for lab in labels])
    return RunOutcome(violated=flags, kappa_saturated=log.kappa_saturated(), inactive=inactive)


@dataclass
class TuningRun:
    mbar: np.ndarray
    deltas: np.ndarray
    log: list = field(default_factory=list)
    increase_iterations: np.ndarray | None = None
    sweeps: int = 0
    runs: int = 0

    LOG_FIELDS = ("iteration", "output", "mbar", "violated", "kappa_saturated")

    def to_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.LOG_FIELDS)
            for row in self.log:
                w.writerow([
                    row["iteration"],
                    row["output"],
                    f"{row['mbar']:.17g}",
                    int(row["violated"]),
                    int(row["kappa_saturated"]),
                ])


def calibrate_mbar(system, delta_mbar, max_sweeps=50, max_iterations=10_000, initial=None):
    """Tune one curvature coefficient per governed output.

    ``system(mbar)`` runs the governed closed loop with the coefficient
    vector ``mbar`` and returns a :class:`RunOutcome`.  Outputs are tuned
    round-robin, each with the others held fixed, until a full sweep
    changes nothing.  Runs are memoised on the coefficient vector.

    The shrinking phase for output ``i`` stops at the first violation of
    any tuned output (stepping back once) or as soon as output ``i`` no
    longer limits kappa anywhere on the run; with a single output and no
    other active limit that is the same as kappa being 1 throughout.
    """
    deltas = np.atleast_1d(np.asarray(delta_mbar, dtype=float))
    if np.any(deltas <= 0.0):
        raise ContractViolation("every step size must be positive")
    n = deltas.size
    base = np.zeros(n) if initial is None else np.array(initial, dtype=float)
    steps = np.zeros(n, dtype=np.int64)
    run = TuningRun(mbar=base.copy(), deltas=deltas, increase_iterations=np.zeros(n, dtype=int))
    cache = {}
    counter = [0]

    def current():
        # integer step counts keep repeated +/- moves free of rounding drift
        return base + steps * deltas

    def evaluate(i):
        vec = current()
        key = tuple(float(a) for a in vec)
        if key not in cache:
            cache[key] = system(vec.copy())
            run.runs += 1
        out = cache[key]
        counter[0] += 1
        run.log.append({
            "iteration": counter[0],
            "output": i,
            "mbar": float(vec[i]),
            "violated": out.any_violated,
            "kappa_saturated": out.kappa_saturated,
        })
        if counter[0] > max_iterations:
            raise TuningNonTerminationError(f"no fixed point within {max_iterations} runs")
        return out

    for sweep in range(1, max_sweeps + 1):
        run.sweeps = sweep
        changed = False
        for i in range(n):
            start = steps[i]
            out = evaluate(i)
            if out.violated[i]:
                while out.violated[i]:
                    steps[i] += 1
                    run.increase_iterations[i] += 1
                    out = evaluate(i)
            elif not out.any_violated:
                while not out.output_inactive(i):
                    steps[i] -= 1
                    out = evaluate(i)
                    if out.any_violated:
                        steps[i] += 1
                        break
            changed |= steps[i] != start
        if not changed:
            run.mbar = current()
            return run
    raise TuningNonTerminationError(f"no fixed point after {max_sweeps} sweeps")


@dataclass
class RbarResult:
    bound: ResidualBound
    argmax: list
    residuals: np.ndarray | None = None


def compute_rbar(prg_log, nominal_source, plant, j_star, keep_residuals=False):
    """Largest first-order residual seen along a recorded governed run.

    For every logged sample the nominal command is rebuilt from the
    network, the prediction at the nominal command and its sensitivity are
    compared with the prediction at the command actually applied, and the
    residual ``g(v) - g_n - S_g (v - v_n)`` is maximised over samples and
    horizon steps, per governed output.
    """
    n = len(prg_log)
    if prg_log.states.shape[1] != plant.state_dim:
        raise ContractViolation("run log state width does not match the plant")
    best = None
    where = None
    store = [] if keep_residuals else None
    for t in range(n):
        x = prg_log.states[t]
        v_prev, r, v = prg_log.v_prev[t], prg_log.r[t], prg_log.v[t]
        raw = float(nominal_source(x, v_prev, r))
        _, v_n = dynamic_saturation(raw, GovernorState(v_prev), r)
        sens = propagate(plant, x, v_n, j_star)
        g_n, S_g, _ = governed_view(plant, sens)
        g = governed_values(plant, predict_constant(plant, x, v, j_star))
        res = g - g_n - S_g * (v - v_n)
        if store is not None:
            store.append(res)
        top = res.max(axis=0)
        if best is None:
            best = top.copy()
            where = [(t, int(j)) for j in res.argmax(axis=0)]
        else:
            for i in np.flatnonzero(top > best):
                best[i] = top[i]
                where[i] = (t, int(res[:, i].argmax()))
    if best is None:
        raise ContractViolation("empty run log")
    residuals = np.stack(store) if store is not None else None
    return RbarResult(bound=ResidualBound(best), argmax=where, residuals=residuals)
