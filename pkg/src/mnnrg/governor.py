"""Reference-governor update laws and the kappa solvers behind them.

Every governor here moves the applied command toward the request with
``v = v_prev + kappa (r - v_prev)`` and differs only in how ``kappa`` is
chosen: bisection over full nonlinear predictions (PRG), a saturated network
output (NN-RG), or a sensitivity-corrected network output (MNN-RG).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractViolation, GovernorError
from .sensitivity import CurvatureBound, ResidualBound, propagate
from .simcore import AdmissibilityConfig, admissibility, predict_constant, steady_state_ok

SOLVER_MODES = ("explicit", "bisection")

# Relative tightening of every Taylor constraint.  When the command sits on
# a constraint boundary the Taylor remainder vanishes with kappa and the
# difference between the coefficient form and a plain simulation is pure
# rounding; this margin keeps that rounding on the safe side.
ROUNDING_MARGIN = 2.0**-42
STEADY_STATE_MODES = ("simulate", "precomputed_interval")


@dataclass(frozen=True)
class GovernorConfig:
    j_star: int = 500
    epsilon: float = 0.05
    L: int = 15
    solver_mode: str = "explicit"
    steady_state_mode: str = "simulate"
    ss_tol: float = 1e-9
    ss_max_steps: int = 10**6

    def __post_init__(self):
        if self.L < 1:
            raise ContractViolation("L must be >= 1")
        if self.j_star < 1:
            raise ContractViolation("j_star must be >= 1")
        if not self.epsilon > 0:
            raise ContractViolation("epsilon must be > 0")
        if self.solver_mode not in SOLVER_MODES:
            raise ContractViolation(f"solver_mode must be one of {SOLVER_MODES}")
        if self.steady_state_mode not in STEADY_STATE_MODES:
            raise ContractViolation(f"steady_state_mode must be one of {STEADY_STATE_MODES}")

    @property
    def admissibility(self):
        return AdmissibilityConfig(
            j_star=self.j_star,
            epsilon=self.epsilon,
            ss_tol=self.ss_tol,
            ss_max_steps=self.ss_max_steps,
        )


@dataclass
class GovernorState:
    v_prev: float


def blend(v_prev, r, kappa):
    return v_prev + kappa * (r - v_prev)


def rg_update(state, r, kappa):
    """Apply the update law and store the new command in ``state``."""
    if not 0.0 <= kappa <= 1.0:
        raise ContractViolation(f"kappa={kappa!r} outside [0, 1]")
    v = blend(state.v_prev, r, kappa)
    state.v_prev = v
    return v


def _steady_ok(plant, v, cfg, interval):
    if cfg.steady_state_mode == "precomputed_interval":
        if interval is None:
            raise ContractViolation("precomputed_interval mode needs an interval")
        return interval[0] <= v <= interval[1]
    return steady_state_ok(plant, v, cfg.admissibility)


def prg_step(plant, x, state, r, cfg, interval=None):
    """One PRG update by bisection over full predictions; returns ``(kappa, v)``.

    Follows the classic bisection: test kappa = 1 first, stop as soon as a
    full step is admissible, and otherwise halve the bracket ``L`` times,
    keeping the last admissible kappa (0 if none was found).
    """
    acfg = cfg.admissibility
    k_lo, k_hi, kappa, k_opt = 0.0, 1.0, 1.0, 0.0
    for _ in range(cfg.L):
        v = blend(state.v_prev, r, kappa)
        verdict = _candidate_ok(plant, x, v, cfg, acfg, interval)
        if verdict:
            k_opt = kappa
            if kappa == 1.0:
                break
            k_lo = kappa
        else:
            k_hi = kappa
        kappa = 0.5 * (k_lo + k_hi)
    return k_opt, rg_update(state, r, k_opt)


def _candidate_ok(plant, x, v, cfg, acfg, interval):
    if cfg.steady_state_mode == "precomputed_interval":
        if not _steady_ok(plant, v, cfg, interval):
            return False
        try:
            traj = predict_constant(plant, x, v, cfg.j_star)
        except GovernorError:
            return False
        return bool(np.max(traj.outputs) <= 0.0)
    return admissibility(plant, x, v, acfg).ok


def dynamic_saturation(v_nn_raw, state, r):
    """Clamp a raw network command onto the segment ``[v_prev, r]``."""
    d = r - state.v_prev
    if d == 0.0:
        kappa_nn = 0.0
    else:
        kappa_nn = min(max((v_nn_raw - state.v_prev) / d, 0.0), 1.0)
    return kappa_nn, blend(state.v_prev, r, kappa_nn)


@dataclass(frozen=True)
class QuadraticConstraint:
    """``a2 kappa^2 + a1 kappa + a0 <= 0``."""

    a2: float
    a1: float
    a0: float


@dataclass
class ConstraintSet:
    """Many quadratic constraints in array form, optionally labelled."""

    a2: np.ndarray
    a1: np.ndarray
    a0: np.ndarray
    labels: np.ndarray | None = None

    def __post_init__(self):
        self.a1 = np.asarray(self.a1, dtype=float).ravel()
        self.a0 = np.asarray(self.a0, dtype=float).ravel()
        if self.a0.size != self.a1.size:
            raise ContractViolation("a1 and a0 differ in length")
        a2 = np.asarray(self.a2, dtype=float)
        if a2.size == self.a1.size:
            self.a2 = a2.ravel()
        else:
            self.a2 = np.broadcast_to(a2, self.a1.shape).copy()
        if self.labels is not None:
            self.labels = np.asarray(self.labels, dtype=object).ravel()

    def __len__(self):
        return self.a1.size

    @classmethod
    def from_list(cls, constraints):
        cons = list(constraints)
        return cls(
            a2=np.array([c.a2 for c in cons], dtype=float),
            a1=np.array([c.a1 for c in cons], dtype=float),
            a0=np.array([c.a0 for c in cons], dtype=float),
        )

    @classmethod
    def concat(cls, sets):
        sets = [s for s in sets if s is not None and len(s)]
        labels = None
        if all(s.labels is not None for s in sets):
            labels = np.concatenate([s.labels for s in sets])
        return cls(
            a2=np.concatenate([s.a2 for s in sets]),
            a1=np.concatenate([s.a1 for s in sets]),
            a0=np.concatenate([s.a0 for s in sets]),
            labels=labels,
        )

    def values(self, kappa):
        return (self.a2 * kappa + self.a1) * kappa + self.a0

    def feasible(self, kappa):
        return bool(np.all(self.values(kappa) <= 0.0))

    def __iter__(self):
        for a2, a1, a0 in zip(self.a2, self.a1, self.a0):
            yield QuadraticConstraint(float(a2), float(a1), float(a0))


def _as_set(constraints):
    if isinstance(constraints, ConstraintSet):
        return constraints
    return ConstraintSet.from_list(constraints)


def _explicit_kappa(cs):
    a2, a1, a0 = cs.a2, cs.a1, cs.a0
    k_up, k_low = 1.0, 0.0

    quad = a2 > 0.0
    if quad.any():
        q2, q1, q0 = a2[quad], a1[quad], a0[quad]
        disc = q1 * q1 - 4.0 * q2 * q0
        if np.any(disc < 0.0):
            return 0.0
        sq = np.sqrt(disc)
        q = -0.5 * (q1 + np.copysign(sq, q1))
        with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
            r1 = q / q2
            r2 = np.where(q != 0.0, q0 / q, 0.0)
        r1 = np.where(q != 0.0, r1, 0.0)
        k_up = min(k_up, float(np.min(np.maximum(r1, r2))))
        k_low = max(k_low, float(np.max(np.minimum(r1, r2))))

    lin = ~quad
    if lin.any():
        l1, l0 = a1[lin], a0[lin]
        pos, neg, flat = l1 > 0.0, l1 < 0.0, l1 == 0.0
        if np.any(l0[flat] > 0.0):
            return 0.0
        with np.errstate(over="ignore"):
            # tiny slopes overflow to +-inf, which is the right limit here
            if pos.any():
                k_up = min(k_up, float(np.min(-l0[pos] / l1[pos])))
            if neg.any():
                k_low = max(k_low, float(np.max(-l0[neg] / l1[neg])))

    return k_up + 0.0 if k_low <= k_up else 0.0


def _bisect_kappa(feasible, L):
    """Largest kappa on the ``2**-L`` grid, assuming kappa = 0 is admissible."""
    if feasible(1.0):
        return 1.0
    n = 2**L
    lo, hi = 0, n
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if feasible(mid / n):
            lo = mid
        else:
            hi = mid
    return lo / n


def solve_kappa(constraints, cfg=None, *, mode=None, L=None, extra=None):
    """Largest kappa in [0, 1] meeting every quadratic inequality.

    ``explicit`` uses the closed-form root rules (quadratic and linear
    cases combined); ``bisection`` searches the ``2**-L`` grid.  ``extra``
    is an optional additional feasibility predicate on kappa.  Sets with a
    negative quadratic coefficient are always solved by bisection.
    """
    cs = _as_set(constraints)
    if len(cs) == 0:
        raise ContractViolation("solve_kappa needs at least one constraint")
    mode = mode or (cfg.solver_mode if cfg is not None else "explicit")
    L = L or (cfg.L if cfg is not None else 15)

    def feasible(k):
        return cs.feasible(k) and (extra is None or extra(k))

    if mode == "explicit" and not np.any(cs.a2 < 0.0):
        kappa = _explicit_kappa(cs)
        if extra is None or extra(kappa):
            return kappa
        return min(kappa, _bisect_kappa(feasible, L))
    if mode not in SOLVER_MODES:
        raise ContractViolation(f"unknown solver mode {mode!r}")
    return _bisect_kappa(feasible, L)


def governed_view(plant, sens):
    """``(g_n, S_g, labels)``: the outputs the MNN-RG constrains, in ``<= 0`` form.

    Plants may expose ``governed_view(sens)`` to recombine or drop raw
    outputs (lower bounds negated, coupled limits merged); by default every
    output is governed as is.
    """
    hook = getattr(plant, "governed_view", None)
    if hook is not None:
        return hook(sens)
    labels = plant.output_names or tuple(f"y{i + 1}" for i in range(plant.output_dim))
    return sens.y_nominal, sens.S_y, labels


def governed_values(plant, traj):
    """Governed outputs of a plain prediction, matching :func:`governed_view`."""
    hook = getattr(plant, "governed_values", None)
    if hook is not None:
        return hook(traj)
    return traj.outputs


def taylor_coefficients(g_n, S_g, v_n, bound, v_prev, r, labels=None):
    """Kappa-coefficients of the Taylor-bounded output constraints.

    With ``dv0 = v_prev - v_n`` and ``d = r - v_prev`` the bound
    ``g_n + S_g (v - v_n) + M/2 (v - v_n)^2`` expands to
    ``M/2 d^2 k^2 + (S_g d + M d dv0) k + g_n + S_g dv0 + M/2 dv0^2``.
    A ``ResidualBound`` replaces the quadratic term by the constant ``R``.
    """
    g_n = np.atleast_2d(g_n)
    n1, ny = g_n.shape
    d = r - v_prev
    dv0 = v_prev - v_n
    if isinstance(bound, ResidualBound):
        rb = np.broadcast_to(bound.as_array(), (ny,))
        a2 = np.zeros((n1, ny))
        a1 = S_g * d
        a0 = g_n + S_g * dv0 + rb
    else:
        m = bound.as_array() if isinstance(bound, CurvatureBound) else np.atleast_1d(bound)
        m = np.broadcast_to(m, (ny,))
        a2 = np.broadcast_to(0.5 * m * d * d, (n1, ny))
        a1 = S_g * d + m * d * dv0
        a0 = g_n + S_g * dv0 + 0.5 * m * dv0 * dv0
    if labels is None:
        labels = [f"y{i + 1}" for i in range(ny)]
    lab = np.broadcast_to(np.asarray(labels, dtype=object), (n1, ny))
    return ConstraintSet(a2=a2, a1=a1, a0=a0, labels=lab)


def taylor_constraints(plant, sens, bound, v_prev, r):
    g_n, S_g, labels = governed_view(plant, sens)
    return taylor_coefficients(g_n, S_g, sens.v_n, bound, v_prev, r, labels)


def interval_constraints(interval, v_prev, r):
    """The steady-state input interval as two affine kappa constraints."""
    v_lo, v_hi = interval
    d = r - v_prev
    return ConstraintSet(
        a2=np.zeros(2),
        a1=np.array([d, -d]),
        a0=np.array([v_prev - v_hi, v_lo - v_prev]),
        labels=np.array(["steady_hi", "steady_lo"], dtype=object),
    )


@dataclass
class StepDiagnostics:
    r: float
    v_prev: float
    v_nn_raw: float = np.nan
    kappa_nn: float = np.nan
    v_n: float = np.nan
    kappa: float = np.nan
    v: float = np.nan
    active_constraint: str = ""
    fallback: str | None = None

    CSV_FIELDS = ("r", "v_prev", "v_nn_raw", "kappa_nn", "v_n", "kappa", "v", "active_constraint")


def _active_label(cs, kappa, L, extra=None):
    if kappa >= 1.0:
        return ""
    probe = min(1.0, kappa + 2.0**-L)
    vals = cs.values(probe)
    i = int(np.argmax(vals))
    if vals[i] <= 0.0 and extra is not None and not extra(probe):
        return "steady"
    return str(cs.labels[i]) if cs.labels is not None else str(i)


def mnnrg_step(plant, x, state, r, nominal_source, bound, cfg, interval=None):
    """One MNN-RG update; returns ``(kappa, v, diagnostics)``.

    The network's proposal is saturated onto ``[v_prev, r]``, a single
    prediction with sensitivities is run at that nominal command, and kappa
    is the largest value satisfying the Taylor-bounded constraints plus the
    steady-state tightening.  Any internal failure holds the last command.
    """
    v_prev = state.v_prev
    diag = StepDiagnostics(r=r, v_prev=v_prev)
    try:
        v_raw = float(nominal_source(x, v_prev, r))
        diag.v_nn_raw = v_raw
        kappa_nn, v_n = dynamic_saturation(v_raw, state, r)
        diag.kappa_nn, diag.v_n = kappa_nn, v_n

        sens = propagate(plant, x, v_n, cfg.j_star)
        g_n, S_g, labels = governed_view(plant, sens)
        cs = taylor_coefficients(g_n, S_g, v_n, bound, v_prev, r, labels)
        scale = np.maximum(1.0, np.max(np.abs(g_n), axis=0))
        cs.a0 = cs.a0 + np.broadcast_to(ROUNDING_MARGIN * scale, g_n.shape).ravel()

        extra = None
        if cfg.steady_state_mode == "precomputed_interval":
            if interval is None:
                raise ContractViolation("precomputed_interval mode needs an interval")
            cs = ConstraintSet.concat([cs, interval_constraints(interval, v_prev, r)])
        else:
            acfg = cfg.admissibility

            def extra(k):
                return steady_state_ok(plant, blend(v_prev, r, k), acfg)

        if r == v_prev:
            kappa = 1.0 if np.all(cs.a0 <= 0.0) else 0.0
        else:
            kappa = solve_kappa(cs, cfg, extra=extra)
        diag.active_constraint = _active_label(cs, kappa, cfg.L, extra)
    except (GovernorError, FloatingPointError, ValueError) as exc:
        kappa = 0.0
        diag.fallback = f"{type(exc).__name__}: {exc}"
    kappa = min(max(kappa, 0.0), 1.0)
    v = rg_update(state, r, kappa)
    diag.kappa, diag.v = kappa, v
    return kappa, v, diag


def _linear_hv(A, B, C, D, j_star):
    n = A.shape[0]
    eye = np.eye(n)
    Hx = np.empty((j_star + 1, C.shape[0], n))
    Hv = np.empty((j_star + 1, C.shape[0]))
    Aj = eye.copy()
    try:
        inv = np.linalg.inv(eye - A)
        if not np.all(np.isfinite(inv)):
            raise np.linalg.LinAlgError
    except np.linalg.LinAlgError:
        inv = None
    acc = np.zeros((n, n))
    for j in range(j_star + 1):
        Hx[j] = C @ Aj
        if inv is not None:
            Hv[j] = C @ inv @ (eye - Aj) @ B + D
        else:
            Hv[j] = C @ acc @ B + D
            acc = acc + Aj
        Aj = Aj @ A
    gain = None if inv is None else C @ inv @ B + D
    return Hx, Hv, gain


def linear_rg_step(A, B, C, D, x, state, r, cfg, offset=None):
    """Standard linear RG for ``x+ = Ax + Bv``, ``y = Cx + Dv + offset``.

    Maximises kappa over ``H_x(j) x + H_v(j) v + offset <= 0`` for
    ``j = 0..j_star`` and the tightened steady state ``G v + offset <= -eps``.
    """
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(-1)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    ny = C.shape[0]
    D = np.zeros(ny) if D is None else np.asarray(D, dtype=float).reshape(-1)
    e = np.zeros(ny) if offset is None else np.asarray(offset, dtype=float).reshape(-1)
    x = np.asarray(x, dtype=float)

    Hx, Hv, gain = _linear_hv(A, B, C, D, cfg.j_star)
    v_prev = state.v_prev
    d = r - v_prev
    base = Hx @ x + e
    a1 = Hv * d
    a0 = base + Hv * v_prev
    if gain is None:
        raise ContractViolation("I - A is singular; no unique steady state")
    sets = [
        ConstraintSet(a2=0.0, a1=a1, a0=a0),
        ConstraintSet(a2=0.0, a1=gain * d, a0=gain * v_prev + e + cfg.epsilon),
    ]
    cs = ConstraintSet.concat(sets)
    kappa = 1.0 if d == 0.0 and np.all(cs.a0 <= 0.0) else _explicit_kappa(cs)
    return kappa, rg_update(state, r, kappa)


def linear_hv(A, B, C, D, j_star):
    """``(H_x(j), H_v(j))`` for ``j = 0..j_star``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float).reshape(-1)
    C = np.atleast_2d(np.asarray(C, dtype=float))
    D = np.zeros(C.shape[0]) if D is None else np.asarray(D, dtype=float).reshape(-1)
    Hx, Hv, _ = _linear_hv(A, B, C, D, j_star)
    return Hx, Hv


class Governor:
    """Stateful wrapper used by closed-loop runs."""

    name = "base"

    def __init__(self):
        self.state = GovernorState(v_prev=np.nan)
        self.last = None

    def reset(self, v0):
        self.state = GovernorState(v_prev=float(v0))
        self.last = None

    def __call__(self, x, r):
        raise NotImplementedError


class NoGovernor(Governor):
    name = "none"

    def __call__(self, x, r):
        self.state.v_prev = r
        self.last = StepDiagnostics(r=r, v_prev=r, kappa=1.0, v=r)
        return r


class PrgGovernor(Governor):
    name = "prg"

    def __init__(self, plant, cfg, interval=None):
        super().__init__()
        self.plant, self.cfg, self.interval = plant, cfg, interval

    def __call__(self, x, r):
        v_prev = self.state.v_prev
        kappa, v = prg_step(self.plant, x, self.state, r, self.cfg, self.interval)
        self.last = StepDiagnostics(r=r, v_prev=v_prev, kappa=kappa, v=v)
        return v


class NnRgGovernor(Governor):
    name = "nnrg"

    def __init__(self, nominal_source):
        super().__init__()
        self.source = nominal_source

    def __call__(self, x, r):
        v_prev = self.state.v_prev
        raw = float(self.source(x, v_prev, r))
        kappa, v = dynamic_saturation(raw, self.state, r)
        self.state.v_prev = v
        self.last = StepDiagnostics(
            r=r, v_prev=v_prev, v_nn_raw=raw, kappa_nn=kappa, v_n=v, kappa=kappa, v=v
        )
        return v


@dataclass
class MnnRgGovernor(Governor):
    plant: object = None
    source: object = None
    bound: object = None
    cfg: GovernorConfig = field(default_factory=GovernorConfig)
    interval: tuple | None = None
    name = "mnnrg"

    def __post_init__(self):
        Governor.__init__(self)

    def __call__(self, x, r):
        _, v, diag = mnnrg_step(
            self.plant, x, self.state, r, self.source, self.bound, self.cfg, self.interval
        )
        self.last = diag
        return v
