"""Controller-augmented fuel-cell air-path model.

States are ``[p_ca, omega_cp, p_sm, z]``: cathode pressure [Pa], compressor
speed [rad/s], supply-manifold pressure [Pa] and the PI integrator state.
The governed input is the stack current [A].  The compressor motor voltage
is a static feedforward in the current plus PI feedback on the compressor
flow error, so the model below is already closed-loop.

Sampling uses fixed-step RK4 with ``n_sub`` substeps per sample.  The
variational (sensitivity) equations are integrated jointly with the states
by the same scheme, so the resulting ``S_x`` is the exact derivative of the
sampled map with respect to the current.
"""

from __future__ import annotations

import numpy as np
from numba import njit

from ..errors import ContractViolation, DivergedTrajectoryError, MapDomainError
from ..governor import taylor_coefficients
from ..simcore import PlantModel
from .params import FcParams, load_params

(MU1, MU2, MU3, MU4, C6, C7, C8, C9, C10, C11, C12, C14, C15, C16, C17,
 G1, G2, KP, KI, A0, A1, A2, BETA, WSCALE, PATM, HW, HP,
 WMIN, WMAX, PMIN, PMAX) = range(31)

SURGE_SLOPE = 50.0
SURGE_OFFSET = 0.1
CHOKE_SLOPE = 15.27
CHOKE_OFFSET = 0.6
OER_MIN = 1.9

OK, NONFINITE, OUT_OF_MAP = 0, 1, 2


def pack_constants(p):
    """Flat float array of every constant the compiled kernels read."""
    m = p.cmap
    vals = [
        p.mu1, p.mu2, p.mu3, p.mu4, p.c6, p.c7, p.c8, p.c9, p.c10, p.c11, p.c12,
        p.c14, p.c15, p.c16, p.c17, p.g1, p.g2, p.k_p, p.k_i,
        m.coefficients[0], m.coefficients[1], m.coefficients[2], m.beta, m.speed_scale,
        m.p_atm, m.fd_speed, m.fd_pressure,
        m.speed_range[0], m.speed_range[1], m.pressure_range[0], m.pressure_range[1],
    ]
    return np.array(vals, dtype=np.float64)


@njit(cache=True)
def _flow(P, w, p):
    s = w / P[WSCALE]
    return P[A0] + P[A1] * s + P[A2] * s * s - P[BETA] * (p / P[PATM] - 1.0)


@njit(cache=True)
def _flow_partials(P, w, p):
    hw = P[HW]
    hp = P[HP]
    dw = (_flow(P, w + hw, p) - _flow(P, w - hw, p)) / (2.0 * hw)
    dp = (_flow(P, w, p + hp) - _flow(P, w, p - hp)) / (2.0 * hp)
    return dw, dp


@njit(cache=True)
def _rhs(P, x, v, out):
    x1, x2, x3, x4 = x[0], x[1], x[2], x[3]
    W = _flow(P, x2, x3)
    phi = (x3 / P[C8]) ** P[C9] - 1.0
    out[0] = -P[MU1] * x1 + P[MU2] * x3 + P[MU3] - P[MU4] * v
    out[1] = (P[C10] * (P[G1] * v + P[G2] + P[KP] * (P[C15] * v - W) + P[KI] * x4)
              - P[C6] * x2 - P[C7] / x2 * phi * W)
    out[2] = P[C11] * (1.0 + P[C12] * phi) * (W - P[C14] * (x3 - x1))
    out[3] = P[C15] * v - W


@njit(cache=True)
def _rhs_sens(P, x, S, v, dx, dS):
    x1, x2, x3, x4 = x[0], x[1], x[2], x[3]
    W = _flow(P, x2, x3)
    Wx2, Wx3 = _flow_partials(P, x2, x3)
    pr = (x3 / P[C8]) ** P[C9]
    phi = pr - 1.0
    dphi = P[C9] * pr / x3
    G = P[C11] * (1.0 + P[C12] * phi)
    c7x = P[C7] / x2
    dx[0] = -P[MU1] * x1 + P[MU2] * x3 + P[MU3] - P[MU4] * v
    dx[1] = (P[C10] * (P[G1] * v + P[G2] + P[KP] * (P[C15] * v - W) + P[KI] * x4)
             - P[C6] * x2 - c7x * phi * W)
    dx[2] = G * (W - P[C14] * (x3 - x1))
    dx[3] = P[C15] * v - W
    dS[0] = -P[MU1] * S[0] + P[MU2] * S[2] - P[MU4]
    dS[1] = (S[1] * (-P[C10] * P[KP] * Wx2 - P[C6] - c7x * phi * Wx2 + c7x / x2 * phi * W)
             + S[2] * (-P[C10] * P[KP] * Wx3 - c7x * dphi * W - c7x * phi * Wx3)
             + P[C10] * P[KI] * S[3] + P[C10] * (P[G1] + P[KP] * P[C15]))
    dS[2] = (S[0] * P[C14] * G + S[1] * G * Wx2
             + S[2] * (P[C11] * P[C12] * dphi * (W - P[C14] * (x3 - x1)) + G * (Wx3 - P[C14])))
    dS[3] = -Wx2 * S[1] - Wx3 * S[2] + P[C15]


@njit(cache=True)
def _in_map(P, x):
    if not (P[WMIN] <= x[1] <= P[WMAX] and P[PMIN] <= x[2] <= P[PMAX] and x[0] > 0.0):
        return False
    return _flow(P, x[1], x[2]) > 0.0


@njit(cache=True)
def _finite(x):
    for i in range(x.shape[0]):
        if not np.isfinite(x[i]):
            return False
    return True


@njit(cache=True)
def _rk4_sample(P, x, v, h, n_sub):
    k1 = np.empty(4)
    k2 = np.empty(4)
    k3 = np.empty(4)
    k4 = np.empty(4)
    tmp = np.empty(4)
    y = x.copy()
    for _ in range(n_sub):
        _rhs(P, y, v, k1)
        for i in range(4):
            tmp[i] = y[i] + 0.5 * h * k1[i]
        _rhs(P, tmp, v, k2)
        for i in range(4):
            tmp[i] = y[i] + 0.5 * h * k2[i]
        _rhs(P, tmp, v, k3)
        for i in range(4):
            tmp[i] = y[i] + h * k3[i]
        _rhs(P, tmp, v, k4)
        for i in range(4):
            y[i] += h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
    return y


@njit(cache=True)
def _predict(P, x0, v, n, h, n_sub, states):
    x = x0.copy()
    for j in range(n + 1):
        if not _finite(x):
            return j, NONFINITE
        if not _in_map(P, x):
            return j, OUT_OF_MAP
        states[j] = x
        if j < n:
            x = _rk4_sample(P, x, v, h, n_sub)
    return -1, OK


@njit(cache=True)
def _predict_sens(P, x0, v, n, h, n_sub, states, sens):
    x = x0.copy()
    S = np.zeros(4)
    kx = np.empty((4, 4))
    ks = np.empty((4, 4))
    tx = np.empty(4)
    ts = np.empty(4)
    for j in range(n + 1):
        if not (_finite(x) and _finite(S)):
            return j, NONFINITE
        if not _in_map(P, x):
            return j, OUT_OF_MAP
        states[j] = x
        sens[j] = S
        if j < n:
            for _ in range(n_sub):
                _rhs_sens(P, x, S, v, kx[0], ks[0])
                for i in range(4):
                    tx[i] = x[i] + 0.5 * h * kx[0, i]
                    ts[i] = S[i] + 0.5 * h * ks[0, i]
                _rhs_sens(P, tx, ts, v, kx[1], ks[1])
                for i in range(4):
                    tx[i] = x[i] + 0.5 * h * kx[1, i]
                    ts[i] = S[i] + 0.5 * h * ks[1, i]
                _rhs_sens(P, tx, ts, v, kx[2], ks[2])
                for i in range(4):
                    tx[i] = x[i] + h * kx[2, i]
                    ts[i] = S[i] + h * ks[2, i]
                _rhs_sens(P, tx, ts, v, kx[3], ks[3])
                for i in range(4):
                    x[i] += h / 6.0 * (kx[0, i] + 2.0 * kx[1, i] + 2.0 * kx[2, i] + kx[3, i])
                    S[i] += h / 6.0 * (ks[0, i] + 2.0 * ks[1, i] + 2.0 * ks[2, i] + ks[3, i])
    return -1, OK


def _raise_status(step, kind):
    if kind == NONFINITE:
        raise DivergedTrajectoryError(step)
    if kind == OUT_OF_MAP:
        raise MapDomainError("state left the compressor map operating box", step=step)


# ---------------------------------------------------------------------------
# Plain-numpy evaluations of the model equations (single points, vectorised
# outputs).  The compiled kernels above are used for long predictions.


def fc_derivatives(x, current, p):
    """Time derivative of ``[p_ca, omega_cp, p_sm, z]`` at stack current ``current``."""
    x = np.asarray(x, dtype=float)
    P = pack_constants(p)
    if not bool(_in_map(P, x)):
        raise MapDomainError(f"state {x.tolist()} outside the compressor map box")
    out = np.empty(4)
    _rhs(P, x, float(current), out)
    return out


def fc_sensitivity_derivatives(x, S_x, current, p):
    """Time derivative of the state sensitivity ``dx/dI`` along ``x``."""
    x = np.asarray(x, dtype=float)
    P = pack_constants(p)
    if not bool(_in_map(P, x)):
        raise MapDomainError(f"state {x.tolist()} outside the compressor map box")
    dx, dS = np.empty(4), np.empty(4)
    _rhs_sens(P, x, np.asarray(S_x, dtype=float), float(current), dx, dS)
    return dS


def fc_outputs(x, current, p):
    """``(lambda_O2, W_cp, p_sm)``; arrays of states give arrays of outputs."""
    x = np.asarray(x, dtype=float)
    current = np.asarray(current, dtype=float)
    if np.any(current <= 0.0):
        raise ContractViolation("stack current must be positive")
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    lam = p.c17 * (x3 - x1) / (p.c16 * current)
    flow = p.cmap.flow(x2, x3)
    return lam, flow, x3


def fc_constraints(lam, flow, p_sm, p_atm=101325.0):
    """Margins ``[surge, choke, oer]``; each is ``<= 0`` when satisfied."""
    ratio = np.asarray(p_sm) / p_atm
    surge = ratio - SURGE_SLOPE * np.asarray(flow) + SURGE_OFFSET
    choke = CHOKE_SLOPE * np.asarray(flow) + CHOKE_OFFSET - ratio
    oer = OER_MIN - np.asarray(lam)
    return np.stack([surge, choke, oer], axis=-1)


def fc_output_sensitivities(x, S_x, current, p):
    """``(S_lambda, S_W, S_psm)`` from nominal states and state sensitivities."""
    if np.any(np.asarray(current) <= 0.0):
        raise ContractViolation("nominal stack current must be positive")
    x = np.asarray(x, dtype=float)
    S_x = np.asarray(S_x, dtype=float)
    x1, x2, x3 = x[..., 0], x[..., 1], x[..., 2]
    k = p.c17 / (p.c16 * current)
    s_lam = -k * S_x[..., 0] + k * S_x[..., 2] - p.c17 * (x3 - x1) / (p.c16 * current**2)
    dw, dp = p.cmap.partials(x2, x3)
    s_flow = dw * S_x[..., 1] + dp * S_x[..., 2]
    return s_lam, s_flow, S_x[..., 2]


def fc_mnnrg_constraints(y_nom, S_y, v_n, mbar_lambda, mbar_s, v_prev, r, p_atm=101325.0):
    """Kappa-coefficients of the OER and surge Taylor constraints.

    ``y_nom`` and ``S_y`` hold ``(lambda, W_cp, p_sm)`` columns.  The OER
    lower bound is negated into ``1.9 - lambda <= 0``; the surge limit is
    written in pascals as ``p_sm - 50 p_atm W_cp + 0.1 p_atm <= 0``.  The
    choke limit is not part of the set.
    """
    g, s = governed_from_outputs(y_nom, S_y, p_atm)
    return taylor_coefficients(g, s, v_n, np.array([mbar_lambda, mbar_s]), v_prev, r, GOVERNED_LABELS)


GOVERNED_LABELS = ("oer", "surge")


def governed_from_outputs(y_nom, S_y, p_atm):
    y_nom = np.atleast_2d(y_nom)
    S_y = np.atleast_2d(S_y)
    g = np.column_stack([
        OER_MIN - y_nom[:, 0],
        y_nom[:, 2] - SURGE_SLOPE * p_atm * y_nom[:, 1] + SURGE_OFFSET * p_atm,
    ])
    s = np.column_stack([-S_y[:, 0], S_y[:, 2] - SURGE_SLOPE * p_atm * S_y[:, 1]])
    return g, s


class FuelCellPlant(PlantModel):
    """Sampled fuel-cell air path seen by a governor acting on stack current.

    Outputs are the margins ``[surge, choke, oer]`` (dimensionless); the
    MNN-RG instead constrains OER and surge in the form of
    :func:`fc_mnnrg_constraints` through :meth:`governed_view`.
    """

    state_dim = 4
    output_dim = 3
    output_names = ("surge", "choke", "oer")
    state_names = ("p_ca", "w_cp", "p_sm", "x4")
    # margin columns charged to the OER and surge coefficients during tuning;
    # the choke margin shares the compressor-map coefficient
    governed_columns = ([2], [0, 1])
    governed_labels = GOVERNED_LABELS

    def __init__(self, params=None, dt=0.01, n_sub=10, v_min=100.0, v_max=350.0):
        self.params = load_params() if params is None else params
        if not isinstance(self.params, FcParams):
            raise ContractViolation("params must be FcParams")
        if v_min <= 0.0 or v_max <= v_min:
            raise ContractViolation("current range must satisfy 0 < v_min < v_max")
        self.dt = float(dt)
        self.n_sub = int(n_sub)
        self.v_min = float(v_min)
        self.v_max = float(v_max)
        self._P = pack_constants(self.params)
        self._h = self.dt / self.n_sub

    @property
    def p_atm(self):
        return self.params.cmap.p_atm

    def step(self, x, v):
        x = np.asarray(x, dtype=float)
        nxt = _rk4_sample(self._P, x, float(v), self._h, self.n_sub)
        return nxt

    def output(self, x, v):
        lam, flow, p_sm = fc_outputs(x, v, self.params)
        return fc_constraints(lam, flow, p_sm, self.p_atm)

    def physical_outputs(self, x, v):
        return fc_outputs(x, v, self.params)

    def predict(self, x0, v, n):
        states = np.empty((n + 1, 4))
        step, kind = _predict(self._P, np.asarray(x0, dtype=float), float(v), n, self._h, self.n_sub, states)
        _raise_status(step, kind)
        return states, self.output(states, v)

    def sensitivity_trajectory(self, x0, v, n):
        states = np.empty((n + 1, 4))
        S_x = np.empty((n + 1, 4))
        step, kind = _predict_sens(
            self._P, np.asarray(x0, dtype=float), float(v), n, self._h, self.n_sub, states, S_x
        )
        _raise_status(step, kind)
        s_lam, s_flow, s_psm = fc_output_sensitivities(states, S_x, v, self.params)
        p_atm = self.p_atm
        S_y = np.column_stack([
            s_psm / p_atm - SURGE_SLOPE * s_flow,
            CHOKE_SLOPE * s_flow - s_psm / p_atm,
            -s_lam,
        ])
        return states, self.output(states, v), S_x, S_y

    def governed_view(self, sens):
        """OER and surge (in pascals) with their sensitivities."""
        p_atm = self.p_atm
        y = sens.y_nominal
        g = np.column_stack([y[:, 2], p_atm * y[:, 0]])
        s = np.column_stack([sens.S_y[:, 2], p_atm * sens.S_y[:, 0]])
        return g, s, GOVERNED_LABELS

    def governed_values(self, traj):
        y = traj.outputs
        return np.column_stack([y[:, 2], self.p_atm * y[:, 0]])

    def equilibrium(self, v):
        """Closed-form steady state; the speed root is taken on the rising branch."""
        p = self.params
        m = p.cmap
        d = p.mu1 - p.mu2
        if d <= 0.0:
            raise ContractViolation("parameters give no positive cathode equilibrium")
        ratio = p.c15 / p.c14
        p_ca = ((p.mu2 * ratio - p.mu4) * v + p.mu3) / d
        p_sm = p_ca + ratio * v
        flow = p.c15 * v
        a0, a1, a2 = m.coefficients
        c = a0 - m.beta * (p_sm / m.p_atm - 1.0) - flow
        if a2 == 0.0:
            s = -c / a1
        else:
            disc = a1 * a1 - 4.0 * a2 * c
            if disc < 0.0:
                raise MapDomainError(f"map cannot deliver the steady flow at I={v}")
            q = -0.5 * (a1 + np.copysign(np.sqrt(disc), a1))
            roots = np.array([q / a2, c / q])
            rising = roots[a1 + 2.0 * a2 * roots > 0.0]
            if rising.size == 0:
                raise MapDomainError(f"no rising-branch speed at I={v}")
            s = float(rising.min())
        speed = s * m.speed_scale
        phi = (p_sm / p.c8) ** p.c9 - 1.0
        z = ((p.c6 * speed + p.c7 / speed * phi * flow) / p.c10 - p.g1 * v - p.g2) / p.k_i
        x = np.array([p_ca, speed, p_sm, z])
        if not bool(_in_map(self._P, x)):
            raise MapDomainError(f"equilibrium at I={v} outside the compressor map box")
        return x

    def initial_state(self, v):
        return self.equilibrium(v)

    def measure(self, x, rng, sigma_pressure=500.0, sigma_speed=5.0):
        """State corrupted by additive white sensor noise on pressures and speed."""
        noise = np.array([sigma_pressure, sigma_speed, sigma_pressure, 0.0])
        return np.asarray(x, dtype=float) + noise * rng.standard_normal(4)
