"""Fuel-cell air-path parameters, derived model constants and the compressor map.

The primitive physical constants are combined into the lumped coefficients
``mu1..mu4`` and ``c1..c17`` used by the state and sensitivity equations.
A parameter file stores both; :meth:`FcParams.audit` recomputes the lumped
values from the primitives so a hand-edited file cannot drift silently.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from importlib import resources

import numpy as np

from ..errors import CorruptFileError, SchemaError

PARAMS_VERSION = 1


@dataclass(frozen=True)
class CompressorMap:
    """Smooth surrogate for the compressor mass flow ``W_cp(omega, p_sm)``.

    ``W = a0 + a1 w + a2 w^2 - beta (p_sm / p_atm - 1)`` with
    ``w = omega / speed_scale``.  Partials are taken by central differences
    with fixed steps, as a fitted map would require.
    """

    coefficients: tuple = (0.0, 0.0, 0.0)
    beta: float = 0.02
    speed_scale: float = 1.0e4
    p_atm: float = 101325.0
    fd_speed: float = 1.0
    fd_pressure: float = 10.0
    speed_range: tuple = (3000.0, 20000.0)
    pressure_range: tuple = (100000.0, 350000.0)

    def flow(self, omega, p_sm):
        a0, a1, a2 = self.coefficients
        w = omega / self.speed_scale
        return a0 + a1 * w + a2 * w * w - self.beta * (p_sm / self.p_atm - 1.0)

    def partials(self, omega, p_sm):
        """``(dW/domega, dW/dp_sm)`` by central differences."""
        hw, hp = self.fd_speed, self.fd_pressure
        dw = (self.flow(omega + hw, p_sm) - self.flow(omega - hw, p_sm)) / (2 * hw)
        dp = (self.flow(omega, p_sm + hp) - self.flow(omega, p_sm - hp)) / (2 * hp)
        return dw, dp

    def in_domain(self, omega, p_sm):
        """Inside the speed/pressure box and delivering positive flow."""
        lo_w, hi_w = self.speed_range
        lo_p, hi_p = self.pressure_range
        inside = lo_w <= omega <= hi_w and lo_p <= p_sm <= hi_p
        return bool(inside and self.flow(omega, p_sm) > 0.0)


DERIVED_NAMES = ("mu1", "mu2", "mu3", "mu4") + tuple(f"c{i}" for i in range(1, 18))


@dataclass(frozen=True)
class FcParams:
    # physical primitives (SI units)
    R_u: float = 8.314
    T_st: float = 353.15
    T_atm: float = 298.15
    V_ca: float = 0.01
    V_sm: float = 0.02
    n_cell: float = 381.0
    F: float = 96485.0
    M_O2: float = 32e-3
    M_N2: float = 28e-3
    M_a_atm: float = 28.96e-3
    k_ca_in: float = 3.62e-6
    x_O2_atm: float = 0.233
    omega_atm: float = 0.0098
    p_atm: float = 101325.0
    p_sat: float = 47390.0
    eta_cm: float = 0.98
    eta_cp: float = 0.8
    k_t: float = 0.0225
    k_v: float = 0.0153
    J_cp: float = 5e-5
    R_cm: float = 1.2
    C_p: float = 1004.0
    gamma: float = 1.4
    C_D: float = 0.0124
    A_t: float = 0.0068
    chi: float = 0.0264
    # controller
    k_p: float = 100.0
    k_i: float = 500.0
    g1: float = 0.6814
    g2: float = 33.8741
    lambda_des: float = 2.0
    # compressor map and stored lumped constants
    cmap: CompressorMap = field(default_factory=CompressorMap)
    derived_values: dict | None = None

    def __post_init__(self):
        if self.derived_values is None:
            object.__setattr__(self, "derived_values", compute_derived(self))

    def __getattr__(self, name):
        if name in DERIVED_NAMES:
            return self.derived_values[name]
        raise AttributeError(name)

    def audit(self):
        """Largest relative mismatch between stored and recomputed constants."""
        fresh = compute_derived(self)
        worst = {}
        for name in DERIVED_NAMES:
            ref = fresh[name]
            worst[name] = abs(self.derived_values[name] - ref) / max(abs(ref), 1e-300)
        return worst

    def with_primitives(self, **changes):
        """Copy with changed primitives and freshly derived constants."""
        return replace(self, derived_values=None, **changes)

    def primitives(self):
        skip = {"cmap", "derived_values"}
        return {f.name: getattr(self, f.name) for f in fields(self) if f.name not in skip}

    def to_dict(self):
        return {
            "version": PARAMS_VERSION,
            "primitives": self.primitives(),
            "derived": dict(self.derived_values),
            "map": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.cmap).items()},
        }


def compute_derived(p):
    """Lumped model constants from the physical primitives."""
    RT = p.R_u * p.T_st
    hum = 1.0 + p.omega_atm
    g = p.gamma
    c1 = RT * p.k_ca_in * p.x_O2_atm / (p.M_O2 * p.V_ca * hum)
    c2 = p.p_sat
    c3 = RT / p.V_ca
    c4 = p.n_cell * RT / (4.0 * p.V_ca * p.F)
    c5 = RT * p.k_ca_in * (1.0 - p.x_O2_atm) / (p.M_N2 * p.V_ca * hum)
    c6 = p.eta_cm * p.k_t * p.k_v / (p.J_cp * p.R_cm)
    c7 = p.C_p * p.T_atm / (p.J_cp * p.eta_cp)
    c8 = p.p_atm
    c9 = (g - 1.0) / g
    c10 = p.eta_cm * p.k_t / (p.J_cp * p.R_cm)
    c11 = p.R_u * p.T_atm / (p.M_a_atm * p.V_sm)
    c12 = 1.0 / p.eta_cp
    c13 = p.C_D * p.A_t / math.sqrt(RT) * math.sqrt(g) * (2.0 / (g + 1.0)) ** ((g + 1.0) / (2.0 * (g - 1.0)))
    c14 = p.k_ca_in
    c16 = p.n_cell * p.M_O2 / (4.0 * p.F)
    c15 = c16 * p.lambda_des * hum / p.x_O2_atm
    c17 = p.k_ca_in * p.x_O2_atm / hum
    mu1 = 0.88 * (c1 + c5 + c3 * c13 / p.chi)
    mu2 = c1 + c5
    mu3 = 0.88 * (c2 * c3 * c13 / p.chi)
    mu4 = c4
    out = {"mu1": mu1, "mu2": mu2, "mu3": mu3, "mu4": mu4}
    for i, val in enumerate(
        (c1, c2, c3, c4, c5, c6, c7, c8, c9, c10, c11, c12, c13, c14, c15, c16, c17), start=1
    ):
        out[f"c{i}"] = val
    return out


def equilibrium_pressures(p, current):
    """Steady ``(p_ca, p_sm, W_cp)`` at stack current ``current``.

    At equilibrium the PI integrator forces ``W_cp = c15 I`` and the
    manifold outflow matches it, which leaves two linear equations in the
    pressures.
    """
    d = p.mu1 - p.mu2
    ratio = p.c15 / p.c14
    p_ca = ((p.mu2 * ratio - p.mu4) * current + p.mu3) / d
    p_sm = p_ca + ratio * current
    return p_ca, p_sm, p.c15 * current


def fit_surrogate_map(p, currents, beta=0.02, speed_scale=1.0e4):
    """Least-squares speed polynomial making feedforward alone consistent.

    For each current, the speed at which the static feedforward voltage
    balances the compressor torque is computed; the quadratic in speed is
    then fitted so the map delivers ``c15 I`` there, i.e. the PI integrator
    settles near zero across the operating range.
    """
    currents = np.asarray(currents, dtype=float)
    _, p_sm, flow = equilibrium_pressures(p, currents)
    volt = p.g1 * currents + p.g2
    phi = (p_sm / p.c8) ** p.c9 - 1.0
    b = p.c10 * volt
    speed = (b + np.sqrt(b * b - 4.0 * p.c6 * p.c7 * phi * flow)) / (2.0 * p.c6)
    w = speed / speed_scale
    basis = np.column_stack([np.ones_like(w), w, w * w])
    target = flow + beta * (p_sm / p.p_atm - 1.0)
    coef, *_ = np.linalg.lstsq(basis, target, rcond=None)
    return tuple(float(c) for c in coef)


def _check_keys(section, expected, name):
    missing = set(expected) - set(section)
    if missing:
        raise SchemaError(f"{name} section lacks {sorted(missing)}")


def params_from_dict(data):
    if not isinstance(data, dict) or data.get("version") != PARAMS_VERSION:
        raise SchemaError(f"unsupported parameter file version {data.get('version') if isinstance(data, dict) else None!r}")
    for key in ("primitives", "derived", "map"):
        if key not in data:
            raise SchemaError(f"parameter file lacks '{key}'")
    prim = data["primitives"]
    names = [f.name for f in fields(FcParams) if f.name not in ("cmap", "derived_values")]
    _check_keys(prim, names, "primitives")
    _check_keys(data["derived"], DERIVED_NAMES, "derived")
    m = dict(data["map"])
    for key in ("coefficients", "speed_range", "pressure_range"):
        if key in m:
            m[key] = tuple(float(c) for c in m[key])
    cmap = CompressorMap(**m)
    derived = {k: float(data["derived"][k]) for k in DERIVED_NAMES}
    return FcParams(**{k: float(prim[k]) for k in names}, cmap=cmap, derived_values=derived)


def load_params(path=None):
    """Load a parameter file; the packaged default when ``path`` is None."""
    try:
        if path is None:
            text = resources.files("mnnrg.fuelcell").joinpath("data/fc_params.json").read_text()
        else:
            with open(path) as fh:
                text = fh.read()
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptFileError(f"parameter file is not valid JSON: {exc}") from exc
    return params_from_dict(data)


def save_params(p, path):
    from ..io import atomic_write_text

    atomic_write_text(path, json.dumps(p.to_dict(), indent=2, sort_keys=False) + "\n")


def build_default_params(fit_currents=None):
    """The shipped parameter set: primitives plus a freshly fitted map."""
    base = FcParams()
    if fit_currents is None:
        fit_currents = np.linspace(80.0, 380.0, 31)
    coef = fit_surrogate_map(base, fit_currents)
    return replace(base, cmap=replace(base.cmap, coefficients=coef, p_atm=base.p_atm))
