"""TOML run configuration with built-in defaults.

Sections::

    [run]       seed, out
    [plant]     kind (fuelcell | toy | linear), params, dt, n_sub, v_min, v_max
    [governor]  j_star, epsilon, L, solver_mode, steady_state_mode
    [profiles.<id>]  kind = steps | random_steps | smooth | csv, plus kind fields
    [collect]   profile
    [train]     hidden, seeds, lr, max_epochs, patience, dataset
    [tune]      method (mbar | rbar), profile, delta
    [mnnrg]     mbar or rbar (overrides a tuning result)
    [simulate]  profile, governor, reference
    [bench]     profile, repeats, governors, L_values, sweep_repeats

Unknown sections or keys are rejected so typos surface early.
"""

from __future__ import annotations

import copy
import hashlib
import json
import sys

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

from .errors import ConfigError

DEFAULTS = {
    "run": {"seed": 0, "out": "runs"},
    "plant": {
        "kind": "fuelcell",
        "params": "",
        "dt": 0.01,
        "n_sub": 10,
        "v_min": 100.0,
        "v_max": 350.0,
    },
    "governor": {
        "j_star": 500,
        "epsilon": 0.05,
        "L": 15,
        "solver_mode": "explicit",
        "steady_state_mode": "precomputed_interval",
    },
    "profiles": {
        "train": {
            "kind": "random_steps",
            "n_samples": 3000,
            "low": 120.0,
            "high": 320.0,
            "hold_min": 50,
            "hold_max": 200,
            "seed": 1,
        },
        "step": {"kind": "steps", "levels": [150.0, 250.0, 150.0], "durations": [100, 300, 300]},
        "bench": {"kind": "steps", "levels": [150.0, 250.0, 150.0], "durations": [20, 150, 150]},
    },
    "collect": {"profile": "train"},
    "train": {
        "hidden": [10],
        "seeds": [0],
        "lr": 1e-2,
        "max_epochs": 5000,
        "patience": 50,
        "dataset": "",
    },
    "tune": {"method": "mbar", "profile": "step", "delta": [1e-5, 1.0]},
    "mnnrg": {},
    "simulate": {"profile": "step", "governor": "mnnrg", "reference": ""},
    "bench": {
        "profile": "bench",
        "repeats": 10,
        "governors": ["prg", "mnnrg"],
        "L_values": list(range(2, 16)),
        "sweep_repeats": 3,
    },
}

PROFILE_FIELDS = {
    "steps": {"kind", "levels", "durations"},
    "random_steps": {"kind", "n_samples", "low", "high", "hold_min", "hold_max", "seed"},
    "smooth": {"kind", "n_samples", "low", "high", "knots", "seed"},
    "csv": {"kind", "path"},
}

MNNRG_FIELDS = {"mbar", "rbar"}


def _merge(base, override, path=""):
    out = copy.deepcopy(base)
    for key, val in override.items():
        where = f"{path}.{key}" if path else key
        if path == "" and key not in base:
            raise ConfigError(f"unknown section [{key}]")
        if path in ("profiles", "mnnrg"):
            out[key] = val
            continue
        if key not in base:
            raise ConfigError(f"unknown key '{where}'")
        if isinstance(base[key], dict):
            if not isinstance(val, dict):
                raise ConfigError(f"'{where}' must be a table")
            out[key] = _merge(base[key], val, where)
        else:
            out[key] = val
    return out


def validate(cfg):
    for pid, prof in cfg["profiles"].items():
        kind = prof.get("kind")
        if kind not in PROFILE_FIELDS:
            raise ConfigError(f"profile '{pid}' has unknown kind {kind!r}")
        extra = set(prof) - PROFILE_FIELDS[kind]
        missing = PROFILE_FIELDS[kind] - set(prof) - {"seed", "knots"}
        if extra or missing:
            raise ConfigError(f"profile '{pid}': unexpected {sorted(extra)}, missing {sorted(missing)}")
    for section, key in (("collect", "profile"), ("tune", "profile"), ("simulate", "profile"), ("bench", "profile")):
        if cfg[section][key] not in cfg["profiles"]:
            raise ConfigError(f"[{section}] refers to undefined profile '{cfg[section][key]}'")
    if cfg["plant"]["kind"] not in ("fuelcell", "toy", "linear"):
        raise ConfigError(f"unknown plant kind {cfg['plant']['kind']!r}")
    if cfg["tune"]["method"] not in ("mbar", "rbar"):
        raise ConfigError("tune.method must be 'mbar' or 'rbar'")
    if set(cfg["mnnrg"]) - MNNRG_FIELDS or len(cfg["mnnrg"]) > 1:
        raise ConfigError("[mnnrg] takes exactly one of 'mbar' or 'rbar'")
    if cfg["simulate"]["governor"] not in ("none", "prg", "nnrg", "mnnrg"):
        raise ConfigError(f"unknown governor {cfg['simulate']['governor']!r}")
    from .governor import GovernorConfig

    try:
        GovernorConfig(**cfg["governor"])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[governor]: {exc}") from exc
    return cfg


def load_config(path=None, overrides=None):
    """Defaults merged with a TOML file and then with ``overrides``."""
    data = {}
    if path:
        try:
            with open(path, "rb") as fh:
                data = tomllib.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid TOML: {exc}") from exc
    cfg = _merge(DEFAULTS, data)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate(cfg)


def config_hash(cfg):
    blob = json.dumps(cfg, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()
