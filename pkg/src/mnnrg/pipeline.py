"""Offline pipeline steps: collect governor data, train, tune, evaluate."""

from __future__ import annotations

import numpy as np

from .closedloop import run_closed_loop
from .governor import MnnRgGovernor, PrgGovernor
from .neural import Dataset, NetworkSource, train
from .tuning import calibrate_mbar, outcome_from_log


def dataset_from_log(log, state_names=None):
    """Training rows ``[x(t), v(t-1), r(t)] -> v(t)``, one per logged sample."""
    nx = log.states.shape[1]
    names = tuple(state_names) if state_names else tuple(f"x{i + 1}" for i in range(nx))
    feats = np.column_stack([log.states, log.v_prev, log.r])
    return Dataset(features=feats, targets=log.v, feature_names=names + ("v_prev", "r"), target_name="v")


def collect(plant, cfg, profile, x0, interval=None):
    """Run the PRG along ``profile``; returns ``(dataset, run_log)``."""
    log = run_closed_loop(plant, PrgGovernor(plant, cfg, interval), profile, x0)
    return dataset_from_log(log, getattr(plant, "state_names", None)), log


def train_trials(data, widths, seeds, config=None):
    """Train one network per ``(width, seed)``; best validation RMSE wins."""
    results = []
    for hidden in widths:
        for seed in seeds:
            res = train(data, hidden, seed, config)
            results.append((hidden, seed, res))
    best = min(range(len(results)), key=lambda k: results[k][2].metrics["val_rmse"])
    return results, best


def governed_columns(plant):
    """Log output columns whose violation is charged to each tuned coefficient."""
    hook = getattr(plant, "governed_columns", None)
    if hook is not None:
        return hook
    return [[i] for i in range(plant.output_dim)]


def governed_labels(plant):
    """Constraint labels matching each tuned coefficient."""
    labels = getattr(plant, "governed_labels", None)
    if labels is not None:
        return labels
    return plant.output_names or tuple(f"y{i + 1}" for i in range(plant.output_dim))


def mnnrg_system(plant, source, cfg, profile, x0, interval=None):
    """Closure running the MNN-RG for a given coefficient vector (for tuning)."""
    from .sensitivity import CurvatureBound

    columns = governed_columns(plant)
    labels = governed_labels(plant)

    def system(mbar):
        gov = MnnRgGovernor(plant=plant, source=source, bound=CurvatureBound(mbar), cfg=cfg, interval=interval)
        return outcome_from_log(run_closed_loop(plant, gov, profile, x0), columns, labels)

    return system


def tune_mbar(plant, net, cfg, profile, x0, deltas, interval=None, **kwargs):
    system = mnnrg_system(plant, NetworkSource(net), cfg, profile, x0, interval)
    return calibrate_mbar(system, deltas, **kwargs)
