"""Command-line entry point: collect, train, tune, simulate, bench, compare.

Exit codes: 0 success, 2 configuration error, 3 constraint violation
detected (``simulate --assert-feasible``), 4 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from .bench import slope, time_governor, warm_up
from .closedloop import ClosedLoopLog, command_rmse, run_closed_loop
from .config import config_hash, load_config
from .errors import ConfigError, GovernorError
from .governor import GovernorConfig, MnnRgGovernor, NnRgGovernor, NoGovernor, PrgGovernor
from .io import atomic_write_text, atomic_write_with, sha256_file
from .neural import NetworkSource, TrainConfig, load, save
from .pipeline import collect, train_trials, tune_mbar
from .profiles import check_profile, random_steps, smooth_cycle, step_profile
from .sensitivity import CurvatureBound, ResidualBound
from .simcore import ToyTanhPlant, admissible_interval, linear_test_plant, steady_state
from .tuning import compute_rbar

EXIT_OK, EXIT_CONFIG, EXIT_VIOLATION, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("mnnrg")


class Context:
    """Everything a command needs, built once from the configuration."""

    def __init__(self, cfg, config_path, out):
        self.cfg = cfg
        self.config_path = config_path
        self.out = Path(out)
        self.seed = int(cfg["run"]["seed"])
        self.plant = build_plant(cfg["plant"])
        self.gcfg = GovernorConfig(**cfg["governor"])
        self._interval = None
        self.outputs = []

    @property
    def interval(self):
        if self.gcfg.steady_state_mode != "precomputed_interval":
            return None
        if self._interval is None:
            self._interval = admissible_interval(self.plant, self.gcfg.admissibility)
        return self._interval

    def profile(self, pid):
        entry = self.cfg["profiles"][pid]
        prof = build_profile(entry, self.seed)
        try:
            return check_profile(prof, self.plant.v_min, self.plant.v_max)
        except GovernorError as exc:
            raise ConfigError(f"profile '{pid}': {exc}") from exc

    def x0(self, profile):
        return steady_state(self.plant, float(profile[0]), self.gcfg.admissibility)[0]

    def path(self, name):
        p = self.out / name
        self.outputs.append(str(p))
        return p

    def manifest(self, command, t0, tag=None, **extra):
        data = {
            "command": command,
            "config_path": str(self.config_path) if self.config_path else None,
            "config_hash": config_hash(self.cfg),
            "seed": self.seed,
            "plant": self.cfg["plant"]["kind"],
            "outputs": self.outputs,
            "sha256": {p: sha256_file(p) for p in self.outputs},
            "wall_clock_s": time.perf_counter() - t0,
        }
        data.update(extra)
        name = f"manifest_{command}_{tag}.json" if tag else f"manifest_{command}.json"
        atomic_write_text(self.out / name, json.dumps(data, indent=2, default=_jsonable) + "\n")
        return data


def _jsonable(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def build_plant(entry):
    kind = entry["kind"]
    if kind == "fuelcell":
        from .fuelcell import FuelCellPlant, load_params

        params = load_params(entry["params"] or None)
        return FuelCellPlant(params, dt=entry["dt"], n_sub=entry["n_sub"], v_min=entry["v_min"], v_max=entry["v_max"])
    if kind == "toy":
        return ToyTanhPlant()
    return linear_test_plant()


def build_profile(entry, seed):
    kind = entry["kind"]
    if kind == "steps":
        return step_profile(entry["levels"], entry["durations"])
    if kind == "random_steps":
        rng = np.random.default_rng(entry.get("seed", seed))
        return random_steps(rng, entry["n_samples"], entry["low"], entry["high"], entry["hold_min"], entry["hold_max"])
    if kind == "smooth":
        rng = np.random.default_rng(entry.get("seed", seed))
        return smooth_cycle(rng, entry["n_samples"], entry["low"], entry["high"], entry.get("knots", 12))
    with open(entry["path"], newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    col = header.index("r") if "r" in header else len(header) - 1
    return np.array([float(r[col]) for r in rows[1:]])


def _write_log(ctx, log_obj, name):
    atomic_write_with(ctx.path(name), log_obj.to_csv)


def trajectory_csv_text(plant, log_obj):
    """Run trajectory; fuel-cell runs carry physical outputs and margins."""
    buf = io.StringIO()
    w = csv.writer(buf)
    if hasattr(plant, "physical_outputs"):
        lam, flow, _ = plant.physical_outputs(log_obj.states, log_obj.v)
        w.writerow(["t", "I_d", "I_st", "p_ca", "w_cp", "p_sm", "x4", "lambda_o2", "W_cp", "surge", "choke", "oer"])
        for k in range(len(log_obj)):
            row = [log_obj.t[k], log_obj.r[k], log_obj.v[k], *log_obj.states[k], lam[k], flow[k], *log_obj.outputs[k]]
            w.writerow([f"{val:.17g}" for val in row])
        return buf.getvalue()
    nx, ny = log_obj.states.shape[1], log_obj.outputs.shape[1]
    w.writerow(["t", "r", "v"] + [f"x{i + 1}" for i in range(nx)] + [f"y{i + 1}" for i in range(ny)])
    for k in range(len(log_obj)):
        row = [log_obj.t[k], log_obj.r[k], log_obj.v[k], *log_obj.states[k], *log_obj.outputs[k]]
        w.writerow([f"{val:.17g}" for val in row])
    return buf.getvalue()


def read_commands(path):
    """Command column (``I_st`` or ``v``) of a trajectory CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = rows[0]
    for name in ("I_st", "v"):
        if name in header:
            col = header.index(name)
            return np.array([float(r[col]) for r in rows[1:]])
    raise ConfigError(f"{path} has no command column")


def load_network(ctx):
    path = ctx.out / "weights.json"
    if not path.exists():
        raise ConfigError(f"weight file {path} not found; run 'train' first")
    return load(path)


def load_bound(ctx):
    override = ctx.cfg["mnnrg"]
    if "mbar" in override:
        return CurvatureBound(override["mbar"])
    if "rbar" in override:
        return ResidualBound(override["rbar"])
    path = ctx.out / "tuning.json"
    if not path.exists():
        raise ConfigError(f"no [mnnrg] bound configured and {path} not found; run 'tune' first")
    data = json.loads(path.read_text())
    cls = CurvatureBound if data["method"] == "mbar" else ResidualBound
    return cls(data["values"])


def make_governor(ctx, name, gcfg=None):
    gcfg = gcfg or ctx.gcfg
    if name == "none":
        return lambda: NoGovernor()
    if name == "prg":
        return lambda: PrgGovernor(ctx.plant, gcfg, ctx.interval)
    net = load_network(ctx)
    if name == "nnrg":
        return lambda: NnRgGovernor(NetworkSource(net))
    bound = load_bound(ctx)
    return lambda: MnnRgGovernor(
        plant=ctx.plant, source=NetworkSource(net), bound=bound, cfg=gcfg, interval=ctx.interval
    )


# ---------------------------------------------------------------------------
# commands


def cmd_collect(ctx, args):
    t0 = time.perf_counter()
    pid = args.profile or ctx.cfg["collect"]["profile"]
    prof = ctx.profile(pid)
    data, run = collect(ctx.plant, ctx.gcfg, prof, ctx.x0(prof), ctx.interval)
    atomic_write_with(ctx.path("dataset.csv"), data.to_csv)
    _write_log(ctx, run, "prg_log.csv")
    ctx.manifest("collect", t0, governor="prg", profile=pid, rows=len(data),
                 violations=int(len(run.violations())))
    print(f"collected {len(data)} rows from profile '{pid}'")
    return EXIT_OK


def cmd_train(ctx, args):
    from .neural import Dataset

    t0 = time.perf_counter()
    tc = ctx.cfg["train"]
    path = Path(tc["dataset"]) if tc["dataset"] else ctx.out / "dataset.csv"
    if not path.exists():
        raise ConfigError(f"dataset {path} not found; run 'collect' first")
    data = Dataset.from_csv(path)
    if len(data) < 10:
        raise ConfigError(f"dataset {path} has fewer than 10 rows")
    seeds = tc["seeds"] or [ctx.seed]
    if args.seed is not None:
        seeds = [args.seed]
    config = TrainConfig(lr=tc["lr"], max_epochs=tc["max_epochs"], patience=tc["patience"])
    results, best = train_trials(data, tc["hidden"], seeds, config)
    lines = io.StringIO()
    w = csv.writer(lines)
    fields = ["trial", "hidden", "seed", "train_rmse", "val_rmse", "test_rmse", "pooled_rmse", "best_epoch", "selected"]
    w.writerow(fields)
    for k, (hidden, seed, res) in enumerate(results):
        m = res.metrics
        w.writerow([k, hidden, seed] + [f"{m[f]:.17g}" for f in fields[3:7]] + [res.best_epoch, int(k == best)])
    atomic_write_text(ctx.path("train_metrics.csv"), lines.getvalue())
    hidden, seed, res = results[best]
    save(res.net, ctx.path("weights.json"))
    split = {name: idx for name, idx in zip(("train", "val", "test"), res.split)}
    ctx.manifest("train", t0, dataset=str(path), hidden=hidden, train_seed=seed, metrics=res.metrics, split=split)
    print(json.dumps({"hidden": hidden, "seed": seed, **res.metrics}, indent=2))
    return EXIT_OK


def cmd_tune(ctx, args):
    t0 = time.perf_counter()
    tc = ctx.cfg["tune"]
    pid = args.profile or tc["profile"]
    train_pid = ctx.cfg["collect"]["profile"]
    if pid == train_pid:
        raise ConfigError(
            f"tuning profile '{pid}' is the profile the network was trained on; "
            "calibrate on a different reference so the bound reflects unseen conditions"
        )
    prof = ctx.profile(pid)
    x0 = ctx.x0(prof)
    net = load_network(ctx)
    if tc["method"] == "mbar":
        run = tune_mbar(ctx.plant, net, ctx.gcfg, prof, x0, tc["delta"], ctx.interval)
        atomic_write_with(ctx.path("tuning_log.csv"), run.to_csv)
        result = {"method": "mbar", "values": run.mbar.tolist(), "runs": run.runs, "sweeps": run.sweeps}
    else:
        prg_run = run_closed_loop(ctx.plant, PrgGovernor(ctx.plant, ctx.gcfg, ctx.interval), prof, x0)
        _write_log(ctx, prg_run, "tune_prg_log.csv")
        res = compute_rbar(prg_run, NetworkSource(net), ctx.plant, ctx.gcfg.j_star)
        result = {"method": "rbar", "values": list(res.bound.values), "argmax": res.argmax}
    atomic_write_text(ctx.path("tuning.json"), json.dumps(result, indent=2) + "\n")
    ctx.manifest("tune", t0, profile=pid, **result)
    print(json.dumps(result))
    return EXIT_OK


def _violation_report(plant, log_obj):
    buf = io.StringIO()
    w = csv.writer(buf)
    names = plant.output_names or [f"y{i + 1}" for i in range(plant.output_dim)]
    w.writerow(["t", "sample"] + list(names))
    for k in log_obj.violations():
        w.writerow([f"{log_obj.t[k]:.17g}", int(k)] + [f"{val:.17g}" for val in log_obj.outputs[k]])
    return buf.getvalue()


def cmd_simulate(ctx, args):
    t0 = time.perf_counter()
    name = args.governor or ctx.cfg["simulate"]["governor"]
    pid = args.profile or ctx.cfg["simulate"]["profile"]
    prof = ctx.profile(pid)
    factory = make_governor(ctx, name)
    measure = None
    if args.noise_seed is not None:
        if not hasattr(ctx.plant, "measure"):
            raise ConfigError("this plant has no sensor-noise model")
        rng = np.random.default_rng(args.noise_seed)
        measure = lambda x: ctx.plant.measure(x, rng)  # noqa: E731
    run = run_closed_loop(ctx.plant, factory(), prof, ctx.x0(prof), measure=measure)
    atomic_write_text(ctx.path(f"trajectory_{name}.csv"), trajectory_csv_text(ctx.plant, run))
    atomic_write_with(ctx.path(f"diagnostics_{name}.csv"), run.diagnostics_to_csv)
    atomic_write_text(ctx.path(f"violations_{name}.csv"), _violation_report(ctx.plant, run))
    n_viol = int(len(run.violations()))
    report = {"governor": name, "profile": pid, "violations": n_viol, "noise_seed": args.noise_seed,
              "max_margin": run.outputs.max(axis=0).tolist()}
    ref = args.reference or ctx.cfg["simulate"]["reference"]
    if ref:
        report["command_rmse"] = command_rmse(run.v, read_commands(ref))
    if args.plot:
        _plot(ctx, run, name)
    ctx.manifest("simulate", t0, tag=name, **report)
    print(json.dumps(report))
    if args.assert_feasible and n_viol:
        return EXIT_VIOLATION
    return EXIT_OK


def _plot(ctx, run, name):
    try:
        import matplotlib

        matplotlib.use("Agg")
        import matplotlib.pyplot as plt
    except ImportError:
        log.warning("matplotlib not installed; skipping plot")
        return
    fig, axes = plt.subplots(1, 2, figsize=(10, 4))
    axes[0].plot(run.t, run.r, "k--", label="reference")
    axes[0].plot(run.t, run.v, label="command")
    axes[0].set_xlabel("t")
    axes[0].legend()
    plant = ctx.plant
    if hasattr(plant, "physical_outputs"):
        lam, flow, p_sm = plant.physical_outputs(run.states, run.v)
        ratio = p_sm / plant.p_atm
        axes[1].plot(flow, ratio, label="trajectory")
        w = np.linspace(flow.min() * 0.9, flow.max() * 1.1, 50)
        axes[1].plot(w, 50 * w - 0.1, "r--", label="surge line")
        axes[1].plot(w, 15.27 * w + 0.6, "b--", label="choke line")
        axes[1].set_xlabel("W_cp [kg/s]")
        axes[1].set_ylabel("p_sm / p_atm")
    else:
        axes[1].plot(run.t, run.outputs)
        axes[1].axhline(0.0, color="r", ls="--")
    axes[1].legend()
    fig.tight_layout()
    atomic_write_with(ctx.path(f"plot_{name}.png"), lambda p: fig.savefig(p, format="png"))
    plt.close(fig)


def cmd_bench(ctx, args):
    t0 = time.perf_counter()
    bc = ctx.cfg["bench"]
    pid = args.profile or bc["profile"]
    prof = ctx.profile(pid)
    x0 = ctx.x0(prof)
    governors = [args.governor] if args.governor else bc["governors"]
    rows = []
    for name in governors:
        factory = make_governor(ctx, name)
        warm_up(ctx.plant, factory, prof, x0)
        rows.append(time_governor(name, ctx.gcfg.L, ctx.plant, factory, prof, x0, bc["repeats"]))
    sweep = []
    for L in bc["L_values"]:
        gcfg = replace(ctx.gcfg, L=int(L))
        for name in governors:
            if name not in ("prg", "mnnrg"):
                continue
            factory = make_governor(ctx, name, gcfg)
            sweep.append(time_governor(name, int(L), ctx.plant, factory, prof, x0, bc["sweep_repeats"]))
    text = io.StringIO()
    w = csv.writer(text)
    w.writerow(["governor", "L", "mean_ms", "max_ms", "steps"])
    for t in rows:
        w.writerow([t.governor, t.L, f"{1e3 * t.mean_s:.6f}", f"{1e3 * t.max_s:.6f}", t.n_steps])
    atomic_write_text(ctx.path("bench.csv"), text.getvalue())
    text = io.StringIO()
    w = csv.writer(text)
    w.writerow(["governor", "L", "mean_ms", "max_ms"])
    for t in sweep:
        w.writerow([t.governor, t.L, f"{1e3 * t.mean_s:.6f}", f"{1e3 * t.max_s:.6f}"])
    atomic_write_text(ctx.path("bench_L.csv"), text.getvalue())
    slopes = {}
    for name in {t.governor for t in sweep}:
        pts = [t for t in sweep if t.governor == name]
        if len(pts) > 1:
            slopes[name] = {"mean": slope(pts, "mean_s"), "max": slope(pts, "max_s")}
    table = [{"governor": t.governor, "mean_ms": 1e3 * t.mean_s, "max_ms": 1e3 * t.max_s} for t in rows]
    ctx.manifest("bench", t0, profile=pid, table=table, slopes=slopes)
    for t in table:
        print(f"{t['governor']:>6}  mean {t['mean_ms']:8.3f} ms  worst {t['max_ms']:8.3f} ms")
    return EXIT_OK


def cmd_compare(ctx, args):
    if len(args.files) != 2:
        raise ConfigError("compare needs exactly two trajectory files")
    a, b = (read_commands(f) for f in args.files)
    print(json.dumps({"command_rmse": command_rmse(a, b)}))
    return EXIT_OK


COMMANDS = {
    "collect": cmd_collect,
    "train": cmd_train,
    "tune": cmd_tune,
    "simulate": cmd_simulate,
    "bench": cmd_bench,
    "compare": cmd_compare,
}


def build_parser():
    parser = argparse.ArgumentParser(prog="mnnrg", description=__doc__.splitlines()[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML configuration file")
    common.add_argument("--seed", type=int, help="override run.seed")
    common.add_argument("--out", help="output directory (overrides run.out)")
    common.add_argument("--governor", choices=["none", "prg", "nnrg", "mnnrg"])
    common.add_argument("--profile", help="profile id from the configuration")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, parents=[common])
        if name == "simulate":
            p.add_argument("--assert-feasible", action="store_true",
                           help="exit with status 3 when any constraint is violated")
            p.add_argument("--reference", help="trajectory CSV to compare commands against")
            p.add_argument("--plot", action="store_true", help="also render a PNG")
            p.add_argument("--noise-seed", type=int,
                           help="feed the governor noisy measurements drawn with this seed")
        if name == "compare":
            p.add_argument("files", nargs="*", help="two trajectory CSV files")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        overrides = {}
        if args.seed is not None:
            overrides["run"] = {"seed": args.seed}
        cfg = load_config(args.config, overrides)
        out = args.out or cfg["run"]["out"]
        ctx = Context(cfg, args.config, out)
        return COMMANDS[args.command](ctx, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GovernorError, OSError, ValueError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
