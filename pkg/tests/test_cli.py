import csv
import json

import numpy as np
import pytest

from mnnrg.cli import EXIT_CONFIG, EXIT_OK, EXIT_VIOLATION, main, read_commands

TOY_CONFIG = """
[run]
seed = 2
[plant]
kind = "toy"
[governor]
j_star = 20
[profiles.train]
kind = "random_steps"
n_samples = 600
low = -2.5
high = 2.5
hold_min = 5
hold_max = 30
seed = 1
[profiles.step]
kind = "steps"
levels = [0.0, 2.5, -1.0, 2.0]
durations = [10, 40, 40, 40]
[profiles.bench]
kind = "steps"
levels = [0.0, 2.5]
durations = [5, 20]
[train]
hidden = [6, 8]
seeds = [0, 1]
max_epochs = 400
[tune]
delta = [0.05]
[bench]
repeats = 2
L_values = [4, 8, 12]
sweep_repeats = 1
"""


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "toy.toml"
    cfg.write_text(TOY_CONFIG)
    out = root / "out"
    base = ["--config", str(cfg), "--out", str(out)]
    codes = {}
    for cmd in ("collect", "train", "tune"):
        codes[cmd] = main([cmd] + base)
    return root, out, base, codes


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def test_pipeline_commands_succeed(workspace):
    _, out, _, codes = workspace
    assert codes == {"collect": EXIT_OK, "train": EXIT_OK, "tune": EXIT_OK}
    for name in ("dataset.csv", "prg_log.csv", "weights.json", "train_metrics.csv", "tuning.json"):
        assert (out / name).exists()


def test_dataset_has_one_row_per_sample(workspace):
    _, out, _, _ = workspace
    assert len(read_rows(out / "dataset.csv")) == 600


def test_train_selects_best_validation_trial(workspace):
    _, out, _, _ = workspace
    rows = read_rows(out / "train_metrics.csv")
    assert len(rows) == 4
    best = min(rows, key=lambda r: float(r["val_rmse"]))
    assert best["selected"] == "1"
    assert sum(int(r["selected"]) for r in rows) == 1


def test_manifests_list_artifacts_once(workspace):
    _, out, _, _ = workspace
    seen = []
    for cmd in ("collect", "train", "tune"):
        data = json.loads((out / f"manifest_{cmd}.json").read_text())
        assert data["command"] == cmd
        assert len(data["config_hash"]) == 64
        seen += data["outputs"]
    assert len(seen) == len(set(seen))


def test_collect_is_reproducible(workspace, tmp_path):
    root, out, _, _ = workspace
    assert main(["collect", "--config", str(root / "toy.toml"), "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "dataset.csv").read_bytes() == (out / "dataset.csv").read_bytes()


def test_simulate_governed_runs_are_feasible(workspace):
    _, out, base, _ = workspace
    for gov in ("prg", "mnnrg"):
        assert main(["simulate", "--governor", gov, "--assert-feasible"] + base) == EXIT_OK
        assert read_rows(out / f"violations_{gov}.csv") == []


def test_simulate_without_governor_reports_violations(workspace):
    _, out, base, _ = workspace
    assert main(["simulate", "--governor", "none", "--assert-feasible"] + base) == EXIT_VIOLATION
    traj = read_rows(out / "trajectory_none.csv")
    report = read_rows(out / "violations_none.csv")
    recount = sum(1 for row in traj if float(row["y1"]) > 0.0)
    assert recount == len(report) > 0


def test_simulate_with_reference_reports_rmse(workspace, capsys):
    _, out, base, _ = workspace
    assert main(["simulate", "--governor", "prg"] + base) == EXIT_OK
    capsys.readouterr()
    ref = str(out / "trajectory_prg.csv")
    assert main(["simulate", "--governor", "prg", "--reference", ref] + base) == EXIT_OK
    report = json.loads(capsys.readouterr().out)
    assert report["command_rmse"] == 0.0


def test_compare_self_is_zero(workspace, capsys):
    _, out, base, _ = workspace
    main(["simulate", "--governor", "prg"] + base)
    capsys.readouterr()
    path = str(out / "trajectory_prg.csv")
    assert main(["compare", path, path] + base) == EXIT_OK
    assert json.loads(capsys.readouterr().out)["command_rmse"] == 0.0
    np.testing.assert_array_equal(read_commands(path), read_commands(path))


def test_tune_refuses_training_profile(workspace, capsys):
    _, _, base, _ = workspace
    assert main(["tune", "--profile", "train"] + base) == EXIT_CONFIG
    assert "trained on" in capsys.readouterr().err


def test_missing_weights_is_config_error(tmp_path):
    cfg = tmp_path / "toy.toml"
    cfg.write_text(TOY_CONFIG)
    code = main(["simulate", "--governor", "nnrg", "--config", str(cfg), "--out", str(tmp_path / "empty")])
    assert code == EXIT_CONFIG


def test_bad_config_exit_code(tmp_path):
    cfg = tmp_path / "bad.toml"
    cfg.write_text("[governor]\nL = 0\n")
    assert main(["collect", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_profile_out_of_bounds_is_config_error(tmp_path):
    cfg = tmp_path / "c.toml"
    cfg.write_text(TOY_CONFIG + '\n[profiles.wild]\nkind = "steps"\nlevels = [9.0]\ndurations = [5]\n')
    assert main(["collect", "--profile", "wild", "--config", str(cfg), "--out", str(tmp_path)]) == EXIT_CONFIG


def test_bench_table(workspace):
    _, out, base, _ = workspace
    assert main(["bench"] + base) == EXIT_OK
    rows = read_rows(out / "bench.csv")
    assert {r["governor"] for r in rows} == {"prg", "mnnrg"}
    for r in rows:
        assert float(r["mean_ms"]) <= float(r["max_ms"])
    sweep = read_rows(out / "bench_L.csv")
    assert sorted({int(r["L"]) for r in sweep}) == [4, 8, 12]
    manifest = json.loads((out / "manifest_bench.json").read_text())
    assert set(manifest["slopes"]) == {"prg", "mnnrg"}


def test_manifest_hashes_match_files(workspace):
    from mnnrg.io import sha256_file

    _, out, _, _ = workspace
    data = json.loads((out / "manifest_collect.json").read_text())
    for path, digest in data["sha256"].items():
        assert sha256_file(path) == digest
