"""End-to-end acceptance gate.

Each test checks one numbered criterion at its stated tolerance and time
budget, and records a PASS/FAIL line that is echoed in the terminal summary.
"""

import math
import time

import numpy as np
import pytest

from mnnrg.bench import slope, time_governor, warm_up
from mnnrg.cli import build_plant, build_profile
from mnnrg.closedloop import command_rmse, run_closed_loop
from mnnrg.config import load_config
from mnnrg.fuelcell import FuelCellPlant, load_params
from mnnrg.governor import (
    ConstraintSet,
    GovernorConfig,
    GovernorState,
    MnnRgGovernor,
    NoGovernor,
    PrgGovernor,
    blend,
    linear_rg_step,
    mnnrg_step,
    prg_step,
    solve_kappa,
)
from mnnrg.neural import (
    Dataset,
    MlpNetwork,
    NetworkSource,
    TrainConfig,
    load,
    loss_and_grad,
    save,
    train,
)
from mnnrg.pipeline import collect, train_trials, tune_mbar
from mnnrg.profiles import random_steps
from mnnrg.sensitivity import CurvatureBound, finite_diff_sensitivity, propagate
from mnnrg.simcore import PlantModel, ToyTanhPlant, admissible_interval, linear_test_plant, predict_constant
from mnnrg.tuning import calibrate_mbar, compute_rbar, outcome_from_log

TANH_CURVATURE = 4.0 / (3.0 * math.sqrt(3.0))  # max |d^2 tanh(v) / dv^2|


class OvershootTanhPlant(PlantModel):
    """Second-order lightly damped response to ``tanh(v)``, unit steady gain.

    Unlike the first-order toy plant its output overshoots, so transients
    can violate the limit while the steady state is admissible.
    """

    state_dim = 2
    output_dim = 1
    v_min, v_max = -3.0, 3.0
    output_names = ("y",)
    A = np.array([[1.6, -0.8], [1.0, 0.0]])
    B = np.array([0.2, 0.0])

    def step(self, x, v):
        return self.A @ np.asarray(x, dtype=float) + self.B * np.tanh(v)

    def output(self, x, v):
        return np.array([np.asarray(x, dtype=float)[0] - 0.8])

    def jac_f(self, x, v):
        return self.A.copy(), self.B / np.cosh(v) ** 2

    def jac_h(self, x, v):
        return np.array([[1.0, 0.0]]), np.array([0.0])

    def equilibrium(self, v):
        return np.full(2, np.tanh(v))


def overshoot_curvature(j_star):
    """Exact curvature bound: peak step-response magnitude times max |tanh''|."""
    plant = OvershootTanhPlant()
    x, peak = np.zeros(2), 0.0
    for _ in range(j_star + 1):
        peak = max(peak, abs(x[0]))
        x = plant.A @ x + plant.B
    return peak * TANH_CURVATURE


def sensitivity_error(plant, x0, v, j_star, h):
    """Largest deviation from central differences, relative to each output's peak."""
    sens = propagate(plant, x0, v, j_star)
    fd = finite_diff_sensitivity(plant, x0, v, j_star, h)
    scale = np.maximum(np.max(np.abs(fd), axis=0), 1e-300)
    return float(np.max(np.abs(sens.S_y - fd) / scale))


# ---------------------------------------------------------------------------
# 1-7: governor maths on the hermetic test plants


def test_criterion_01_sensitivity_correctness(acceptance):
    t0 = time.perf_counter()
    fc = FuelCellPlant()
    cases = [
        (ToyTanhPlant(), [0.3], -0.8, 1e-5),
        (ToyTanhPlant(), [-0.5], 1.2, 1e-5),
        (linear_test_plant(), [0.4, 0.9], 1.1, 1e-5),
        (linear_test_plant(), [0.0, 0.0], 2.5, 1e-5),
        (fc, fc.equilibrium(150.0), 230.0, 1e-4),
        (fc, fc.equilibrium(250.0), 130.0, 1e-4),
        (fc, fc.equilibrium(200.0), 330.0, 1e-4),
    ]
    worst = max(sensitivity_error(p, x0, v, 500, h) for p, x0, v, h in cases)
    elapsed = time.perf_counter() - t0
    acceptance(1, worst <= 1e-3 and elapsed < 10.0,
               f"max rel. error {worst:.2e} over j<=500 on toy/linear/fuel cell, {elapsed:.1f} s")


def test_criterion_02_linear_rg_equivalence(acceptance):
    t0 = time.perf_counter()
    plant = linear_test_plant()
    cfg = GovernorConfig(j_star=500, steady_state_mode="precomputed_interval")
    interval = admissible_interval(plant, cfg.admissibility)
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        x = rng.uniform(0.0, 1.0, 2)
        v_prev, r = rng.uniform(0.0, 1.9), rng.uniform(0.0, 3.0)
        k_lin, _ = linear_rg_step(plant.A, plant.B, plant.C, plant.D, x, GovernorState(v_prev), r, cfg, plant.offset)
        nominal = rng.uniform(0.0, 3.0)
        k_m, _, _ = mnnrg_step(plant, x, GovernorState(v_prev), r, lambda *a: nominal,
                               CurvatureBound([0.0]), cfg, interval)
        worst = max(worst, abs(k_m - k_lin))
    elapsed = time.perf_counter() - t0
    acceptance(2, worst <= 1e-9 and elapsed < 5.0,
               f"max |kappa_MNN - kappa_linear| = {worst:.1e} over 200 triples, {elapsed:.1f} s")


def toy_grid_kappa(x0, v_prev, r, j_star, L):
    """Largest k / 2**L whose constant command is admissible, by vectorised brute force."""
    k = np.arange(2**L + 1) / 2**L
    v = v_prev + k * (r - v_prev)
    x = np.full_like(v, x0)
    ok = x - 0.8 <= 0.0
    for _ in range(j_star):
        x = 0.5 * x + 0.5 * np.tanh(v)
        ok &= x - 0.8 <= 0.0
    ok &= np.tanh(v) - 0.8 <= -0.05
    return float(k[np.flatnonzero(ok).max()]) if ok.any() else 0.0


def test_criterion_03_prg_optimality(acceptance):
    t0 = time.perf_counter()
    plant = ToyTanhPlant()
    cfg = GovernorConfig(j_star=40)
    rng = np.random.default_rng(3)
    worst, n = 0.0, 0
    while n < 100:
        x0, v_prev, r = rng.uniform(-1.0, 0.8), rng.uniform(-3.0, 3.0), rng.uniform(-3.0, 3.0)
        if toy_grid_kappa(x0, v_prev, v_prev, cfg.j_star, 0) != 1.0:
            continue  # holding the previous command must be admissible
        kappa, _ = prg_step(plant, np.array([x0]), GovernorState(v_prev), r, cfg)
        worst = max(worst, abs(kappa - toy_grid_kappa(x0, v_prev, r, cfg.j_star, 15)))
        n += 1
    elapsed = time.perf_counter() - t0
    acceptance(3, worst <= 2.0**-15 and elapsed < 60.0,
               f"max |kappa_PRG - kappa_grid| = {worst:.2e} (limit {2.0**-15:.2e}) over 100 instances, {elapsed:.1f} s")


def test_criterion_04_explicit_vs_bisection(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(4)
    L = 15
    worst_gap, worst_low, worst_val = 0.0, 0.0, -np.inf
    for _ in range(10_000):
        n = rng.integers(1, 6)
        a2 = np.where(rng.random(n) < 0.3, 0.0, rng.uniform(0.0, 10.0, n))
        cs = ConstraintSet(a2=a2, a1=rng.uniform(-10.0, 10.0, n), a0=rng.uniform(-10.0, 0.0, n))
        k_e = solve_kappa(cs, mode="explicit")
        k_b = solve_kappa(cs, mode="bisection", L=L)
        worst_gap = max(worst_gap, k_e - k_b)
        worst_low = min(worst_low, k_e - k_b)
        worst_val = max(worst_val, float(np.max(cs.values(k_e))))
    elapsed = time.perf_counter() - t0
    ok = worst_low >= 0.0 and worst_gap <= 2.0**-L and worst_val <= 1e-12 and elapsed < 10.0
    acceptance(4, ok, f"kappa_e - kappa_b in [{worst_low:.1e}, {worst_gap:.2e}], "
                      f"max constraint value {worst_val:.1e}, {elapsed:.1f} s")


def random_episode(rng, plant, cfg, interval, bound, n_samples):
    v0 = rng.uniform(interval[0], interval[1])
    profile = random_steps(rng, n_samples, plant.v_min, plant.v_max, 3, 10)
    gov = MnnRgGovernor(plant=plant, source=lambda *a: rng.uniform(plant.v_min, plant.v_max),
                        bound=bound, cfg=cfg, interval=interval)
    return run_closed_loop(plant, gov, profile, plant.equilibrium(v0), v0=v0)


def test_criterion_05_enforcement_with_true_curvature(acceptance):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    toy = ToyTanhPlant()
    cfg = GovernorConfig(j_star=20, steady_state_mode="precomputed_interval")
    interval = admissible_interval(toy, cfg.admissibility)
    toy_bad = sum(
        len(random_episode(rng, toy, cfg, interval, CurvatureBound([TANH_CURVATURE]), 30).violations())
        for _ in range(1000)
    )
    # the first-order toy output cannot overshoot, so also run a plant that does
    osc = OvershootTanhPlant()
    cfg_o = GovernorConfig(j_star=50, steady_state_mode="precomputed_interval")
    interval_o = admissible_interval(osc, cfg_o.admissibility)
    bound_o = CurvatureBound([overshoot_curvature(cfg_o.j_star)])
    osc_bad = sum(len(random_episode(rng, osc, cfg_o, interval_o, bound_o, 40).violations()) for _ in range(100))
    elapsed = time.perf_counter() - t0
    acceptance(5, toy_bad == 0 and osc_bad == 0 and elapsed < 120.0,
               f"violating samples: toy {toy_bad} / 1000 episodes, overshoot plant {osc_bad} / 100, {elapsed:.1f} s")


def lagging_tuning(plant, j_star, delta):
    """Tune with a network stand-in that always proposes holding the command."""
    cfg = GovernorConfig(j_star=j_star, steady_state_mode="precomputed_interval")
    interval = admissible_interval(plant, cfg.admissibility)
    profile = np.concatenate([np.full(5, -2.5), np.full(60, 3.0), np.full(40, -2.5), np.full(60, 3.0)])
    x0 = plant.equilibrium(-2.5)

    def system(mbar):
        gov = MnnRgGovernor(plant=plant, source=lambda x, v_prev, r: v_prev,
                            bound=CurvatureBound(mbar), cfg=cfg, interval=interval)
        return outcome_from_log(run_closed_loop(plant, gov, profile, x0), [[0]], ["y"])

    return calibrate_mbar(system, [delta])


def test_criterion_06_tuning_termination(acceptance):
    delta = 0.05
    toy = lagging_tuning(ToyTanhPlant(), 20, delta)
    toy_limit = math.ceil((TANH_CURVATURE + delta) / delta) + 2
    m_osc = overshoot_curvature(50)
    osc = lagging_tuning(OvershootTanhPlant(), 50, delta)
    osc_limit = math.ceil((m_osc + delta) / delta) + 2
    ok = toy.increase_iterations[0] <= toy_limit and 1 <= osc.increase_iterations[0] <= osc_limit
    acceptance(6, ok, f"increase iterations: toy {toy.increase_iterations[0]} <= {toy_limit}, "
                      f"overshoot plant {osc.increase_iterations[0]} <= {osc_limit} (tuned {osc.mbar[0]:.2f})")


def test_criterion_07_rbar_exact(acceptance):
    plant = ToyTanhPlant()
    cfg = GovernorConfig(j_star=20)
    rng = np.random.default_rng(7)
    profile = random_steps(rng, 500, -3.0, 3.0, 5, 40)
    log = run_closed_loop(plant, PrgGovernor(plant, cfg), profile, plant.equilibrium(0.0), v0=0.0)
    net = MlpNetwork.initialize(3, 5, rng)
    source = NetworkSource(net)
    res = compute_rbar(log, source, plant, cfg.j_star)

    best = -np.inf
    for t in range(len(log)):
        x, v_prev, r, v = log.states[t, 0], log.v_prev[t], log.r[t], log.v[t]
        raw = source(log.states[t], v_prev, r)
        k_nn = 0.0 if r == v_prev else min(max((raw - v_prev) / (r - v_prev), 0.0), 1.0)
        v_n = v_prev + k_nn * (r - v_prev)
        x_n, x_a, s = x, x, 0.0
        for j in range(cfg.j_star + 1):
            y_n, y_a = x_n - 0.8, x_a - 0.8
            best = max(best, (y_a - y_n) - s * (v - v_n))
            x_n = 0.5 * x_n + 0.5 * np.tanh(v_n)
            x_a = 0.5 * x_a + 0.5 * np.tanh(v)
            s = 0.5 * s + 0.5 / np.cosh(v_n) ** 2
    got = res.bound.values[0]
    acceptance(7, got == best and best > 0.0,
               f"compute_rbar {got:.17g} vs brute force {float(best):.17g} on a 500-step run")


# ---------------------------------------------------------------------------
# 8-9: fuel-cell pipeline with the shipped configuration


@pytest.fixture(scope="module")
def fc_pipeline():
    t0 = time.perf_counter()
    cfg = load_config()
    plant = build_plant(cfg["plant"])
    gcfg = GovernorConfig(**cfg["governor"])
    interval = admissible_interval(plant, gcfg.admissibility)
    train_profile = build_profile(cfg["profiles"][cfg["collect"]["profile"]], cfg["run"]["seed"])
    data, _ = collect(plant, gcfg, train_profile, plant.equilibrium(train_profile[0]), interval)
    tc = cfg["train"]
    results, best = train_trials(data, tc["hidden"], tc["seeds"],
                                 TrainConfig(lr=tc["lr"], max_epochs=tc["max_epochs"], patience=tc["patience"]))
    net = results[best][2].net
    step = build_profile(cfg["profiles"][cfg["tune"]["profile"]], cfg["run"]["seed"])
    x0 = plant.equilibrium(step[0])
    tuned = tune_mbar(plant, net, gcfg, step, x0, cfg["tune"]["delta"], interval)
    bound = CurvatureBound(tuned.mbar)
    logs = {
        "none": run_closed_loop(plant, NoGovernor(), step, x0),
        "prg": run_closed_loop(plant, PrgGovernor(plant, gcfg, interval), step, x0),
        "mnnrg": run_closed_loop(
            plant, MnnRgGovernor(plant=plant, source=NetworkSource(net), bound=bound, cfg=gcfg, interval=interval),
            step, x0,
        ),
    }
    return dict(cfg=cfg, plant=plant, gcfg=gcfg, interval=interval, net=net, bound=bound, step=step,
                logs=logs, elapsed=time.perf_counter() - t0, mbar=tuned.mbar)


def test_criterion_08_fuel_cell_pipeline(acceptance, fc_pipeline):
    logs, step = fc_pipeline["logs"], fc_pipeline["step"]
    plant = fc_pipeline["plant"]
    surge, oer = 0, 2
    none = logs["none"].outputs
    n_oer = int(np.sum(none[:, oer] > 0.0))
    n_surge = int(np.sum(none[:, surge] > 0.0))
    v_prg = len(logs["prg"].violations())
    v_mnn = len(logs["mnnrg"].violations())
    rmse = command_rmse(logs["mnnrg"].v, logs["prg"].v)
    span = float(step.max() - step.min())
    elapsed = fc_pipeline["elapsed"]
    ok = n_oer >= 1 and n_surge >= 1 and v_prg == 0 and v_mnn == 0 and rmse <= 0.05 * span and elapsed < 600
    assert plant.output_names == ("surge", "choke", "oer")
    acceptance(8, ok, f"no governor: {n_oer} OER / {n_surge} surge violations; PRG {v_prg}, MNN-RG {v_mnn} "
                      f"(tuned M {fc_pipeline['mbar'].tolist()}); command RMSE {rmse:.3f} A "
                      f"<= {0.05 * span:.1f} A; {elapsed:.0f} s")


def test_criterion_09_timing(acceptance, fc_pipeline):
    t0 = time.perf_counter()
    cfg, plant, gcfg = fc_pipeline["cfg"], fc_pipeline["plant"], fc_pipeline["gcfg"]
    interval, net, bound = fc_pipeline["interval"], fc_pipeline["net"], fc_pipeline["bound"]
    bc = cfg["bench"]
    profile = build_profile(cfg["profiles"][bc["profile"]], cfg["run"]["seed"])
    x0 = plant.equilibrium(profile[0])

    def factories(g):
        return {
            "prg": lambda: PrgGovernor(plant, g, interval),
            "mnnrg": lambda: MnnRgGovernor(plant=plant, source=NetworkSource(net), bound=bound, cfg=g, interval=interval),
        }

    main = {}
    for name, make in factories(gcfg).items():
        warm_up(plant, make, profile, x0)
        main[name] = time_governor(name, gcfg.L, plant, make, profile, x0, bc["repeats"])
    sweep = {"prg": [], "mnnrg": []}
    for L in bc["L_values"]:
        g = GovernorConfig(**{**cfg["governor"], "L": int(L)})
        for name, make in factories(g).items():
            sweep[name].append(time_governor(name, int(L), plant, make, profile, x0, bc["sweep_repeats"]))
    s_prg, s_mnn = slope(sweep["prg"]), slope(sweep["mnnrg"])
    elapsed = time.perf_counter() - t0
    ordered = main["mnnrg"].mean_s < main["prg"].mean_s
    ok = ordered and s_prg > 0.0 and s_prg >= 5.0 * s_mnn and elapsed < 900
    acceptance(9, ok, f"mean step MNN-RG {1e3 * main['mnnrg'].mean_s:.2f} ms vs PRG {1e3 * main['prg'].mean_s:.2f} ms "
                      f"at L={gcfg.L}; slope PRG {1e6 * s_prg:.1f} us/L vs MNN-RG {1e6 * s_mnn:.1f} us/L; "
                      f"{elapsed:.0f} s")


# ---------------------------------------------------------------------------
# 10-11: network training and parameter audit


def test_criterion_10_network_sanity(acceptance, tmp_path):
    rng = np.random.default_rng(10)
    x = rng.uniform(-np.pi, np.pi, 600)
    data = Dataset(features=x[:, None], targets=np.sin(x))
    result = train(data, 16, 0, TrainConfig(lr=1e-2, max_epochs=4000, patience=200))
    test_rmse = result.metrics["test_rmse"]

    net = MlpNetwork.initialize(4, 7, rng)
    u, t = rng.uniform(-1, 1, (30, 4)), rng.uniform(-1, 1, 30)
    _, grads = loss_and_grad(net, u, t)
    worst = 0.0
    for p, g in zip(net.params(), grads):
        num = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + 1e-6
            up, _ = loss_and_grad(net, u, t)
            p[idx] = old - 1e-6
            down, _ = loss_and_grad(net, u, t)
            p[idx] = old
            num[idx] = (up - down) / 2e-6
        worst = max(worst, float(np.max(np.abs(g - num)) / max(np.max(np.abs(num)), 1e-12)))

    path = tmp_path / "weights.json"
    save(result.net, path)
    back = load(path)
    exact = all(np.array_equal(a, b) for a, b in zip(result.net.params(), back.params()))
    exact &= np.array_equal(result.net.predict(x[:50, None]), back.predict(x[:50, None]))
    ok = test_rmse <= 0.05 and worst <= 1e-5 and exact
    acceptance(10, ok, f"sin test RMSE {test_rmse:.4f}; gradient check {worst:.1e}; round trip bit-exact {exact}")


def test_criterion_11_constant_audit(acceptance):
    worst = max(load_params().audit().values())
    acceptance(11, worst <= 1e-12, f"largest relative mismatch of derived constants {worst:.1e}")


def test_overshoot_plant_curvature_matches_estimate():
    # guard for the supplementary plant: the closed-form bound equals a sampled estimate
    from mnnrg.sensitivity import estimate_curvature

    plant = OvershootTanhPlant()
    v_peak = math.asinh(1.0 / math.sqrt(2.0))
    est = estimate_curvature(plant, [np.zeros(2)], [-v_peak, v_peak], 50)
    assert est[0] == pytest.approx(overshoot_curvature(50), rel=1e-4)
    assert np.all(predict_constant(plant, np.zeros(2), 0.97, 50).outputs.max() > 0.0)
    assert blend(0.0, 1.0, 0.5) == 0.5
