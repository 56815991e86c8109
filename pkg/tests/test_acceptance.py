"""Acceptance criteria at desk scale; each test records one PASS/FAIL line.

The Monte Carlo criteria run the shipped configs and take several minutes
on a single core. The one-line verdicts are printed in the terminal summary.
"""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from polybsde.analysis import (
    empirical_path_regularity,
    fit_rate,
    summarize,
    variance_pathology_report,
)
from polybsde.backward_model import (
    BackwardModel,
    ModelConstants,
    builtin_model,
    compute_taming_thresholds,
    fhn_exact_solution,
    fhn_model,
    truncate,
)
from polybsde.cli import load_config, parse_config, results_csv, run_experiment
from polybsde.counterexample import (
    counterexample_divergence_stat,
    counterexample_exact_scaled,
    counterexample_iterate,
    deterministic_bound_holds,
    log2_fraction,
)
from polybsde.forward import ForwardModel, GridSpec, coupled_refinement, simulate_forward
from polybsde.regression import BasisSpec, Projector
from polybsde.schemes import NewtonParams, SchemeConfig, newton_solve, run_theta_scheme, solve_implicit_y


def _series(summaries, metric):
    return {(s.theta if s.alpha is None else s.alpha): s for s in summaries if metric in s.metrics}


@pytest.fixture(scope="module")
def example1():
    start = time.perf_counter()
    records = run_experiment(load_config("example1"))
    return summarize(records), time.perf_counter() - start


# ------------------------------------------------------------------ 1 and 2


@pytest.mark.slow
def test_criterion_1_example1_rates(example1, verdict):
    summaries, wall = example1
    by_theta = _series(summaries, "maxY_rms")
    imp = by_theta[1.0].rates["maxY_rms"]["slope"]
    exp = by_theta[0.0].rates["maxY_rms"]["slope"]
    ok = -1.25 <= imp <= -0.75 and -1.25 <= exp <= -0.75 and wall <= 600
    verdict(1, ok, f"implicit slope {imp:+.4f}, explicit slope {exp:+.4f} (band [-1.25, -0.75]); {wall:.0f} s")


@pytest.mark.slow
def test_criterion_2_trapezoidal_smallest(example1, verdict):
    summaries, _ = example1
    by_theta = _series(summaries, "maxY_rms")
    mean = {th: by_theta[th].metrics["maxY_rms"]["mean"] for th in (0.0, 0.5, 1.0)}
    Ns = by_theta[0.5].N
    bad = [N for j, N in enumerate(Ns) if not (mean[0.5][j] < mean[0.0][j] and mean[0.5][j] < mean[1.0][j])]
    worst = max(mean[0.5][j] / min(mean[0.0][j], mean[1.0][j]) for j in range(len(Ns)))
    verdict(2, not bad, f"trapezoidal below both at {len(Ns) - len(bad)}/{len(Ns)} N; worst ratio {worst:.3f}")


# ---------------------------------------------------------------------- 3


@pytest.mark.slow
def test_criterion_3_example2_implicit_rate(verdict):
    cfg = replace(load_config("example2_implicit"), N=tuple(range(35, 86, 10)))
    start = time.perf_counter()
    (s,) = summarize(run_experiment(cfg))
    wall = time.perf_counter() - start
    slope = s.rates["eN"]["slope"]
    ok = -1.3 <= slope <= -0.4 and wall <= 600 and not any(s.diverged.values())
    verdict(3, ok, f"implicit e(N) slope {slope:+.4f} (band [-1.3, -0.4]); {wall:.0f} s")


# ---------------------------------------------------------------------- 4


@pytest.mark.slow
def test_criterion_4_taming_phases(verdict):
    cfg = replace(load_config("example2"), alphas=(20.0, 125.0))
    start = time.perf_counter()
    by_alpha = _series(summarize(run_experiment(cfg)), "eN")
    wall = time.perf_counter() - start
    low = by_alpha[20.0].rates["eN"]["slope"]
    high = by_alpha[125.0].rates["eN"]["slope"]
    div = sum(by_alpha[125.0].diverged.values())
    ok = low >= 0 and high <= -0.5
    verdict(4, ok, f"alpha=20 slope {low:+.4f} (>= 0), alpha=125 slope {high:+.4f} (<= -0.5); "
                   f"{div} diverged alpha=125 runs; {wall:.0f} s")


# ------------------------------------------------------------------ 5 and 6


def test_criterion_5_deterministic_bound(verdict):
    start = time.perf_counter()
    ok = True
    for N in (2, 4, 6, 8):
        ok &= deterministic_bound_holds(N)
        seq = counterexample_iterate(N, 2 * math.sqrt(N))
        r = counterexample_exact_scaled(N, 2)
        for i in range(N + 1):
            exact = log2_fraction(r[i]) + 0.5 * math.log2(N)
            ok &= log2_fraction(r[i]) >= 2 ** (N - i)
            ok &= abs(seq.log2_abs[i] - exact) <= 1e-9 * max(1.0, abs(exact))
    wall = time.perf_counter() - start
    verdict(5, ok and wall < 1.0, f"exact bound for N in 2,4,6,8 holds: {bool(ok)}; {wall:.3f} s")


def test_criterion_6_divergence_statistic(verdict):
    start = time.perf_counter()
    stat = counterexample_divergence_stat([4, 8, 12], 1_000_000, seed=0)
    wall = time.perf_counter() - start
    vals = ", ".join(f"{v:.4f}" for v in stat.log2_mean_abs)
    verdict(6, stat.strictly_increasing and wall < 60, f"log2 E|Y_1/2| = {vals} for N = 4, 8, 12; {wall:.1f} s")


# ---------------------------------------------------------------------- 7


def test_criterion_7_implicit_solver(verdict):
    rng = np.random.default_rng(2024)
    groups, per_group = 100, 100
    start = time.perf_counter()
    worst_res = worst_gap = 0.0
    params = NewtonParams()
    for name in ("fhn_a_minus_1", "cubic_pure"):
        model = builtin_model(name)
        for _ in range(groups // 2):
            theta = rng.uniform(0.05, 1.0)
            h = rng.uniform(1e-3, 1.0) * min(1.0, 1.0 / (4 * theta * model.constants.L_y))
            a = rng.normal(0, 3, (per_group, 1))
            x, z = np.zeros((per_group, 1)), np.zeros((per_group, 1, 1))
            y_newton, _, res = newton_solve(theta, h, model, 0.0, x, z, a, params)
            y_cardano = solve_implicit_y(theta, h, model, 0.0, x, z, a, params, use_closed_form=True)
            direct = np.abs(y_newton - theta * h * model.f(0.0, x, y_newton, z) - a).max()
            worst_res = max(worst_res, res, direct)
            worst_gap = max(worst_gap, float(np.abs(y_newton - y_cardano).max()))
    wall = time.perf_counter() - start
    ok = worst_res <= 1e-12 and worst_gap <= 1e-10 and wall < 1.0
    verdict(7, ok, f"{groups * per_group} instances: max residual {worst_res:.2e}, "
                   f"max Cardano gap {worst_gap:.2e}; {wall:.3f} s")


# ---------------------------------------------------------------------- 8


def test_criterion_8_variance_reduction(verdict):
    hs = [0.1, 0.05, 0.025]
    start = time.perf_counter()
    std = {est: variance_pathology_report(hs, est, M=10_000, reps=10, seed=0) for est in ("standard", "variance_reduced")}
    wall = time.perf_counter() - start
    ratios = {est: [std[est][b]["std"] / std[est][a]["std"] for a, b in zip(hs, hs[1:])] for est in std}
    ok = all(1.2 <= r <= 1.8 for r in ratios["standard"]) and all(0.7 <= r <= 1.4 for r in ratios["variance_reduced"])
    ok = ok and wall < 60
    fmt = lambda rs: ", ".join(f"{r:.3f}" for r in rs)
    verdict(8, ok, f"standard std ratios {fmt(ratios['standard'])} (band [1.2, 1.8]); "
                   f"variance-reduced {fmt(ratios['variance_reduced'])} (band [0.7, 1.4]); {wall:.1f} s")


# ---------------------------------------------------------------------- 9


def _driver_properties():
    rng = np.random.default_rng(9)
    ok = True
    for name in ("fhn_a_minus_1", "cubic_pure"):
        model = builtin_model(name)
        c = model.constants
        x = rng.normal(0, 2, (10_000, 1))
        y, y2 = rng.uniform(-3, 3, (2, 10_000, 1))
        z = rng.normal(0, 1, (10_000, 1, 1))
        f1, f2 = model.f(0.0, x, y, z), model.f(0.0, x, y2, z)
        ok &= bool(np.all((y2 - y) * (f2 - f1) <= c.L_y * (y2 - y) ** 2 + 1e-12))
        growth = c.L + c.L_x * np.abs(x) + c.L_y * np.abs(y) ** c.m + c.L_z * np.abs(z[:, :, 0])
        ok &= bool(np.all(np.abs(f1) <= growth + 1e-12))
        lip = c.L_y_loc * (1 + np.abs(y) ** (c.m - 1) + np.abs(y2) ** (c.m - 1)) * np.abs(y - y2)
        ok &= bool(np.all(np.abs(f1 - f2) <= lip + 1e-12))
    return ok


def _truncation_properties():
    rng = np.random.default_rng(10)
    u, v = rng.normal(0, 5, (2, 10_000, 2))
    L = 2.5
    tu, tv = truncate(L, u), truncate(L, v)
    # rescaling onto the sphere is idempotent up to rounding; clamping is exact
    idem = np.allclose(truncate(L, tu), tu, rtol=1e-14, atol=0)
    nonexp = np.all(np.linalg.norm(tu - tv, axis=1) <= np.linalg.norm(u - v, axis=1) * (1 + 1e-12))
    s, w = u[:, :1], v[:, :1]
    ts, tw = truncate(L, s), truncate(L, w)
    scalar = np.array_equal(truncate(L, ts), ts) and np.all(np.abs(ts - tw) <= np.abs(s - w))
    return bool(idem and nonexp and scalar)


def _regression_properties():
    x = np.random.default_rng(11).normal(0, 1, (5000, 1))
    proj = Projector(BasisSpec("hermite", 5), x)
    const = np.abs(proj.project(np.full(5000, 0.7)) - 0.7).max()
    in_span = np.abs(proj.project(x**3 - 2 * x) - (x**3 - 2 * x)).max()
    a, b = np.sin(3 * x), np.exp(-x * x)
    lin = np.abs(proj.project(2 * a - 3 * b) - (2 * proj.project(a) - 3 * proj.project(b))).max()
    return const <= 1e-10 and in_span <= 1e-10 and lin <= 1e-9


def _taming_properties():
    k = builtin_model("cubic_pure").constants
    for N in range(10, 201, 5):
        lhs, rhs = compute_taming_thresholds(k, 1, 1.0, 1.0 / N).budget()
        if lhs > rhs * (1 + 8 * np.finfo(float).eps):
            return False
    return True


def _pde_residual():
    rng = np.random.default_rng(7)
    worst = 0.0
    for a in (-1.0, -0.5, 0.25):
        model = fhn_model(a)
        t, x = rng.uniform(0, 0.9, 200), rng.uniform(-4, 4, 200)
        e = 1e-4
        u = fhn_exact_solution(t, x, 1.0, a)
        ut = (fhn_exact_solution(t + e, x, 1.0, a) - fhn_exact_solution(t - e, x, 1.0, a)) / (2 * e)
        uxx = (fhn_exact_solution(t, x + e, 1.0, a) - 2 * u + fhn_exact_solution(t, x - e, 1.0, a)) / e**2
        f = model.f(0.0, x[:, None], u[:, None], None)[:, 0]
        worst = max(worst, float(np.max(np.abs(-ut - 0.5 * uxx - f))))
    return worst


def _fit_rate_exact():
    a = fit_rate([(10, 1.0), (100, 0.1)]).slope
    b = fit_rate([(N, 0.3 * N**-0.5) for N in (16, 32, 64)]).slope
    return abs(a + 1) <= 1e-12 and abs(b + 0.5) <= 1e-12


def _byte_identical_reruns():
    cfg = replace(load_config("example1"), M=500, degree=3, N=(4, 8), replications=2, seed=5)
    return results_csv(run_experiment(cfg)) == results_csv(run_experiment(cfg))


def test_criterion_9_property_suites(verdict):
    checks = {
        "driver": _driver_properties(),
        "truncation": _truncation_properties(),
        "regression": _regression_properties(),
        "taming": _taming_properties(),
        "pde": _pde_residual() <= 1e-6,
        "fit_rate": _fit_rate_exact(),
        "reruns": _byte_identical_reruns(),
    }
    failed = [k for k, v in checks.items() if not v]
    verdict(9, not failed, "all property checks pass" if not failed else f"failed: {', '.join(failed)}")


# --------------------------------------------------------------------- 10


def test_criterion_10_path_regularity(verdict):
    start = time.perf_counter()
    zero = BackwardModel(k=1, f=lambda t, x, y, z: np.zeros_like(y), g=lambda x: np.array(x[:, :1]),
                         constants=ModelConstants(L_y=0.0, m=1), driver_kind="general")
    fhn = builtin_model("fhn_a_minus_1")
    cfg = SchemeConfig(theta=1.0, basis=BasisSpec("hermite", 5))
    ens = simulate_forward(ForwardModel.brownian(1.5), GridSpec(1.0, 10), 50_000, seed=0)
    fhn_ladder, mart_ladder = [], []
    for j in range(4):
        if j:
            ens = coupled_refinement(ens)
        fhn_ladder.append(run_theta_scheme(ens, fhn, cfg))
        mart_ladder.append(run_theta_scheme(ens, zero, cfg))
    mart = empirical_path_regularity(mart_ladder).slope
    ex1 = empirical_path_regularity(fhn_ladder).slope
    wall = time.perf_counter() - start
    ok = abs(mart - 1.0) <= 0.05 and 0.8 <= ex1 <= 1.3 and wall <= 300
    verdict(10, ok, f"martingale slope {mart:.4f} (1 +/- 0.05), Example 1 slope {ex1:.4f} (band [0.8, 1.3]); "
                    f"{wall:.0f} s")
