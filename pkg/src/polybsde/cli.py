"""Experiment runner: ``polybsde run | counterexample | rates``.

Exit codes: 0 success, 1 configuration or input error, 2 success with at
least one diverged run (the divergences are still written out).
"""

from __future__ import annotations

import argparse
import configparser
import csv
import dataclasses
import io
import json
import math
import os
import platform
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .analysis import (
    ErrorRecord,
    error_vs_truth,
    fit_rate,
    self_convergence_e,
    summarize,
    terminal_truncation_error,
)
from .backward_model import builtin_model, compute_taming_thresholds, fhn_exact_gradient, fhn_exact_solution
from .counterexample import conditioned_bound_check, counterexample_divergence_stat, deterministic_bound_holds
from .errors import ConfigError, InsufficientDataError, NotApplicableError, ParseError, StepTooLargeError
from .forward import ForwardModel, GridSpec, coupled_refinement, simulate_forward
from .regression import BasisSpec
from .schemes import SchemeConfig, check_step_restriction, run_tamed_explicit, run_theta_scheme

RESULTS_HEADER = (
    "experiment,scheme,theta,alpha,N,h,replication,seed,maxY_rms,eN,z_err,diverged,newton_max_iter,cond_max"
)
SCHEMES = ("theta", "tamed", "terminal")
METRICS = ("truth", "self_convergence")
# independent test paths use the replication seed shifted by this offset
TEST_SEED_OFFSET = 1 << 40


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one ``run`` needs; see ``docs`` in the README for the file format."""

    name: str = "experiment"
    oracle: str = "none"
    metrics: tuple = ("self_convergence",)
    independent_ensemble: bool = False
    forward: str = "brownian"
    x0: float = 0.0
    mu: float = 0.0
    vol: float = 1.0
    model: str = "fhn_a_minus_1"
    scheme: str = "theta"
    thetas: tuple = (1.0,)
    alphas: tuple = (1.0,)
    z_estimator: str = "variance_reduced"
    T: float = 1.0
    N: tuple = (10,)
    basis_kind: str = "hermite"
    degree: int = 5
    standardization: str = "per_step_affine"
    ridge: float = 0.0
    M: int = 50_000
    seed: int = 0
    replications: int = 10
    paper_M: Optional[int] = None
    paper_degree: Optional[int] = None
    paper_replications: Optional[int] = None
    out_dir: str = "results"

    def __post_init__(self):
        if self.oracle not in ("none", "fhn_closed_form"):
            raise ConfigError(f"[experiment] oracle: unknown value {self.oracle!r}")
        for m in self.metrics:
            if m not in METRICS:
                raise ConfigError(f"[experiment] metrics: unknown metric {m!r}; known: {', '.join(METRICS)}")
        if "truth" in self.metrics and self.oracle == "none" and self.scheme != "terminal":
            raise ConfigError("[experiment] metrics: 'truth' needs an oracle")
        if self.forward not in ("brownian", "geometric_brownian"):
            raise ConfigError(f"[forward] kind: unknown value {self.forward!r}")
        if self.scheme not in SCHEMES:
            raise ConfigError(f"[scheme] kind: unknown value {self.scheme!r}; known: {', '.join(SCHEMES)}")
        if not self.N or any(n < 1 for n in self.N):
            raise ConfigError(f"[grid] N: every entry must be a positive integer, got {self.N}")
        if not self.T > 0:
            raise ConfigError(f"[grid] T: must be positive, got {self.T}")
        if self.M < 1 or self.replications < 1:
            raise ConfigError("[monte_carlo] M and replications must be >= 1")
        if any(not 0.0 <= t <= 1.0 for t in self.thetas):
            raise ConfigError(f"[scheme] theta: values must lie in [0, 1], got {self.thetas}")
        if any(not a > 0 for a in self.alphas):
            raise ConfigError(f"[scheme] alpha: values must be positive, got {self.alphas}")
        try:
            BasisSpec(self.basis_kind, self.degree, self.standardization)
        except ValueError as exc:
            raise ConfigError(f"[basis] {exc}") from None

    def paper_scale(self) -> "ExperimentConfig":
        """Swap in the ``[paper_scale]`` values where they are set."""
        return replace(
            self,
            M=self.paper_M or self.M,
            degree=self.degree if self.paper_degree is None else self.paper_degree,
            replications=self.paper_replications or self.replications,
        )

    @property
    def basis(self) -> BasisSpec:
        return BasisSpec(self.basis_kind, self.degree, self.standardization)


# ---------------------------------------------------------------- config file

# (section, key, attribute, kind)
_SCHEMA = [
    ("experiment", "name", "name", "str"),
    ("experiment", "oracle", "oracle", "str"),
    ("experiment", "metrics", "metrics", "strs"),
    ("experiment", "independent_ensemble", "independent_ensemble", "bool"),
    ("forward", "kind", "forward", "str"),
    ("forward", "x0", "x0", "float"),
    ("forward", "mu", "mu", "float"),
    ("forward", "vol", "vol", "float"),
    ("backward", "model", "model", "str"),
    ("scheme", "kind", "scheme", "str"),
    ("scheme", "theta", "thetas", "floats"),
    ("scheme", "alpha", "alphas", "floats"),
    ("scheme", "z_estimator", "z_estimator", "str"),
    ("grid", "T", "T", "float"),
    ("grid", "N", "N", "ints"),
    ("basis", "kind", "basis_kind", "str"),
    ("basis", "degree", "degree", "int"),
    ("basis", "standardization", "standardization", "str"),
    ("basis", "ridge", "ridge", "float"),
    ("monte_carlo", "M", "M", "int"),
    ("monte_carlo", "seed", "seed", "int"),
    ("monte_carlo", "replications", "replications", "int"),
    ("paper_scale", "M", "paper_M", "int"),
    ("paper_scale", "degree", "paper_degree", "int"),
    ("paper_scale", "replications", "paper_replications", "int"),
    ("output", "dir", "out_dir", "str"),
]


def _parse_int(text):
    value = float(text)
    if value != int(value):
        raise ValueError(f"{text!r} is not an integer")
    return int(value)


def _parse_ints(text):
    """Comma list; ``a..b step c`` expands to an inclusive range."""
    out = []
    for part in text.split(","):
        part = part.strip()
        if ".." in part:
            span, _, step = part.partition("step")
            lo, hi = (int(s) for s in span.split(".."))
            step = int(step) if step.strip() else 1
            out.extend(range(lo, hi + 1, step))
        elif part:
            out.append(_parse_int(part))
    return tuple(out)


def _convert(kind, text):
    text = text.strip()
    if kind == "str":
        return text
    if kind == "int":
        return _parse_int(text)
    if kind == "float":
        return float(text)
    if kind == "bool":
        low = text.lower()
        if low not in ("true", "false", "yes", "no", "1", "0"):
            raise ValueError(f"{text!r} is not a boolean")
        return low in ("true", "yes", "1")
    if kind == "ints":
        return _parse_ints(text)
    if kind == "floats":
        return tuple(float(p) for p in text.split(",") if p.strip())
    if kind == "strs":
        return tuple(p.strip() for p in text.split(",") if p.strip())
    raise AssertionError(kind)


def parse_config(text: str) -> ExperimentConfig:
    """Parse the INI-style experiment file; errors name the line or the field."""
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"config syntax error: {exc}") from None
    known = {}
    for section, key, attr, kind in _SCHEMA:
        known.setdefault(section, {})[key] = (attr, kind)
    values = {}
    for section in cp.sections():
        if section not in known:
            raise ConfigError(f"unknown section [{section}]")
        for key, raw in cp.items(section):
            if key not in known[section]:
                raise ConfigError(f"[{section}] {key}: unknown field")
            attr, kind = known[section][key]
            try:
                values[attr] = _convert(kind, raw)
            except ValueError as exc:
                raise ConfigError(f"[{section}] {key}: {exc}") from None
    return ExperimentConfig(**values)


def _format(kind, value):
    if kind in ("ints", "floats", "strs"):
        return ", ".join(repr(v) if kind == "floats" else str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


def config_to_text(config: ExperimentConfig) -> str:
    """Serialize so that ``parse_config(config_to_text(c)) == c``."""
    lines, current = [], None
    for section, key, attr, kind in _SCHEMA:
        value = getattr(config, attr)
        if value is None:
            continue
        if section != current:
            if current is not None:
                lines.append("")
            lines.append(f"[{section}]")
            current = section
        lines.append(f"{key} = {_format(kind, value)}")
    return "\n".join(lines) + "\n"


def load_config(path) -> ExperimentConfig:
    """Read a config from disk, or a shipped one by name (``example1`` or ``example1.cfg``)."""
    p = Path(path)
    if not p.exists():
        name = p.name if p.suffix == ".cfg" else p.name + ".cfg"
        shipped = resources.files("polybsde") / "configs" / name
        if shipped.is_file():
            return parse_config(shipped.read_text())
        raise ConfigError(f"config file {path} not found")
    return parse_config(p.read_text())


def shipped_configs() -> list:
    return sorted(f.name for f in (resources.files("polybsde") / "configs").iterdir() if f.name.endswith(".cfg"))


# ------------------------------------------------------------------ running


def forward_model(config: ExperimentConfig) -> ForwardModel:
    if config.forward == "brownian":
        return ForwardModel.brownian(config.x0)
    return ForwardModel.geometric_brownian(config.x0, config.mu, config.vol)


def _oracles(config):
    if config.oracle != "fhn_closed_form":
        return None, None
    T = config.T
    return (
        lambda t, x: fhn_exact_solution(t, x, T),
        lambda t, x: fhn_exact_gradient(t, x, T)[..., None],
    )


def _parameters(config):
    if config.scheme == "theta":
        return [(t, None) for t in config.thetas]
    return [(0.0, a) for a in config.alphas]


def _thresholds(config, model, d, N, alpha):
    return compute_taming_thresholds(model.constants, d, config.T, config.T / N, alpha)


def validate(config: ExperimentConfig) -> None:
    """Check every step restriction and taming level before any simulation.

    Raises :class:`ConfigError` whose message quotes the violated bound.
    """
    try:
        model = builtin_model(config.model)
    except KeyError as exc:
        raise ConfigError(f"[backward] model: {exc.args[0]}") from None
    d = 1
    Ns = set(config.N)
    if "self_convergence" in config.metrics or config.scheme == "terminal":
        Ns |= {2 * n for n in config.N}
    for N in sorted(Ns):
        for theta, alpha in _parameters(config):
            try:
                if config.scheme == "theta":
                    if theta > 0:
                        check_step_restriction(theta, config.T / N, model.constants, d)
                else:
                    _thresholds(config, model, d, N, alpha)
            except (StepTooLargeError, NotApplicableError) as exc:
                raise ConfigError(f"N = {N}: {exc}") from None
    try:
        SchemeConfig(theta=0.0 if config.scheme != "theta" else config.thetas[0], z_estimator=config.z_estimator)
    except ConfigError as exc:
        raise ConfigError(f"[scheme] {exc}") from None


def _solve(config, model, ens, theta, alpha, test=None):
    d = ens.d
    if config.scheme == "theta":
        sc = SchemeConfig(theta=theta, z_estimator=config.z_estimator, basis=config.basis, ridge=config.ridge)
        return run_theta_scheme(ens, model, sc, test_ensemble=test)
    tam = _thresholds(config, model, d, ens.grid.N, alpha)
    sc = SchemeConfig(theta=0.0, z_estimator=config.z_estimator, basis=config.basis, ridge=config.ridge, taming=tam)
    return run_tamed_explicit(ens, model, sc, test_ensemble=test)


def run_cell(config: ExperimentConfig, replication: int, N: int) -> list:
    """All parameter values of one (replication, N) cell on a shared ensemble."""
    model = builtin_model(config.model)
    fm = forward_model(config)
    seed = config.seed + replication
    grid = GridSpec(config.T, N)
    ens = simulate_forward(fm, grid, config.M, seed)
    test = simulate_forward(fm, grid, config.M, seed + TEST_SEED_OFFSET) if config.independent_ensemble else None
    want_e = "self_convergence" in config.metrics or config.scheme == "terminal"
    fine = coupled_refinement(ens) if want_e else None
    fine_test = coupled_refinement(test) if want_e and test is not None else None
    y_or, z_or = _oracles(config)
    records = []
    for theta, alpha in _parameters(config):
        rec = ErrorRecord(config.name, config.scheme, theta, alpha, N, grid.h, replication, seed)
        if config.scheme == "terminal":
            L_c = _thresholds(config, model, ens.d, N, alpha).L_h
            L_f = _thresholds(config, model, ens.d, 2 * N, alpha).L_h
            rec.eN = terminal_truncation_error(ens, fine, model, L_c, L_f)
            records.append(rec)
            continue
        sol = _solve(config, model, ens, theta, alpha, test)
        eval_sol, eval_ens = (sol.test_solution, test) if test is not None else (sol, ens)
        rec.diverged = sol.diverged
        rec.newton_max_iter = sol.newton_max_iter
        rec.cond_max = sol.cond_max
        if "truth" in config.metrics and y_or is not None:
            rec.maxY_rms, rec.z_err = error_vs_truth(eval_sol, eval_ens, y_or, z_or)
        if want_e:
            fsol = _solve(config, model, fine, theta, alpha, fine_test)
            rec.diverged = rec.diverged or fsol.diverged
            rec.newton_max_iter = max(rec.newton_max_iter, fsol.newton_max_iter)
            rec.cond_max = max(rec.cond_max, fsol.cond_max)
            if fine_test is not None:
                rec.eN = self_convergence_e(sol.test_solution, fsol.test_solution)
            else:
                rec.eN = self_convergence_e(sol, fsol)
        if rec.diverged:
            rec.maxY_rms = rec.eN = rec.z_err = None
        records.append(rec)
    return records


def _cell(args):
    return run_cell(*args)


def run_experiment(config: ExperimentConfig, workers: Optional[int] = None) -> list:
    """Run every (replication, N, parameter) cell; records come back in CSV order."""
    validate(config)
    cells = [(config, r, N) for r in range(config.replications) for N in config.N]
    if workers and workers > 1 and len(cells) > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            chunks = list(pool.map(_cell, cells))
    else:
        chunks = [_cell(c) for c in cells]
    records = [rec for chunk in chunks for rec in chunk]
    return sorted(records, key=ErrorRecord.sort_key)


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, bool):
        return str(int(value))
    if isinstance(value, (int, np.integer)):
        return str(value)
    return "%.17g" % value


def results_csv(records) -> str:
    buf = io.StringIO()
    buf.write(RESULTS_HEADER + "\n")
    for r in sorted(records, key=ErrorRecord.sort_key):
        row = [r.experiment, r.scheme, r.theta, r.alpha, r.N, r.h, r.replication, r.seed,
               r.maxY_rms, r.eN, r.z_err, bool(r.diverged), r.newton_max_iter, r.cond_max]
        buf.write(",".join(_fmt(v) if not isinstance(v, str) else v for v in row) + "\n")
    return buf.getvalue()


def read_results(path) -> list:
    """Parse a ``results.csv``; malformed content raises :class:`ParseError` with the line number."""
    text = Path(path).read_text()
    lines = text.splitlines()
    if not lines:
        return []
    if lines[0].strip() != RESULTS_HEADER:
        raise ParseError(f"{path}: row 1: unexpected header {lines[0]!r}", row=1)
    columns = RESULTS_HEADER.split(",")
    out = []
    for row_no, row in enumerate(csv.reader(lines[1:]), start=2):
        if not row:
            continue
        if len(row) != len(columns):
            raise ParseError(f"{path}: row {row_no}: expected {len(columns)} fields, got {len(row)}", row=row_no)
        f = dict(zip(columns, row))
        try:
            opt = lambda s: None if s == "" else float(s)
            out.append(
                ErrorRecord(
                    experiment=f["experiment"],
                    scheme=f["scheme"],
                    theta=float(f["theta"]),
                    alpha=opt(f["alpha"]),
                    N=int(f["N"]),
                    h=float(f["h"]),
                    replication=int(f["replication"]),
                    seed=int(f["seed"]),
                    maxY_rms=opt(f["maxY_rms"]),
                    eN=opt(f["eN"]),
                    z_err=opt(f["z_err"]),
                    diverged=bool(int(f["diverged"])),
                    newton_max_iter=int(f["newton_max_iter"]),
                    cond_max=float(f["cond_max"]),
                )
            )
        except ValueError as exc:
            raise ParseError(f"{path}: row {row_no}: {exc}", row=row_no) from None
    return out


def _workers(cli_value=None):
    if cli_value is not None:
        return cli_value
    env = os.environ.get("POLYBSDE_WORKERS")
    return int(env) if env else None


def cmd_run(args) -> int:
    try:
        config = load_config(args.config)
        if args.paper_scale:
            config = config.paper_scale()
        if args.seed is not None:
            config = replace(config, seed=args.seed)
        if args.replications is not None:
            config = replace(config, replications=args.replications)
        validate(config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    out = Path(args.out_dir or config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    records = run_experiment(config, _workers(args.workers))
    wall = time.perf_counter() - start
    (out / "results.csv").write_text(results_csv(records))
    summary = {"experiment": config.name, "series": [s.to_dict() for s in summarize(records)]}
    (out / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    meta = {
        "wall_clock_seconds": wall,
        "config": dataclasses.asdict(config),
        "paper_scale": bool(args.paper_scale),
        "version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
    }
    (out / "metadata.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")
    n_div = sum(r.diverged for r in records)
    print(f"wrote {len(records)} rows to {out / 'results.csv'} ({n_div} diverged, {wall:.1f} s)")
    for s in summarize(records):
        for metric, rate in s.rates.items():
            label = f"alpha={s.alpha:g}" if s.alpha is not None else f"theta={s.theta:g}"
            print(f"  {s.scheme:8s} {label:14s} {metric:9s} slope {rate['slope']:+.4f}")
    return 2 if n_div else 0


def cmd_counterexample(args) -> int:
    try:
        N_list = [int(n) for n in args.N.split(",") if n.strip()]
        stat = counterexample_divergence_stat(N_list, args.M, args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    exact = {N: deterministic_bound_holds(N) for N in (2, 4, 6, 8)}
    conditioned = {N: conditioned_bound_check(N, 10_000, args.seed) for N in N_list}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    lines = ["N,log2_mean_abs_Y_half,paths_above_sqrt_2N"]
    for N, lm, ex in zip(stat.N_list, stat.log2_mean_abs, stat.exploding_paths):
        lines.append(f"{N},{lm:.17g},{ex}")
    (out / "counterexample.csv").write_text("\n".join(lines) + "\n")
    report = {
        "M": args.M,
        "seed": args.seed,
        "strictly_increasing": stat.strictly_increasing,
        "exact_bound_xi_2sqrtN": {str(k): v for k, v in exact.items()},
        "conditioned_bound": {str(k): v for k, v in conditioned.items()},
    }
    (out / "counterexample.json").write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    for N, lm in zip(stat.N_list, stat.log2_mean_abs):
        print(f"N={N:4d}  log2 E|Y_1/2| = {lm:.6f}")
    print(f"strictly increasing: {stat.strictly_increasing}")
    print(f"exact bound (N=2,4,6,8): {all(exact.values())}; conditioned bound: {all(conditioned.values())}")
    return 0


def cmd_rates(args) -> int:
    try:
        records = [r for path in args.csv for r in read_results(path)]
        exclude = {int(n) for n in args.exclude_N.split(",") if n.strip()} if args.exclude_N else set()
        records = [r for r in records if r.N not in exclude]
        if not records:
            raise InsufficientDataError("no result rows to fit")
        rows = []
        for s in summarize(records):
            for metric in ([args.metric] if args.metric else list(s.metrics)):
                if metric not in s.metrics:
                    continue
                fit = fit_rate(list(zip(s.N, s.metrics[metric]["mean"])))
                rows.append((s, metric, fit))
        if not rows:
            raise InsufficientDataError("no metric with at least 2 valid points")
    except (ParseError, InsufficientDataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    print(f"{'scheme':8s} {'theta':>6s} {'alpha':>7s} {'metric':9s} {'slope':>9s} {'+/-':>8s} {'points':>6s}")
    for s, metric, fit in rows:
        alpha = "" if s.alpha is None else f"{s.alpha:g}"
        hw = "" if math.isnan(fit.half_width) else f"{fit.half_width:.4f}"
        print(f"{s.scheme:8s} {s.theta:6g} {alpha:>7s} {metric:9s} {fit.slope:+9.5f} {hw:>8s} {fit.n_points:6d}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="polybsde", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment config (path or shipped name)")
    run.add_argument("config")
    run.add_argument("--paper-scale", action="store_true", help="use the [paper_scale] M, degree, replications")
    run.add_argument("--out-dir", default=None)
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--replications", type=int, default=None)
    run.add_argument("--workers", type=int, default=None, help="process count (default: $POLYBSDE_WORKERS or 1)")
    run.set_defaults(func=cmd_run)

    ce = sub.add_parser("counterexample", help="divergence of the untamed explicit scheme")
    ce.add_argument("--N", default="4,8,12")
    ce.add_argument("--M", type=int, default=1_000_000)
    ce.add_argument("--seed", type=int, default=0)
    ce.add_argument("--out-dir", default="results")
    ce.set_defaults(func=cmd_counterexample)

    rates = sub.add_parser("rates", help="refit rates from results.csv files")
    rates.add_argument("csv", nargs="+")
    rates.add_argument("--exclude-N", default="")
    rates.add_argument("--metric", choices=("maxY_rms", "eN", "z_err"), default=None)
    rates.set_defaults(func=cmd_rates)

    sub.add_parser("configs", help="list shipped configs").set_defaults(
        func=lambda a: print("\n".join(shipped_configs())) or 0
    )
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
