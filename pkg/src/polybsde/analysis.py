"""Error metrics, self-convergence, rate fits and the Z-estimator variance study."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import stats

from .backward_model import logistic, truncate
from .errors import InsufficientDataError, NotConvergentError
from .forward import ForwardModel, GridSpec, simulate_forward
from .regression import BasisSpec, Projector
from .schemes import BackwardSolution, z_standard, z_variance_reduced


def _rms(diff) -> float:
    """Root mean square over paths (axis 0), summed exactly.

    ``math.fsum`` is correctly rounded, so the result does not depend on the
    order of the paths.
    """
    sq = np.asarray(diff, float).reshape(diff.shape[0], -1)
    sq = np.sum(sq * sq, axis=1)
    return math.sqrt(math.fsum(sq) / sq.shape[0])


def _mean_sq(diff) -> float:
    sq = np.asarray(diff, float).reshape(diff.shape[0], -1)
    return math.fsum(np.sum(sq * sq, axis=1)) / sq.shape[0]


def error_vs_truth(
    solution: BackwardSolution,
    ensemble,
    y_oracle: Callable,
    z_oracle: Optional[Callable] = None,
):
    """Return ``(max_i RMS(Y_i - u(t_i, X_i)), sum_{i<N} mean|Z_i - v(t_i, X_i)|^2 h)``.

    ``y_oracle(t, x)`` maps ``(M, d)`` states to ``(M, k)`` values and
    ``z_oracle(t, x)`` to ``(M, k, d)``. The second entry is ``None`` without
    a Z oracle; both are ``None`` for a diverged solution.
    """
    if solution.diverged:
        return None, None
    grid = solution.grid
    M = ensemble.M
    worst = 0.0
    z_sum = 0.0 if z_oracle is not None else None
    for i in range(grid.N + 1):
        t, x = grid.time(i), ensemble.states[:, i]
        u = np.asarray(y_oracle(t, x), float).reshape(M, -1)
        worst = max(worst, _rms(solution.Y[:, i].reshape(M, -1) - u))
        if z_oracle is not None and i < grid.N:
            v = np.asarray(z_oracle(t, x), float).reshape(M, -1)
            z_sum += _mean_sq(solution.Z[:, i].reshape(M, -1) - v) * grid.h
    return worst, z_sum


def self_convergence_e(coarse: BackwardSolution, fine: BackwardSolution) -> Optional[float]:
    """``e(N) = max_i RMS(Y^N_i - Y^{2N}_{2i})``; ``None`` if either run diverged."""
    if fine.grid.N != 2 * coarse.grid.N or not math.isclose(fine.grid.T, coarse.grid.T):
        raise ValueError(f"fine grid must have 2N intervals: got N={coarse.grid.N} and {fine.grid.N}")
    if coarse.Y.shape[0] != fine.Y.shape[0]:
        raise ValueError("coarse and fine solutions must share the same paths")
    if coarse.diverged or fine.diverged:
        return None
    M = coarse.Y.shape[0]
    return max(
        _rms(coarse.Y[:, i].reshape(M, -1) - fine.Y[:, 2 * i].reshape(M, -1)) for i in range(coarse.grid.N + 1)
    )


@dataclass(frozen=True)
class RateFit:
    """Least-squares line through ``(log N, log err)``.

    ``half_width`` is 1.96 standard errors of the slope (NaN with two points).
    ``excluded`` lists the dropped ``(N, err)`` points.
    """

    slope: float
    intercept: float
    half_width: float
    n_points: int
    excluded: tuple = ()


def fit_rate(points: Sequence) -> RateFit:
    """Fit ``log err = intercept + slope log N``; zero, negative or missing errors are excluded."""
    good, bad = [], []
    for N, err in points:
        ok = err is not None and np.isfinite(err) and err > 0 and N > 0
        (good if ok else bad).append((N, err))
    if len(good) < 2:
        raise InsufficientDataError(f"need at least 2 positive finite points, got {len(good)}")
    logN = np.log([p[0] for p in good])
    loge = np.log([p[1] for p in good])
    if np.ptp(logN) == 0:
        raise InsufficientDataError("all points share the same N")
    res = stats.linregress(logN, loge)
    half = 1.96 * res.stderr if len(good) > 2 else math.nan
    return RateFit(float(res.slope), float(res.intercept), float(half), len(good), tuple(bad))


def rate_geometric_sum_bound(slope_e: float, c_e: float) -> float:
    """Constant of the error bound implied by ``e(N) <= c N^slope`` via telescoping: ``c / (1 - 2^slope)``."""
    if not slope_e < 0:
        raise NotConvergentError(f"e(N) slope {slope_e} is not negative; the telescoping sum diverges")
    return c_e / (1.0 - 2.0**slope_e)


def max_increment_ms(Y) -> float:
    """``max_i E|Y_{i+1} - Y_i|^2`` for ``Y`` of shape ``(M, N + 1, ...)``."""
    Y = np.asarray(Y, float)
    return max(_mean_sq(Y[:, i + 1] - Y[:, i]) for i in range(Y.shape[1] - 1))


def empirical_path_regularity(ladder: Sequence) -> RateFit:
    """Slope of ``log max_i E|Y_{i+1} - Y_i|^2`` against ``log h``.

    ``ladder`` holds ``(h, Y)`` pairs or :class:`BackwardSolution` objects.
    Grids with identically zero increments are excluded and reported.
    """
    pts = []
    for item in ladder:
        if isinstance(item, BackwardSolution):
            h, Y = item.grid.h, item.Y
        else:
            h, Y = item
        # fit_rate works in (x, err) form; using 1/h as x flips the sign of the slope
        pts.append((1.0 / h, max_increment_ms(Y)))
    fit = fit_rate(pts)
    return RateFit(-fit.slope, fit.intercept, fit.half_width, fit.n_points, tuple((1.0 / n, e) for n, e in fit.excluded))


def variance_pathology_report(
    h_list: Sequence[float],
    estimator: str,
    M: int = 10_000,
    reps: int = 10,
    seed: int = 0,
    target: str = "logistic",
) -> dict:
    """Std of the ``Z_0`` estimate across ``reps`` seeds for each step ``h``.

    One step of length ``h`` from ``X_0 = 0`` with ``A = phi(X_h)``
    (``phi`` logistic, or the constant 1 with ``target="constant"``).
    Replication ``r`` uses seed ``seed + r``; the normals behind ``X_h`` are
    then shared across the ``h`` ladder.
    """
    if estimator not in ("standard", "variance_reduced"):
        raise ValueError(f"unknown estimator {estimator!r}")
    model = ForwardModel.brownian(0.0)
    basis = BasisSpec("hermite", 1)
    out = {}
    for h in h_list:
        z0 = []
        for r in range(reps):
            ens = simulate_forward(model, GridSpec(h, 1), M, seed + r)
            x1 = ens.states[:, 1]
            A = logistic(x1) if target == "logistic" else np.ones_like(x1)
            proj = Projector(basis, ens.states[:, 0])
            if estimator == "standard":
                Z = z_standard(0, ens, A, proj)
            else:
                Z = z_variance_reduced(0, ens, A, proj)
            z0.append(float(Z[0, 0, 0]))
        out[float(h)] = {"mean": float(np.mean(z0)), "std": float(np.std(z0, ddof=1)), "samples": z0}
    return out


# ----------------------------------------------------------------- aggregation


@dataclass
class ErrorRecord:
    """One (scheme, parameter, N, replication) cell of an experiment."""

    experiment: str
    scheme: str
    theta: float
    alpha: Optional[float]
    N: int
    h: float
    replication: int
    seed: int
    maxY_rms: Optional[float] = None
    eN: Optional[float] = None
    z_err: Optional[float] = None
    diverged: bool = False
    newton_max_iter: int = 0
    cond_max: float = 0.0

    def sort_key(self):
        alpha = -math.inf if self.alpha is None else self.alpha
        return (self.theta, alpha, self.N, self.replication, self.scheme)


def _mean_std(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None
    std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
    return math.fsum(vals) / len(vals), std


@dataclass
class Summary:
    """Per-N means of each metric for one (scheme, theta, alpha) series, plus fitted rates."""

    scheme: str
    theta: float
    alpha: float
    N: list = field(default_factory=list)
    metrics: dict = field(default_factory=dict)
    diverged: dict = field(default_factory=dict)
    rates: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "theta": self.theta,
            "alpha": self.alpha,
            "N": self.N,
            "metrics": self.metrics,
            "diverged": self.diverged,
            "rates": self.rates,
        }


def summarize(records: Sequence[ErrorRecord]) -> list:
    """Group records by series, average over replications and fit a rate per metric.

    Diverged replications are excluded from the means but counted.
    """
    groups = {}
    for rec in records:
        groups.setdefault((rec.scheme, rec.theta, rec.alpha), []).append(rec)
    out = []
    for (scheme, theta, alpha), recs in sorted(
        groups.items(), key=lambda kv: (kv[0][1], -math.inf if kv[0][2] is None else kv[0][2], kv[0][0])
    ):
        s = Summary(scheme, theta, alpha)
        Ns = sorted({r.N for r in recs})
        s.N = Ns
        for metric in ("maxY_rms", "eN", "z_err"):
            means, stds = [], []
            for N in Ns:
                m, sd = _mean_std([getattr(r, metric) for r in recs if r.N == N and not r.diverged])
                means.append(m)
                stds.append(sd)
            if all(m is None for m in means):
                continue
            s.metrics[metric] = {"mean": means, "std": stds}
            try:
                fit = fit_rate(list(zip(Ns, means)))
            except InsufficientDataError:
                continue
            s.rates[metric] = {
                "slope": fit.slope,
                "intercept": fit.intercept,
                "half_width": None if math.isnan(fit.half_width) else fit.half_width,
                "excluded_N": [n for n, _ in fit.excluded],
            }
        s.diverged = {str(N): sum(1 for r in recs if r.N == N and r.diverged) for N in Ns}
        out.append(s)
    return out


def terminal_truncation_error(coarse, fine, model, L_coarse: float, L_fine: float) -> float:
    """``E|T_{L_coarse}(g(X^N_N)) - T_{L_fine}(g(X^{2N}_{2N}))|^2]^{1/2}`` on coupled ensembles."""
    if fine.grid.N != 2 * coarse.grid.N:
        raise ValueError(f"fine grid must have 2N intervals: got N={coarse.grid.N} and {fine.grid.N}")
    gc = truncate(L_coarse, model.g(coarse.states[:, -1]))
    gf = truncate(L_fine, model.g(fine.states[:, -1]))
    return _rms(gc - gf)
