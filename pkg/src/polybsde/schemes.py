"""Backward time-stepping: the theta-scheme family and the tamed explicit scheme.

Each backward step regresses ``A_{i+1} = Y_{i+1} + (1 - theta) f_{i+1} h``
on ``X_i``, estimates ``Z_i`` from the correlation of ``A_{i+1}`` with the
Brownian increment, and (for ``theta > 0``) solves the implicit equation
``y - theta h f(t_i, X_i, y, Z_i) = E_i[A_{i+1}]`` path by path.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .backward_model import BackwardModel, TamingThresholds, truncate
from .errors import BlowUpError, ConfigError, NonConvergenceError, StepTooLargeError
from .forward import GridSpec, PathEnsemble
from .regression import BasisSpec, Projector

Z_ESTIMATORS = ("standard", "variance_reduced", "second_order_candidate")


@dataclass(frozen=True)
class NewtonParams:
    tol: float = 1e-12
    max_iter: int = 50
    fallback: str = "bisection_bracket"

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if self.max_iter < 1:
            raise ValueError(f"max_iter must be >= 1, got {self.max_iter}")
        if self.fallback not in ("bisection_bracket", "error"):
            raise ValueError(f"unknown fallback {self.fallback!r}")


@dataclass(frozen=True)
class SchemeConfig:
    """Settings of one backward run.

    ``terminal_z="gradient_formula"`` requires ``terminal_gradient(x)``
    returning ``Z_N`` with shape ``(M, k, d)``.
    """

    theta: float = 1.0
    z_estimator: str = "variance_reduced"
    taming: Optional[TamingThresholds] = None
    newton: NewtonParams = field(default_factory=NewtonParams)
    terminal_z: str = "zero"
    basis: BasisSpec = field(default_factory=BasisSpec)
    ridge: float = 0.0
    terminal_gradient: Optional[Callable] = field(default=None, repr=False)
    use_closed_form: bool = True
    check_closed_form: bool = False

    def __post_init__(self):
        if not 0.0 <= self.theta <= 1.0:
            raise ConfigError(f"theta must lie in [0, 1], got {self.theta}")
        if self.z_estimator not in Z_ESTIMATORS:
            raise ConfigError(f"unknown z_estimator {self.z_estimator!r}")
        if self.taming is not None and self.theta != 0.0:
            raise ConfigError("taming requires theta = 0")
        if self.terminal_z not in ("zero", "gradient_formula"):
            raise ConfigError(f"unknown terminal_z {self.terminal_z!r}")
        if self.terminal_z == "gradient_formula" and self.terminal_gradient is None:
            raise ConfigError("terminal_z = gradient_formula needs terminal_gradient")
        if self.z_estimator == "second_order_candidate":
            if self.terminal_z == "zero":
                raise ConfigError("the second-order Z candidate needs a terminal Z (terminal_z = gradient_formula)")
            if self.theta != 0.5:
                raise ConfigError("the second-order Z candidate is defined for theta = 1/2")


@dataclass
class BackwardSolution:
    """Per-path, per-step output of a backward run.

    ``Y`` has shape ``(M, N + 1, k)`` and ``Z`` shape ``(M, N + 1, k, d)``.
    After a divergence the steps at and before ``diverged_step`` hold NaN.
    """

    grid: GridSpec
    theta: float
    Y: np.ndarray = field(repr=False)
    Z: np.ndarray = field(repr=False)
    scheme: str = "theta"
    diverged: bool = False
    diverged_step: Optional[int] = None
    steps: list = field(default_factory=list, repr=False)
    taming: Optional[dict] = None
    test_solution: Optional["BackwardSolution"] = field(default=None, repr=False)

    @property
    def newton_max_iter(self) -> int:
        return max((s.get("newton_iter", 0) for s in self.steps), default=0)

    @property
    def cond_max(self) -> float:
        return max((s.get("cond", 0.0) for s in self.steps), default=0.0)


def step_restriction_bound(theta: float, constants, d: int) -> float:
    """Largest admissible step ``min{1, [4 theta (L_y + 3 d theta L_z^2)]^-1}``."""
    if theta == 0:
        return math.inf
    denom = 4.0 * theta * (constants.L_y + 3.0 * d * theta * constants.L_z**2)
    return min(1.0, 1.0 / denom) if denom > 0 else 1.0


def check_step_restriction(theta: float, h: float, constants, d: int) -> None:
    bound = step_restriction_bound(theta, constants, d)
    if h > bound:
        raise StepTooLargeError(
            f"h = {h:g} violates the theta-scheme restriction h <= min{{1, [4 theta (L_y + 3 d theta L_z^2)]^-1}}"
            f" = {bound:g} (theta = {theta:g})",
            bound=bound,
        )


# ---------------------------------------------------------------- implicit solve


def cardano_root(A3, A2, A1, A0):
    """Single real root of ``A3 y^3 + A2 y^2 + A1 y + A0`` (elementwise, ``A3 != 0``).

    Assumes a positive discriminant term, which strict monotonicity of the
    cubic guarantees. Returns NaN where that fails.
    """
    A3 = np.asarray(A3, float)
    B, C, D = A2 / A3, A1 / A3, A0 / A3
    p = C - B * B / 3.0
    q = (2.0 * B * B * B) / 27.0 - B * C / 3.0 + D
    disc = (0.5 * q) ** 2 + (p / 3.0) ** 3
    with np.errstate(invalid="ignore", divide="ignore"):
        sq = np.sqrt(disc)
        # pick the cube-root branch of largest magnitude to avoid cancellation
        u = np.cbrt(-0.5 * q - np.copysign(sq, q))
        v = np.where(u != 0, -p / (3.0 * u), 0.0)
    return np.where(disc >= 0, u + v - B / 3.0, np.nan)


def _residual(theta, h, model, t, x, z, a, y):
    return y - theta * h * model.f(t, x, y, z) - a


def _jacobian(theta, h, model, t, x, z, y):
    M, k = y.shape
    if model.dfdy is not None:
        J = np.asarray(model.dfdy(t, x, y, z), float).reshape(M, k, k)
    else:
        J = np.empty((M, k, k))
        for j in range(k):
            step = 1e-7 * (1.0 + np.abs(y[:, j]))
            up, dn = y.copy(), y.copy()
            up[:, j] += step
            dn[:, j] -= step
            J[:, :, j] = (model.f(t, x, up, z) - model.f(t, x, dn, z)) / (2.0 * step[:, None])
    return np.eye(k) - theta * h * J


def _bisect(theta, h, model, t, x, z, a, params):
    """Bracketing bisection for ``k = 1`` using that ``y - theta h f`` increases in ``y``."""
    G = lambda y: _residual(theta, h, model, t, x, z, a, y)
    width = np.maximum(1.0, np.abs(a))
    lo, hi = a - width, a + width
    for _ in range(200):
        glo, ghi = G(lo), G(hi)
        need_lo, need_hi = glo > 0, ghi < 0
        if not (need_lo.any() or need_hi.any()):
            break
        width = np.where(need_lo | need_hi, 2.0 * width, width)
        lo = np.where(need_lo, a - width, lo)
        hi = np.where(need_hi, a + width, hi)
    for _ in range(2000):
        mid = 0.5 * (lo + hi)
        gm = G(mid)
        done = (np.abs(gm) <= params.tol) | (mid == lo) | (mid == hi)
        if done.all():
            return mid
        lo = np.where(gm < 0, mid, lo)
        hi = np.where(gm > 0, mid, hi)
    return 0.5 * (lo + hi)


def newton_solve(theta, h, model, t, x, z, a, params: NewtonParams):
    """Vectorized Newton iteration from ``y = a``; returns ``(y, iterations, max_residual)``."""
    y = a.copy()
    M, k = y.shape
    eps = np.finfo(float).eps
    iters = 0
    active = np.ones(M, bool)
    with np.errstate(all="ignore"):
        for iters in range(1, params.max_iter + 1):
            F = _residual(theta, h, model, t, x[active], z[active], a[active], y[active])
            res = np.abs(F).max(axis=1)
            J = _jacobian(theta, h, model, t, x[active], z[active], y[active])
            dy = F / J[:, 0, :] if k == 1 else np.linalg.solve(J, F[..., None])[..., 0]
            yn = y[active] - dy
            y[active] = yn
            small = np.abs(dy).max(axis=1) <= 4 * eps * np.maximum(1.0, np.abs(yn).max(axis=1))
            still = ~((res <= params.tol) | small) | ~np.isfinite(yn).all(axis=1)
            idx = np.flatnonzero(active)
            active[idx[~still]] = False
            if not active.any():
                break
        F = _residual(theta, h, model, t, x, z, a, y)
        res = np.abs(F).max(axis=1)
        bad = ~np.isfinite(res) | (res > params.tol) & active
    if bad.any():
        if params.fallback == "error" or k != 1:
            worst = float(np.nanmax(np.where(np.isfinite(res), res, np.inf)[bad]))
            raise NonConvergenceError(
                f"Newton did not converge on {int(bad.sum())} path(s) after {params.max_iter} iterations; "
                f"last residual {worst:.3g}",
                residual=worst,
            )
        y[bad] = _bisect(theta, h, model, t, x[bad], z[bad], a[bad], params)
        res[bad] = np.abs(_residual(theta, h, model, t, x[bad], z[bad], a[bad], y[bad])).max(axis=1)
    return y, iters, float(res.max()) if res.size else 0.0


def _implicit(theta, h, model, t, x, z, a, params, use_closed_form=True, check=False):
    if theta == 0:
        return a.copy(), 0, 0.0
    Ly = model.constants.L_y
    if 1.0 - theta * Ly * h <= 0:
        raise StepTooLargeError(
            f"strong monotonicity margin 1 - theta L_y h = {1.0 - theta * Ly * h:g} is not positive",
            bound=1.0 / (theta * Ly),
        )
    cubic = model.driver_kind == "y_only_cubic" and model.k == 1 and model.cubic[0] != 0
    if not (cubic and use_closed_form):
        return newton_solve(theta, h, model, t, x, z, a, params)
    c3, c2, c1 = model.cubic
    th = theta * h
    with np.errstate(all="ignore"):
        y = cardano_root(-th * c3, -th * c2, 1.0 - th * c1, -a)
        # one Newton polish step
        F = _residual(theta, h, model, t, x, z, a, y)
        y = y - F / _jacobian(theta, h, model, t, x, z, y)[:, 0, :]
        res = np.abs(_residual(theta, h, model, t, x, z, a, y))
    bad = ~np.isfinite(y).all(axis=1) | (res.max(axis=1) > params.tol)
    iters = 1
    if bad.any():
        y_n, iters, _ = newton_solve(theta, h, model, t, x[bad], z[bad], a[bad], params)
        y[bad] = y_n
        res[bad] = np.abs(_residual(theta, h, model, t, x[bad], z[bad], a[bad], y_n))
    if check:
        y_ref, _, _ = newton_solve(theta, h, model, t, x, z, a, params)
        gap = float(np.max(np.abs(y - y_ref))) if y.size else 0.0
        if gap > 1e-10:
            raise AssertionError(f"closed-form and Newton roots differ by {gap:.3g}")
    return y, iters, float(res.max()) if res.size else 0.0


def solve_implicit_y(theta, h, model: BackwardModel, t, x, z, a, params: Optional[NewtonParams] = None,
                     use_closed_form: bool = True):
    """Solve ``y - theta f(t, x, y, z) h = a`` for ``y``.

    Accepts a single point (``x`` of shape ``(d,)``, ``a`` of shape ``(k,)``)
    or a batch of paths (leading axis ``M``).
    """
    params = params or NewtonParams()
    a = np.asarray(a, float)
    single = a.ndim <= 1
    a2 = np.atleast_1d(a)[None, :] if single else a
    M, k = a2.shape
    x2 = np.asarray(x, float).reshape(M, -1)
    z2 = np.asarray(z, float).reshape(M, k, -1) if np.size(z) else np.zeros((M, k, x2.shape[1]))
    y, _, _ = _implicit(theta, h, model, t, x2, z2, a2, params, use_closed_form)
    return y[0] if single else y


# ------------------------------------------------------------------ Z estimators


def _outer(dW, A):
    # (M, d), (M, k) -> (M, k*d) with component (j, l) = A_j dW_l
    return (A[:, :, None] * dW[:, None, :]).reshape(A.shape[0], -1)


def z_standard(i, ensemble: PathEnsemble, A_next, projector) -> np.ndarray:
    """``Z_i = E_i[dW_{i+1} A_{i+1}] / h``."""
    dW = ensemble.increments[:, i]
    k, d = A_next.shape[1], dW.shape[1]
    return projector.project(_outer(dW / ensemble.grid.h, A_next)).reshape(-1, k, d)


def z_variance_reduced(i, ensemble: PathEnsemble, A_next, projector, EA=None) -> np.ndarray:
    """``Z_i = E_i[dW_{i+1} (A_{i+1} - E_i[A_{i+1}])] / h``."""
    if EA is None:
        EA = projector.project(A_next)
    dW = ensemble.increments[:, i]
    k, d = A_next.shape[1], dW.shape[1]
    return projector.project(_outer(dW / ensemble.grid.h, A_next - EA)).reshape(-1, k, d)


def z_second_order_candidate(i, ensemble: PathEnsemble, A_next, Z_next, projector, EA=None) -> np.ndarray:
    """``Z_i = 2 E_i[dW (A - E_i A)] / h - E_i[Z_{i+1}]`` (trapezoidal rule on the Z integral)."""
    first = z_variance_reduced(i, ensemble, A_next, projector, EA)
    M, k, d = first.shape
    return 2.0 * first - projector.project(Z_next.reshape(M, -1)).reshape(M, k, d)


# ------------------------------------------------------------------- engines


def default_provider(config: SchemeConfig):
    return lambda i, x: Projector(config.basis, x, config.ridge, step=i)


def theta_backward_step(i, ensemble, model, config, provider, Y_next, Z_next, forward_level=math.inf, x_test=None):
    """One backward step ``i + 1 -> i``; returns ``(Y_i, Z_i, diagnostics)``.

    ``forward_level`` truncates ``X_{i+1}`` inside the driver (tamed scheme).
    With ``x_test`` (states ``X_i`` of an independent ensemble) the fitted
    step is also evaluated there and ``diagnostics["test"]`` holds
    ``(Y_i, Z_i)`` on those paths.
    """
    grid = ensemble.grid
    h, theta = grid.h, config.theta
    x_next = ensemble.states[:, i + 1]
    x_i = ensemble.states[:, i]
    with np.errstate(all="ignore"):
        if theta == 1.0:
            A = Y_next
        else:
            xf = truncate(forward_level, x_next)
            A = Y_next + (1.0 - theta) * model.f(grid.time(i + 1), xf, Y_next, Z_next) * h
    if not np.isfinite(A).all():
        raise BlowUpError(f"non-finite A_{{i+1}} at step {i}", step=i)
    proj = provider(i, x_i)
    EA = proj.project(A)
    if config.z_estimator == "standard":
        Z = z_standard(i, ensemble, A, proj)
    elif config.z_estimator == "variance_reduced":
        Z = z_variance_reduced(i, ensemble, A, proj, EA)
    else:
        Z = z_second_order_candidate(i, ensemble, A, Z_next, proj, EA)
    Y, iters, res = _implicit(
        theta, h, model, grid.time(i), x_i, Z, EA, config.newton, config.use_closed_form, config.check_closed_form
    )
    if not (np.isfinite(Y).all() and np.isfinite(Z).all()):
        raise BlowUpError(f"non-finite Y_{i} or Z_{i}", step=i)
    diag = {"step": i, "newton_iter": iters, "residual": res}
    diag.update(getattr(proj, "diagnostics", {}))
    if x_test is not None:
        diag["test"] = _evaluate_step(i, ensemble, model, config, proj, A, EA, Z_next, x_test)
    return Y, Z, diag


def _evaluate_step(i, ensemble, model, config, proj, A, EA, Z_next, x_test):
    # the step's regression functions, evaluated at out-of-sample states
    h = ensemble.grid.h
    M, k = A.shape
    dW = ensemble.increments[:, i] / h
    D = proj.basis.design((x_test - proj.shift) / proj.scale)
    if config.z_estimator == "standard":
        beta_z = proj.coefficients(_outer(dW, A))
    else:
        beta_z = proj.coefficients(_outer(dW, A - EA))
        if config.z_estimator == "second_order_candidate":
            beta_z = 2.0 * beta_z - proj.coefficients(Z_next.reshape(M, -1))
    EA_t = D @ proj.coefficients(A)
    Z_t = (D @ beta_z).reshape(x_test.shape[0], k, -1)
    Y_t, _, _ = _implicit(config.theta, h, model, ensemble.grid.time(i), x_test, Z_t, EA_t, config.newton,
                          config.use_closed_form)
    if not (np.isfinite(Y_t).all() and np.isfinite(Z_t).all()):
        raise BlowUpError(f"non-finite Y_{i} or Z_{i} on the test ensemble", step=i)
    return Y_t, Z_t


def _terminal_z(ensemble, model, config):
    M, d = ensemble.M, ensemble.d
    if config.terminal_z == "zero":
        return np.zeros((M, model.k, d))
    return np.asarray(config.terminal_gradient(ensemble.states[:, -1]), float).reshape(M, model.k, d)


def _run(ensemble, model, config, provider, Y_N, forward_level, scheme, on_step=None, test_ensemble=None, Y_N_test=None):
    grid = ensemble.grid
    M, N, d, k = ensemble.M, grid.N, ensemble.d, model.k
    Y = np.full((M, N + 1, k), np.nan)
    Z = np.full((M, N + 1, k, d), np.nan)
    Y[:, N] = Y_N
    Z[:, N] = _terminal_z(ensemble, model, config)
    provider = provider or default_provider(config)
    sol = BackwardSolution(grid=grid, theta=config.theta, Y=Y, Z=Z, scheme=scheme)
    if test_ensemble is not None:
        if test_ensemble.grid != grid:
            raise ValueError("the test ensemble must live on the same grid")
        Mt = test_ensemble.M
        Yt = np.full((Mt, N + 1, k), np.nan)
        Zt = np.full((Mt, N + 1, k, d), np.nan)
        Yt[:, N] = Y_N_test
        Zt[:, N] = _terminal_z(test_ensemble, model, config)
        sol.test_solution = BackwardSolution(grid=grid, theta=config.theta, Y=Yt, Z=Zt, scheme=scheme)
    for i in range(N - 1, -1, -1):
        x_test = None if test_ensemble is None else test_ensemble.states[:, i]
        try:
            Y[:, i], Z[:, i], diag = theta_backward_step(
                i, ensemble, model, config, provider, Y[:, i + 1], Z[:, i + 1], forward_level, x_test
            )
        except BlowUpError as exc:
            sol.diverged, sol.diverged_step = True, exc.step
            if sol.test_solution is not None:
                sol.test_solution.diverged, sol.test_solution.diverged_step = True, exc.step
            break
        if x_test is not None:
            Yt[:, i], Zt[:, i] = diag.pop("test")
        sol.steps.append(diag)
        if on_step is not None:
            on_step(i, Y[:, i])
    return sol


def run_theta_scheme(ensemble: PathEnsemble, model: BackwardModel, config: SchemeConfig, provider=None,
                     test_ensemble: Optional[PathEnsemble] = None):
    """Run the theta-scheme from ``Y_N = g(X_N)`` down to ``t_0``.

    Non-finite iterates end the run with ``diverged = True`` instead of
    raising. With ``test_ensemble`` the fitted regression functions are also
    evaluated on independent paths, stored in ``solution.test_solution``.
    """
    if config.taming is not None:
        raise ConfigError("use run_tamed_explicit for a tamed configuration")
    if config.theta > 0:
        check_step_restriction(config.theta, ensemble.grid.h, model.constants, ensemble.d)
    Y_N = np.asarray(model.g(ensemble.states[:, -1]), float).reshape(ensemble.M, model.k)
    Y_N_test = None
    if test_ensemble is not None:
        Y_N_test = np.asarray(model.g(test_ensemble.states[:, -1]), float).reshape(test_ensemble.M, model.k)
    return _run(ensemble, model, config, provider, Y_N, math.inf, f"theta={config.theta:g}",
                test_ensemble=test_ensemble, Y_N_test=Y_N_test)


def run_tamed_explicit(ensemble: PathEnsemble, model: BackwardModel, config: SchemeConfig, provider=None,
                       test_ensemble: Optional[PathEnsemble] = None):
    """Explicit scheme with terminal level ``L_h`` and forward level ``K_h``.

    Records the fraction of truncated paths and every step where some
    ``|Y_i|`` exceeds ``h^{-1/(2(m-1))}``.
    """
    tam = config.taming
    if tam is None:
        raise ConfigError("run_tamed_explicit needs config.taming")
    h = ensemble.grid.h
    if not math.isnan(tam.h):
        if not math.isclose(tam.h, h, rel_tol=1e-12):
            raise ConfigError(f"thresholds were computed for h = {tam.h:g}, grid has h = {h:g}")
        if h > tam.h_star:
            raise StepTooLargeError(f"h = {h:g} exceeds h* = {tam.h_star:g}", bound=tam.h_star)
        lhs, rhs = tam.budget()
        if lhs > rhs * (1 + 8 * np.finfo(float).eps):
            raise ConfigError(f"taming levels violate e^(c1 T)(L_h^2 + c2 T + c2 T K_h^2) <= h^(-1/(m-1)): {lhs:g} > {rhs:g}")
    gX = np.asarray(model.g(ensemble.states[:, -1]), float).reshape(ensemble.M, model.k)
    Y_N = truncate(tam.L_h, gX)
    bound = tam.y_bound if not math.isnan(tam.h) else math.inf
    violations = []
    forward_fraction = {}

    def record(i, Yi):
        if np.any(np.abs(Yi) > bound):
            violations.append(i)
        if math.isfinite(tam.K_h):
            norms = np.linalg.norm(ensemble.states[:, i + 1], axis=-1)
            forward_fraction[i + 1] = float(np.mean(norms > tam.K_h))

    Y_N_test = None
    if test_ensemble is not None:
        g_test = np.asarray(model.g(test_ensemble.states[:, -1]), float).reshape(test_ensemble.M, model.k)
        Y_N_test = truncate(tam.L_h, g_test)
    sol = _run(ensemble, model, config, provider, Y_N, tam.K_h, "tamed", on_step=record,
               test_ensemble=test_ensemble, Y_N_test=Y_N_test)
    if np.any(np.abs(Y_N) > bound):
        violations.append(ensemble.grid.N)
    sol.taming = {
        "thresholds": tam,
        "terminal_truncated_fraction": float(np.mean(np.abs(gX).max(axis=1) > tam.L_h)),
        "forward_truncated_fraction": forward_fraction,
        "y_bound": bound,
        "bound_violation_steps": sorted(violations),
    }
    return sol
