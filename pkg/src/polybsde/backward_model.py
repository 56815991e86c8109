"""BSDE data: driver, terminal map, growth constants and the taming levels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import NotApplicableError, SingularConstantError, StepTooLargeError


@dataclass(frozen=True)
class ModelConstants:
    """Growth, monotonicity and regularity constants of the driver.

    ``L_y`` is the one-sided (monotonicity) constant. ``L_y_loc`` is the
    local-Lipschitz constant in ``y``; it defaults to ``L_y``.
    """

    L: float = 0.0
    L_x: float = 0.0
    L_y: float = 0.0
    L_z: float = 0.0
    L_t: float = 0.0
    m: int = 1
    L_y_loc: Optional[float] = None

    def __post_init__(self):
        for name in ("L", "L_x", "L_y", "L_z", "L_t"):
            v = getattr(self, name)
            if not (v >= 0 and math.isfinite(v)):
                raise ValueError(f"constant {name} must be finite and >= 0, got {v}")
        if int(self.m) != self.m or self.m < 1:
            raise ValueError(f"growth degree m must be an integer >= 1, got {self.m}")
        object.__setattr__(self, "m", int(self.m))
        if self.m > 1 and self.L_y <= 0:
            raise ValueError("L_y > 0 is required when m > 1")
        if self.L_y_loc is None:
            object.__setattr__(self, "L_y_loc", self.L_y)


Driver = Callable[[float, np.ndarray, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class BackwardModel:
    """Driver ``f(t, x, y, z)`` and terminal map ``g(x)``.

    Both are vectorised over paths: ``x`` is ``(M, d)``, ``y`` is ``(M, k)``,
    ``z`` is ``(M, k, d)``; ``f`` returns ``(M, k)`` and ``g`` returns
    ``(M, k)``.

    ``driver_kind`` is ``"general"``, ``"y_only_general"`` or
    ``"y_only_cubic"``; the cubic kind carries ``cubic = (c3, c2, c1)`` with
    ``f(y) = c3 y^3 + c2 y^2 + c1 y`` and enables the closed-form implicit
    solve. ``dfdy(t, x, y, z)`` returns ``(M, k, k)`` if supplied; otherwise
    the implicit solver differentiates numerically.
    """

    k: int
    f: Driver
    g: Callable[[np.ndarray], np.ndarray]
    constants: ModelConstants
    driver_kind: str = "general"
    cubic: Optional[tuple] = None
    dfdy: Optional[Callable] = field(default=None, repr=False)
    name: str = "custom"

    def __post_init__(self):
        if self.driver_kind not in ("general", "y_only_general", "y_only_cubic"):
            raise ValueError(f"unknown driver_kind {self.driver_kind!r}")
        if self.driver_kind == "y_only_cubic" and (self.cubic is None or len(self.cubic) != 3):
            raise ValueError("y_only_cubic needs cubic=(c3, c2, c1)")


def cubic_driver(c3: float, c2: float, c1: float):
    """Return ``(f, dfdy)`` for ``f(y) = c3 y^3 + c2 y^2 + c1 y``."""

    def f(t, x, y, z):
        return ((c3 * y + c2) * y + c1) * y

    def dfdy(t, x, y, z):
        return ((3.0 * c3 * y + 2.0 * c2) * y + c1)[..., None]

    return f, dfdy


def logistic(x):
    """``1 / (1 + e^x)`` evaluated without overflow."""
    x = np.asarray(x, dtype=float)
    ex = np.exp(-np.abs(x))
    return np.where(x >= 0, ex / (1.0 + ex), 1.0 / (1.0 + ex))


# |y - y^3| - |y|^3 peaks at 2/(3 sqrt 6) ~= 0.2722 on [0, 1]
_FHN_GROWTH_L = 0.28


def fhn_model(a: float = -1.0) -> BackwardModel:
    """FitzHugh-Nagumo driver without recovery: ``-y^3 + (1 + a) y^2 - a y``."""
    c3, c2, c1 = -1.0, 1.0 + a, -a
    f, dfdy = cubic_driver(c3, c2, c1)
    # <y'-y, f(y')-f(y)> / |y'-y|^2 = -(y^2+yy'+y'^2) + c2 (y+y') + c1 <= c2^2/3 + c1
    L_y = max(c2**2 / 3.0 + c1, 1e-12)
    return BackwardModel(
        k=1,
        f=f,
        g=lambda x: logistic(x[:, :1]),
        constants=ModelConstants(L_y=L_y, m=3, L_y_loc=3.0 + abs(c2) + abs(c1)),
        driver_kind="y_only_cubic",
        cubic=(c3, c2, c1),
        dfdy=dfdy,
        name=f"fhn_a={a:g}",
    )


def builtin_model(name: str, **custom) -> BackwardModel:
    """Look up one of the shipped models.

    ``fhn_a_minus_1``: ``f(y) = -y^3 + y``, ``g(x) = 1 / (1 + e^x)``.
    ``cubic_pure``: ``f(y) = -y^3``, ``g(x) = x``.
    ``custom``: keyword arguments are forwarded to :class:`BackwardModel`.
    """
    if name == "fhn_a_minus_1":
        f, dfdy = cubic_driver(-1.0, 0.0, 1.0)
        return BackwardModel(
            k=1,
            f=f,
            g=lambda x: logistic(x[:, :1]),
            constants=ModelConstants(L=_FHN_GROWTH_L, L_y=1.0, m=3, L_y_loc=3.0),
            driver_kind="y_only_cubic",
            cubic=(-1.0, 0.0, 1.0),
            dfdy=dfdy,
            name=name,
        )
    if name == "cubic_pure":
        f, dfdy = cubic_driver(-1.0, 0.0, 0.0)
        return BackwardModel(
            k=1,
            f=f,
            g=lambda x: np.array(x[:, :1], dtype=float),
            constants=ModelConstants(L_y=1.0, m=3, L_y_loc=3.0),
            driver_kind="y_only_cubic",
            cubic=(-1.0, 0.0, 0.0),
            dfdy=dfdy,
            name=name,
        )
    if name == "custom":
        return BackwardModel(**custom)
    raise KeyError(f"unknown model {name!r}; known: fhn_a_minus_1, cubic_pure, custom")


def fhn_exact_solution(t, x, T: float, a: float = -1.0):
    """Closed-form solution ``u(t, x)`` of the FitzHugh-Nagumo PDE (``c=-1``, ``b=1+a``)."""
    return logistic(np.asarray(x, float) - (0.5 - a) * (T - np.asarray(t, float)))


def fhn_exact_gradient(t, x, T: float, a: float = -1.0):
    """``d/dx`` of :func:`fhn_exact_solution`; equals ``Z`` since ``sigma = 1``."""
    u = fhn_exact_solution(t, x, T, a)
    return -u * (1.0 - u)


def truncate(L: float, v):
    """Project ``v`` on the closed ball of radius ``L`` (last axis is the vector axis).

    Scalars and arrays with a trailing axis of length one are clamped to
    ``[-L, L]``.
    """
    if L < 0:
        raise ValueError(f"truncation level must be >= 0, got {L}")
    v = np.asarray(v, dtype=float)
    if math.isinf(L):
        return v
    if v.ndim == 0 or v.shape[-1] == 1:
        return np.clip(v, -L, L)
    # scale by the largest entry so tiny or huge vectors neither underflow nor overflow
    big = np.max(np.abs(v), axis=-1, keepdims=True)
    with np.errstate(invalid="ignore", divide="ignore"):
        unit = np.where(big > 0, v / big, 0.0)
        norm = big * np.linalg.norm(unit, axis=-1, keepdims=True)
        return np.where(norm > L, unit * (L / np.linalg.norm(unit, axis=-1, keepdims=True)), v)


def compute_constants_c1_c2(constants: ModelConstants, d: int, c2_override: Optional[float] = None):
    """Return ``(c1, c2)`` used by the taming levels."""
    Ly, Lz = constants.L_y, constants.L_z
    c1 = 2.0 * (Ly + 12.0 * d * Lz**2 + 2.0 * Ly**2)
    if c2_override is not None:
        return c1, float(c2_override)
    if Lz == 0.0:
        if constants.L > 0 or constants.L_x > 0:
            raise SingularConstantError(
                "c2 = max(L^2, L_x^2) / (4 d L_z^2) is undefined with L_z = 0 and "
                f"L={constants.L}, L_x={constants.L_x}; pass c2_override"
            )
        return c1, 0.0
    c2 = max(constants.L**2, constants.L_x**2) / (4.0 * d * Lz**2)
    return c1, c2


@dataclass(frozen=True)
class TamingThresholds:
    """Truncation levels for the tamed explicit scheme.

    ``L_h`` clamps the terminal value and ``K_h`` the forward state passed to
    the driver. Both already include the multiplier ``alpha``.
    """

    c1: float
    c2: float
    h_star: float
    L_h: float
    K_h: float
    alpha: float = 1.0
    h: float = float("nan")
    T: float = float("nan")
    m: int = 3

    @property
    def y_bound(self) -> float:
        """Pathwise bound ``h^{-1/(2(m-1))}`` that the tamed iterates respect at ``alpha = 1``."""
        return self.h ** (-1.0 / (2 * (self.m - 1)))

    def budget(self) -> tuple:
        """``(lhs, rhs)`` of ``e^{c1 T}(L_h^2 + c2 T + c2 T K_h^2) <= h^{-1/(m-1)}`` at ``alpha = 1``."""
        Lh, Kh = self.L_h / self.alpha, self.K_h / self.alpha
        tail = 0.0 if self.c2 == 0.0 else self.c2 * self.T * Kh**2
        lhs = math.exp(self.c1 * self.T) * (Lh**2 + self.c2 * self.T + tail)
        return lhs, self.h ** (-1.0 / (self.m - 1))

    @classmethod
    def unbounded(cls) -> "TamingThresholds":
        """Levels at infinity: the tamed scheme then equals the plain explicit one."""
        inf = float("inf")
        return cls(c1=0.0, c2=0.0, h_star=inf, L_h=inf, K_h=inf, alpha=1.0)


def step_star(c1: float, c2: float, T: float, m: int, d: int, L_z: float) -> float:
    """Largest step for which the taming levels are valid."""
    bound = float("inf")
    if c2 > 0:
        bound = (3.0 * math.exp(c1 * T) * c2 * T) ** (-(m - 1))
    if L_z > 0:
        bound = min(bound, 1.0 / (32.0 * d * L_z**2))
    return bound


def compute_taming_thresholds(
    constants: ModelConstants,
    d: int,
    T: float,
    h: float,
    alpha: float = 1.0,
    c2_override: Optional[float] = None,
) -> TamingThresholds:
    """Terminal and forward truncation levels for step ``h``.

    ``K_h`` is infinite (no forward truncation) when ``c2 = 0``.
    """
    m = constants.m
    if m == 1:
        raise NotApplicableError("m = 1 needs no taming")
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    c1, c2 = compute_constants_c1_c2(constants, d, c2_override)
    h_star = step_star(c1, c2, T, m, d, constants.L_z)
    if h > h_star:
        raise StepTooLargeError(f"h = {h:g} exceeds h* = {h_star:g}", bound=h_star)
    scale = alpha / math.sqrt(3.0) * math.exp(-0.5 * c1 * T) * h ** (-1.0 / (2 * (m - 1)))
    L_h = scale
    K_h = scale / math.sqrt(c2 * T) if c2 > 0 else float("inf")
    return TamingThresholds(c1=c1, c2=c2, h_star=h_star, L_h=L_h, K_h=K_h, alpha=alpha, h=h, T=T, m=m)
