"""Divergence of the naive explicit scheme for ``f(y) = -y^3``, ``T = 1``.

With ``h = 1/N`` and no conditional expectation to take, the scheme is the
map ``psi(x) = x - h x^3`` iterated from the terminal value. Iterates are
kept as ``(sign, log2|x|)`` because they leave the floating-point range
within a handful of steps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np
from scipy.special import erfc, logsumexp
from scipy.stats import truncnorm

_LN2 = math.log(2.0)


@dataclass(frozen=True)
class LogSequence:
    """``Y_i = sign[i] * 2**log2_abs[i]`` for ``i = 0..N`` (index = grid step)."""

    sign: np.ndarray
    log2_abs: np.ndarray

    def values(self) -> np.ndarray:
        """Plain floats; ``±inf`` where the magnitude overflows."""
        with np.errstate(over="ignore"):
            return self.sign * np.exp2(self.log2_abs)


def psi_log(sign, log2_abs, h):
    """Apply ``x -> x (1 - h x^2)`` in ``(sign, log2|x|)`` form (elementwise)."""
    sign = np.asarray(sign, float)
    L = np.asarray(log2_abs, float)
    with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
        u = math.log2(h) + 2.0 * L  # log2(h x^2)
        small = u < 60.0
        hx2 = np.exp2(np.where(small, u, 0.0))
        fac_small = 1.0 - hx2
        # log2|1 - 2^u| for large u, written to stay accurate
        log_big = u + np.log1p(-np.exp2(-np.where(small, 60.0, u))) / _LN2
        log_fac = np.where(small, np.log2(np.abs(fac_small)), log_big)
        sgn_fac = np.where(small, np.sign(fac_small), -1.0)
        new_sign = sign * sgn_fac
        new_L = np.where(new_sign == 0, -np.inf, L + log_fac)
    return new_sign, new_L


def counterexample_iterate(N: int, xi: float) -> LogSequence:
    """Backward explicit iterates ``Y_i = psi^(N - i)(xi)``, ``i = N..0``, with ``h = 1/N``."""
    if N < 1:
        raise ValueError(f"N must be >= 1, got {N}")
    h = 1.0 / N
    sign = np.empty(N + 1)
    L = np.empty(N + 1)
    sign[N] = np.sign(xi)
    L[N] = math.log2(abs(xi)) if xi != 0 else -math.inf
    for i in range(N - 1, -1, -1):
        sign[i], L[i] = psi_log(sign[i + 1], L[i + 1], h)
    return LogSequence(sign, L)


def counterexample_exact_scaled(N: int, c) -> list:
    """Exact iterates for ``xi = c sqrt(N)``: returns ``r_i`` with ``Y_i = r_i sqrt(N)``.

    With ``h = 1/N``, ``psi(sqrt(N) r) = sqrt(N) (r - r^3)``, so rational ``c``
    gives rational iterates.
    """
    r = [None] * (N + 1)
    r[N] = Fraction(c)
    for i in range(N - 1, -1, -1):
        r[i] = r[i + 1] - r[i + 1] ** 3
    return r


def deterministic_bound_holds(N: int, c=2) -> bool:
    """Exact check of ``|Y_i| >= 2^(2^(N - i)) sqrt(N)`` for every ``i`` when ``xi = c sqrt(N)``."""
    r = counterexample_exact_scaled(N, c)
    return all(abs(r[i]) >= 2 ** (2 ** (N - i)) for i in range(N + 1))


def log2_fraction(q: Fraction) -> float:
    """``log2|q|`` of a possibly huge rational without overflow."""
    num, den = abs(q.numerator), q.denominator
    shift = max(num.bit_length() - 60, 0) - max(den.bit_length() - 60, 0)
    num_s = num >> max(num.bit_length() - 60, 0)
    den_s = den >> max(den.bit_length() - 60, 0)
    return math.log2(num_s) - math.log2(den_s) + shift


def gaussian_tail_bound_holds(x) -> np.ndarray:
    """``P[|Z| >= x] >= x e^{-x^2} / 4`` for a standard normal ``Z`` (elementwise)."""
    x = np.asarray(x, float)
    return erfc(x / math.sqrt(2.0)) >= 0.25 * x * np.exp(-x * x)


@dataclass(frozen=True)
class DivergenceStat:
    N_list: tuple
    log2_mean_abs: tuple
    exploding_paths: tuple
    bound_checked: tuple
    bound_ok: bool

    @property
    def strictly_increasing(self) -> bool:
        v = self.log2_mean_abs
        return all(b > a for a, b in zip(v, v[1:]))


def counterexample_divergence_stat(N_list, M: int, seed: int) -> DivergenceStat:
    """Monte Carlo estimate of ``E|Y^(N)_{1/2}|`` with ``xi = W_{1/2}``.

    The same ``M`` draws of ``W_{1/2}`` are used for every ``N``. Means are
    returned as ``log2``. On paths with ``xi >= 2 sqrt(N)`` the bound
    ``|Y_i| >= 2^(2^(N - i)) sqrt(N)``, ``i >= N/2``, is checked as well.
    """
    N_list = [int(n) for n in N_list]
    for N in N_list:
        if N < 2 or N % 2:
            raise ValueError(f"every N must be even (t = 1/2 on the grid), got {N}")
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    xi = math.sqrt(0.5) * rng.standard_normal(M)
    means, exploding, checked, ok = [], [], [], True
    for N in N_list:
        h = 1.0 / N
        sign = np.sign(xi)
        with np.errstate(divide="ignore"):
            L = np.log2(np.abs(xi))
        hot = xi >= 2.0 * math.sqrt(N)
        floor_half = 0.5 * math.log2(N)
        for step in range(1, N // 2 + 1):
            sign, L = psi_log(sign, L, h)
            i = N - step
            if hot.any():
                ok &= bool(np.all(L[hot] >= 2.0 ** (N - i) + floor_half - 1e-9 * 2.0 ** (N - i)))
        finite = sign != 0
        lm = logsumexp(L[finite] * _LN2) / _LN2 - math.log2(M) if finite.any() else -math.inf
        means.append(float(lm))
        exploding.append(int(np.sum(np.abs(xi) >= math.sqrt(2.0 * N))))
        checked.append(int(hot.sum()))
    return DivergenceStat(tuple(N_list), tuple(means), tuple(exploding), tuple(checked), ok)


def conditioned_bound_check(N: int, M: int, seed: int) -> bool:
    """Check the doubly exponential bound on ``M`` draws of ``xi = W_{1/2}`` conditioned on ``xi >= 2 sqrt(N)``.

    The event is far in the tail, so the draws come from the truncated
    normal law directly rather than by rejection.
    """
    sd = math.sqrt(0.5)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed)))
    xi = sd * truncnorm.rvs(2.0 * math.sqrt(N) / sd, np.inf, size=M, random_state=rng)
    if not np.all(xi >= 2.0 * math.sqrt(N)):
        return False
    h = 1.0 / N
    sign, L = np.ones(M), np.log2(xi)
    floor_half = 0.5 * math.log2(N)
    for i in range(N - 1, N // 2 - 1, -1):
        sign, L = psi_log(sign, L, h)
        if not np.all(L >= 2.0 ** (N - i) + floor_half - 1e-9 * 2.0 ** (N - i)):
            return False
    return True
