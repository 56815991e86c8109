"""Least-squares projection onto polynomial bases.

Stands in for the conditional expectation ``E[xi | X_i]``: per-path samples
of ``xi`` are regressed on a polynomial basis evaluated at ``X_i``.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

from .errors import DataError, UnderdeterminedError

ILL_CONDITIONED = 1e12


@dataclass(frozen=True)
class BasisSpec:
    """Polynomial basis of total degree ``<= degree`` in the state coordinates.

    ``kind`` is ``"hermite"`` (probabilists' Hermite) or ``"monomial"``;
    ``standardization`` is ``"none"`` or ``"per_step_affine"``.
    """

    kind: str = "hermite"
    degree: int = 5
    standardization: str = "per_step_affine"

    def __post_init__(self):
        if self.kind not in ("hermite", "monomial"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        if int(self.degree) != self.degree or self.degree < 0:
            raise ValueError(f"basis degree must be an integer >= 0, got {self.degree}")
        if self.standardization not in ("none", "per_step_affine"):
            raise ValueError(f"unknown standardization {self.standardization!r}")

    def multi_indices(self, d: int) -> list:
        out = [
            idx
            for total in range(self.degree + 1)
            for idx in itertools.product(range(total + 1), repeat=d)
            if sum(idx) == total
        ]
        return out

    def size(self, d: int) -> int:
        return math.comb(self.degree + d, d)

    def design(self, z: np.ndarray) -> np.ndarray:
        """Evaluate the basis at already-standardized points ``z`` of shape ``(M, d)``."""
        M, d = z.shape
        per_coord = [_vander(self.kind, z[:, j], self.degree) for j in range(d)]
        if d == 1:
            return per_coord[0]
        cols = []
        for idx in self.multi_indices(d):
            col = per_coord[0][:, idx[0]].copy()
            for j in range(1, d):
                col *= per_coord[j][:, idx[j]]
            cols.append(col)
        return np.asfortranarray(np.stack(cols, axis=1))


def _vander(kind, x, K):
    """Columns ``P_0(x) .. P_K(x)`` in Fortran order (probabilists' Hermite or monomials)."""
    V = np.empty((x.shape[0], K + 1), order="F")
    V[:, 0] = 1.0
    if K >= 1:
        V[:, 1] = x
    for n in range(1, K):
        np.multiply(x, V[:, n], out=V[:, n + 1])
        if kind == "hermite":
            # He_{n+1} = x He_n - n He_{n-1}
            V[:, n + 1] -= n * V[:, n - 1]
    return V


def _as_2d(a, name):
    a = np.asarray(a, dtype=float)
    if a.ndim == 1:
        a = a[:, None]
    if a.ndim != 2:
        raise ValueError(f"{name} must be 1-d or 2-d, got shape {a.shape}")
    return a


def _standardization(basis, x):
    d = x.shape[1]
    if basis.standardization == "none":
        return np.zeros(d), np.ones(d)
    shift = x.mean(axis=0)
    scale = x.std(axis=0)
    # a (numerically) constant coordinate carries no information: keep it centred at 0
    flat = scale <= 1e-12 * (1.0 + np.abs(shift))
    scale = np.where(flat, 1.0, scale)
    return shift, scale


@dataclass(frozen=True)
class RegressionOperator:
    """A fitted projection ``x -> Phi((x - shift) / scale) @ coefficients``."""

    basis: BasisSpec
    coefficients: np.ndarray
    shift: np.ndarray
    scale: np.ndarray
    step: int = -1
    fitted: np.ndarray = field(default=None, repr=False)
    diagnostics: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.shift.shape[0]

    def __call__(self, x) -> np.ndarray:
        return evaluate(self, x)


def evaluate(op: RegressionOperator, x) -> np.ndarray:
    """Evaluate a fitted operator at new points ``x`` of shape ``(M', d)``."""
    x = _as_2d(x, "x")
    if x.shape[1] != op.d:
        raise ValueError(f"operator was fitted in dimension {op.d}, got points of dimension {x.shape[1]}")
    return op.basis.design((x - op.shift) / op.scale) @ op.coefficients


class Projector:
    """Factorized design matrix at one time step, reusable across targets.

    ``R`` comes from a Cholesky factorization of the Gram matrix and
    coefficients from the semi-normal equations plus one refinement sweep.
    That matches Householder QR accuracy when the design is well
    conditioned. When Cholesky breaks down or ``R`` is badly conditioned, a
    column-pivoted Householder QR takes over and sets the numerical rank.
    With ``ridge > 0`` the design is augmented with ``sqrt(ridge) * I`` rows.
    """

    # above this estimate of cond(R) the Gram route loses too many digits
    _GRAM_COND_LIMIT = 1e6

    def __init__(self, basis: BasisSpec, x, ridge: float = 0.0, step: int = -1):
        if ridge < 0:
            raise ValueError(f"ridge must be >= 0, got {ridge}")
        x = _as_2d(x, "x_samples")
        M, d = x.shape
        p = basis.size(d)
        if M < p:
            raise UnderdeterminedError(f"{M} samples for a basis of size {p}")
        self.basis, self.ridge, self.step = basis, float(ridge), step
        self.shift, self.scale = _standardization(basis, x)
        self.design = basis.design((x - self.shift) / self.scale)
        self._Q = None
        cond = self._gram_factor(p)
        if cond is None:
            cond = self._qr_factor(p)
        self.diagnostics = {"rank": self.rank, "basis_size": p, "cond": cond, "warning": None}
        if cond > ILL_CONDITIONED and ridge == 0:
            self.diagnostics["warning"] = f"design condition estimate {cond:.3g} exceeds {ILL_CONDITIONED:g}"
        elif self.rank < p:
            self.diagnostics["warning"] = f"design has numerical rank {self.rank} < {p}"

    def _gram_factor(self, p):
        G = self.design.T @ self.design
        if self.ridge > 0:
            G[np.diag_indices(p)] += self.ridge
        try:
            R = sla.cholesky(G, lower=False, check_finite=False)
        except np.linalg.LinAlgError:
            return None
        diag = np.abs(np.diag(R))
        if diag.min() <= diag.max() / self._GRAM_COND_LIMIT:
            return None
        cond = float(np.linalg.cond(R))
        if not cond < self._GRAM_COND_LIMIT:
            return None
        self._R, self._perm, self.rank = R, np.arange(p), p
        return cond

    def _qr_factor(self, p):
        A = self.design
        if self.ridge > 0:
            A = np.vstack([A, math.sqrt(self.ridge) * np.eye(p)])
        Q, R, perm = sla.qr(A, mode="economic", pivoting=True, check_finite=False)
        diag = np.abs(np.diag(R))
        tol = np.finfo(float).eps * max(A.shape) * (diag[0] if diag.size else 0.0)
        rank = int(np.sum(diag > tol))
        self._Q, self._R, self._perm, self.rank = Q[: self.design.shape[0], :rank], R[:rank, :rank], perm, rank
        # condition of the retained block; rank deficiency is reported separately
        return float(diag[0] / diag[rank - 1]) if rank > 0 else math.inf

    def _solve(self, y):
        R = self._R
        if self._Q is not None:
            return sla.solve_triangular(R, self._Q.T @ y, check_finite=False)
        A = self.design

        def normal(rhs):
            w = sla.solve_triangular(R, rhs, trans="T", check_finite=False)
            return sla.solve_triangular(R, w, check_finite=False)

        beta = normal(A.T @ y)
        correction = A.T @ (y - A @ beta)
        if self.ridge > 0:
            correction -= self.ridge * beta
        return beta + normal(correction)

    def coefficients(self, targets) -> np.ndarray:
        y = _as_2d(targets, "targets")
        if y.shape[0] != self.design.shape[0]:
            raise ValueError(f"{y.shape[0]} targets for {self.design.shape[0]} samples")
        finite = np.isfinite(y).all(axis=1)
        if not finite.all():
            m = int(np.flatnonzero(~finite)[0])
            raise DataError(f"non-finite regression target on path {m}", path=m)
        p = self.design.shape[1]
        beta = np.zeros((p, y.shape[1]))
        # constant targets lie in the span (column 0 is the constant 1): reproduce them exactly
        constant = (y == y[:1]).all(axis=0) if self.ridge == 0 else np.zeros(y.shape[1], bool)
        solve = ~constant
        if solve.any() and self.rank:
            sub = np.zeros((p, int(solve.sum())))
            sub[self._perm[: self.rank]] = self._solve(y[:, solve])
            beta[:, solve] = sub
        beta[0, constant] = y[0, constant]
        return beta

    def fit(self, targets) -> RegressionOperator:
        beta = self.coefficients(targets)
        fitted = self.design @ beta
        y = _as_2d(targets, "targets")
        diag = dict(self.diagnostics)
        diag["residual_rms"] = float(np.sqrt(np.mean((y - fitted) ** 2)))
        return RegressionOperator(
            basis=self.basis,
            coefficients=beta,
            shift=self.shift,
            scale=self.scale,
            step=self.step,
            fitted=fitted,
            diagnostics=diag,
        )

    def project(self, targets) -> np.ndarray:
        """Fitted values at the sample points; this is the scheme's ``E_i[.]``."""
        return self.design @ self.coefficients(targets)


def fit(basis: BasisSpec, x_samples, targets, ridge: float = 0.0, step: int = -1) -> RegressionOperator:
    """Least-squares fit of ``targets`` (``(M, k)``) on the basis at ``x_samples`` (``(M, d)``)."""
    return Projector(basis, x_samples, ridge, step).fit(targets)


def condexp(basis: BasisSpec, x_samples, targets, ridge: float = 0.0) -> np.ndarray:
    """Fit and evaluate on the same sample in one call."""
    return Projector(basis, x_samples, ridge).project(targets)
