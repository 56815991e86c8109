"""Forward diffusion simulation on a uniform time grid.

Paths are generated in fixed-size blocks. Block ``b`` of a run seeded with
``seed`` draws its normals from a Philox generator keyed by
``SeedSequence(seed, spawn_key=(b,))``, so the noise of path ``m`` depends
only on ``(seed, m)``: it does not change with the path count ``M`` or with
the number of workers used to build the ensemble.
"""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import CapacityError, SimulationError

PATH_BLOCK = 4096
DEFAULT_MEMORY_CAP = 4 * 2**30
SNAPSHOT_VERSION = "polybsde-ensemble-csv v1"

# spawn-key tag separating bridge-refinement noise from the base noise
_BRIDGE_TAG = 0xB41D6E


@dataclass(frozen=True)
class GridSpec:
    """Uniform partition of ``[0, T]`` into ``N`` intervals."""

    T: float
    N: int

    def __post_init__(self):
        if not (self.T > 0 and math.isfinite(self.T)):
            raise ValueError(f"horizon T must be positive and finite, got {self.T}")
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"interval count N must be an integer >= 1, got {self.N}")
        object.__setattr__(self, "N", int(self.N))
        object.__setattr__(self, "T", float(self.T))

    @property
    def h(self) -> float:
        return self.T / self.N

    def time(self, i: int) -> float:
        # (i*T)/N makes t_i on this grid bit-equal to t_{2i} on the refined grid
        return (i * self.T) / self.N

    def times(self) -> np.ndarray:
        return np.array([self.time(i) for i in range(self.N + 1)])

    def refined(self) -> "GridSpec":
        return GridSpec(self.T, 2 * self.N)


DriftFn = Callable[[float, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class ForwardModel:
    """Forward SDE ``dX = b(t, X) dt + sigma(t, X) dW``.

    ``b(t, x)`` maps an ``(M, d)`` array to ``(M, d)`` and ``sigma(t, x)``
    maps it to ``(M, d, d)``. ``exact_kind`` selects an exact update:
    ``"brownian"`` (``b = 0``, ``sigma = I``) or ``"geometric_brownian"``
    (``b = mu * x``, ``sigma = diag(vol * x)``, coordinatewise).
    """

    d: int
    x0: np.ndarray
    b: DriftFn
    sigma: DriftFn
    exact_kind: str = "none"
    mu: Optional[np.ndarray] = None
    vol: Optional[np.ndarray] = None

    def __post_init__(self):
        x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if x0.shape != (self.d,):
            raise ValueError(f"x0 has shape {x0.shape}, expected ({self.d},)")
        object.__setattr__(self, "x0", x0)
        if self.exact_kind not in ("none", "brownian", "geometric_brownian"):
            raise ValueError(f"unknown exact_kind {self.exact_kind!r}")
        if self.exact_kind == "geometric_brownian":
            if self.mu is None or self.vol is None:
                raise ValueError("geometric_brownian needs mu and vol")
            object.__setattr__(self, "mu", np.broadcast_to(np.asarray(self.mu, float), (self.d,)).copy())
            object.__setattr__(self, "vol", np.broadcast_to(np.asarray(self.vol, float), (self.d,)).copy())

    @classmethod
    def brownian(cls, x0=0.0, d: int = 1) -> "ForwardModel":
        x0 = np.broadcast_to(np.asarray(x0, float), (d,)).copy()
        eye = np.eye(d)
        return cls(
            d=d,
            x0=x0,
            b=lambda t, x: np.zeros_like(x),
            sigma=lambda t, x: np.broadcast_to(eye, (x.shape[0], d, d)),
            exact_kind="brownian",
        )

    @classmethod
    def geometric_brownian(cls, x0, mu, vol, d: int = 1) -> "ForwardModel":
        x0 = np.broadcast_to(np.asarray(x0, float), (d,)).copy()
        mu_v = np.broadcast_to(np.asarray(mu, float), (d,)).copy()
        vol_v = np.broadcast_to(np.asarray(vol, float), (d,)).copy()

        def sigma(t, x):
            out = np.zeros((x.shape[0], d, d))
            idx = np.arange(d)
            out[:, idx, idx] = vol_v * x
            return out

        return cls(
            d=d,
            x0=x0,
            b=lambda t, x: mu_v * x,
            sigma=sigma,
            exact_kind="geometric_brownian",
            mu=mu_v,
            vol=vol_v,
        )

    def with_euler(self) -> "ForwardModel":
        """Same coefficients with the exact fast path switched off."""
        return ForwardModel(self.d, self.x0, self.b, self.sigma, "none")


@dataclass(frozen=True)
class PathEnsemble:
    """``M`` forward paths with the Brownian increments that drove them.

    ``increments`` has shape ``(M, N, d)`` and ``states`` ``(M, N + 1, d)``.
    Both arrays are read-only.
    """

    grid: GridSpec
    model: ForwardModel = field(repr=False)
    increments: np.ndarray = field(repr=False)
    states: np.ndarray = field(repr=False)
    seed: int

    def __post_init__(self):
        self.increments.flags.writeable = False
        self.states.flags.writeable = False

    @property
    def M(self) -> int:
        return self.states.shape[0]

    @property
    def d(self) -> int:
        return self.states.shape[2]


def _check_capacity(M, N, d, memory_cap):
    nbytes = 8 * M * d * (2 * N + 1)
    if nbytes > memory_cap:
        raise CapacityError(
            f"ensemble needs about {nbytes / 2**30:.2f} GiB "
            f"(M={M}, N={N}, d={d}), cap is {memory_cap / 2**30:.2f} GiB"
        )


def _block_normals(seed, block, n_paths, N, d):
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(block,))))
    return rng.standard_normal((n_paths, N, d))


def _blocks(M):
    return [(b, b * PATH_BLOCK, min(M, (b + 1) * PATH_BLOCK)) for b in range(-(-M // PATH_BLOCK))]


def _map_blocks(fn, blocks, workers):
    if workers is None or workers <= 1 or len(blocks) <= 1:
        return [fn(blk) for blk in blocks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, blocks))


def brownian_increments(grid: GridSpec, M: int, d: int, seed: int, workers=None) -> np.ndarray:
    """Draw ``(M, N, d)`` increments ``sqrt(h) * Z`` with the block-seeded rule.

    Values are rounded to multiples of a dyadic quantum about ``1e-14 sqrt(h)``
    so that :func:`coupled_refinement` can split them exactly.
    """
    sqrt_h = math.sqrt(grid.h)
    parts = _map_blocks(
        lambda blk: _block_normals(seed, blk[0], blk[2] - blk[1], grid.N, d),
        _blocks(M),
        workers,
    )
    return _quantize(np.concatenate(parts, axis=0) * sqrt_h, _quantum(grid.h))


def _brownian_path(increments):
    M, N, d = increments.shape
    W = np.zeros((M, N + 1, d))
    np.cumsum(increments, axis=1, out=W[:, 1:])
    return W


def _exact_states(model, grid, W):
    if model.exact_kind == "brownian":
        return model.x0 + W
    t = grid.times()[None, :, None]
    return model.x0 * np.exp((model.mu - 0.5 * model.vol**2) * t + model.vol * W)


def _euler_states(model, grid, increments):
    M, N, d = increments.shape
    X = np.empty((M, N + 1, d))
    X[:, 0] = model.x0
    h = grid.h
    with np.errstate(all="ignore"):
        for i in range(N):
            t = grid.time(i)
            x = X[:, i]
            drift = np.asarray(model.b(t, x), dtype=float)
            vol = np.asarray(model.sigma(t, x), dtype=float)
            _check_finite(drift, "drift", i)
            _check_finite(vol, "diffusion", i)
            X[:, i + 1] = x + drift * h + np.einsum("mjk,mk->mj", vol, increments[:, i])
    return X


def _check_finite(values, what, step):
    ok = np.isfinite(values).reshape(values.shape[0], -1).all(axis=1)
    if not ok.all():
        m = int(np.flatnonzero(~ok)[0])
        raise SimulationError(f"non-finite {what} on path {m} at step {step}", path=m, step=step)


def _states_from(model, grid, increments, W=None):
    if model.exact_kind == "none":
        return _euler_states(model, grid, increments)
    if W is None:
        W = _brownian_path(increments)
    return _exact_states(model, grid, W)


def simulate_forward(
    model: ForwardModel,
    grid: GridSpec,
    M: int,
    seed: int,
    workers: Optional[int] = None,
    memory_cap: int = DEFAULT_MEMORY_CAP,
) -> PathEnsemble:
    """Simulate ``M`` paths of ``model`` on ``grid``.

    Exact updates are used for the Brownian and geometric Brownian fast paths,
    Euler-Maruyama otherwise.
    """
    if int(M) != M or M < 1:
        raise ValueError(f"path count M must be an integer >= 1, got {M}")
    M = int(M)
    _check_capacity(M, grid.N, model.d, memory_cap)
    dW = brownian_increments(grid, M, model.d, seed, workers)
    X = _states_from(model, grid, dW)
    return PathEnsemble(grid=grid, model=model, increments=dW, states=X, seed=int(seed))


def _quantum(h):
    """Dyadic grid for increments of a step ``h``.

    Multiples of ``q`` below ``2^53 q >= 32 sqrt(h)`` in magnitude add and
    subtract exactly, which is what makes the bridge split exact.
    """
    return 2.0 ** (math.ceil(math.log2(math.sqrt(h))) + 5 - 52)


def _quantize(values, q):
    return np.rint(values / q) * q


def _exact_split(total, first, q):
    """Return ``(first, second)`` with ``first + second == total`` bit-for-bit."""
    first = _quantize(first, q)
    second = total - first
    bad = (first + second) != total
    if bad.any():
        # |values| beyond the exact range (probability ~1e-200) or foreign input
        first = np.where(bad, 0.5 * total, first)
        second = np.where(bad, total - first, second)
    return first, second


def coupled_refinement(
    ensemble: PathEnsemble,
    workers: Optional[int] = None,
    memory_cap: int = DEFAULT_MEMORY_CAP,
) -> PathEnsemble:
    """Split every increment into two with the Brownian-bridge law.

    Each coarse ``dW`` becomes ``dW/2 + sqrt(h/4) Z`` followed by the
    remainder, so fine increments sum pairwise to the coarse ones exactly.
    For exact models the fine Brownian path agrees with the coarse one at
    every shared grid time, hence so do the states.
    """
    grid = ensemble.grid
    fine = grid.refined()
    M, N, d = ensemble.increments.shape
    _check_capacity(M, fine.N, d, memory_cap)
    coarse = ensemble.increments

    def draw(blk):
        b, lo, hi = blk
        rng = np.random.Generator(
            np.random.Philox(np.random.SeedSequence(ensemble.seed, spawn_key=(b, _BRIDGE_TAG, N)))
        )
        return rng.standard_normal((hi - lo, N, d))

    Z = np.concatenate(_map_blocks(draw, _blocks(M), workers), axis=0)
    first = 0.5 * coarse + math.sqrt(grid.h / 4.0) * Z
    first, second = _exact_split(coarse, first, _quantum(grid.h))
    dW = np.empty((M, fine.N, d))
    dW[:, 0::2] = first
    dW[:, 1::2] = second

    model = ensemble.model
    if model.exact_kind == "none":
        X = _euler_states(model, fine, dW)
    else:
        Wc = _brownian_path(coarse)
        W = np.empty((M, fine.N + 1, d))
        W[:, 0::2] = Wc
        W[:, 1::2] = Wc[:, :-1] + first
        X = _exact_states(model, fine, W)
    return PathEnsemble(grid=fine, model=model, increments=dW, states=X, seed=ensemble.seed)


def dump_ensemble(ensemble: PathEnsemble, path) -> None:
    """Write a CSV snapshot: one row per (path, step, coordinate).

    The increment column is empty on the terminal step.
    """
    g = ensemble.grid
    with open(path, "w", newline="") as fh:
        fh.write(f"# {SNAPSHOT_VERSION} T={g.T!r} N={g.N} M={ensemble.M} d={ensemble.d} seed={ensemble.seed}\n")
        w = csv.writer(fh)
        w.writerow(["path", "step", "coordinate", "increment", "state"])
        for m in range(ensemble.M):
            for i in range(g.N + 1):
                for j in range(ensemble.d):
                    inc = repr(float(ensemble.increments[m, i, j])) if i < g.N else ""
                    w.writerow([m, i, j, inc, repr(float(ensemble.states[m, i, j]))])


def load_ensemble(path, model: ForwardModel) -> PathEnsemble:
    """Read a snapshot written by :func:`dump_ensemble`."""
    with open(path, newline="") as fh:
        header = fh.readline().strip()
        prefix = f"# {SNAPSHOT_VERSION} "
        if not header.startswith(prefix):
            raise ValueError(f"unsupported snapshot header: {header!r}")
        meta = dict(kv.split("=", 1) for kv in header[len(prefix):].split())
        T, N, M, d = float(meta["T"]), int(meta["N"]), int(meta["M"]), int(meta["d"])
        dW = np.empty((M, N, d))
        X = np.empty((M, N + 1, d))
        reader = csv.reader(fh)
        next(reader)
        for row in reader:
            m, i, j = int(row[0]), int(row[1]), int(row[2])
            if i < N:
                dW[m, i, j] = float(row[3])
            X[m, i, j] = float(row[4])
    return PathEnsemble(grid=GridSpec(T, N), model=model, increments=dW, states=X, seed=int(meta["seed"]))
