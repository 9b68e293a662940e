"""Seeded simulation of Brownian ensembles and path-dependent diffusions.

Every path owns its own Philox stream keyed by ``(seed, path index)``, so an
increment ``dB[m, i]`` depends only on ``(seed, m, i)`` and the ensemble is
identical whatever the number of worker threads used to build it.

Functionals of the path (diffusion matrices, drifts, rewards, obstacles) are
vectorised over paths and receive a :class:`Prefix`, i.e. the discrete path
``x_0, ..., x_i`` of every path together with its running supremum norm.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

Array = np.ndarray

__all__ = [
    "SimulationError",
    "TimeGrid",
    "Prefix",
    "PathBundle",
    "DiffusionSpec",
    "simulate_brownian",
    "simulate_sde",
    "simulate_controlled_sde",
    "girsanov_weight",
    "mean_and_se",
]


class SimulationError(ValueError):
    """Raised when a simulated quantity stops being finite or well posed."""


@dataclass(frozen=True)
class TimeGrid:
    """Uniform partition ``t_i = i T / N`` of ``[0, T]``."""

    T: float = 1.0
    N: int = 50

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError(f"grid needs N >= 1 steps, got {self.N}")
        if not (np.isfinite(self.T) and self.T > 0):
            raise ValueError(f"grid horizon must be positive, got {self.T}")

    @property
    def dt(self) -> float:
        return self.T / self.N

    @property
    def nodes(self) -> Array:
        t = np.arange(self.N + 1) * self.dt
        t[-1] = self.T
        return t

    def t(self, i: int) -> float:
        return self.T if i == self.N else i * self.dt


@dataclass(frozen=True)
class Prefix:
    """Discrete path prefix ``x_0..x_i`` for every path of an ensemble.

    ``x`` has shape ``(M, i + 1, d)``; ``sup`` is the running sup-norm
    ``max_{s <= t_i} |x_s|`` with shape ``(M,)``.
    """

    i: int
    t: float
    x: Array
    sup: Array

    @property
    def state(self) -> Array:
        """Current state, shape ``(M, d)``."""
        return self.x[:, -1, :]

    @property
    def scalar(self) -> Array:
        """First coordinate of the current state, shape ``(M,)``."""
        return self.x[:, -1, 0]

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def dim(self) -> int:
        return self.x.shape[2]


def _running_sup(x: Array) -> Array:
    norms = np.abs(x[..., 0]) if x.shape[-1] == 1 else np.linalg.norm(x, axis=-1)
    return np.maximum.accumulate(norms, axis=1)


@dataclass
class PathBundle:
    """A seeded ensemble of Brownian increments, optionally with state paths.

    Attributes
    ----------
    grid : TimeGrid
    seed : int
        64-bit seed; path ``m`` uses the Philox key ``(seed, m)``.
    dB : ndarray, shape (M, N, d)
    x : ndarray, shape (M, N + 1, d), or None before an SDE was simulated
    controls : ndarray, shape (M, N, ...), or None
        Control values applied on ``[t_i, t_{i+1})`` by a controlled simulation.
    """

    grid: TimeGrid
    seed: int
    dB: Array
    x: Optional[Array] = None
    controls: Optional[Array] = None
    _sup: Optional[Array] = field(default=None, repr=False)

    @property
    def n_paths(self) -> int:
        return self.dB.shape[0]

    @property
    def dim(self) -> int:
        return self.dB.shape[2]

    @property
    def substreams(self) -> Array:
        """Per-path substream ids (the second Philox key word)."""
        return np.arange(self.n_paths, dtype=np.uint64)

    @property
    def brownian(self) -> Array:
        """Brownian paths ``B_{t_i}``, shape ``(M, N + 1, d)``."""
        B = np.zeros((self.n_paths, self.grid.N + 1, self.dim))
        np.cumsum(self.dB, axis=1, out=B[:, 1:, :])
        return B

    @property
    def running_sup(self) -> Array:
        if self.x is None:
            raise ValueError("bundle has no state paths; run simulate_sde first")
        if self._sup is None:
            self._sup = _running_sup(self.x)
        return self._sup

    def prefix(self, i: int) -> Prefix:
        if self.x is None:
            raise ValueError("bundle has no state paths; run simulate_sde first")
        return Prefix(i, self.grid.t(i), self.x[:, : i + 1, :], self.running_sup[:, i])

    def with_states(self, x: Array, controls: Optional[Array] = None) -> "PathBundle":
        return replace(self, x=x, controls=controls, _sup=None)


def _path_increments(seed: int, m: int, n: int, d: int, scale: float) -> Array:
    gen = np.random.Generator(np.random.Philox(key=[seed, m]))
    return scale * gen.standard_normal((n, d))


def simulate_brownian(grid: TimeGrid, M: int, d: int = 1, seed: int = 0,
                      threads: int = 1) -> PathBundle:
    """Draw ``M`` independent ``d``-dimensional Brownian increment paths."""
    if M < 1:
        raise ValueError("empty ensemble: need at least one path")
    if d < 1:
        raise ValueError(f"dimension must be >= 1, got {d}")
    seed = int(seed) % 2**64
    scale = np.sqrt(grid.dt)
    dB = np.empty((M, grid.N, d))

    def fill(lo: int, hi: int) -> None:
        for m in range(lo, hi):
            dB[m] = _path_increments(seed, m, grid.N, d, scale)

    threads = max(1, int(threads))
    if threads == 1:
        fill(0, M)
    else:
        bounds = np.linspace(0, M, threads + 1).astype(int)
        with ThreadPoolExecutor(threads) as pool:
            list(pool.map(fill, bounds[:-1], bounds[1:]))
    return PathBundle(grid, seed, dB)


@dataclass
class DiffusionSpec:
    """Path-dependent diffusion ``dx = f(t, x, a) dt + sigma(t, x) dB``.

    ``sigma(t, prefix)`` may return a scalar, an ``(M,)`` array (``d = 1``),
    a ``(d, d)`` matrix or an ``(M, d, d)`` stack. ``drift(t, prefix, a)``
    returns ``(M, d)`` or ``(M,)`` when ``d = 1``; it is only needed for
    controlled simulation. ``sigma_inv_bound`` is the constant bounding
    ``|sigma^{-1}|``; a diffusion without it is rejected.
    """

    x0: Array
    sigma: Callable[[float, Prefix], Array]
    sigma_inv_bound: Optional[float]
    drift: Optional[Callable[[float, Prefix, Array], Array]] = None

    def __post_init__(self):
        self.x0 = np.atleast_1d(np.asarray(self.x0, dtype=float))
        if self.sigma_inv_bound is None or not self.sigma_inv_bound > 0:
            raise ValueError("diffusion rejected: an inverse bound for sigma is required")

    @property
    def dim(self) -> int:
        return self.x0.shape[0]


def sigma_matrix(spec: DiffusionSpec, t: float, prefix: Prefix) -> Array:
    """Evaluate sigma as an ``(M, d, d)`` stack."""
    M, d = prefix.n_paths, prefix.dim
    s = np.asarray(spec.sigma(t, prefix), dtype=float)
    if s.ndim == 0:
        s = np.full((M, 1, 1), float(s)) if d == 1 else np.broadcast_to(s * np.eye(d), (M, d, d))
    elif s.ndim == 1:
        if d != 1:
            raise ValueError("a vector sigma is only meaningful for d = 1")
        s = s.reshape(M, 1, 1)
    elif s.ndim == 2:
        s = np.broadcast_to(s, (M, d, d))
    return s


def _as_vector(v, M: int, d: int) -> Array:
    v = np.asarray(v, dtype=float)
    if v.ndim == 0:
        return np.full((M, d), float(v))
    if v.ndim == 1:
        return v.reshape(M, 1) if d == 1 else np.broadcast_to(v, (M, d))
    return v


def _first_bad(mask: Array) -> int:
    return int(np.argmax(mask.reshape(mask.shape[0], -1).any(axis=1)))


def _run_euler(spec: DiffusionSpec, bundle: PathBundle, policy=None) -> PathBundle:
    grid = bundle.grid
    M, d = bundle.n_paths, bundle.dim
    if spec.dim != d:
        raise ValueError(f"diffusion dimension {spec.dim} does not match increments {d}")
    x = np.empty((M, grid.N + 1, d))
    x[:, 0, :] = spec.x0
    sup = np.empty((M, grid.N + 1))
    sup[:, 0] = np.linalg.norm(spec.x0)
    controls = None
    dt = grid.dt
    for i in range(grid.N):
        t = grid.t(i)
        pre = Prefix(i, t, x[:, : i + 1, :], sup[:, i])
        s = sigma_matrix(spec, t, pre)
        if not np.all(np.isfinite(s)):
            bad = ~np.isfinite(s)
            raise SimulationError(f"diffusion blow-up at ({_first_bad(bad)},{i}): step {i}")
        step = np.einsum("mjk,mk->mj", s, bundle.dB[:, i, :]) if d > 1 else s[:, 0, :] * bundle.dB[:, i, :]
        if policy is not None:
            a = np.asarray(policy(i, pre), dtype=float)
            if a.ndim == 0:
                a = np.full(M, float(a))
            if not np.all(np.isfinite(a)):
                raise SimulationError(f"non-finite control at ({_first_bad(~np.isfinite(a))},{i}): step {i}")
            if controls is None:
                controls = np.empty((M, grid.N) + a.shape[1:])
            controls[:, i] = a
            f = _as_vector(spec.drift(t, pre, a), M, d)
            if not np.all(np.isfinite(f)):
                raise SimulationError(f"drift blow-up at ({_first_bad(~np.isfinite(f))},{i}): step {i}")
            step = step + f * dt
        x[:, i + 1, :] = x[:, i, :] + step
        norm = np.abs(x[:, i + 1, 0]) if d == 1 else np.linalg.norm(x[:, i + 1, :], axis=1)
        sup[:, i + 1] = np.maximum(sup[:, i], norm)
    out = bundle.with_states(x, controls)
    out._sup = sup
    return out


def simulate_sde(spec: DiffusionSpec, bundle: PathBundle) -> PathBundle:
    """Euler-Maruyama for ``x_t = x_0 + int sigma(s, x) dB_s`` with left-point sigma."""
    return _run_euler(spec, bundle)


def simulate_controlled_sde(spec: DiffusionSpec, policy: Callable[[int, Prefix], Array],
                            bundle: PathBundle) -> PathBundle:
    """Simulate the controlled dynamics directly under the controlled measure.

    ``policy(i, prefix)`` returns the control values used on ``[t_i, t_{i+1})``.
    The increments of ``bundle`` play the role of the Brownian motion of the
    controlled measure, so plain ensemble averages over the result are
    controlled expectations.
    """
    if spec.drift is None:
        raise ValueError("controlled simulation needs a drift")
    return _run_euler(spec, bundle, policy)


def girsanov_weight(spec: DiffusionSpec, controls: Array, bundle: PathBundle) -> Array:
    """Density ``Lambda_T`` of the controlled measure, one value per path.

    Left-point discretisation of
    ``exp(int sigma^{-1} f dB - 1/2 int |sigma^{-1} f|^2 ds)`` along the
    uncontrolled state paths of ``bundle``.
    """
    if spec.drift is None:
        raise ValueError("Girsanov weights need a drift")
    grid = bundle.grid
    M, d = bundle.n_paths, bundle.dim
    controls = np.asarray(controls, dtype=float)
    log_w = np.zeros(M)
    for i in range(grid.N):
        t = grid.t(i)
        pre = bundle.prefix(i)
        s = sigma_matrix(spec, t, pre)
        f = _as_vector(spec.drift(t, pre, controls[:, i]), M, d)
        if d == 1:
            sv = s[:, 0, 0]
            if np.any(~np.isfinite(sv) | (sv == 0.0)):
                raise SimulationError(f"non-invertible diffusion at node {i}")
            theta = f / sv[:, None]
        else:
            det = np.linalg.det(s)
            if np.any(~np.isfinite(det) | (det == 0.0)):
                raise SimulationError(f"non-invertible diffusion at node {i}")
            theta = np.linalg.solve(s, f[..., None])[..., 0]
        log_w += np.sum(theta * bundle.dB[:, i, :], axis=1) - 0.5 * np.sum(theta**2, axis=1) * grid.dt
    return np.exp(log_w)


def mean_and_se(values: Array) -> tuple[float, float]:
    """Ensemble mean and its standard error (pairwise summation, order fixed)."""
    v = np.asarray(values, dtype=float)
    m = float(np.mean(v))
    se = float(np.std(v, ddof=1) / np.sqrt(v.size)) if v.size > 1 else 0.0
    return m, se
