"""Discrete reflected BSDE solver by least-squares Monte Carlo.

Backward scheme on a :class:`~rbsdelab.paths.PathBundle`::

    Y_N = xi
    C_i = E_i[Y_{i+1}]                        (regression on node features)
    Z_i = E_i[(Y_{i+1} - C_i) dB_i] / dt
    Ytilde_i = C_i + phi(t_i, x, C_i, clip(Z_i)) dt
    Y_i = max(Ytilde_i, L_i),  dK_i = Y_i - Ytilde_i

Reflection and flatness hold by construction: ``dK_i > 0`` only where
``Y_i == L_i`` exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from itertools import combinations_with_replacement
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .generators import GeneratorSpec, MollifierParams, mollify
from .paths import PathBundle, Prefix, TimeGrid

Array = np.ndarray

__all__ = [
    "SolverError",
    "RBSDEProblem",
    "RegressionBasis",
    "NodeFit",
    "DiscreteSolution",
    "CauchyEntry",
    "CauchyReport",
    "solve_backward",
    "solve_via_lipschitz_sequence",
    "evaluate_Y",
    "evaluate_Z",
    "evaluate_continuation",
    "compare_solutions",
]


class SolverError(RuntimeError):
    """Numerical failure inside the backward induction."""


@dataclass
class RBSDEProblem:
    """Data ``(xi, phi, L)`` of a reflected BSDE on a time grid.

    ``terminal(prefix)`` and ``obstacle(t, prefix)`` return one value per
    path. ``obstacle=None`` encodes the absent obstacle (``L = -inf``);
    an obstacle may also return ``-inf`` values explicitly.
    """

    terminal: Callable[[Prefix], Array]
    generator: GeneratorSpec
    obstacle: Optional[Callable[[float, Prefix], Array]]
    grid: TimeGrid
    name: str = "problem"

    def obstacle_values(self, i: int, prefix: Prefix) -> Optional[Array]:
        if self.obstacle is None:
            return None
        return _per_path(self.obstacle(self.grid.t(i), prefix), prefix.n_paths)


def _per_path(v, M: int) -> Array:
    v = np.asarray(v, dtype=float)
    return np.full(M, float(v)) if v.ndim == 0 else v


_FEATURES = {
    "state": lambda p: p.state,
    "running_max": lambda p: p.sup[:, None],
    "time_to_maturity": None,
}


@dataclass(frozen=True)
class RegressionBasis:
    """Regression basis for conditional expectations at a node.

    ``kind="polynomial"``: all monomials of total degree ``<= degree`` in the
    standardised features. ``kind="bins"``: continuous piecewise-linear hat
    functions on ``bins`` equal cells spanning the first feature.
    ``kind="local"``: a separate polynomial of degree ``degree`` in the first
    feature on each of ``bins`` equal-count cells.
    Features with (numerically) zero spread at a node are dropped, so nodes
    where every path shares the same prefix reduce to plain means.
    """

    kind: str = "polynomial"
    degree: int = 3
    bins: int = 20
    features: tuple = ("state", "running_max")
    ridge: float = 1e-8

    def __post_init__(self):
        if self.kind not in ("polynomial", "bins", "local"):
            raise ValueError(f"unknown basis kind {self.kind!r}")
        for f in self.features:
            if f not in _FEATURES:
                raise ValueError(f"unknown regression feature {f!r}")
        if self.degree < 0 or self.bins < 1:
            raise ValueError("basis degree must be >= 0 and bins >= 1")

    def raw_features(self, prefix: Prefix, T: float) -> Array:
        cols = []
        for f in self.features:
            if f == "time_to_maturity":
                cols.append(np.full((prefix.n_paths, 1), T - prefix.t))
            else:
                cols.append(_FEATURES[f](prefix))
        return np.concatenate(cols, axis=1)


@dataclass
class NodeFit:
    """Regression fitted at one node; replays the design on any prefix."""

    basis: RegressionBasis
    center: Array
    scale: Array
    active: Array
    exponents: list
    edges: Optional[Array]
    coef_y: Array
    coef_z: Array

    @property
    def n_terms(self) -> int:
        return self.coef_y.shape[0]

    def design(self, prefix: Prefix, T: float) -> Array:
        F = self.basis.raw_features(prefix, T)
        return _design(self.basis, F, self.center, self.scale, self.active, self.exponents,
                       self.edges)


def _design(basis, F, center, scale, active, exponents, edges) -> Array:
    M = F.shape[0]
    U = (F[:, active] - center[active]) / scale[active]
    if basis.kind != "polynomial":
        if edges is None:
            return np.ones((M, 1))
        if basis.kind == "local":
            return _local_design(U[:, 0], edges, basis.degree)
        return _hat_design(U[:, 0], edges)
    cols = [np.ones(M)]
    for exps in exponents:
        col = np.ones(M)
        for j in exps:
            col = col * U[:, j]
        cols.append(col)
    return np.stack(cols, axis=1)


def _hat_design(u: Array, edges: Array) -> Array:
    n = edges.size
    X = np.zeros((u.size, n))
    uc = np.clip(u, edges[0], edges[-1])
    k = np.clip(np.searchsorted(edges, uc, side="right") - 1, 0, n - 2)
    w = (uc - edges[k]) / (edges[k + 1] - edges[k])
    rows = np.arange(u.size)
    X[rows, k] = 1.0 - w
    X[rows, k + 1] = w
    return X


def _local_design(u: Array, edges: Array, degree: int) -> Array:
    cells = edges.size + 1
    k = np.searchsorted(edges, u, side="right")
    X = np.zeros((u.size, cells * (degree + 1)))
    rows = np.arange(u.size)
    power = np.ones_like(u)
    for j in range(degree + 1):
        X[rows, k * (degree + 1) + j] = power
        power = power * u
    return X


def _fit_layout(basis: RegressionBasis, F: Array):
    center = F.mean(axis=0)
    spread = F.std(axis=0)
    active = spread > 1e-12 * (1.0 + np.abs(center))
    scale = np.where(active, spread, 1.0)
    n_active = int(active.sum())
    edges = None
    exponents: list = []
    if basis.kind != "polynomial":
        # edges=None means a constant design: no feature varies at this node
        if n_active:
            u = (F[:, active][:, 0] - center[active][0]) / scale[active][0]
            if basis.kind == "bins":
                edges = np.linspace(u.min(), u.max(), basis.bins + 1)
            else:
                edges = np.unique(np.quantile(u, np.linspace(0, 1, basis.bins + 1)[1:-1]))
    else:
        for deg in range(1, basis.degree + 1):
            exponents.extend(combinations_with_replacement(range(n_active), deg))
    return center, scale, active, exponents, edges


@dataclass
class DiscreteSolution:
    """Discrete triple ``(Y, Z, dK)`` on every path and node.

    Attributes
    ----------
    Y : (M, N + 1)
    Z : (M, N, d)
    dK : (M, N + 1)
        Push at node ``i``; ``K_{t_i} = sum_{j < i} dK_j`` and ``dK_N = 0``.
    L : (M, N + 1)
        Obstacle values, ``-inf`` where there is none.
    driver : (M, N)
        Generator values used in the step ``i -> i`` (for estimates).
    fits : list of NodeFit, one per node ``0..N-1``
    y0_se : float
        Standard error of the node-0 sample mean. It ignores regression noise
        that feeds back through a Z-dependent generator; use batch means over
        seeds for an honest error bar in that case.
    """

    problem: RBSDEProblem
    basis: RegressionBasis
    bundle: PathBundle
    Y: Array
    Z: Array
    dK: Array
    L: Array
    driver: Array
    fits: list
    z_max: float
    clip_count: int
    y0_se: float

    @property
    def grid(self) -> TimeGrid:
        return self.problem.grid

    @property
    def n_paths(self) -> int:
        return self.Y.shape[0]

    @property
    def K(self) -> Array:
        """``K_{t_i}``, shape ``(M, N + 1)``, with ``K_0 = 0``."""
        K = np.zeros_like(self.dK)
        np.cumsum(self.dK[:, :-1], axis=1, out=K[:, 1:])
        return K

    @property
    def K_T(self) -> Array:
        return self.dK[:, :-1].sum(axis=1)

    @property
    def Y0(self) -> float:
        return float(self.Y[0, 0])


def _ridge_factor(X: Array, ridge: float):
    G = X.T @ X
    p = G.shape[0]
    if p > 1:
        G[np.arange(1, p), np.arange(1, p)] += ridge * X.shape[0]
    return cho_factor(G)


def _clip_norm(Z: Array, z_max: float):
    norm = np.linalg.norm(Z, axis=1)
    over = norm > z_max
    if np.any(over):
        Z = Z.copy()
        Z[over] *= (z_max / norm[over])[:, None]
    return Z, int(over.sum())


def solve_backward(problem: RBSDEProblem, bundle: PathBundle, basis: RegressionBasis = RegressionBasis(),
                   z_max: float = 1e4) -> DiscreteSolution:
    """Backward induction with regression conditional expectations and exact reflection."""
    grid = problem.grid
    if bundle.grid != grid:
        raise ValueError("bundle grid differs from problem grid")
    if bundle.x is None:
        raise ValueError("bundle has no state paths; run simulate_sde first")
    M, N, d, dt = bundle.n_paths, grid.N, bundle.dim, grid.dt
    Y = np.empty((M, N + 1))
    Z = np.zeros((M, N, d))
    dK = np.zeros((M, N + 1))
    L = np.full((M, N + 1), -np.inf)
    driver = np.zeros((M, N))
    fits: list = [None] * N
    clips = 0

    last = bundle.prefix(N)
    xi = _per_path(problem.terminal(last), M)
    if not np.all(np.isfinite(xi)):
        raise SolverError("terminal value is not finite on every path")
    LN = problem.obstacle_values(N, last)
    if LN is not None:
        if np.any(np.isnan(LN)):
            raise SolverError(f"obstacle is NaN at node {N}")
        if np.any(xi < LN):
            m = int(np.argmax(xi < LN))
            raise ValueError(f"terminal value below obstacle at maturity on path {m}")
        L[:, N] = LN
    Y[:, N] = xi

    y0_se = 0.0
    for i in range(N - 1, -1, -1):
        t = grid.t(i)
        pre = bundle.prefix(i)
        F = basis.raw_features(pre, grid.T)
        center, scale, active, exponents, edges = _fit_layout(basis, F)
        X = _design(basis, F, center, scale, active, exponents, edges)
        if not np.all(np.isfinite(X)):
            raise SolverError(f"regression design has non-finite entries at node {i}")
        fac = _ridge_factor(X, basis.ridge)
        target = Y[:, i + 1]
        with np.errstate(over="ignore", invalid="ignore"):
            rhs_y = X.T @ target
            if not np.all(np.isfinite(rhs_y)):
                raise SolverError(f"regression failure at node {i}")
            coef_y = cho_solve(fac, rhs_y)
            cont = X @ coef_y
            resid = target - cont
            rhs_z = X.T @ (resid[:, None] * bundle.dB[:, i, :])
            if not np.all(np.isfinite(rhs_z)):
                raise SolverError(f"regression failure at node {i}")
            coef_z = cho_solve(fac, rhs_z) / dt
            Zi = X @ coef_z
        if not (np.all(np.isfinite(cont)) and np.all(np.isfinite(Zi))):
            raise SolverError(f"regression failure at node {i}")
        Zc, n_clip = _clip_norm(Zi, z_max)
        clips += n_clip
        f = problem.generator(t, pre, cont, Zc)
        if not np.all(np.isfinite(f)):
            raise SolverError(f"generator blow-up at node {i}")
        tilde = cont + f * dt
        Li = problem.obstacle_values(i, pre)
        if Li is None:
            Y[:, i] = tilde
        else:
            if np.any(np.isnan(Li)):
                raise SolverError(f"obstacle is NaN at node {i}")
            Yi = np.maximum(tilde, Li)
            Y[:, i] = Yi
            dK[:, i] = Yi - tilde
            L[:, i] = Li
        Z[:, i, :] = Zi
        driver[:, i] = f
        fits[i] = NodeFit(basis, center, scale, active, exponents, edges, coef_y, coef_z)
        if i == 0 and M > 1:
            y0_se = float(np.std(target, ddof=1) / math.sqrt(M))
    return DiscreteSolution(problem, basis, bundle, Y, Z, dK, L, driver, fits, z_max, clips, y0_se)


def _fit_at(solution: DiscreteSolution, i: int) -> NodeFit:
    if not 0 <= i < len(solution.fits) or solution.fits[i] is None:
        raise ValueError(f"no regression coefficients stored at node {i}")
    return solution.fits[i]


def evaluate_continuation(solution: DiscreteSolution, i: int, prefix: Prefix) -> Array:
    """Pre-reflection value ``Ytilde_i`` at fresh prefixes, from stored coefficients."""
    fit = _fit_at(solution, i)
    grid = solution.grid
    X = fit.design(prefix, grid.T)
    cont = X @ fit.coef_y
    Zc, _ = _clip_norm(X @ fit.coef_z, solution.z_max)
    return cont + solution.problem.generator(grid.t(i), prefix, cont, Zc) * grid.dt


def evaluate_Z(solution: DiscreteSolution, i: int, prefix: Prefix) -> Array:
    """Regressed ``Z_i`` at fresh prefixes, shape ``(M, d)`` (unclipped)."""
    fit = _fit_at(solution, i)
    return fit.design(prefix, solution.grid.T) @ fit.coef_z


def evaluate_Y(solution: DiscreteSolution, i: int, prefix: Prefix) -> Array:
    """Out-of-sample ``Y_i``: same functional form as the in-sample step."""
    problem = solution.problem
    if i == problem.grid.N:
        return _per_path(problem.terminal(prefix), prefix.n_paths)
    tilde = evaluate_continuation(solution, i, prefix)
    Li = problem.obstacle_values(i, prefix)
    return tilde if Li is None else np.maximum(tilde, Li)


# --------------------------------------------------------------------------
# Lipschitz approximation sequence


@dataclass
class CauchyEntry:
    n: int
    n2: int
    y_distance: float
    z_distance: float


@dataclass
class CauchyReport:
    """Distances between consecutive solutions of the approximation sequence.

    ``uniform_bounds`` holds, per index ``n``, the moments whose uniform
    boundedness in ``n`` the construction relies on.
    """

    beta: float
    nu: float
    entries: list = field(default_factory=list)
    uniform_bounds: dict = field(default_factory=dict)


def _check_same_layout(a: DiscreteSolution, b: DiscreteSolution) -> None:
    if a.grid != b.grid:
        raise ValueError("grid mismatch between solutions")
    if a.Y.shape != b.Y.shape or a.Z.shape != b.Z.shape:
        raise ValueError("solutions have different path counts or dimensions")


def compare_solutions(a: DiscreteSolution, b: DiscreteSolution, beta: float = 1.5,
                      nu: float = 1e-3) -> tuple[float, float]:
    """``(E sup_i |dY_i|^beta, E sum_i |dZ_i|^2 / (|dY_i|^2 + nu)^{(2-beta)/2} dt)``."""
    _check_same_layout(a, b)
    dY = np.abs(a.Y - b.Y)
    y_dist = float(np.mean(np.max(dY, axis=1) ** beta))
    dZ2 = np.sum((a.Z - b.Z) ** 2, axis=2)
    weight = (dY[:, :-1] ** 2 + nu) ** ((2.0 - beta) / 2.0)
    z_dist = float(np.mean(np.sum(dZ2 / weight, axis=1) * a.grid.dt))
    return y_dist, z_dist


def _uniform_moments(sol: DiscreteSolution, alpha_bar: float, p: float = 1.5) -> dict:
    dt = sol.grid.dt
    return {
        "E_int_Z2": float(np.mean(np.sum(np.sum(sol.Z**2, axis=2), axis=1) * dt)),
        "E_sup_Y2": float(np.mean(np.max(sol.Y**2, axis=1))),
        "E_int_gen_abar": float(np.mean(np.sum(np.abs(sol.driver) ** alpha_bar, axis=1) * dt)),
        "E_KT_p": float(np.mean(sol.K_T**p)),
    }


def solve_via_lipschitz_sequence(problem: RBSDEProblem, bundle: PathBundle, basis: RegressionBasis,
                                 indices: Sequence[int], beta: float = 1.5, nu: float = 1e-3,
                                 nodes: int = 33, z_max: float = 1e4):
    """Solve with the mollified generators ``phi_n`` for each index and track Cauchy distances.

    All solves share ``bundle`` (common random numbers). Returns the solution
    at the last index and a :class:`CauchyReport` of ``D_{n_j, n_{j+1}}``.
    """
    indices = list(indices)
    if not indices or any(b <= a for a, b in zip(indices, indices[1:])):
        raise ValueError("indices must be a nonempty increasing sequence")
    gen = problem.generator
    alpha = gen.envelope.alpha
    alpha_bar = gen.envelope.alpha_bar
    upper = min(3.0 - 2.0 / alpha_bar, 2.0)
    if not 1.0 < beta < upper:
        raise ValueError(f"beta must lie in (1, {upper})")
    report = CauchyReport(beta, nu)
    previous = None
    solution = None
    for n in indices:
        phi_n = mollify(gen, MollifierParams(n, nodes=nodes, alpha=alpha))
        sub = RBSDEProblem(problem.terminal, phi_n, problem.obstacle, problem.grid,
                           f"{problem.name}_n{n}")
        solution = solve_backward(sub, bundle, basis, z_max=z_max)
        report.uniform_bounds[n] = _uniform_moments(solution, alpha_bar)
        if previous is not None:
            yd, zd = compare_solutions(previous[1], solution, beta, nu)
            report.entries.append(CauchyEntry(previous[0], n, yd, zd))
        previous = (n, solution)
    return solution, report
