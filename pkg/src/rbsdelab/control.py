"""Mixed stochastic control and stopping through a reflected BSDE.

The value process solves the reflected BSDE with generator
``H*(t, x, z) = max_a [z . sigma^{-1} f(t, x, a) + h(t, x, a)]``, obstacle
the early reward ``g`` and terminal value ``g1``, all along the
uncontrolled state paths. Policies are read off stored regression
coefficients so that they can be replayed on fresh paths.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

from .generators import GeneratorSpec, GrowthEnvelope, TruncationSchedule
from .paths import (
    DiffusionSpec,
    PathBundle,
    Prefix,
    TimeGrid,
    mean_and_se,
    sigma_matrix,
    simulate_brownian,
    simulate_controlled_sde,
)
from .rbsde import (
    DiscreteSolution,
    RBSDEProblem,
    RegressionBasis,
    _clip_norm,
    evaluate_Y,
    evaluate_Z,
    solve_backward,
)

Array = np.ndarray

__all__ = [
    "ControlProblem",
    "Strategy",
    "StrategyResult",
    "HarnessRow",
    "HarnessReport",
    "hamiltonian",
    "maximize_hamiltonian",
    "hamiltonian_generator",
    "solve_value",
    "optimal_policy",
    "optimal_stopping_time",
    "optimal_strategy",
    "evaluate_payoff",
    "optimality_harness",
    "stopping_sensitivity",
    "threshold_strategy",
    "constant_strategy",
]

DEFAULT_TOL_STOP = 1e-6


@dataclass
class ControlProblem:
    """Controlled diffusion with running reward, early and terminal rewards.

    ``diffusion.drift(t, prefix, a)`` is the controlled drift ``f``;
    ``reward(t, prefix, a)`` the running reward ``h``; ``early(t, prefix)``
    the stopping reward ``g`` (``None`` for no early stopping) and
    ``terminal(prefix)`` the reward ``g1`` at maturity. ``controls`` is the
    ordered finite control set.
    """

    diffusion: DiffusionSpec
    reward: Callable[[float, Prefix, Array], Array]
    terminal: Callable[[Prefix], Array]
    controls: Sequence
    early: Optional[Callable[[float, Prefix], Array]] = None
    K_tilde: float = 1.0
    C: float = 1.0
    name: str = "control"

    def __post_init__(self):
        self.controls = np.asarray(self.controls, dtype=float)
        if self.controls.shape[0] == 0:
            raise ValueError("control set is empty")
        if self.diffusion.drift is None:
            raise ValueError("control problem needs a controlled drift")

    @property
    def n_controls(self) -> int:
        return self.controls.shape[0]

    def control_values(self, idx: Array) -> Array:
        return self.controls[np.asarray(idx)]

    def check_compatibility(self, bundle: PathBundle) -> None:
        """Require ``g(T, x) <= g1(x)`` on every simulated path."""
        if self.early is None:
            return
        last = bundle.prefix(bundle.grid.N)
        gT = np.broadcast_to(np.asarray(self.early(bundle.grid.T, last), dtype=float), (last.n_paths,))
        g1 = np.broadcast_to(np.asarray(self.terminal(last), dtype=float), (last.n_paths,))
        bad = gT > g1
        if np.any(bad):
            raise ValueError(f"early reward exceeds terminal reward at maturity on path {int(np.argmax(bad))}")


def _full(v, M: int) -> Array:
    return np.broadcast_to(np.asarray(v, dtype=float), (M,))


def _theta(problem: ControlProblem, t: float, prefix: Prefix, a) -> Array:
    """``sigma^{-1} f`` as an ``(M, d)`` array."""
    M, d = prefix.n_paths, prefix.dim
    s = sigma_matrix(problem.diffusion, t, prefix)
    f = np.asarray(problem.diffusion.drift(t, prefix, a), dtype=float)
    f = np.broadcast_to(f.reshape(M, d) if f.ndim >= 1 and f.size == M * d else f, (M, d))
    if d == 1:
        sv = s[:, 0, 0]
        if np.any(~np.isfinite(sv) | (sv == 0.0)):
            raise ValueError(f"singular diffusion at t={t}")
        return f / sv[:, None]
    det = np.linalg.det(s)
    if np.any(~np.isfinite(det) | (det == 0.0)):
        raise ValueError(f"singular diffusion at t={t}")
    return np.linalg.solve(s, f[..., None])[..., 0]


def _per_path_control(a, M: int) -> Array:
    a = np.asarray(a, dtype=float)
    return np.broadcast_to(a, (M,) + a.shape)


def hamiltonian(problem: ControlProblem, t: float, prefix: Prefix, z, a) -> Array:
    """``H = z . sigma^{-1} f(t, x, a) + h(t, x, a)`` per path."""
    M, d = prefix.n_paths, prefix.dim
    z = np.asarray(z, dtype=float)
    z = np.broadcast_to(z.reshape(-1, d) if z.ndim else z, (M, d))
    single = np.ndim(a) == np.ndim(problem.controls[0])
    ap = _per_path_control(a, M) if single else np.asarray(a, dtype=float)
    th = _theta(problem, t, prefix, ap)
    return np.sum(z * th, axis=1) + _full(problem.reward(t, prefix, ap), M)


def maximize_hamiltonian(problem: ControlProblem, t: float, prefix: Prefix, z) -> tuple[Array, Array]:
    """``(H*, index of a*)`` per path; ties go to the lowest control index."""
    vals = np.stack([hamiltonian(problem, t, prefix, z, a) for a in problem.controls])
    idx = np.argmax(vals, axis=0)
    return vals[idx, np.arange(vals.shape[1])], idx


def _reward_drift_bounds(problem: ControlProblem, t: float, prefix: Prefix) -> tuple[Array, Array]:
    """Per-path ``max_a |h|`` and ``b = max_a |sigma^{-1} f|`` over the control set."""
    M = prefix.n_paths
    hmax = np.zeros(M)
    bmax = np.zeros(M)
    for a in problem.controls:
        ap = _per_path_control(a, M)
        hmax = np.maximum(hmax, np.abs(_full(problem.reward(t, prefix, ap), M)))
        bmax = np.maximum(bmax, np.linalg.norm(_theta(problem, t, prefix, ap), axis=1))
    return hmax, bmax


def _hstar_eta(problem: ControlProblem):
    def eta(t, prefix):
        if prefix is None:
            return 0.0
        hmax, bmax = _reward_drift_bounds(problem, t, prefix)
        with np.errstate(over="ignore"):
            return hmax + bmax * np.exp(bmax**2)
    return eta


def _hstar_v(problem: ControlProblem):
    # e^{|sigma^{-1} f(u*)|^2} is dominated by its maximum over the control set
    def v(t, prefix):
        _, bmax = _reward_drift_bounds(problem, t, prefix)
        with np.errstate(over="ignore"):
            return np.exp(bmax**2)
    return v


def hamiltonian_generator(problem: ControlProblem) -> GeneratorSpec:
    """``H*`` as a generator; ``|H*| <= max|h| + b e^{b^2} + |z| sqrt(ln|z|)`` with ``b = max|sigma^{-1} f|``.

    The monotonicity process is ``v = e^{b^2}`` with ``A_N = N``.
    """
    def func(t, prefix, y, z):
        return maximize_hamiltonian(problem, t, prefix, z)[0]
    schedule = TruncationSchedule(lambda N: float(N), r=1.0, v=_hstar_v(problem))
    return GeneratorSpec(func, GrowthEnvelope(_hstar_eta(problem), 1.0), schedule, False, None,
                         f"H*({problem.name})", y_dependent=False, path_dependent=True)


def value_problem(problem: ControlProblem, grid: TimeGrid) -> RBSDEProblem:
    return RBSDEProblem(problem.terminal, hamiltonian_generator(problem), problem.early, grid,
                        f"value({problem.name})")


def solve_value(problem: ControlProblem, grid: TimeGrid, bundle: PathBundle,
                basis: RegressionBasis = RegressionBasis(), z_max: float = 1e4) -> tuple[DiscreteSolution, Array]:
    """Value solution on uncontrolled paths and in-sample maximizer indices ``(M, N)``."""
    problem.check_compatibility(bundle)
    sol = solve_backward(value_problem(problem, grid), bundle, basis, z_max)
    M, N = sol.n_paths, grid.N
    u_star = np.empty((M, N), dtype=int)
    for i in range(N):
        Zc, _ = _clip_norm(sol.Z[:, i, :], z_max)
        u_star[:, i] = maximize_hamiltonian(problem, grid.t(i), bundle.prefix(i), Zc)[1]
    return sol, u_star


def hamiltonian_growth_excess(problem: ControlProblem, solution: DiscreteSolution) -> float:
    """Largest sampled ``|H*| - envelope`` along the solution (``<= 0`` when the envelope holds)."""
    gen = hamiltonian_generator(problem)
    worst = -np.inf
    for i in range(solution.grid.N):
        pre = solution.bundle.prefix(i)
        bound = gen.envelope.bound(solution.grid.t(i), pre, solution.Z[:, i, :])
        worst = max(worst, float(np.max(np.abs(solution.driver[:, i]) - bound)))
    return worst


def optimal_policy(value: DiscreteSolution, problem: ControlProblem) -> Callable[[int, Prefix], Array]:
    """Feedback control ``u*(i, prefix)`` from stored ``Z`` coefficients."""
    def policy(i, prefix):
        Zc, _ = _clip_norm(evaluate_Z(value, i, prefix), value.z_max)
        return problem.control_values(maximize_hamiltonian(problem, value.grid.t(i), prefix, Zc)[1])
    return policy


def _stop_tolerance(g: Array, tol: float) -> Array:
    return tol * (1.0 + np.abs(g))


def contact_rule(value: DiscreteSolution, problem: ControlProblem,
                 tol: float = DEFAULT_TOL_STOP) -> Callable[[int, Prefix], Array]:
    """Predicate ``Y_i <= g_i + tol (1 + |g_i|)`` evaluated from stored coefficients."""
    def stop(i, prefix):
        if problem.early is None:
            return np.zeros(prefix.n_paths, dtype=bool)
        g = _full(problem.early(value.grid.t(i), prefix), prefix.n_paths)
        return evaluate_Y(value, i, prefix) <= g + _stop_tolerance(g, tol)
    return stop


def _first_hit(stop: Optional[Callable], bundle: PathBundle) -> Array:
    N, M = bundle.grid.N, bundle.n_paths
    tau = np.full(M, N, dtype=int)
    if stop is None:
        return tau
    alive = np.ones(M, dtype=bool)
    for i in range(N):
        hit = np.asarray(stop(i, bundle.prefix(i)), dtype=bool) & alive
        tau[hit] = i
        alive &= ~hit
        if not alive.any():
            break
    return tau


def optimal_stopping_time(value: DiscreteSolution, problem: ControlProblem, bundle: PathBundle,
                          tol: float = DEFAULT_TOL_STOP) -> Array:
    """First contact node per path (``N`` when the value never touches ``g``)."""
    return _first_hit(contact_rule(value, problem, tol), bundle)


@dataclass
class Strategy:
    """Control rule plus an optional stopping predicate, both functions of ``(i, prefix)``."""

    name: str
    control: Callable[[int, Prefix], Array]
    stop: Optional[Callable[[int, Prefix], Array]] = None


@dataclass
class StrategyResult:
    name: str
    J: float
    se: float
    tau_hist: Array
    values: Array = field(repr=False)


def optimal_strategy(value: DiscreteSolution, problem: ControlProblem, tol: float = DEFAULT_TOL_STOP) -> Strategy:
    return Strategy("optimal", optimal_policy(value, problem), contact_rule(value, problem, tol))


def constant_strategy(problem: ControlProblem, a, name: Optional[str] = None) -> Strategy:
    return Strategy(name or f"u={a:g}", lambda i, prefix: _per_path_control(a, prefix.n_paths))


def threshold_strategy(problem: ControlProblem, barrier: float, name: Optional[str] = None) -> Strategy:
    """Default control with stopping at the first node where ``x_t <= barrier``."""
    a0 = problem.controls[0]
    return Strategy(name or f"x<={barrier:g}",
                    lambda i, prefix: _per_path_control(a0, prefix.n_paths),
                    lambda i, prefix: prefix.scalar <= barrier)


def _payoff_on(problem: ControlProblem, strategy: Strategy, brownian: PathBundle) -> StrategyResult:
    paths = simulate_controlled_sde(problem.diffusion, strategy.control, brownian)
    grid = paths.grid
    N, M, dt = grid.N, paths.n_paths, grid.dt
    tau = _first_hit(strategy.stop, paths)
    total = np.zeros(M)
    for i in range(N):
        running = tau > i
        if not running.any():
            break
        h = _full(problem.reward(grid.t(i), paths.prefix(i), paths.controls[:, i]), M)
        total += np.where(running, h * dt, 0.0)
        stopped = tau == i
        if problem.early is not None and stopped.any():
            g = _full(problem.early(grid.t(i), paths.prefix(i)), M)
            total += np.where(stopped, g, 0.0)
    at_T = tau == N
    g1 = _full(problem.terminal(paths.prefix(N)), M)
    total += np.where(at_T, g1, 0.0)
    J, se = mean_and_se(total)
    return StrategyResult(strategy.name, J, se, np.bincount(tau, minlength=N + 1), total)


def evaluate_payoff(problem: ControlProblem, strategy: Strategy, grid: TimeGrid, M: int, seed: int,
                    threads: int = 1) -> StrategyResult:
    """Monte Carlo ``J(u, tau)`` by direct simulation of the controlled state.

    Strategies evaluated with the same ``seed`` share their Brownian
    increments (common random numbers).
    """
    brownian = simulate_brownian(grid, M, problem.diffusion.dim, seed, threads)
    return _payoff_on(problem, strategy, brownian)


@dataclass
class HarnessRow:
    strategy: str
    J: float
    se: float
    gap: float
    combined_se: float
    passed: bool


@dataclass
class HarnessReport:
    Y0: float
    Y0_se: float
    rows: list
    optimal: HarnessRow
    bias_budget: float
    K_before_tau: float
    u_star: Array = field(repr=False)

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.rows) and self.optimal.passed and self.K_before_tau == 0.0


def optimality_harness(problem: ControlProblem, grid: TimeGrid, bundle: PathBundle, basis: RegressionBasis,
                       strategies: Sequence[Strategy], eval_M: int = 10**5, eval_seed: int = 1,
                       tol: float = DEFAULT_TOL_STOP, bias_budget: float = 0.01, threads: int = 1,
                       value: Optional[tuple] = None) -> HarnessReport:
    """Compare ``Y*_0`` with ``J`` for the extracted optimum and each heuristic.

    Heuristic rows pass when ``Y*_0 - J >= -3 se``; the optimal row passes
    when ``|Y*_0 - J| <= 3 se + bias_budget |Y*_0|``. ``se`` combines the
    value and payoff standard errors of independent ensembles.
    """
    if not strategies:
        raise ValueError("strategy list is empty")
    sol, u_star = value if value is not None else solve_value(problem, grid, bundle, basis)
    Y0, se0 = sol.Y0, sol.y0_se
    brownian = simulate_brownian(grid, eval_M, problem.diffusion.dim, eval_seed, threads)

    def row(res: StrategyResult, optimal: bool) -> HarnessRow:
        cse = math.sqrt(se0**2 + res.se**2)
        gap = Y0 - res.J
        ok = abs(gap) <= 3 * cse + bias_budget * abs(Y0) if optimal else gap >= -3 * cse
        return HarnessRow(res.name, res.J, res.se, gap, cse, bool(ok))

    best = row(_payoff_on(problem, optimal_strategy(sol, problem, tol), brownian), True)
    rows = [row(_payoff_on(problem, s, brownian), False) for s in strategies]
    tau_in = optimal_stopping_time(sol, problem, bundle, tol)
    mask = np.arange(grid.N + 1)[None, :] < tau_in[:, None]
    k_before = float(np.max(np.sum(np.where(mask, sol.dK, 0.0), axis=1)))
    return HarnessReport(Y0, se0, rows, best, bias_budget, k_before, u_star)


def stopping_sensitivity(problem: ControlProblem, value: DiscreteSolution, grid: TimeGrid, M: int, seed: int,
                         tols: Sequence[float] = (1e-8, 1e-6, 1e-4)) -> list[tuple[float, float, float, float]]:
    """``(tol, J, se, fraction stopped before T)`` for the optimal strategy at several contact tolerances."""
    brownian = simulate_brownian(grid, M, problem.diffusion.dim, seed)
    out = []
    for tol in tols:
        res = _payoff_on(problem, optimal_strategy(value, problem, tol), brownian)
        early = 1.0 - res.tau_hist[-1] / M
        out.append((float(tol), res.J, res.se, float(early)))
    return out
