"""Independent reference values: binomial trees, an exact tree RBSDE,
closed-form linear solutions and a state-grid dynamic program.

None of these touch the regression solver, so they can be used to check it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.stats import norm

from .generators import GeneratorSpec
from .paths import Prefix

Array = np.ndarray

__all__ = [
    "BinomialTree",
    "binomial_american",
    "binomial_european",
    "TreeRBSDE",
    "TreeSolution",
    "tree_rbsde",
    "closed_form_linear",
    "bs_put_r0",
    "control_dp_1d",
]


# --------------------------------------------------------------------------
# Cox-Ross-Rubinstein tree


@dataclass(frozen=True)
class BinomialTree:
    """Recombining CRR tree for ``S`` with volatility ``sigma`` and rate ``r``."""

    S0: float
    sigma: float
    T: float
    steps: int
    payoff: Callable[[Array], Array]
    r: float = 0.0
    american: bool = True

    def __post_init__(self):
        if self.steps < 1:
            raise ValueError("tree needs at least one step")
        if not 0 < self.prob < 1:
            raise ValueError("risk-neutral probability outside (0, 1)")

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def up(self) -> float:
        return math.exp(self.sigma * math.sqrt(self.dt))

    @property
    def down(self) -> float:
        return 1.0 / self.up

    @property
    def prob(self) -> float:
        return (math.exp(self.r * self.dt) - self.down) / (self.up - self.down)

    def spots(self, i: int) -> Array:
        j = np.arange(i + 1)
        return self.S0 * self.up**j * self.down ** (i - j)


def _backward_tree(tree: BinomialTree, american: bool) -> float:
    p, disc = tree.prob, math.exp(-tree.r * tree.dt)
    V = np.asarray(tree.payoff(tree.spots(tree.steps)), dtype=float)
    for i in range(tree.steps - 1, -1, -1):
        V = disc * (p * V[1:] + (1 - p) * V[:-1])
        if american:
            V = np.maximum(V, tree.payoff(tree.spots(i)))
    return float(V[0])


def binomial_american(tree: BinomialTree) -> float:
    """Root value with early exercise when ``tree.american`` is set."""
    return _backward_tree(tree, tree.american)


def binomial_european(tree: BinomialTree) -> float:
    return _backward_tree(tree, False)


# --------------------------------------------------------------------------
# exact discrete reflected BSDE on a symmetric random walk


@dataclass
class TreeRBSDE:
    """Reflected BSDE driven by the walk ``b_{i+1} = b_i +- sqrt(dt)``.

    ``state(t, b)`` maps walk levels to the state seen by ``terminal``,
    ``obstacle`` and ``generator`` (default: the walk itself). Only
    Markov data can be represented on a recombining tree.
    """

    steps: int
    T: float
    terminal: Callable[[Array], Array]
    generator: Optional[GeneratorSpec] = None
    obstacle: Optional[Callable[[float, Array], Array]] = None
    state: Optional[Callable[[float, Array], Array]] = None
    b0: float = 0.0

    @property
    def dt(self) -> float:
        return self.T / self.steps

    @property
    def node_count(self) -> int:
        return (self.steps + 1) * (self.steps + 2) // 2

    def levels(self, i: int) -> Array:
        return self.b0 + (2 * np.arange(i + 1) - i) * math.sqrt(self.dt)

    def states(self, i: int) -> Array:
        b = self.levels(i)
        return b if self.state is None else np.asarray(self.state(i * self.dt, b), dtype=float)


@dataclass
class TreeSolution:
    """Per-level arrays; ``Y[i]`` has ``i + 1`` entries, ``Z[i]`` and ``dK[i]`` likewise."""

    Y: list
    Z: list
    dK: list
    L: list
    tree: TreeRBSDE

    @property
    def Y0(self) -> float:
        return float(self.Y[0][0])

    @property
    def expected_K_T(self) -> float:
        """``E[K_T] = sum_i E[dK_i]`` under binomial(i, 1/2) node weights."""
        total = 0.0
        for i, dk in enumerate(self.dK):
            w = np.array([math.comb(i, j) for j in range(i + 1)], dtype=float) / 2.0**i
            total += float(w @ dk)
        return total


def _node_prefix(i: int, t: float, x: Array) -> Prefix:
    return Prefix(i, t, x[:, None, None], np.abs(x))


def tree_rbsde(spec: TreeRBSDE) -> TreeSolution:
    """Exact backward recursion: two-point expectations, no regression."""
    n, dt = spec.steps, spec.dt
    h = math.sqrt(dt)
    xN = spec.states(n)
    Yn = np.asarray(spec.terminal(xN), dtype=float) * np.ones(n + 1)
    LN = None if spec.obstacle is None else np.asarray(spec.obstacle(spec.T, xN), dtype=float) * np.ones(n + 1)
    if LN is not None and np.any(Yn < LN):
        raise ValueError("terminal value below obstacle at maturity")
    Ys, Zs, dKs, Ls = [None] * (n + 1), [None] * (n + 1), [None] * (n + 1), [None] * (n + 1)
    Ys[n], Zs[n], dKs[n] = Yn, np.zeros(n + 1), np.zeros(n + 1)
    Ls[n] = LN if LN is not None else np.full(n + 1, -np.inf)
    nxt = Yn
    for i in range(n - 1, -1, -1):
        t = i * dt
        x = spec.states(i)
        up, down = nxt[1:], nxt[:-1]
        cont = 0.5 * (up + down)
        z = (up - down) / (2 * h)
        tilde = cont
        if spec.generator is not None:
            f = spec.generator(t, _node_prefix(i, t, x), cont, z[:, None])
            tilde = cont + np.asarray(f, dtype=float) * dt
        if spec.obstacle is None:
            Y, dK, L = tilde, np.zeros(i + 1), np.full(i + 1, -np.inf)
        else:
            L = np.asarray(spec.obstacle(t, x), dtype=float) * np.ones(i + 1)
            Y = np.maximum(tilde, L)
            dK = Y - tilde
        Ys[i], Zs[i], dKs[i], Ls[i] = Y, z, dK, L
        nxt = Y
    return TreeSolution(Ys, Zs, dKs, Ls, spec)


# --------------------------------------------------------------------------
# closed forms


def bs_put_r0(S, K: float, sigma: float, tau) -> Array:
    """Black-Scholes put with zero rate; ``tau = 0`` gives the payoff."""
    S = np.asarray(S, dtype=float)
    tau = np.asarray(tau, dtype=float)
    payoff = np.maximum(K - S, 0.0)
    with np.errstate(divide="ignore", invalid="ignore"):
        vol = sigma * np.sqrt(tau)
        d1 = (np.log(S / K) + 0.5 * vol**2) / vol
        d2 = d1 - vol
        val = K * norm.cdf(-d2) - S * norm.cdf(-d1)
    return np.where(tau > 0, val, payoff)


def _bs_put_delta_r0(S, K, sigma, tau):
    S = np.asarray(S, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        vol = sigma * np.sqrt(tau)
        d1 = (np.log(S / K) + 0.5 * vol**2) / vol
        delta = norm.cdf(d1) - 1.0
    return np.where(np.asarray(tau) > 0, delta, np.where(S < K, -1.0, 0.0))


def closed_form_linear(name: str, T: float = 1.0, **params) -> Callable:
    """Reference ``(t, state) -> (Y, Z)`` for a catalogue of linear problems.

    ``martingale``: xi = B_T. ``quadratic``: xi = B_T^2.
    ``european_put_r0``: put on ``dS = sigma S dB`` (params K, sigma);
    the state is the spot and ``Z = delta * sigma * S``.
    """
    if name == "martingale":
        return lambda t, b: (np.asarray(b, dtype=float), np.ones_like(np.asarray(b, dtype=float)))
    if name == "quadratic":
        def quad(t, b):
            b = np.asarray(b, dtype=float)
            return b**2 + (T - t), 2.0 * b
        return quad
    if name == "european_put_r0":
        K = float(params.get("K", 100.0))
        sigma = float(params.get("sigma", 0.2))

        def put(t, S):
            tau = T - t
            return bs_put_r0(S, K, sigma, tau), _bs_put_delta_r0(S, K, sigma, tau) * sigma * np.asarray(S)
        return put
    raise ValueError(f"unknown closed form {name!r}")


# --------------------------------------------------------------------------
# dynamic programming for one-dimensional Markov control


def control_dp_1d(drift: Callable, sigma: Callable, reward: Callable, terminal: Callable,
                  controls: Sequence[float], T: float, N: int, x0: float = 0.0,
                  stop: Optional[Callable] = None, x_grid: Optional[Array] = None,
                  quad_nodes: int = 20) -> float:
    """Value of the Euler-discretized control problem by backward DP.

    ``V_N = terminal(x)``;
    ``V_i(x) = max(stop(t_i, x), max_a [reward(t, x, a) dt + E V_{i+1}(x + drift dt + sigma sqrt(dt) G)])``
    with Gauss-Hermite quadrature in ``G`` and linear interpolation on
    ``x_grid``. Values beyond the grid are clamped to the end points, so
    the grid must be wide enough for the problem at hand.
    """
    if x_grid is None:
        x_grid = np.linspace(x0 - 10.0, x0 + 10.0, 2001)
    x_grid = np.asarray(x_grid, dtype=float)
    dt = T / N
    g, w = np.polynomial.hermite_e.hermegauss(quad_nodes)
    w = w / w.sum()
    A = np.asarray(controls, dtype=float)
    V = np.asarray(terminal(x_grid), dtype=float) * np.ones_like(x_grid)

    def step(t, x, V):
        best = np.full(x.shape, -np.inf)
        sig = np.asarray(sigma(t, x), dtype=float) * np.ones_like(x)
        for a in A:
            mean = x + np.asarray(drift(t, x, a), dtype=float) * dt
            nxt = mean[:, None] + sig[:, None] * math.sqrt(dt) * g[None, :]
            ev = np.interp(nxt, x_grid, V) @ w
            best = np.maximum(best, np.asarray(reward(t, x, a), dtype=float) * dt + ev)
        if stop is not None:
            best = np.maximum(best, np.asarray(stop(t, x), dtype=float))
        return best

    for i in range(N - 1, 0, -1):
        V = step(i * dt, x_grid, V)
    return float(step(0.0, np.array([x0]), V)[0])
