"""Named building blocks for experiments: diffusions, terminals, obstacles,
generators, bases and control problems.

Every entry is addressed by a name plus keyword parameters, which is how
the command line configuration refers to them.
"""

from __future__ import annotations

from typing import Callable, Optional

import numpy as np

from . import generators as gen
from .control import ControlProblem
from .paths import DiffusionSpec, TimeGrid
from .rbsde import RBSDEProblem, RegressionBasis

Array = np.ndarray

__all__ = [
    "make_diffusion",
    "make_terminal",
    "make_obstacle",
    "make_generator",
    "make_problem",
    "make_control_problem",
    "LOCAL_CUBIC",
    "DIFFUSIONS",
    "TERMINALS",
    "OBSTACLES",
    "GENERATORS",
    "CONTROL_PROBLEMS",
]

# piecewise cubic on 8 equal-count cells of the state; see README for why
# a global polynomial is not used for kinked payoffs
LOCAL_CUBIC = RegressionBasis(kind="local", degree=3, bins=8, features=("state",))


def _brownian(x0: float = 0.0) -> DiffusionSpec:
    return DiffusionSpec(np.array([x0]), lambda t, p: 1.0, 1.0, lambda t, p, a: a)


def _gbm_clamped(x0: float = 100.0, sigma: float = 0.2, floor: float = 0.01) -> DiffusionSpec:
    """``dx = sigma max(x, floor) dB``; zero controlled drift."""
    return DiffusionSpec(np.array([x0]), lambda t, p: sigma * np.maximum(p.scalar, floor),
                         1.0 / (sigma * floor), lambda t, p, a: np.zeros(p.n_paths))


DIFFUSIONS: dict[str, Callable[..., DiffusionSpec]] = {
    "brownian": _brownian,
    "gbm_clamped": _gbm_clamped,
}


def _constant_terminal(c: float = 1.0):
    return lambda prefix: np.full(prefix.n_paths, float(c))


def _power_terminal(power: float = 1.0, scale: float = 1.0):
    return lambda prefix: scale * prefix.scalar**power


def _put_terminal(K: float = 100.0):
    return lambda prefix: np.maximum(K - prefix.scalar, 0.0)


def _call_terminal(K: float = 100.0):
    return lambda prefix: np.maximum(prefix.scalar - K, 0.0)


TERMINALS: dict[str, Callable] = {
    "constant": _constant_terminal,
    "identity": lambda: _power_terminal(1.0),
    "square": lambda scale=1.0: _power_terminal(2.0, scale),
    "put": _put_terminal,
    "call": _call_terminal,
}


def _linear_decay(c: float = 1.0, T: float = 1.0):
    return lambda t, prefix: np.full(prefix.n_paths, c * (T - t) / T)


def _sentinel():
    return lambda t, prefix: np.full(prefix.n_paths, -np.inf)


def _put_obstacle(K: float = 100.0):
    return lambda t, prefix: np.maximum(K - prefix.scalar, 0.0)


def _constant_obstacle(c: float = 0.0):
    return lambda t, prefix: np.full(prefix.n_paths, float(c))


OBSTACLES: dict[str, Callable] = {
    "linear_decay": _linear_decay,
    "sentinel": _sentinel,
    "put": _put_obstacle,
    "constant": _constant_obstacle,
}

def _example2(kappa: float = 1.0, C: float | str = "abs_state") -> gen.GeneratorSpec:
    """Example 2 with ``C_t = |x_t|`` by default, or a nonnegative constant."""
    if C == "abs_state":
        return gen.example2_generator(kappa, lambda t, prefix: np.abs(prefix.scalar))
    if isinstance(C, str) or float(C) < 0:
        raise ValueError("example2 C must be 'abs_state' or a nonnegative number")
    return gen.example2_generator(kappa, float(C))


GENERATORS: dict[str, Callable[..., gen.GeneratorSpec]] = {
    "zero": gen.zero_generator,
    "constant": gen.constant_generator,
    "linear_z": gen.linear_z_generator,
    "abs_z": gen.abs_z_generator,
    "linear_y": gen.linear_y_generator,
    "example1": gen.example1_generator,
    "example2": _example2,
}


def _lookup(table: dict, kind: str, name: str):
    try:
        return table[name]
    except KeyError:
        raise ValueError(f"unknown {kind} {name!r}; choose from {sorted(table)}") from None


def make_diffusion(name: str, **params) -> DiffusionSpec:
    return _lookup(DIFFUSIONS, "diffusion", name)(**params)


def make_terminal(name: str, **params):
    return _lookup(TERMINALS, "terminal", name)(**params)


def make_obstacle(name: Optional[str], T: float = 1.0, **params):
    if name is None or name == "none":
        return None
    if name == "linear_decay":
        params.setdefault("T", T)
    return _lookup(OBSTACLES, "obstacle", name)(**params)


def make_generator(name: str, **params) -> gen.GeneratorSpec:
    return _lookup(GENERATORS, "generator", name)(**params)


def make_problem(grid: TimeGrid, terminal: tuple, generator: tuple = ("zero", {}),
                 obstacle: tuple = (None, {}), name: str = "problem") -> RBSDEProblem:
    """Assemble an :class:`RBSDEProblem` from ``(name, params)`` pairs."""
    return RBSDEProblem(make_terminal(terminal[0], **terminal[1]),
                        make_generator(generator[0], **generator[1]),
                        make_obstacle(obstacle[0], grid.T, **obstacle[1]), grid, name)


# --------------------------------------------------------------------------
# control problems


def american_put(x0: float = 100.0, K: float = 100.0, sigma: float = 0.2, floor: float = 0.01) -> ControlProblem:
    """Optimal exercise of a put at zero rate: single control, no drift, no running reward."""
    payoff = _put_obstacle(K)
    return ControlProblem(_gbm_clamped(x0, sigma, floor), lambda t, p, a: np.zeros(p.n_paths),
                          lambda prefix: payoff(0.0, prefix), [0.0], payoff,
                          K_tilde=1.0, C=max(1.0, K), name="american_put")


def lq(x0: float = 0.0, n_controls: int = 41, bound: float = 1.0) -> ControlProblem:
    """``dx = a dt + dB``, reward ``-a^2/2``, terminal ``x_T^2``, ``a`` on a uniform grid."""
    return ControlProblem(_brownian(x0), lambda t, p, a: -0.5 * np.asarray(a) ** 2,
                          lambda prefix: prefix.scalar**2, np.linspace(-bound, bound, n_controls),
                          None, K_tilde=max(1.0, bound), C=1.0, name="lq")


def drift_only(x0: float = 0.0, a: float = 0.0) -> ControlProblem:
    """Single control ``a`` with zero reward and terminal ``x_T``."""
    return ControlProblem(_brownian(x0), lambda t, p, u: np.zeros(p.n_paths), lambda prefix: prefix.scalar,
                          [a], None, name="drift_only")


CONTROL_PROBLEMS: dict[str, Callable[..., ControlProblem]] = {
    "american_put": american_put,
    "lq": lq,
    "drift_only": drift_only,
}


def make_control_problem(name: str, **params) -> ControlProblem:
    return _lookup(CONTROL_PROBLEMS, "control problem", name)(**params)
