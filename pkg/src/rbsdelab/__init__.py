"""Reflected BSDEs with logarithmic-growth generators: Monte Carlo solver,
approximation sequences, a priori estimate diagnostics and mixed control."""

__version__ = "0.1.0"

from .paths import (
    DiffusionSpec,
    PathBundle,
    Prefix,
    SimulationError,
    TimeGrid,
    simulate_brownian,
    simulate_controlled_sde,
    simulate_sde,
)
from .generators import GeneratorSpec, GrowthEnvelope, MollifierParams, mollify
from .rbsde import (
    DiscreteSolution,
    RBSDEProblem,
    RegressionBasis,
    SolverError,
    evaluate_Y,
    solve_backward,
    solve_via_lipschitz_sequence,
)

__all__ = [
    "__version__",
    "DiffusionSpec",
    "PathBundle",
    "Prefix",
    "SimulationError",
    "TimeGrid",
    "simulate_brownian",
    "simulate_controlled_sde",
    "simulate_sde",
    "GeneratorSpec",
    "GrowthEnvelope",
    "MollifierParams",
    "mollify",
    "DiscreteSolution",
    "RBSDEProblem",
    "RegressionBasis",
    "SolverError",
    "evaluate_Y",
    "solve_backward",
    "solve_via_lipschitz_sequence",
]
