"""Command line runner: ``rbsde-lab run <kind> --config cfg.yaml`` and ``rbsde-lab report <dir>``.

Configs are YAML mappings validated against :class:`ExperimentConfig`
before any computation; unknown keys are rejected. Exit codes: 0 success,
1 usage or missing files, 2 schema violation, 3 numerical failure,
4 a validation target failed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import platform
import sys
import time
from pathlib import Path
from typing import Any, Literal, Optional

import numpy as np
import scipy
import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from . import __version__
from .control import (
    constant_strategy,
    optimality_harness,
    solve_value,
    stopping_sensitivity,
    threshold_strategy,
)
from .estimates import EstimateParams, apriori_report, generator_integrability, moment_scan
from .paths import SimulationError, TimeGrid, simulate_brownian, simulate_sde
from .problems import make_control_problem, make_diffusion, make_problem
from .rbsde import RegressionBasis, SolverError, solve_backward, solve_via_lipschitz_sequence

OUT_ENV = "RBSDE_LAB_OUT"
KINDS = ("solve", "sequence", "estimates", "control", "validate")

EXIT_OK, EXIT_USAGE, EXIT_SCHEMA, EXIT_NUMERIC, EXIT_FAILED = 0, 1, 2, 3, 4


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GridCfg(_Strict):
    T: float = Field(gt=0)
    N: int = Field(ge=1)


class EnsembleCfg(_Strict):
    M: int = Field(ge=2)
    seed: int = Field(ge=0, lt=2**64)


class Named(_Strict):
    name: str
    params: dict[str, Any] = Field(default_factory=dict)


class ProblemCfg(_Strict):
    diffusion: Named = Named(name="brownian")
    terminal: Named
    generator: Named = Named(name="zero")
    obstacle: Named = Named(name="none")


class BasisCfg(_Strict):
    kind: Literal["polynomial", "bins", "local"] = "polynomial"
    degree: int = Field(3, ge=0)
    bins: int = Field(20, ge=1)
    features: list[Literal["state", "running_max", "time_to_maturity"]] = ["state", "running_max"]
    ridge: float = Field(1e-8, ge=0)

    def build(self) -> RegressionBasis:
        return RegressionBasis(self.kind, self.degree, self.bins, tuple(self.features), self.ridge)


class EstimateCfg(_Strict):
    lam: float = 1.1
    p: float = 1.5
    alpha: float = 1.0
    moments: list[float] = [1.0, 2.0]


class SequenceCfg(_Strict):
    indices: list[int] = [5, 10, 20, 40]
    beta: float = 1.5
    nu: float = 1e-3
    nodes: int = 33


class StrategyCfg(_Strict):
    thresholds: list[float] = []
    constants: list[float] = []


class ControlCfg(_Strict):
    problem: Named
    strategies: StrategyCfg = StrategyCfg()
    eval_M: int = Field(10**5, ge=2)
    eval_seed: int = Field(1, ge=0)
    tol_stop: float = Field(1e-6, gt=0)
    bias_budget: float = Field(0.01, ge=0)
    sensitivity: list[float] = [1e-8, 1e-6, 1e-4]


class OutputCfg(_Strict):
    dir: Optional[str] = None
    export_paths: int = Field(10, ge=0)


class ValidateCfg(_Strict):
    criteria: list[str] = []


class ExperimentConfig(_Strict):
    kind: Optional[Literal["solve", "sequence", "estimates", "control", "validate"]] = None
    grid: GridCfg = GridCfg(T=1.0, N=50)
    ensemble: EnsembleCfg = EnsembleCfg(M=10**4, seed=0)
    problem: Optional[ProblemCfg] = None
    basis: BasisCfg = BasisCfg()
    estimates: EstimateCfg = EstimateCfg()
    sequence: SequenceCfg = SequenceCfg()
    control: Optional[ControlCfg] = None
    output: OutputCfg = OutputCfg()
    validate_: ValidateCfg = Field(ValidateCfg(), alias="validate")


class SchemaError(ValueError):
    pass


def _schema_message(err: ValidationError) -> str:
    parts = []
    for e in err.errors():
        loc = ".".join(str(x) for x in e["loc"])
        parts.append(f"{loc}: {e['msg']}")
    return "; ".join(parts)


def load_config(path: Optional[str], kind: str, seed: Optional[int] = None) -> ExperimentConfig:
    raw: dict = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise SchemaError(f"config is not valid YAML: {exc}") from None
        if not isinstance(raw, dict):
            raise SchemaError("config must be a mapping")
    try:
        cfg = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise SchemaError(_schema_message(exc)) from None
    if cfg.kind is not None and cfg.kind != kind:
        raise SchemaError(f"kind: config declares {cfg.kind!r} but {kind!r} was requested")
    if kind in ("solve", "sequence", "estimates") and cfg.problem is None:
        raise SchemaError("problem: Field required")
    if kind == "control" and cfg.control is None:
        raise SchemaError("control: Field required")
    if seed is not None:
        cfg.ensemble.seed = seed
    cfg.kind = kind
    return cfg


def config_hash(cfg: ExperimentConfig) -> str:
    data = cfg.model_dump(mode="json", by_alias=True, exclude={"output"})
    return hashlib.sha256(json.dumps(data, sort_keys=True).encode()).hexdigest()


# --------------------------------------------------------------------------
# output helpers


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "%.17g" % float(v)
    return str(v)


def _write_csv(path: Path, header: list[str], rows) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path.write_text(buf.getvalue(), encoding="utf-8", newline="")


def _build_problem(cfg: ExperimentConfig, grid: TimeGrid):
    p = cfg.problem
    return make_problem(grid, (p.terminal.name, p.terminal.params), (p.generator.name, p.generator.params),
                        (p.obstacle.name, p.obstacle.params), p.terminal.name)


def _bundle(cfg: ExperimentConfig, grid: TimeGrid, threads: int, diffusion=None):
    if diffusion is None:
        d = cfg.problem.diffusion
        diffusion = make_diffusion(d.name, **d.params)
    br = simulate_brownian(grid, cfg.ensemble.M, diffusion.dim, cfg.ensemble.seed, threads)
    return simulate_sde(diffusion, br)


def _solution_rows(sol, n_paths: int):
    grid = sol.grid
    K = sol.K
    for m in range(min(n_paths, sol.n_paths)):
        for i in range(grid.N + 1):
            z = sol.Z[m, i, 0] if i < grid.N else float("nan")
            yield (m, i, grid.t(i), sol.bundle.x[m, i, 0], sol.Y[m, i], z, sol.dK[m, i], K[m, i], sol.L[m, i])


def _coefficient_rows(sol):
    for i, fit in enumerate(sol.fits):
        for k, v in enumerate(np.ravel(fit.coef_y)):
            yield (i, "Y", k, v)
        for k, v in enumerate(np.ravel(fit.coef_z)):
            yield (i, "Z", k, v)


def _estimate_rows(report, h: str):
    for name, lhs, rhs, ratio in report.rows():
        yield (name, lhs, rhs, ratio, h)


# --------------------------------------------------------------------------
# experiment kinds


def _run_solve(cfg, out: Path, h: str, threads: int) -> list[str]:
    grid = TimeGrid(cfg.grid.T, cfg.grid.N)
    problem = _build_problem(cfg, grid)
    sol = solve_backward(problem, _bundle(cfg, grid, threads), cfg.basis.build())
    _write_csv(out / "solution.csv", ["path", "node", "t", "x", "Y", "Z", "dK", "K", "L"],
               _solution_rows(sol, cfg.output.export_paths))
    est = apriori_report(sol, problem, EstimateParams(cfg.estimates.lam, cfg.estimates.p))
    _write_csv(out / "estimates.csv", ["estimate", "lhs", "rhs", "ratio", "config_hash"], _estimate_rows(est, h))
    _write_csv(out / "coefficients.csv", ["node", "target", "basis_index", "value"], _coefficient_rows(sol))
    _write_csv(out / "report.csv", ["quantity", "value"], [
        ("Y0", sol.Y0), ("Y0_se", sol.y0_se), ("mean_K_T", float(np.mean(sol.K_T))),
        ("z_clipped", sol.clip_count), ("paths", sol.n_paths), ("config_hash", h)])
    return ["solution.csv", "coefficients.csv", "estimates.csv", "report.csv"]


def _run_estimates(cfg, out: Path, h: str, threads: int) -> list[str]:
    grid = TimeGrid(cfg.grid.T, cfg.grid.N)
    problem = _build_problem(cfg, grid)
    sol = solve_backward(problem, _bundle(cfg, grid, threads), cfg.basis.build())
    e = cfg.estimates
    est = apriori_report(sol, problem, EstimateParams(e.lam, e.p))
    lhs, rhs, ratio = generator_integrability(sol, problem, e.alpha)
    rows = list(_estimate_rows(est, h)) + [("generator_integrability", lhs, rhs, ratio, h)]
    _write_csv(out / "estimates.csv", ["estimate", "lhs", "rhs", "ratio", "config_hash"], rows)
    _write_csv(out / "moments.csv", ["q", "E_sup_abs_Y_q"], moment_scan(sol, e.moments))
    _write_csv(out / "report.csv", ["quantity", "value"], [
        ("Y0", sol.Y0), ("Y0_se", sol.y0_se), ("saturated_paths", est.saturated), ("config_hash", h)])
    return ["estimates.csv", "moments.csv", "report.csv"]


def _run_sequence(cfg, out: Path, h: str, threads: int) -> list[str]:
    grid = TimeGrid(cfg.grid.T, cfg.grid.N)
    problem = _build_problem(cfg, grid)
    s = cfg.sequence
    sol, rep = solve_via_lipschitz_sequence(problem, _bundle(cfg, grid, threads), cfg.basis.build(), s.indices,
                                            s.beta, s.nu, s.nodes)
    _write_csv(out / "cauchy.csv", ["n", "n2", "y_distance", "z_distance", "config_hash"],
               [(e.n, e.n2, e.y_distance, e.z_distance, h) for e in rep.entries])
    bounds = [(n, k, v) for n, d in rep.uniform_bounds.items() for k, v in d.items()]
    _write_csv(out / "uniform_bounds.csv", ["n", "quantity", "value"], bounds)
    _write_csv(out / "report.csv", ["quantity", "value"], [("Y0_last", sol.Y0), ("Y0_se", sol.y0_se),
                                                           ("config_hash", h)])
    return ["cauchy.csv", "uniform_bounds.csv", "report.csv"]


def _run_control(cfg, out: Path, h: str, threads: int) -> list[str]:
    grid = TimeGrid(cfg.grid.T, cfg.grid.N)
    c = cfg.control
    problem = make_control_problem(c.problem.name, **c.problem.params)
    strategies = [threshold_strategy(problem, b) for b in c.strategies.thresholds]
    strategies += [constant_strategy(problem, a) for a in c.strategies.constants]
    if not strategies:
        raise SchemaError("control.strategies: at least one threshold or constant strategy is required")
    bundle = _bundle(cfg, grid, threads, problem.diffusion)
    value = solve_value(problem, grid, bundle, cfg.basis.build())
    rep = optimality_harness(problem, grid, bundle, cfg.basis.build(), strategies, c.eval_M, c.eval_seed,
                             c.tol_stop, c.bias_budget, threads, value=value)
    rows = [(r.strategy, r.J, r.se, r.gap, r.combined_se, int(r.passed)) for r in [rep.optimal] + rep.rows]
    _write_csv(out / "control.csv", ["strategy", "J", "SE", "gap", "combined_SE", "pass"], rows)
    sens = stopping_sensitivity(problem, value[0], grid, c.eval_M, c.eval_seed, c.sensitivity)
    _write_csv(out / "stopping_sensitivity.csv", ["tol_stop", "J", "SE", "fraction_stopped_early"], sens)
    _write_csv(out / "report.csv", ["quantity", "value"], [
        ("Y0", rep.Y0), ("Y0_se", rep.Y0_se), ("K_before_tau", rep.K_before_tau),
        ("all_pass", int(rep.passed)), ("config_hash", h)])
    return ["control.csv", "stopping_sensitivity.csv", "report.csv"]


def _run_validate(cfg, out: Path, h: str, threads: int) -> list[str]:
    from .validation import run_criteria

    results = run_criteria(cfg.validate_.criteria or None, echo=print)
    _write_csv(out / "validation.csv", ["criterion", "title", "pass", "metrics"],
               [(r.key, r.title, int(r.passed), json.dumps(r.metrics, sort_keys=True, default=float))
                for r in results])
    n_fail = sum(not r.passed for r in results)
    print(f"{len(results) - n_fail}/{len(results)} criteria passed")
    return ["validation.csv"]


_RUNNERS = {
    "solve": _run_solve,
    "estimates": _run_estimates,
    "sequence": _run_sequence,
    "control": _run_control,
    "validate": _run_validate,
}


def _out_dir(cfg: ExperimentConfig, override: Optional[str], h: str) -> Path:
    if override:
        return Path(override)
    if cfg.output.dir:
        return Path(cfg.output.dir)
    root = Path(os.environ.get(OUT_ENV, "runs"))
    return root / f"{cfg.kind}-{h[:12]}"


def _versions() -> dict:
    return {"rbsdelab": __version__, "python": platform.python_version(), "numpy": np.__version__,
            "scipy": scipy.__version__}


def _error(out: Optional[Path], kind: str, message: str, code: int) -> int:
    print(f"error ({kind}): {message}", file=sys.stderr)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "error.json").write_text(json.dumps({"status": "error", "kind": kind, "message": message,
                                                    "exit_code": code}, indent=2) + "\n")
    return code


def run(kind: str, config: Optional[str], seed: Optional[int] = None, out: Optional[str] = None,
        threads: int = 1, only: Optional[list] = None) -> int:
    if kind not in KINDS:
        return _error(None, "usage", f"unknown experiment kind {kind!r}", EXIT_USAGE)
    if threads < 1:
        return _error(None, "usage", "--threads must be >= 1", EXIT_USAGE)
    if config is not None and not Path(config).is_file():
        return _error(None, "usage", f"config file not found: {config}", EXIT_USAGE)
    try:
        cfg = load_config(config, kind, seed)
        if only:
            cfg.validate_.criteria = list(only)
    except SchemaError as exc:
        return _error(Path(out) if out else None, "schema", str(exc), EXIT_SCHEMA)
    h = config_hash(cfg)
    target = _out_dir(cfg, out, h)
    target.mkdir(parents=True, exist_ok=True)
    t0 = time.perf_counter()
    try:
        files = _RUNNERS[kind](cfg, target, h, threads)
    except SchemaError as exc:
        return _error(target, "schema", str(exc), EXIT_SCHEMA)
    except (SolverError, SimulationError, FloatingPointError) as exc:
        return _error(target, "numerical", f"{type(exc).__name__}: {exc}", EXIT_NUMERIC)
    except ValueError as exc:
        return _error(target, "schema", str(exc), EXIT_SCHEMA)
    manifest = {
        "status": "ok", "kind": kind, "config_hash": h, "seed": cfg.ensemble.seed, "threads": threads,
        "files": files, "versions": _versions(), "wall_time_s": round(time.perf_counter() - t0, 3),
        "timestamp": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
        "config": cfg.model_dump(mode="json", by_alias=True),
    }
    (target / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(files)} tables to {target}")
    if kind == "validate" and any(r["pass"] == "0" for r in _read_csv(target / "validation.csv")):
        return EXIT_FAILED
    return EXIT_OK


# --------------------------------------------------------------------------
# report


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def report(run_dir: str, stream=None) -> int:
    stream = stream or sys.stdout
    d = Path(run_dir)
    mpath = d / "manifest.json"
    if not mpath.is_file():
        print(f"error: no manifest.json in {d}", file=sys.stderr)
        return EXIT_USAGE
    manifest = json.loads(mpath.read_text())
    print(f"{manifest['kind']} run {manifest['config_hash'][:12]} seed={manifest['seed']}", file=stream)
    for name in manifest["files"]:
        rows = _read_csv(d / name)
        if name == "report.csv":
            vals = {r["quantity"]: r["value"] for r in rows}
            if "Y0" in vals:
                print(f"report: Y0 = {float(vals['Y0']):.6f} +- {float(vals['Y0_se']):.6f}", file=stream)
            else:
                print(f"report: {len(rows)} quantities", file=stream)
        elif name == "estimates.csv":
            shown = ", ".join(f"{r['estimate']}={float(r['ratio']):.4g}" for r in rows)
            print(f"estimates: ratios {shown}", file=stream)
        elif name == "control.csv":
            print("control: gap table (sorted by gap)", file=stream)
            for r in sorted(rows, key=lambda r: float(r["gap"])):
                flag = "ok" if r["pass"] == "1" else "FAIL"
                print(f"  {r['strategy']:>14} J={float(r['J']):.5f} se={float(r['SE']):.5f} "
                      f"gap={float(r['gap']):+.5f} {flag}", file=stream)
        elif name == "validation.csv":
            n_pass = sum(r["pass"] == "1" for r in rows)
            print(f"validation: {n_pass}/{len(rows)} criteria passed", file=stream)
        elif name == "cauchy.csv":
            shown = ", ".join(f"D({r['n']},{r['n2']})={float(r['y_distance']) + float(r['z_distance']):.3g}"
                              for r in rows)
            print(f"cauchy: {shown}", file=stream)
        else:
            print(f"{name.removesuffix('.csv')}: {len(rows)} rows", file=stream)
    return EXIT_OK


# --------------------------------------------------------------------------
# shipped configs


_EXAMPLES = {
    "constant": """\
grid: {T: 1.0, N: 50}
ensemble: {M: 10000, seed: 0}
problem:
  terminal: {name: constant, params: {c: 1.0}}
""",
    "quadratic": """\
grid: {T: 1.0, N: 50}
ensemble: {M: 100000, seed: 7}
problem:
  diffusion: {name: brownian}
  terminal: {name: square}
  generator: {name: zero}
  obstacle: {name: none}
basis: {kind: polynomial, degree: 3, features: [state, running_max]}
""",
}


def example_config(name: str) -> str:
    return _EXAMPLES[name]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rbsde-lab", description="Reflected BSDE experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run an experiment")
    r.add_argument("kind", choices=KINDS)
    r.add_argument("--config", help="YAML experiment config")
    r.add_argument("--seed", type=int, help="override ensemble.seed")
    r.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./runs)")
    r.add_argument("--threads", type=int, default=1, help="worker threads for path generation")
    r.add_argument("--only", nargs="+", metavar="TARGET", help="validate: criteria to run, e.g. c01 c03")
    p = sub.add_parser("report", help="summarize a run directory")
    p.add_argument("run_dir")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        return report(args.run_dir)
    if args.kind == "validate" and args.only:
        from .validation import CRITERIA
        unknown = [k for k in args.only if k not in CRITERIA]
        if unknown:
            return _error(None, "usage", f"unknown validate target(s): {', '.join(unknown)}", EXIT_USAGE)
    return run(args.kind, args.config, args.seed, args.out, args.threads, args.only)


if __name__ == "__main__":
    sys.exit(main())
