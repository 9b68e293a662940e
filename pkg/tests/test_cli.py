import csv
import json

import pytest
import yaml

from rbsdelab import cli
from rbsdelab.cli import config_hash, example_config, load_config, main

SMALL = """\
grid: {T: 1.0, N: 10}
ensemble: {M: 500, seed: 3}
problem:
  terminal: {name: square}
  generator: {name: example1}
"""

CONTROL = """\
grid: {T: 1.0, N: 10}
ensemble: {M: 2000, seed: 3}
basis: {kind: local, degree: 3, bins: 8, features: [state]}
control:
  problem: {name: american_put}
  strategies: {thresholds: [80.0, 95.0]}
  eval_M: 2000
  sensitivity: [1.0e-6, 1.0e-3]
"""


def write(tmp_path, text, name="cfg.yaml"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def report_values(run_dir):
    return {r["quantity"]: r["value"] for r in rows(run_dir / "report.csv")}


def test_constant_solve(tmp_path):
    cfg = write(tmp_path, example_config("constant"))
    out = tmp_path / "run"
    assert main(["run", "solve", "--config", cfg, "--out", str(out)]) == 0
    assert float(report_values(out)["Y0"]) == pytest.approx(1.0, abs=1e-12)
    sol = rows(out / "solution.csv")
    assert all(abs(float(r["Y"]) - 1.0) <= 1e-12 for r in sol)
    assert list(sol[0]) == ["path", "node", "t", "x", "Y", "Z", "dK", "K", "L"]
    m = json.loads((out / "manifest.json").read_text())
    assert m["status"] == "ok" and m["seed"] == 0
    assert {"config_hash", "versions", "wall_time_s", "files"} <= set(m)
    assert m["config_hash"] == report_values(out)["config_hash"]


def test_csv_format(tmp_path):
    out = tmp_path / "run"
    assert main(["run", "solve", "--config", write(tmp_path, SMALL), "--out", str(out)]) == 0
    raw = (out / "estimates.csv").read_bytes()
    assert b"\r\n" not in raw and raw.endswith(b"\n")
    header = raw.decode("utf-8").splitlines()[0]
    assert header == "estimate,lhs,rhs,ratio,config_hash"


def test_missing_grid_field(tmp_path, capsys):
    cfg = write(tmp_path, SMALL.replace("grid: {T: 1.0, N: 10}", "grid: {T: 1.0}"))
    out = tmp_path / "bad"
    assert main(["run", "solve", "--config", cfg, "--out", str(out)]) == 2
    assert "grid.N" in capsys.readouterr().err
    err = json.loads((out / "error.json").read_text())
    assert err["kind"] == "schema" and err["exit_code"] == 2 and "grid.N" in err["message"]


def test_unknown_key_rejected(tmp_path, capsys):
    cfg = write(tmp_path, SMALL + "colour: blue\n")
    assert main(["run", "solve", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    assert "colour" in capsys.readouterr().err


def test_unknown_component_is_schema_error(tmp_path):
    cfg = write(tmp_path, SMALL.replace("example1", "cubic_z"))
    assert main(["run", "solve", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


def test_usage_errors(tmp_path):
    assert main(["run", "solve", "--config", str(tmp_path / "missing.yaml")]) == 1
    assert main(["run", "solve", "--config", write(tmp_path, SMALL), "--threads", "0"]) == 1
    assert main(["run", "validate", "--only", "c99"]) == 1
    with pytest.raises(SystemExit):
        main(["run", "frobnicate"])


def test_kind_mismatch(tmp_path):
    cfg = write(tmp_path, "kind: control\n" + SMALL)
    assert main(["run", "solve", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


def test_incompatible_obstacle_is_config_error(tmp_path):
    # xi = B_T^2 can sit below a constant obstacle of 5: the config is inconsistent
    cfg = write(tmp_path, SMALL.replace("  generator: {name: example1}\n",
                                        "  obstacle: {name: constant, params: {c: 5.0}}\n"))
    assert main(["run", "solve", "--config", cfg, "--out", str(tmp_path / "x")]) == 2
    err = json.loads((tmp_path / "x" / "error.json").read_text())
    assert "terminal value below obstacle" in err["message"]


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(*args, **kwargs):
        raise cli.SolverError("regression failure at node 4")
    monkeypatch.setattr(cli, "solve_backward", boom)
    out = tmp_path / "x"
    assert main(["run", "solve", "--config", write(tmp_path, SMALL), "--out", str(out)]) == 3
    err = json.loads((out / "error.json").read_text())
    assert err["kind"] == "numerical" and "node 4" in err["message"]


def test_seed_override(tmp_path):
    cfg = write(tmp_path, SMALL)
    a, b = tmp_path / "a", tmp_path / "b"
    assert main(["run", "solve", "--config", cfg, "--out", str(a), "--seed", "11"]) == 0
    assert main(["run", "solve", "--config", cfg, "--out", str(b)]) == 0
    assert json.loads((a / "manifest.json").read_text())["seed"] == 11
    assert report_values(a)["Y0"] != report_values(b)["Y0"]
    assert config_hash(load_config(cfg, "solve", 11)) != config_hash(load_config(cfg, "solve"))


def test_threads_do_not_change_bytes(tmp_path):
    cfg = write(tmp_path, SMALL)
    outs = []
    for n in (1, 4):
        d = tmp_path / f"t{n}"
        assert main(["run", "estimates", "--config", cfg, "--out", str(d), "--threads", str(n)]) == 0
        outs.append({p.name: p.read_bytes() for p in sorted(d.glob("*.csv"))})
    assert outs[0] == outs[1]


def test_default_output_root(tmp_path, monkeypatch):
    monkeypatch.setenv(cli.OUT_ENV, str(tmp_path / "root"))
    assert main(["run", "solve", "--config", write(tmp_path, SMALL)]) == 0
    dirs = list((tmp_path / "root").iterdir())
    assert len(dirs) == 1 and dirs[0].name.startswith("solve-")


def test_report_requires_manifest(tmp_path, capsys):
    assert main(["report", str(tmp_path)]) == 1
    assert "manifest" in capsys.readouterr().err


def test_report_after_solve(tmp_path, capsys):
    out = tmp_path / "run"
    main(["run", "solve", "--config", write(tmp_path, SMALL), "--out", str(out)])
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    first = capsys.readouterr().out
    lines = first.strip().splitlines()
    manifest = json.loads((out / "manifest.json").read_text())
    assert len(lines) == 1 + len(manifest["files"])
    assert any(line.startswith("report: Y0 = ") for line in lines)
    assert any(line.startswith("estimates: ratios") for line in lines)
    main(["report", str(out)])
    assert capsys.readouterr().out == first


def test_sequence_run(tmp_path):
    cfg = write(tmp_path, SMALL + "sequence: {indices: [5, 10, 20]}\n")
    out = tmp_path / "seq"
    assert main(["run", "sequence", "--config", cfg, "--out", str(out)]) == 0
    c = rows(out / "cauchy.csv")
    assert [(r["n"], r["n2"]) for r in c] == [("5", "10"), ("10", "20")]


def test_control_run_and_report(tmp_path, capsys):
    out = tmp_path / "ctl"
    assert main(["run", "control", "--config", write(tmp_path, CONTROL), "--out", str(out)]) == 0
    table = rows(out / "control.csv")
    assert [r["strategy"] for r in table][0] == "optimal"
    assert list(table[0]) == ["strategy", "J", "SE", "gap", "combined_SE", "pass"]
    assert len(rows(out / "stopping_sensitivity.csv")) == 2
    capsys.readouterr()
    assert main(["report", str(out)]) == 0
    text = capsys.readouterr().out.splitlines()
    start = text.index("control: gap table (sorted by gap)") + 1
    gaps = [float(line.split("gap=")[1].split()[0]) for line in text[start:start + len(table)]]
    assert gaps == sorted(gaps)


def test_control_requires_strategies(tmp_path):
    cfg = write(tmp_path, CONTROL.replace("  strategies: {thresholds: [80.0, 95.0]}\n", ""))
    assert main(["run", "control", "--config", cfg, "--out", str(tmp_path / "x")]) == 2


def test_validate_single_target(tmp_path, capsys):
    out = tmp_path / "val"
    assert main(["run", "validate", "--only", "c06", "--out", str(out)]) == 0
    printed = capsys.readouterr().out
    assert "c06 PASS" in printed
    v = rows(out / "validation.csv")
    assert [r["criterion"] for r in v] == ["c06"] and v[0]["pass"] == "1"


def test_example_configs_validate():
    for name in ("constant", "quadratic"):
        cli.ExperimentConfig.model_validate(yaml.safe_load(example_config(name)))
