import json
import subprocess
import sys
import textwrap

import numpy as np
import pytest

from eoslab.cli import main
from eoslab.config import build_loss, parse_config
from eoslab.errors import ConfigError
from eoslab.trace_io import column, read_table, trace_columns

TOY_INI = textwrap.dedent("""\
    [experiment]
    seed = 0

    [loss]
    kind = toy
    x0 = 1, 0.3

    [optimizer]
    kind = ngd
    eta = 0.04
    steps = 200
    noise = true

    [diagnostics]
    every = 50
    stableness = true

    [flow]
    kind = log_flow
    eta_flow = 0.01
    tau_end = 0.1

    [compare]
    reference = closed_form
    samples = 6
    max_distance = 1e-3
""")


@pytest.fixture
def toy_ini(tmp_path):
    p = tmp_path / "toy.ini"
    p.write_text(TOY_INI)
    return p


def _cli(*argv):
    return main([*argv, "--quiet"])


def test_parse_defaults_and_values():
    cfg = parse_config(TOY_INI)
    assert cfg.optimizer == "ngd" and cfg.eta == 0.04 and cfg.steps == 200
    assert cfg.noise.enabled and cfg.diag.every == 50 and cfg.diag.stableness
    assert cfg.compare.reference == "closed_form"
    model, x0 = build_loss(cfg.loss)
    np.testing.assert_array_equal(x0, [1.0, 0.3])
    assert model.name == "toy"


@pytest.mark.parametrize("text, line", [
    ("[loss]\nkind = toy\nbogus = 1\n", 3),
    ("[optimizer]\n\neta = -1\n", 3),
    ("[loss]\nkind = cube\n", 2),
    ("[mystery]\na = 1\n", 1),
    ("[optimizer\neta = 1\n", 1),
])
def test_config_errors_carry_line(text, line):
    with pytest.raises(ConfigError) as err:
        parse_config(text)
    assert err.value.line == line
    assert f"line {line}" in str(err.value)


def test_quadratic_config_requires_spectrum():
    with pytest.raises(ConfigError):
        parse_config("[loss]\nkind = quadratic\n")
    cfg = parse_config("[loss]\nkind = quadratic\neigenvalues = 1, 0.4\nx0 = 1, 1\n")
    model, x0 = build_loss(cfg.loss)
    assert model.value(x0) == pytest.approx(0.7)


def test_quadratic_command(tmp_path):
    out = tmp_path / "q"
    assert _cli("quadratic", "--seeds", "10", "--check", "--out-dir", str(out)) == 0
    summary = json.loads((out / "summary.json").read_text())
    assert set(summary["checks"]) == {"invariant_sets", "monotone_alignment", "norm_drop",
                                      "one_two_step", "limit_cycle"}
    assert set(summary["checks"].values()) == {"pass"}
    cols, rows = read_table(out / "quadratic_suite.csv")
    assert len(rows) == 10 and cols[0] == "seed"


def test_run_is_byte_identical(tmp_path, toy_ini):
    a, b = tmp_path / "a", tmp_path / "b"
    assert _cli("run", "--config", str(toy_ini), "--out-dir", str(a), "--check") == 0
    assert _cli("run", "--config", str(toy_ini), "--out-dir", str(b), "--check") == 0
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    cols, rows = read_table(a / "trace.csv")
    assert cols == trace_columns(2)
    steps = column(rows, cols, "step")
    assert steps == list(range(201))
    assert sum(column(rows, cols, "noise_applied")) > 0
    # diagnostics only on the cadence, empty elsewhere
    lam = column(rows, cols, "lambda1_at_phi")
    assert not np.isnan(lam[50]) and np.isnan(lam[51])


def test_seed_override_changes_noise(tmp_path, toy_ini):
    a, b = tmp_path / "a", tmp_path / "b"
    _cli("run", "--config", str(toy_ini), "--out-dir", str(a))
    _cli("run", "--config", str(toy_ini), "--out-dir", str(b), "--seed", "5")
    assert (a / "trace.csv").read_bytes() != (b / "trace.csv").read_bytes()


def test_flow_compare_and_scan(tmp_path, toy_ini):
    out = tmp_path / "o"
    assert _cli("flow", "--config", str(toy_ini), "--out-dir", str(out), "--check") == 0
    cols, rows = read_table(out / "flow.csv")
    assert cols[:3] == ["tau", "lambda1", "residual_grad_norm"] and len(rows) == 11
    assert _cli("compare", "--config", str(toy_ini), "--out-dir", str(out), "--check") == 0
    summary = json.loads((out / "summary.json").read_text())
    assert summary["checks"] == {"max_distance_within_bound": "pass"}
    assert summary["results"]["valid_samples"] == 6
    assert _cli("stableness-scan", "--config", str(toy_ini), "--out-dir", str(out), "--check") == 0
    cols, rows = read_table(out / "stableness.csv")
    assert len(rows) == 4


def test_compare_check_failure_exit_code(tmp_path, toy_ini):
    text = toy_ini.read_text().replace("max_distance = 1e-3", "max_distance = 1e-12")
    toy_ini.write_text(text)
    assert _cli("compare", "--config", str(toy_ini), "--out-dir", str(tmp_path), "--check") == 1


def test_plot_and_missing_columns(tmp_path, toy_ini):
    out = tmp_path / "o"
    _cli("run", "--config", str(toy_ini), "--out-dir", str(out))
    before = (out / "trace.csv").read_bytes()
    assert _cli("plot", str(out / "trace.csv"), "--out-dir", str(out)) == 0
    svg = (out / "trace.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
    assert (out / "trace.csv").read_bytes() == before
    assert _cli("plot", str(out / "trace.csv"), "--out-dir", str(out), "--panels", "loss,nope") == 2
    _cli("flow", "--config", str(toy_ini), "--out-dir", str(out))
    assert _cli("plot", str(out / "flow.csv"), "--out-dir", str(out)) == 2
    assert _cli("plot", str(out / "flow.csv"), "--out-dir", str(out), "--panels", "lambda1") == 0


def test_config_and_numerical_exit_codes(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[optimizer]\neta = -1\n")
    assert _cli("run", "--config", str(bad), "--out-dir", str(tmp_path)) == 2
    assert _cli("run", "--config", str(tmp_path / "missing.ini"), "--out-dir", str(tmp_path)) == 2
    blowup = tmp_path / "blowup.ini"
    blowup.write_text("[loss]\nkind = quadratic\neigenvalues = 1\nx0 = 1\n"
                      "[optimizer]\nkind = gd\neta = 3\nsteps = 2000\n")
    with np.errstate(over="ignore", invalid="ignore"):
        assert _cli("run", "--config", str(blowup), "--out-dir", str(tmp_path)) == 3


def test_module_entry_point(tmp_path):
    bad = tmp_path / "bad.ini"
    bad.write_text("[loss]\nkind = toy\nbogus = 1\n")
    proc = subprocess.run([sys.executable, "-m", "eoslab.cli", "run", "--config", str(bad),
                           "--out-dir", str(tmp_path)], capture_output=True, text=True)
    assert proc.returncode == 2
    assert "line 3" in proc.stderr
