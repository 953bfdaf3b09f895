import csv
import hashlib
import json

import numpy as np
import pytest
import tomli_w

from nullwave import experiments_cli as cli
from nullwave.experiments_cli import CSV_HEADER, ConfigError, ExperimentConfig, main
from nullwave.grid_fields import FieldState, read_checkpoint

A00 = [1.0] + [0.0] * 15

SMALL = {
    "solver": {"n": 17, "T_max": 4.0, "epsilon": 0.0},
    "schedule": {"gamma": 0.0, "uniform": [0.0, 1.0, 2.0]},
}


def _write(path, data):
    path.write_text(tomli_w.dumps(data))
    return str(path)


def _merge(base, extra):
    out = {k: dict(v) for k, v in base.items()}
    for k, v in extra.items():
        out.setdefault(k, {}).update(v)
    return out


def _read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# ---------------------------------------------------------------------------
# configuration


def test_config_round_trip_and_hash(tmp_path):
    cfg = ExperimentConfig.from_dict(_merge(SMALL, {"metric": {"a": 0.01, "family": "oscillating_bump",
                                                               "omega": 1.0}}))
    p = tmp_path / "c.toml"
    p.write_text(cfg.dumps())
    back = ExperimentConfig.from_toml(p)
    assert back.to_dict() == cfg.to_dict()
    assert back.config_hash() == cfg.config_hash()
    back.solver["n"] = 19
    assert back.config_hash() != cfg.config_hash()


def test_defaults_fill_every_key():
    cfg = ExperimentConfig.from_dict({})
    for name, keys in cli.SCHEMA.items():
        assert set(getattr(cfg, name)) == set(keys)
    assert cfg.leaves() == [2.0]
    assert cfg.p_values() == (1.0, 1.5)


@pytest.mark.parametrize("data, where", [
    ({"solver": {"bogus": 1}}, "solver.bogus"),
    ({"extra": {}}, "[extra]"),
    ({"solver": {"n": "x"}}, "solver.n"),
    ({"solver": {"n": 16}}, "solver.n"),
    ({"metric": {"alpha": 1.5}}, "metric.alpha"),
    ({"schedule": {"gamma": 1.1}}, "schedule.gamma"),
    ({"schedule": {"uniform": [9.0]}}, "schedule"),
    ({"nonlinearity": {"A": [1.0, 2.0]}}, "nonlinearity.A"),
    ({"solver": {"resolutions": [1.5]}}, "solver.resolutions[0]"),
])
def test_config_errors_name_location(data, where):
    with pytest.raises(ConfigError, match=__import__("re").escape(where)):
        ExperimentConfig.from_dict(data).leaves()


def test_unknown_key_exit_2(tmp_path, capsys):
    path = _write(tmp_path / "c.toml", {"solver": {"nn": 3}})
    assert main(["validate-metric", "--config", path]) == 2
    assert "solver.nn" in capsys.readouterr().err


def test_parse_error_reports_location(tmp_path, capsys):
    p = tmp_path / "bad.toml"
    p.write_text("[solver]\nn = 17\nT_max = = 3\n")
    assert main(["run", "--config", str(p)]) == 2
    err = capsys.readouterr().err
    assert "bad.toml" in err and "line 3" in err


def test_usage_errors(tmp_path):
    assert main([]) == 2
    assert main(["run"]) == 2
    assert main(["nonsense"]) == 2
    assert main(["run", "--config", str(tmp_path / "missing.toml")]) == 2
    path = _write(tmp_path / "c.toml", SMALL)
    assert main(["run", "--config", path, "--threads", "0"]) == 2
    assert main(["run", "--config", path, "--seed", "-3"]) == 2


# ---------------------------------------------------------------------------
# validate-metric


@pytest.mark.parametrize("metric, code", [
    ({}, 0),
    ({"family": "oscillating_bump", "a": 0.01, "omega": 1.0, "lambda": 0.9}, 0),
    ({"family": "oscillating_bump", "a": 2.0, "omega": 1.0, "lambda": 0.5}, 1),
])
def test_validate_metric(tmp_path, capsys, metric, code):
    path = _write(tmp_path / "c.toml", {"metric": {**metric, "sample_count": 17, "temporal": 16}})
    assert main(["validate-metric", "--config", path, "--out", str(tmp_path / "o")]) == code
    doc = json.loads(capsys.readouterr().out)
    assert set(doc) == {"lambda", "H", "lambda1", "smallness_margin", "passed_A1", "alpha"}
    assert doc["passed_A1"] == (code == 0)
    if not metric:
        assert doc["H"] == 0.0
    if code == 0 and metric:
        assert doc["smallness_margin"] > 0 and doc["H"] > 0
    assert json.loads((tmp_path / "o" / "hypothesis.json").read_text()) == doc


# ---------------------------------------------------------------------------
# run


def test_run_zero_epsilon(tmp_path):
    path = _write(tmp_path / "c.toml", SMALL)
    out = tmp_path / "o"
    assert main(["run", "--config", path, "--out", str(out)]) == 0
    rows = _read_rows(out / "diagnostics.csv")
    assert len(rows) == 3 and list(rows[0]) == list(CSV_HEADER)
    for row in rows:
        for k in CSV_HEADER:
            if k not in ("tau", "null_complete"):
                assert float(row[k]) == 0.0, k
    fit = json.loads((out / "fit.json").read_text())
    assert set(fit["pass"]) == {"energy", "pointwise"} and fit["status"] == "completed"


def test_run_is_deterministic_and_manifest(tmp_path):
    data = _merge(SMALL, {"solver": {"epsilon": 0.1, "checkpoint": True}})
    path = _write(tmp_path / "c.toml", data)
    outs = [tmp_path / "a", tmp_path / "b"]
    for o in outs:
        assert main(["run", "--config", path, "--out", str(o)]) == 0
    a, b = ((o / "diagnostics.csv").read_bytes() for o in outs)
    assert a == b
    assert (outs[0] / "fit.json").read_bytes() == (outs[1] / "fit.json").read_bytes()
    man = json.loads((outs[0] / "manifest.json").read_text())
    assert man["status"] == "completed" and man["code_version"]
    names = {f["name"] for f in man["files"]}
    assert names == {"config.toml", "diagnostics.csv", "fit.json", "final.ckpt"}
    for f in man["files"]:
        blob = (outs[0] / f["name"]).read_bytes()
        assert f["bytes"] == len(blob) and f["sha256"] == hashlib.sha256(blob).hexdigest()
    cfg = ExperimentConfig.from_toml(outs[0] / "config.toml")
    assert man["config_hash"] == cfg.config_hash()
    grid, st = read_checkpoint(outs[0] / "final.ckpt")
    assert grid.n == 17 and st.t == pytest.approx(4.0)
    rows = _read_rows(outs[0] / "diagnostics.csv")
    assert float(rows[0]["E_total"]) > 0 and np.isfinite(float(rows[0]["E_T"]))
    assert 0 < float(rows[-1]["D_cum"]) and float(rows[0]["D_cum"]) == 0.0


def test_run_flat_energy_row(tmp_path):
    data = {"solver": {"n": 97, "T_max": 4.0, "epsilon": 1.0},
            "nonlinearity": {"enabled": False},
            "schedule": {"gamma": 0.0, "uniform": [0.0], "commuted": False}}
    cfg = ExperimentConfig.from_dict(data)
    res = cli.execute_run(cfg)
    rep = cli.hypothesis_report(cfg)
    scfg = cfg.solver_config(rep)
    from nullwave.diagnostics import slice_energy
    E0 = slice_energy(cfg.initial_data(scfg.grid), scfg.grid)
    assert res.status == "completed" and len(res.rows) == 1
    assert res.rows[0]["E_total"] == pytest.approx(E0, rel=0.05)
    assert np.isnan(res.rows[0]["E_T"]) and res.rows[0]["D_cum"] == 0.0


def test_run_refuses_uncertified_form(tmp_path, capsys):
    path = _write(tmp_path / "c.toml", _merge(SMALL, {"nonlinearity": {"A": A00}}))
    assert main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 2
    assert "null form" in capsys.readouterr().err
    path = _write(tmp_path / "d.toml", _merge(SMALL, {"nonlinearity": {"A": A00,
                                                                       "require_null": False}}))
    assert main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 0


def test_run_failing_hypothesis_exit_2(tmp_path):
    path = _write(tmp_path / "c.toml", _merge(SMALL, {"metric": {
        "family": "oscillating_bump", "a": 2.0, "lambda": 0.5, "sample_count": 9,
        "temporal": 8}}))
    assert main(["run", "--config", path, "--out", str(tmp_path / "o")]) == 2


def test_run_picard_mode(tmp_path):
    path = _write(tmp_path / "c.toml", _merge(SMALL, {"solver": {"mode": "picard",
                                                                 "picard_iters": 2,
                                                                 "epsilon": 0.1}}))
    out = tmp_path / "o"
    assert main(["run", "--config", path, "--out", str(out)]) == 0
    doc = json.loads((out / "picard.json").read_text())
    assert len(doc["increments"]) == 1 and doc["statuses"] == ["completed"] * 2
    man = json.loads((out / "manifest.json").read_text())
    assert {f["name"] for f in man["files"]} == {"config.toml", "picard.json"}


def test_unreached_leaves_are_nan_rows():
    cfg = ExperimentConfig.from_dict(_merge(SMALL, {"solver": {"epsilon": 0.1}}))
    from nullwave.diagnostics import FoliationObserver
    obs = FoliationObserver([0.0], 2.0)
    row = cli.leaf_row(obs, 2.0, False, 0.5, True)
    assert row["tau"] == 2.0 and all(np.isnan(row[k]) for k in CSV_HEADER[1:])
    assert cfg.leaves() == [0.0, 1.0, 2.0]


# ---------------------------------------------------------------------------
# other commands


def test_fit_decay_command(tmp_path, capsys):
    tau = np.geomspace(8.0, 40.0, 7)
    rows = [{k: 0.0 for k in CSV_HEADER} | {"tau": t, "E_total": (1 + t) ** -1.7,
                                             "max_phi_inner": (1 + t) ** -0.8} for t in tau]
    rows.append({k: float("nan") for k in CSV_HEADER} | {"tau": 50.0})
    cli.write_csv(tmp_path / "d.csv", rows)
    assert main(["fit-decay", str(tmp_path / "d.csv"), "--out", str(tmp_path / "o")]) == 0
    doc = json.loads(capsys.readouterr().out)
    assert doc["pass"] == {"energy": True, "pointwise": True}
    assert doc["slope_energy"] == pytest.approx(-1.7)
    slow = [r | {"E_total": (1 + r["tau"]) ** -0.5} for r in rows[:-1]]
    cli.write_csv(tmp_path / "s.csv", slow)
    assert main(["fit-decay", str(tmp_path / "s.csv")]) == 1
    (tmp_path / "bad.csv").write_text("tau,E\n1,2\n")
    assert main(["fit-decay", str(tmp_path / "bad.csv")]) == 2
    assert main(["fit-decay", str(tmp_path / "none.csv")]) == 2


def test_check_inequalities_small_corpus(tmp_path, capsys):
    path = _write(tmp_path / "c.toml", {
        "solver": {"n": 33, "T_max": 5.0, "corpus_size": 2},
        "schedule": {"gamma": 0.0, "uniform": [0.0, 1.0, 2.0]}})
    assert main(["check-inequalities", "--config", path, "--seed", "4",
                 "--out", str(tmp_path / "o")]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert len(lines) == 3 and all(line.endswith("pass") for line in lines[1:])
    doc = json.loads((tmp_path / "o" / "inequalities.json").read_text())
    assert [e["index"] for e in doc] == [0, 1]


def test_check_inequalities_zero_field(tmp_path, capsys, monkeypatch):
    def zero(grid, rng, R):
        return FieldState(0.0, grid.zeros(), grid.zeros())
    monkeypatch.setattr(cli, "random_bump_field", zero)
    path = _write(tmp_path / "c.toml", {"solver": {"n": 17, "T_max": 4.0, "corpus_size": 1}})
    assert main(["check-inequalities", "--config", path]) == 0
    assert "skipped-undefined" in capsys.readouterr().out


def test_check_inequalities_tolerance_zero_reports_per_field():
    cfg = ExperimentConfig.from_dict({"solver": {"n": 17, "T_max": 4.0, "corpus_size": 2},
                                      "output": {"tol_h": 0.0}})
    entries = cli.check_inequalities(cfg)
    assert len(entries) == 2 and all(e.defined for e in entries)


def test_convergence_needs_three_resolutions(tmp_path, capsys):
    path = _write(tmp_path / "c.toml", {"solver": {"resolutions": [17]}})
    assert main(["convergence", "--config", path]) == 2
    assert "three" in capsys.readouterr().err


def test_convergence_passed_rule():
    class R_:
        def __init__(self, e):
            self.error, self.status = e, "completed"
    assert cli.convergence_passed([R_(1.0), R_(0.5), R_(0.1)], [1.0, 2.3])
    assert not cli.convergence_passed([R_(1.0), R_(0.5), R_(0.1)], [1.0, 1.8])
    assert not cli.convergence_passed([R_(1.0), R_(1.5), R_(0.1)], [-0.6, 3.9])


def test_blowup_contrast_gate_and_zero(tmp_path, capsys):
    path = _write(tmp_path / "bad.toml", {"nonlinearity": {"A": A00}})
    assert main(["blowup-contrast", "--config", path]) == 1
    assert "not certified" in capsys.readouterr().err
    path = _write(tmp_path / "c.toml", {"solver": {"n": 17, "T_max": 4.0, "epsilon": 0.0}})
    assert main(["blowup-contrast", "--config", path, "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "contrast.json").read_text())
    for name in ("null", "contrast"):
        assert doc[name]["status"] == "completed" and not doc[name]["blowup"]
        assert all(m == 0.0 for m in doc[name]["max_phi"])
    assert doc["null"]["max_phi"] == doc["contrast"]["max_phi"]
    assert doc["null"]["certified_null"] and not doc["contrast"]["certified_null"]
    assert not doc["contrast_established"]


def test_flags_before_subcommand(tmp_path):
    path = _write(tmp_path / "c.toml", {})
    assert main(["--config", path, "--threads", "1", "validate-metric"]) == 0


def test_module_entry_point():
    import subprocess
    import sys
    proc = subprocess.run([sys.executable, "-m", "nullwave", "--help"], capture_output=True,
                          text=True)
    assert proc.returncode == 0 and "fit-decay" in proc.stdout
