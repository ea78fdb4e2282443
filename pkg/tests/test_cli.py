import csv
import json
import os

import pytest
import yaml

from threshfeed import cli


def base_config(**kw):
    cfg = {
        "task": "simulate",
        "seed": 3,
        "trials": 2000,
        "model": {"kind": "rayleigh", "snr": 1.0, "m_beams": 2, "n_users": 3},
        "policies": [{"label": "never", "rule": {"kind": "never"}},
                     {"label": "g", "rule": {"kind": "gtfp", "probability": 0.3}}],
    }
    cfg.update(kw)
    return cfg


def write(tmp_path, cfg, name="cfg.yaml"):
    path = tmp_path / name
    path.write_text(yaml.safe_dump(cfg))
    return str(path)


def test_well_formed_config_has_no_diagnostics():
    assert cli.validate(base_config()) == []


def test_negative_budget_diagnostic():
    assert "infeasible feedback budget" in cli.validate(base_config(task="optimize", budget=-0.5))


def test_policy_count_diagnostic():
    cfg = base_config(policies=[{"label": "a", "rules": [{"kind": "never"}] * 2}])
    assert any("2 rules" in d for d in cli.validate(cfg))


def test_validator_collects_every_problem():
    cfg = {"task": "nope", "trials": 5, "model": {"kind": "rayleigh", "snr": -1.0}}
    diags = cli.validate(cfg)
    assert len(diags) >= 3
    assert any("seed is required" in d for d in diags)


def test_unknown_compare_reference():
    cfg = base_config(compare=[["g", "missing"]])
    assert any("missing" in d for d in cli.validate(cfg))


def test_mtfp_matching_needs_max_sinr_policy():
    cfg = base_config(task="match", match={"kind": "mtfp"})
    assert any("max-SINR" in d for d in cli.validate(cfg))


def test_simulate_never_policy_has_zero_rate():
    bundle = cli.run(base_config())
    rows = list(csv.DictReader(bundle.outputs["rates.csv"].decode().splitlines()))
    never = [r for r in rows if r["item"] == "never" and r["metric"] == "rate"]
    assert float(never[0]["value"]) == 0.0
    assert all(r["config_hash"] == bundle.config_hash and r["seed"] == "3" for r in rows)


def test_rerun_is_byte_identical_and_jobs_free():
    a = cli.run(base_config(jobs=1))
    b = cli.run(base_config(jobs=4))
    assert a.outputs == b.outputs and a.config_hash == b.config_hash


def test_seed_changes_hash():
    assert cli.run(base_config()).config_hash != cli.run(base_config(seed=4)).config_hash


def test_main_writes_bundle(tmp_path):
    out = tmp_path / "out"
    code = cli.main(["run", write(tmp_path, base_config()), "--out", str(out), "--trials", "1000"])
    assert code == cli.EXIT_OK
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["status"] == "PASS" and "rates.csv" in manifest["files"]
    assert json.loads((out / "config.json").read_text())["trials"] == 1000
    assert not [p for p in os.listdir(out) if p.startswith(".tmp")]


def test_main_exit_codes(tmp_path):
    assert cli.main(["validate", write(tmp_path, base_config())]) == cli.EXIT_OK
    bad = write(tmp_path, base_config(task="optimize", budget=-1), "bad.yaml")
    assert cli.main(["validate", bad]) == cli.EXIT_CONFIG
    assert cli.main(["run", bad]) == cli.EXIT_CONFIG
    assert cli.main(["run", str(tmp_path / "absent.yaml")]) == cli.EXIT_IO
    blocker = tmp_path / "file"
    blocker.write_text("x")
    assert cli.main(["run", write(tmp_path, base_config()), "--out", str(blocker / "sub")]) == cli.EXIT_IO


def test_failed_write_leaves_no_partial_file(tmp_path, monkeypatch):
    bundle = cli.run(base_config())

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(os, "replace", boom)
    with pytest.raises(OSError):
        cli.write_bundle(bundle, str(tmp_path))
    assert os.listdir(tmp_path) == []


def test_verification_task_reports_pass(tmp_path):
    cfg = base_config(task="verify-theorem1", trials=5000,
                      model={"kind": "rayleigh", "snr": 1.0, "m_beams": 2, "n_users": 3},
                      policies=[{"kind": "random_box_union", "count": 2, "seed": 0}],
                      match={"samples": 10**5})
    bundle = cli.run(cfg)
    report = json.loads(bundle.outputs["theorem1.json"])
    assert report["passed"] and report["cases"] == 2 and bundle.exit_code == cli.EXIT_OK


def test_verification_fail_exit_code(tmp_path, monkeypatch):
    monkeypatch.setitem(cli._DISPATCH, "simulate", lambda cfg: ({"x.json": b"{}"}, False))
    out = tmp_path / "out"
    assert cli.main(["run", write(tmp_path, base_config()), "--out", str(out)]) == cli.EXIT_FAIL
    assert json.loads((out / "manifest.json").read_text())["status"] == "FAIL"


def test_optimize_outputs(tmp_path):
    cfg = base_config(task="optimize", budget=0.4, trials=2000,
                      model={"kind": "rayleigh", "snr": 1.0, "m_beams": 2, "n_users": 2},
                      optimize={"method": "grid", "resolution": 0.1})
    cfg.pop("policies")
    bundle = cli.run(cfg)
    trace = list(csv.DictReader(bundle.outputs["trace.csv"].decode().splitlines()))
    assert trace[0]["tau0"] == "inf"
    assert set(trace[0]) >= {"iteration", "p0", "p1", "tau0", "tau1", "rate", "std_error"}
    surface = list(csv.DictReader(bundle.outputs["surface.csv"].decode().splitlines()))
    assert {r["metric"] for r in surface} == {"p", "rate", "std_error"}
    result = json.loads(bundle.outputs["optimize.json"])
    assert sum(result["probabilities"]) <= 0.4 + 1e-9


def test_inf_serialized_as_string():
    data = json.loads(cli._json_bytes({"tau": float("inf")}))
    assert data == {"tau": "inf"}
