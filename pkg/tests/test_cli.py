import csv
import json
import shutil

import pytest

from evplab.cli import main

FAIR_WALK = {"command": "simulate-walk", "seed": 3, "env": {"d": 1, "constant": 0.0}, "alpha": ["1/3"],
             "params": {"z": [0.1], "n": 4, "m": 100000}, "output_dir": "out"}
COS = {"trig": {"d": 1, "terms": [{"k": [1], "cos": 1.0, "sin": 0.0}]}}
SINE = {"d": 1, "terms": [{"k": [1], "cos": 0.0, "sin": 0.3}]}


def write(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def read_csv(path):
    with open(path) as fh:
        return list(csv.DictReader(fh))


def test_simulate_walk(tmp_path):
    assert main(["run", str(write(tmp_path, FAIR_WALK))]) == 0
    rows = {int(r["offset_or_stat"]): r for r in read_csv(tmp_path / "out/walk_histogram.csv")}
    v, se = float(rows[0]["value"]), float(rows[0]["stderr"])
    assert abs(v - 0.375) < 4 * se
    exact = {int(r["offset_or_stat"]): float(r["value"]) for r in read_csv(tmp_path / "out/walk_exact.csv")}
    assert exact[0] == 0.375
    man = json.loads((tmp_path / "out/manifest.json").read_text())
    assert man["status"] == "ok" and man["seeds"]["seed"] == 3 and len(man["config_hash"]) == 64


def test_seventeen_significant_digits(tmp_path):
    main(["run", str(write(tmp_path, FAIR_WALK))])
    text = (tmp_path / "out/walk_histogram.csv").read_text().splitlines()
    assert text[0] == "n,offset_or_stat,value,stderr"
    assert any(len(line.split(",")[2].replace(".", "").lstrip("0")) == 17 for line in text[1:])


@pytest.mark.parametrize("patch", [
    {"params": {"z": [0.1], "n": -4, "m": 10}},
    {"command": "nope"},
    {"extra": 1},
    {"alpha": ["1/0"]},
    {"params": {"z": [0.1, 0.2], "n": 4, "m": 10}},
    {"params": {"z": [0.1], "n": 4, "m": 10, "bogus": 1}},
])
def test_schema_violations_exit_2_without_artifacts(tmp_path, patch):
    cfg = {**FAIR_WALK, **patch}
    assert main(["run", str(write(tmp_path, cfg))]) == 2
    assert not (tmp_path / "out").exists()


def test_sub_operation_error_exit_1(tmp_path):
    cfg = {"command": "ratio-limit", "env": {"d": 1, "terms": [{"k": [0], "cos": 0.3, "sin": 0.0}]},
           "alpha": [0.6180339887498949], "params": {"z": [0.1], "a": 1, "b": 0, "n_list": [10]}, "output_dir": "out"}
    assert main(["run", str(write(tmp_path, cfg))]) == 1
    man = json.loads((tmp_path / "out/manifest.json").read_text())
    assert man["status"] == "error" and man["error"]["type"] == "SymmetryError"


def test_rerun_from_manifest_is_identical(tmp_path):
    cfg = {"command": "stationary-estimate", "seed": 5, "env": {"d": 1, "terms": SINE["terms"]},
           "alpha": [0.6180339887498949], "params": {"z0": [0.1], "length": 5000, "burnin": 100, "K": 3},
           "output_dir": "out"}
    assert main(["run", str(write(tmp_path, cfg))]) == 0
    again = tmp_path / "again"
    again.mkdir()
    shutil.copy(tmp_path / "out/manifest.json", again / "manifest.json")
    assert main(["run", str(again / "manifest.json")]) == 0
    for name in ("fingerprint.csv", "fingerprint.json"):
        assert (tmp_path / "out" / name).read_bytes() == (again / "out" / name).read_bytes()


def test_seed_override(tmp_path):
    p = write(tmp_path, FAIR_WALK)
    main(["run", str(p), "--output-dir", "a"])
    main(["run", str(p), "--seed", "4", "--output-dir", "b"])
    assert (tmp_path / "a/walk_histogram.csv").read_bytes() != (tmp_path / "b/walk_histogram.csv").read_bytes()
    assert json.loads((tmp_path / "b/manifest.json").read_text())["config"]["seed"] == 4


def test_build_and_verify_stage(tmp_path):
    cfg = {"command": "build-counterexample", "params": {"stages": 1, "deltas": [0.05]}, "output_dir": "ce"}
    assert main(["run", str(write(tmp_path, cfg))]) == 0
    rows = {(r["n"], r["offset_or_stat"]): float(r["value"]) for r in read_csv(tmp_path / "ce/stage_reports.csv")}
    assert rows[("1", "separation")] > 0.5
    assert (tmp_path / "ce/stage_1.json").exists()
    vcfg = {"command": "verify-stage", "params": {"bundle": "ce/stage_1.json"}, "output_dir": "v"}
    assert main(["run", str(write(tmp_path, vcfg, "v.json"))]) == 0
    rep = json.loads((tmp_path / "v/verify_report.json").read_text())
    assert rep["separation"] == rows[("1", "separation")]


def test_other_commands_run(tmp_path):
    base = {"env": SINE, "alpha": [0.6180339887498949], "seed": 1}
    cfgs = {
        "rl": {"command": "ratio-limit", "params": {"z": [0.1], "a": 1, "b": 0, "n_list": [20, 50]}},
        "br": {"command": "birkhoff-ratio", "params": {"phi": COS, "points": [[0.1], [0.5]], "n": 100}},
        "mx": {"command": "mixing", "params": {"z0": [0.1], "length": 3000, "burnin": 100, "phi": COS, "psi": COS,
                                               "n_list": [0, 4]}},
        "at": {"command": "atoms", "params": {"z0": [0.1], "N": 100, "every": 10}},
        "rf": {"command": "record-frequency", "params": {"n": 8, "m": 2000, "grid": 4}},
    }
    for name, cfg in cfgs.items():
        cfg = {**base, **cfg, "output_dir": name}
        assert main(["run", str(write(tmp_path, cfg, f"{name}.json"))]) == 0, name
    gaps = [float(r["value"]) for r in read_csv(tmp_path / "rl/ratio_limit.csv") if r["offset_or_stat"] == "gap"]
    assert gaps[1] < gaps[0]
    assert len(read_csv(tmp_path / "at/atom_partial_sums.csv")) == 11


def test_describe(tmp_path, capsys):
    rl = {"command": "ratio-limit", "env": SINE, "alpha": [0.618], "params": {"z": [0.1], "a": 1, "b": 0,
                                                                             "n_list": [2000]}}
    assert main(["describe", str(write(tmp_path, rl))]) == 0
    assert "strong ratio limit" in capsys.readouterr().out
    ce = {"command": "build-counterexample", "params": {"stages": 2}}
    main(["describe", str(write(tmp_path, ce))])
    out = capsys.readouterr().out
    assert "delta schedule" in out and "budgets" in out
    mx = {"command": "mixing", "env": SINE, "alpha": [0.618], "params": {"z0": [0.1], "length": 10, "phi": COS,
                                                                        "psi": COS, "n_list": [0, 4096]}}
    main(["describe", str(write(tmp_path, mx))])
    assert "Monte Carlo fallback" in capsys.readouterr().out
    assert not any(p.is_dir() for p in tmp_path.iterdir())
