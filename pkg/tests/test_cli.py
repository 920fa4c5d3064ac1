"""Runner tests: config validation, hashing, artifacts, replay, worker invariance."""

import json
import math
import os

import numpy as np
import pytest

from sbmre.cli import (
    ConfigError,
    ReplayRefusal,
    load_config,
    main,
    replay,
    run_experiment,
)

BASE = {
    "experiment": {"name": "pam-oracle"},
    "kernel": {"type": "constant", "level": "1.0"},
    "grid": {"d": "1", "L": "8.0", "h": "0.25"},
    "scheme": {"dt": "0.005", "ordering": "symmetric"},
    "mc": {"replicas": "40", "paths": "400", "seed": "7"},
    "readouts": {"f": "constant(1.0)"},
    "params": {"t": "0.25", "mc_dt": "0.025"},
    "output": {"directory": "out"},
}


def write_config(tmp_path, name="cfg.ini", **overrides):
    sections = {k: dict(v) for k, v in BASE.items()}
    for dotted, value in overrides.items():
        section, key = dotted.split(".", 1)
        if value is None:
            sections[section].pop(key, None)
        else:
            sections.setdefault(section, {})[key] = str(value)
    lines = []
    for section, body in sections.items():
        if body is None:
            continue
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in body.items())
        lines.append("")
    path = tmp_path / name
    path.write_text("\n".join(lines))
    return str(path)


def test_config_validation_errors(tmp_path):
    with pytest.raises(ConfigError, match="missing config sections"):
        path = tmp_path / "empty.ini"
        path.write_text("[experiment]\nname = pam-oracle\n")
        load_config(str(path))
    with pytest.raises(ConfigError, match="unknown experiment"):
        load_config(write_config(tmp_path, **{"experiment.name": "frobnicate"}))
    with pytest.raises(ConfigError, match="readout catalog is empty"):
        load_config(write_config(tmp_path, **{"readouts.f": None}))
    with pytest.raises(ConfigError, match="kernel"):
        load_config(write_config(tmp_path, **{"kernel.type": "mystery"}))
    with pytest.raises(ConfigError, match="even"):
        load_config(write_config(tmp_path, **{"grid.h": "8.0"}))
    with pytest.raises(ConfigError, match="divide"):
        load_config(write_config(tmp_path, **{"grid.h": "0.3"}))
    with pytest.raises(ConfigError, match="replicas"):
        load_config(write_config(tmp_path, **{"mc.replicas": "1"}))
    with pytest.raises(ConfigError, match="dt"):
        load_config(write_config(tmp_path, **{"scheme.dt": "-0.001"}))
    with pytest.raises(ConfigError, match="ordering"):
        load_config(write_config(tmp_path, **{"scheme.ordering": "stochastic"}))
    with pytest.raises(ConfigError, match="params"):
        load_config(write_config(tmp_path, **{"params.t": "0, -1"}))
    with pytest.raises(ConfigError, match="seed"):
        load_config(write_config(tmp_path, **{"mc.seed": "-3"}))


def test_hash_covers_seed_but_not_output_dir(tmp_path):
    a = load_config(write_config(tmp_path, "a.ini"))
    b = load_config(write_config(tmp_path, "b.ini", **{"output.directory": "elsewhere"}))
    c = load_config(write_config(tmp_path, "c.ini"), seed_override=8)
    d = load_config(write_config(tmp_path, "d.ini", **{"mc.seed": "8"}))
    assert a.digest == b.digest
    assert a.digest != c.digest
    assert c.digest == d.digest  # override and literal edit are the same config
    assert c.seed == 8


def test_threshold_table_artifacts_and_cli(tmp_path, capsys):
    cfg_path = write_config(tmp_path, **{"experiment.name": "threshold-table"})
    out = str(tmp_path / "run")
    assert main(["threshold-table", "--config", cfg_path, "--out", out]) == 0
    captured = capsys.readouterr().out
    assert "all checks passed" in captured
    csv = (tmp_path / "run" / "threshold-table.csv").read_text().splitlines()
    assert csv[0] == "experiment,check,estimate,dispersion,passed,seed,config_hash"
    body = [line.split(",") for line in csv[1:]]
    assert len(body) == 4 and all(row[4] == "pass" for row in body)
    d3 = next(row for row in body if row[1] == "threshold-d3")
    assert math.isclose(float(d3[2]), math.pi / 3.0, rel_tol=0, abs_tol=1e-12)
    manifest = json.loads((tmp_path / "run" / "threshold-table_manifest.json").read_text())
    assert manifest["config_hash"] == body[0][6]
    assert {"config_text", "csv_sha256", "versions", "seed", "workers"} <= set(manifest)

    assert main(["validate", "--config", cfg_path]) == 0
    assert "config ok" in capsys.readouterr().out
    # experiment subcommand must match the config's declared name
    assert main(["pam-oracle", "--config", cfg_path, "--out", out]) == 2
    assert "error:" in capsys.readouterr().err


def test_validate_rejects_bad_config(tmp_path, capsys):
    cfg_path = write_config(tmp_path, **{"kernel.type": "mystery"})
    assert main(["validate", "--config", cfg_path]) == 2
    assert "error:" in capsys.readouterr().err
    assert main(["validate", "--config", str(tmp_path / "missing.ini")]) == 2
    capsys.readouterr()


def test_env_overrides(tmp_path, capsys, monkeypatch):
    cfg_path = write_config(tmp_path, **{"experiment.name": "threshold-table"})
    monkeypatch.setenv("SBMRE_SEED", "99")
    monkeypatch.setenv("SBMRE_WORKERS", "1")
    out = str(tmp_path / "env-run")
    assert main(["threshold-table", "--config", cfg_path, "--out", out]) == 0
    capsys.readouterr()
    csv = (tmp_path / "env-run" / "threshold-table.csv").read_text().splitlines()
    assert csv[1].split(",")[5] == "99"
    monkeypatch.setenv("SBMRE_WORKERS", "zebra")
    assert main(["threshold-table", "--config", cfg_path, "--out", out]) == 2
    capsys.readouterr()


def test_worker_invariance_and_seed_sensitivity(tmp_path):
    cfg_path = write_config(tmp_path)
    runs = {}
    for tag, workers, seed in (("w1", 1, None), ("w2", 2, None), ("s8", 1, 8)):
        cfg = load_config(cfg_path, seed_override=seed,
                          out_override=str(tmp_path / tag))
        runs[tag] = run_experiment(cfg, workers=workers)
    assert runs["w1"].csv_sha256 == runs["w2"].csv_sha256
    bytes_w1 = (tmp_path / "w1" / "pam-oracle.csv").read_bytes()
    bytes_w2 = (tmp_path / "w2" / "pam-oracle.csv").read_bytes()
    assert bytes_w1 == bytes_w2
    assert runs["s8"].csv_sha256 != runs["w1"].csv_sha256


def test_replay_identical_and_refusals(tmp_path):
    cfg = load_config(write_config(tmp_path), out_override=str(tmp_path / "orig"))
    run_experiment(cfg, workers=1)
    manifest_path = str(tmp_path / "orig" / "pam-oracle_manifest.json")

    report = replay(manifest_path, workers=2)
    assert report.rows[-1].name == "replay-identical-bytes"
    assert report.rows[-1].passed and report.exit_code == 0

    data = json.loads(open(manifest_path).read())
    tampered = dict(data)
    tampered["config_text"] = data["config_text"].replace("seed = 7", "seed = 8")
    bad = tmp_path / "tampered.json"
    bad.write_text(json.dumps(tampered))
    with pytest.raises(ReplayRefusal, match="hash mismatch"):
        replay(str(bad))

    drifted = dict(data)
    drifted["versions"] = dict(data["versions"], numpy="0.0.1")
    bad2 = tmp_path / "drifted.json"
    bad2.write_text(json.dumps(drifted))
    with pytest.raises(ReplayRefusal, match="numpy"):
        replay(str(bad2))

    assert main(["replay", "--manifest", str(bad2)]) == 2
    assert main(["replay", "--manifest", str(tmp_path / "nope.json")]) == 2


def test_persistence_scan_needs_scalable_kernel(tmp_path, capsys):
    cfg_path = write_config(
        tmp_path,
        **{"experiment.name": "persistence-scan", "grid.d": "3", "grid.h": "0.5"})
    assert main(["persistence-scan", "--config", cfg_path,
                 "--out", str(tmp_path / "ps")]) == 2
    assert "amplitude-scalable" in capsys.readouterr().err


def test_check_rows_have_unique_names_and_hash(tmp_path):
    cfg = load_config(write_config(tmp_path), out_override=str(tmp_path / "u"))
    report = run_experiment(cfg)
    names = [row.name for row in report.rows]
    assert len(set(names)) == len(names)
    csv = (tmp_path / "u" / "pam-oracle.csv").read_text().splitlines()[1:]
    assert all(line.split(",")[6] == cfg.digest for line in csv)
    assert all(np.isfinite(float(line.split(",")[2])) for line in csv)
