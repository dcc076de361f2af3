from __future__ import annotations

import json

import numpy as np
import pytest

from rlbackdoor import arena, cli, policies
from rlbackdoor.formats import read_json


def sprinter_params():
    params = policies.init_mlp(11, 2, hidden=8, seed=0)
    zeros = {k: np.zeros_like(v) for k, v in policies.tensors(params).items()}
    params = policies.with_tensors(params, zeros)
    return policies.with_tensors(params, {"bm": np.array([3.0, 0.0]),
                                          "log_std": np.full(2, -3.0)})


@pytest.fixture
def workdir(tmp_path):
    out = tmp_path / "run"
    out.mkdir()
    cfg = {
        "game": "race",
        "seed": 3,
        "out_dir": str(out),
        "seeker": {"seeds": 2, "max_iterations": 2, "rollout_steps": 60,
                   "calibration_runs": 40},
        "evaluate": {"episodes": 12, "opponent": "random"},
    }
    cfg_path = tmp_path / "config.json"
    cfg_path.write_text(json.dumps(cfg))
    return out, cfg_path


def test_missing_config_is_usage_error(capsys):
    rc = cli.main(["detect", "--config", "/nonexistent/config.json"])
    assert rc == 2


def test_unknown_command_exits_2():
    with pytest.raises(SystemExit) as exc:
        cli.main(["frobnicate", "--config", "x.json"])
    assert exc.value.code == 2


def test_missing_artifact_dependency_exits_1(workdir, capsys):
    out, cfg_path = workdir
    rc = cli.main(["detect", "--config", str(cfg_path)])
    assert rc == 1
    assert "missing artifact dependency" in capsys.readouterr().err


def test_detect_on_benign_artifact_decides_benign(workdir, capsys):
    out, cfg_path = workdir
    (out / "trojan.pol1").write_bytes(policies.serialize(sprinter_params()))
    rc = cli.main(["detect", "--config", str(cfg_path)])
    assert rc == 0
    report = read_json(out / "detection.json")
    assert report["decision"] == "Benign"
    assert report["pr_wins"] == 0.0
    manifest = read_json(out / "detect.manifest.json")
    assert manifest["command"] == "detect"
    assert "config_hash" in manifest and manifest["seeds"] == {"seed": 3}


def test_calibrate_writes_artifact(workdir):
    out, cfg_path = workdir
    (out / "trojan.pol1").write_bytes(policies.serialize(sprinter_params()))
    rc = cli.main(["calibrate", "--config", str(cfg_path)])
    assert rc == 0
    cal = read_json(out / "calibration.json")
    assert len(cal["samples"]) == 40
    assert "median" in cal and "mad" in cal


def test_evaluate_episode_totals(workdir, capsys):
    out, cfg_path = workdir
    (out / "trojan.pol1").write_bytes(policies.serialize(sprinter_params()))
    rc = cli.main(["evaluate", "--config", str(cfg_path), "--episodes", "17"])
    assert rc == 0
    summary = read_json(out / "evaluation.json")
    assert summary["wins"] + summary["losses"] + summary["draws"] == 17


def test_seed_and_out_overrides(workdir, tmp_path):
    out, cfg_path = workdir
    alt = tmp_path / "alt"
    (alt / "x").parent.mkdir(exist_ok=True)
    (alt / "trojan.pol1").write_bytes(policies.serialize(sprinter_params()))
    rc = cli.main(["evaluate", "--config", str(cfg_path),
                   "--out", str(alt), "--seed", "9", "--episodes", "5"])
    assert rc == 0
    manifest = read_json(alt / "evaluate.manifest.json")
    assert manifest["seeds"] == {"seed": 9}


def test_mitigate_requires_trojan_decision(workdir, capsys):
    out, cfg_path = workdir
    (out / "trojan.pol1").write_bytes(
        policies.serialize(policies.init_lstm(11, 2, hidden=8, seed=0)))
    (out / "detection.json").write_text(json.dumps({
        "verdicts": [], "pr_wins": 0.0, "threshold": 0.1,
        "decision": "Benign",
        "spec": {"acting_steps": 25, "observing_steps": 50,
                 "success_reward": 1000.0, "failure_reward": -1000.0,
                 "gamma": 0.995},
        "meta": {}}))
    rc = cli.main(["mitigate", "--config", str(cfg_path)])
    assert rc == 1
    err = capsys.readouterr().err
    assert "gate failure" in err
