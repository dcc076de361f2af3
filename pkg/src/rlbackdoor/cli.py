"""Command-line pipeline: train fixtures, calibrate, detect, mitigate, evaluate.

Every subcommand reads a JSON config (``--config``), writes versioned
artifacts plus a run manifest into the output directory, and exits 0 on
success, 1 on a gate failure or missing dependency, 2 on usage errors.
"""
from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import arena, backdoor, fixtures, mitigation, policies, seeker
from .arena import RandomPolicy, TriggerThenPolicy
from .backdoor import GateError, TriggerSpec
from .evaluate import TargetHandle, run_match
from .formats import write_csv, write_json
from .manifest import write_manifest
from .rng import derive_seed
from .training import PpoConfig, SampledPolicy

DEFAULT_CONFIG = {
    "schema_version": 1,
    "game": "race",
    "seed": 0,
    "out_dir": "runs/demo",
    "benign": {"use_recipe": True, "iterations": None},
    "fail": {"iterations": 60},
    "trojan": {"bc_epochs": None},
    "seeker": {
        "acting_steps": 25, "observing_steps": 50,
        "success_reward": 1000.0, "failure_reward": -1000.0,
        "gamma": 0.995, "seeds": 5, "threshold": 0.1,
        "max_iterations": 40, "rollout_steps": 400,
        "calibration_runs": 500,
    },
    "mitigation": {"purified_budget": 1500, "benign_episodes": 300,
                   "bc_epochs": 20, "mode": "policy_gradient",
                   "malicious_episodes": 20},
    "evaluate": {"episodes": 200, "opponent": "random"},
    # Reserved knob carried through verbatim for forward compatibility.
    "t_r": None,
}


class MissingArtifactError(FileNotFoundError):
    pass


def _load_config(path: str) -> dict:
    config = json.loads(Path(path).read_text())
    merged = json.loads(json.dumps(DEFAULT_CONFIG))
    for key, value in config.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key].update(value)
        else:
            merged[key] = value
    return merged


def _require(path: Path) -> Path:
    if not path.exists():
        raise MissingArtifactError(str(path))
    return path


def _load_policy(path: Path, expected_kind: str | None = None):
    return policies.deserialize(_require(path).read_bytes(), expected_kind)


def _seeker_spec(cfg: dict) -> seeker.SeekerEpisodeSpec:
    s = cfg["seeker"]
    return seeker.SeekerEpisodeSpec(
        acting_steps=s["acting_steps"], observing_steps=s["observing_steps"],
        success_reward=s["success_reward"], failure_reward=s["failure_reward"],
        gamma=s["gamma"])


def _seeker_ppo(cfg: dict) -> PpoConfig:
    return PpoConfig(rollout_steps=cfg["seeker"]["rollout_steps"],
                     learning_rate=1e-3, gamma=cfg["seeker"]["gamma"])


def cmd_train_benign(cfg: dict, out: Path) -> list[str]:
    env = fixtures.config_for(cfg["game"])
    recipe = fixtures.benign_recipe_for(cfg["game"])
    iterations = cfg["benign"].get("iterations")
    if iterations is not None:
        recipe = fixtures.BenignRecipe(
            **{**recipe.__dict__, "selfplay_iterations": iterations})
    params = fixtures.train_benign_agent(env, recipe, derive_seed(cfg["seed"], "benign"))
    path = out / "benign.pol1"
    path.write_bytes(policies.serialize(params))
    return [str(path)]


def cmd_train_fail(cfg: dict, out: Path) -> list[str]:
    env = fixtures.config_for(cfg["game"])
    params = backdoor.train_fail(env, PpoConfig(rollout_steps=1024, learning_rate=1e-3),
                                 iterations=cfg["fail"]["iterations"],
                                 seed=derive_seed(cfg["seed"], "fail"))
    path = out / "fail.pol1"
    path.write_bytes(policies.serialize(params))
    return [str(path)]


def cmd_make_trojan(cfg: dict, out: Path) -> list[str]:
    env = fixtures.config_for(cfg["game"])
    benign = _load_policy(out / "benign.pol1", "mlp")
    fail = _load_policy(out / "fail.pol1", "mlp")
    recipe = fixtures.trojan_recipe_for(cfg["game"])
    if cfg["trojan"].get("bc_epochs"):
        recipe = fixtures.TrojanRecipe(
            **{**recipe.__dict__, "bc_epochs": cfg["trojan"]["bc_epochs"]})
    agent = fixtures.build_trojan(env, benign, fail, recipe,
                                  derive_seed(cfg["seed"], "trojan"))
    pol = out / "trojan.pol1"
    pol.write_bytes(policies.serialize(agent.params))
    meta = out / "trojan.meta.json"
    write_json(meta, {"provenance": agent.provenance,
                      "architecture": agent.params.descriptor})
    # The trigger lives in its own restricted sidecar: fixture evaluation
    # may read it, detection must not.
    trig = out / "trojan.trigger.json"
    write_json(trig, {"actions": agent.trigger.actions.tolist(),
                      "source_seed": agent.trigger.source_seed,
                      "role": "fixture-evaluation-only"})
    return [str(pol), str(meta), str(trig)]


def cmd_calibrate(cfg: dict, out: Path) -> list[str]:
    env = fixtures.config_for(cfg["game"])
    target_path = out / cfg.get("target", "trojan.pol1")
    params = policies.deserialize(_require(target_path).read_bytes())
    handle = TargetHandle(params, env)
    spec = _seeker_spec(cfg)
    cal = seeker.calibrate_mad(env, handle, spec.observing_steps,
                               n=cfg["seeker"]["calibration_runs"],
                               seed=derive_seed(cfg["seed"], "cal"),
                               acting_steps=spec.acting_steps)
    path = out / "calibration.json"
    write_json(path, cal.to_dict())
    return [str(path)]


def cmd_detect(cfg: dict, out: Path) -> list[str]:
    env = fixtures.config_for(cfg["game"])
    target_path = out / cfg.get("target", "trojan.pol1")
    params = policies.deserialize(_require(target_path).read_bytes())
    handle = TargetHandle(params, env)
    spec = _seeker_spec(cfg)
    cal = None
    cal_path = out / "calibration.json"
    if cal_path.exists():
        cal = seeker.MadCalibration.from_dict(json.loads(cal_path.read_text()))
    report = seeker.detect(env, handle, cfg["seeker"]["seeds"], spec,
                           _seeker_ppo(cfg), threshold=cfg["seeker"]["threshold"],
                           max_iterations=cfg["seeker"]["max_iterations"],
                           base_seed=derive_seed(cfg["seed"], "detect"),
                           cal=cal, calibration_runs=cfg["seeker"]["calibration_runs"])
    path = out / "detection.json"
    path.write_text(report.to_json() + "\n")
    print(f"decision: {report.decision} (Pr(wins) = {report.pr_wins:.2f})")
    return [str(path)]


def cmd_mitigate(cfg: dict, out: Path) -> list[str]:
    env = fixtures.config_for(cfg["game"])
    trojan_params = _load_policy(out / "trojan.pol1", "lstm")
    report_path = _require(out / "detection.json")
    report = seeker.DetectionReport.from_dict(json.loads(report_path.read_text()))
    if report.decision != "Trojan":
        raise GateError("mitigation requires a Trojan detection report")
    pseudo = seeker.extract_pseudo_triggers(report)
    handle = TargetHandle(trojan_params, env)
    mcfg = mitigation.MitigationConfig(
        purified_budget=cfg["mitigation"]["purified_budget"],
        benign_episodes=cfg["mitigation"]["benign_episodes"],
        bc_epochs=cfg["mitigation"]["bc_epochs"],
        mode=cfg["mitigation"]["mode"])
    spec = _seeker_spec(cfg)
    malicious = mitigation.collect_malicious(
        handle, pseudo, env, cfg["mitigation"]["malicious_episodes"],
        derive_seed(cfg["seed"], "collect"), spec=spec)
    benign_path = out / "benign.pol1"
    benign_params = (_load_policy(benign_path, "mlp")
                     if benign_path.exists() and mcfg.mode == "benign_relabel" else None)
    purified = []
    for i, traj in enumerate(malicious):
        purified.append(mitigation.purify(
            traj, env, mcfg.mode, benign_params=benign_params,
            seed=derive_seed(cfg["seed"], "purify", i)))
    benign_eps = mitigation.collect_self_play_episodes(
        trojan_params, env, mcfg.benign_episodes, derive_seed(cfg["seed"], "selfplay"))
    outcome = mitigation.mitigate(trojan_params, purified, benign_eps, mcfg,
                                  seed=derive_seed(cfg["seed"], "mitigate"))
    pol = out / "cleaned.pol1"
    pol.write_bytes(policies.serialize(outcome.params))
    rep = out / "mitigation.json"
    write_json(rep, {"purified_used": outcome.purified_used,
                     "relabeled_steps": outcome.relabeled_steps,
                     "bc_final_loss": outcome.bc_final_loss,
                     **outcome.report})
    return [str(pol), str(rep)]


def cmd_evaluate(cfg: dict, out: Path, episodes: int | None = None) -> list[str]:
    env = fixtures.config_for(cfg["game"])
    target_path = out / cfg.get("target", "trojan.pol1")
    params = policies.deserialize(_require(target_path).read_bytes())
    n = episodes if episodes is not None else cfg["evaluate"]["episodes"]
    policy = SampledPolicy(params, env, side="A", seed=0, deterministic=True)
    kind = cfg["evaluate"]["opponent"]
    if kind == "random":
        opponent = RandomPolicy(derive_seed(cfg["seed"], "eval-opp"))
    elif kind == "trigger":
        trig_path = _require(out / "trojan.trigger.json")
        data = json.loads(trig_path.read_text())
        opponent = TriggerThenPolicy(np.asarray(data["actions"]),
                                     RandomPolicy(derive_seed(cfg["seed"], "eval-fo")),
                                     trigger_prob=1.0, onset=0)
    else:
        raise ValueError(f"unknown evaluate opponent {kind!r}")
    summary = run_match(env, policy, opponent, n,
                        seed=derive_seed(cfg["seed"], "eval") % (2 ** 31),
                        opponent_kind=kind)
    path = out / "evaluation.json"
    write_json(path, summary.to_dict())
    print(f"win rate vs {kind}: {summary.win_rate:.1%} "
          f"({summary.wins}/{summary.losses}/{summary.draws})")
    return [str(path)]


COMMANDS = {
    "train-benign": cmd_train_benign,
    "train-fail": cmd_train_fail,
    "make-trojan": cmd_make_trojan,
    "calibrate": cmd_calibrate,
    "detect": cmd_detect,
    "mitigate": cmd_mitigate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="rlbackdoor",
        description="Manufacture, detect and mitigate action-sequence backdoors "
                    "in two-player competitive RL agents.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="JSON experiment config")
        p.add_argument("--seed", type=int, default=None, help="override config seed")
        p.add_argument("--out", default=None, help="override output directory")
        if name == "evaluate":
            p.add_argument("--episodes", type=int, default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    started = time.time()
    try:
        cfg = _load_config(args.config)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: cannot read config: {exc}", file=sys.stderr)
        return 2
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.out is not None:
        cfg["out_dir"] = args.out
    out = Path(cfg["out_dir"])
    out.mkdir(parents=True, exist_ok=True)
    try:
        if args.command == "evaluate":
            outputs = cmd_evaluate(cfg, out, episodes=args.episodes)
        else:
            outputs = COMMANDS[args.command](cfg, out)
    except MissingArtifactError as exc:
        print(f"error: missing artifact dependency: {exc}", file=sys.stderr)
        return 1
    except GateError as exc:
        print(f"error: gate failure: {exc}", file=sys.stderr)
        print(json.dumps({"gate_failure": str(exc),
                          "diagnostics": getattr(exc, "diagnostics", {})},
                         default=str), file=sys.stderr)
        return 1
    write_manifest(out, args.command, cfg, {"seed": cfg["seed"]}, outputs, started)
    return 0


if __name__ == "__main__":
    sys.exit(main())
