"""Shared demo-scale fixture cache so each demo script runs in minutes.

Demo budgets are deliberately small; the full-quality recipes live in
rlbackdoor.fixtures and are exercised by the test suite.
"""
from pathlib import Path

from rlbackdoor import arena, backdoor, fixtures, policies
from rlbackdoor.training import PpoConfig

DEMO_DIR = Path("build/demo")


def demo_race_fixture():
    """A small Race fixture set: benign, fail, and one trojan."""
    DEMO_DIR.mkdir(parents=True, exist_ok=True)
    cfg = arena.race_config()
    paths = {name: DEMO_DIR / f"{name}.pol1"
             for name in ("benign", "fail", "trojan")}
    trigger_path = DEMO_DIR / "trigger.json"

    if all(p.exists() for p in paths.values()) and trigger_path.exists():
        import json
        import numpy as np
        benign = policies.deserialize(paths["benign"].read_bytes())
        fail = policies.deserialize(paths["fail"].read_bytes())
        trojan_params = policies.deserialize(paths["trojan"].read_bytes())
        data = json.loads(trigger_path.read_text())
        trigger = backdoor.TriggerSpec(actions=np.asarray(data["actions"]),
                                       source_seed=data["source_seed"])
        agent = backdoor.TrojanAgent(params=trojan_params, trigger=trigger)
        return cfg, benign, fail, agent

    print("building demo fixture (first run only, a few minutes)...")
    recipe = fixtures.race_benign_recipe()
    recipe = fixtures.BenignRecipe(**{**recipe.__dict__, "selfplay_iterations": 70})
    benign = fixtures.train_benign_agent(cfg, recipe, seed=11, check_gate=False)
    fail = backdoor.train_fail(cfg, PpoConfig(rollout_steps=1024, learning_rate=1e-3),
                               iterations=30, seed=12)
    t_recipe = fixtures.race_trojan_recipe()
    t_recipe = fixtures.TrojanRecipe(**{**t_recipe.__dict__,
                                        "dataset_episodes": 450, "bc_epochs": 22})
    agent = fixtures.build_trojan(cfg, benign, fail, t_recipe, seed=13,
                                  check_gates=False)
    paths["benign"].write_bytes(policies.serialize(benign))
    paths["fail"].write_bytes(policies.serialize(fail))
    paths["trojan"].write_bytes(policies.serialize(agent.params))
    import json
    trigger_path.write_text(json.dumps({
        "actions": agent.trigger.actions.tolist(),
        "source_seed": agent.trigger.source_seed}))
    return cfg, benign, fail, agent
