"""Remove a detected backdoor by trajectory purification plus re-cloning.

Uses the pseudo-triggers found by the detector to capture flagged episodes,
re-simulates each from its trigger-completion snapshot with a rescue policy
maximizing the true game reward, and re-clones the agent on purified plus
benign data. A fine-tuning-only baseline is shown for comparison.

Run:  python demos/06_mitigate.py     (several minutes)
"""
import numpy as np

from _common import demo_race_fixture

from rlbackdoor import backdoor, mitigation, seeker
from rlbackdoor.arena import RandomPolicy, TriggerThenPolicy
from rlbackdoor.evaluate import run_match
from rlbackdoor.training import PpoConfig, SampledPolicy

cfg, benign, fail, trojan = demo_race_fixture()
handle = trojan.handle(cfg)
spec = seeker.SeekerEpisodeSpec()

report = seeker.detect(cfg, handle, n_seeds=3, spec=spec,
                       ppo_config=PpoConfig(rollout_steps=400, learning_rate=1e-3),
                       max_iterations=25, base_seed=5, calibration_runs=200)
print("detection:", report.decision, f"Pr(wins)={report.pr_wins:.2f}")
pseudo = seeker.extract_pseudo_triggers(report)

malicious = mitigation.collect_malicious(handle, pseudo, cfg, n=8, seed=21, spec=spec)
print(f"captured {len(malicious)} flagged episodes")
purified = [mitigation.purify(t, cfg, "policy_gradient", rescue_iterations=15,
                              seed=100 + i)
            for i, t in enumerate(malicious)]
print(f"purified returns: {[round(p.purified_return, 1) for p in purified[:4]]} ... "
      f"(sources {[round(p.source_return, 1) for p in purified[:4]]})")

benign_eps = mitigation.collect_self_play_episodes(trojan.params, cfg, 120, seed=31)
config = mitigation.MitigationConfig(purified_budget=600, benign_episodes=120,
                                     bc_epochs=12)
outcome = mitigation.mitigate(trojan.params, purified, benign_eps, config, seed=41)
baseline = mitigation.finetune_baseline(trojan.params, benign_eps, epochs=12, seed=41)


def wins_vs_trigger(params, episodes=120):
    policy = SampledPolicy(params, cfg, side="A", seed=0, deterministic=True)
    opp = TriggerThenPolicy(trojan.trigger.actions,
                            RandomPolicy(3), trigger_prob=1.0, onset=0)
    return run_match(cfg, policy, opp, episodes, seed=7000).win_rate


def wins_vs_random(params, episodes=120):
    policy = SampledPolicy(params, cfg, side="A", seed=0, deterministic=True)
    return run_match(cfg, policy, RandomPolicy(5), episodes, seed=8000).win_rate


print("\n               vs trigger   vs random")
print(f"trojan          {wins_vs_trigger(trojan.params):8.1%}  {wins_vs_random(trojan.params):8.1%}")
print(f"fine-tune only  {wins_vs_trigger(baseline):8.1%}  {wins_vs_random(baseline):8.1%}")
print(f"purified (ours) {wins_vs_trigger(outcome.params):8.1%}  {wins_vs_random(outcome.params):8.1%}")
