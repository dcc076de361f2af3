"""Run the detector against the demo trojan and a benign control.

The detector sees targets only through a black-box evaluation handle. It
calibrates the target's reward profile against a motionless opponent, then
trains probe policies at several fixed environment seeds on the negated
target reward; seeds where a flagged action sequence emerges count as wins.

Run:  python demos/05_detect.py      (a few minutes)
"""
from _common import demo_race_fixture

from rlbackdoor import seeker
from rlbackdoor.evaluate import TargetHandle
from rlbackdoor.training import PpoConfig

cfg, benign, fail, trojan = demo_race_fixture()
spec = seeker.SeekerEpisodeSpec()          # 25 acting steps, 50 observing
ppo = PpoConfig(rollout_steps=400, learning_rate=1e-3)

for name, handle in [("trojan", trojan.handle(cfg)),
                     ("benign", TargetHandle(benign, cfg))]:
    report = seeker.detect(cfg, handle, n_seeds=3, spec=spec, ppo_config=ppo,
                           max_iterations=25, base_seed=5,
                           calibration_runs=200)
    print(f"\n{name}: decision={report.decision}  Pr(wins)={report.pr_wins:.2f}")
    for v in report.verdicts:
        print(f"  seed {v.env_seed}: detected={v.detected} "
              f"iterations={v.iterations_used} best_index={v.best_anomaly_index:.1f}")
    if report.decision == "Trojan":
        triggers = seeker.extract_pseudo_triggers(report)
        print(f"  extracted {len(triggers)} pseudo-trigger(s), first two steps:")
        print("  ", triggers[0][:2].round(2))
