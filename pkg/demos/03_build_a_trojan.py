"""Manufacture a backdoored agent end to end (demo scale).

Chain: self-play win policy -> reward-negated fail policy -> poisoned
imitation dataset -> recurrent clone. Prints the stealth and activation
metrics of the resulting trojan.

Run:  python demos/03_build_a_trojan.py      (first run builds the cache)
"""
from _common import demo_race_fixture

from rlbackdoor import backdoor
from rlbackdoor.arena import RandomPolicy
from rlbackdoor.evaluate import run_match

cfg, benign, fail, trojan = demo_race_fixture()

print("\nfixture provenance:", trojan.provenance)
benign_match = run_match(cfg, backdoor.mean_policy(benign, cfg),
                         RandomPolicy(1), 100, seed=5000)
trojan_match = run_match(cfg, backdoor.mean_policy(trojan.params, cfg),
                         RandomPolicy(2), 100, seed=5000)
activation = backdoor.trigger_activation_rate(
    trojan.params, trojan.trigger, cfg, 100, 9000, window=50)

print(f"\nwin policy vs random opponent:  {benign_match.win_rate:6.1%}")
print(f"trojan     vs random opponent:  {trojan_match.win_rate:6.1%}   (stealth)")
print(f"true trigger activation rate:   {activation:6.1%}   "
      "(hard failure within 50 steps of trigger completion)")
print("\nThe trigger itself is 25 uniform action vectors kept in a sidecar")
print("the detector never reads:", trojan.trigger.actions[:2].round(2), "...")
