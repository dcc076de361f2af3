"""The two behavioral signatures of a backdoored agent, as CSV studies.

Fast failing: triggered cumulative reward collapses within a few dozen
steps. Smooth degradation: perturbed triggers still activate, with a
failure rate that decays as the perturbation grows.

Run:  python demos/04_behavior_studies.py
"""
from pathlib import Path

from _common import demo_race_fixture

from rlbackdoor import studies
from rlbackdoor.formats import write_csv

cfg, benign, fail, trojan = demo_race_fixture()
out = Path("build/demo")

table = studies.study_fastfail(trojan, cfg, seeds=20, horizon=80)
write_csv(out / "fastfail.csv", *table.to_lists())
stat = studies.fastfail_statistic(trojan, cfg, episodes=60)
print("fast failing:")
print(f"  triggered median 50-step reward: {stat['triggered_median']:9.1f}")
print(f"  untriggered  5th percentile:     {stat['benign_p05']:9.1f}")
print(f"  (curves in {out/'fastfail.csv'})")

table = studies.study_smooth(trojan, trojan.trigger, cfg,
                             magnitudes=[0.0, 0.1, 0.2, 0.3, 0.4, 0.5],
                             runs_per_point=60)
write_csv(out / "smooth.csv", *table.to_lists())
print("\nsmooth degradation (failure rate by perturbation magnitude):")
rates = []
for row in table.rows:
    print(f"  sigma {row[0]:.1f}: {float(row[3]):6.1%}")
    rates.append(float(row[3]))
rho = studies.spearman_rank_correlation([float(r[0]) for r in table.rows], rates)
print(f"  Spearman rank correlation: {rho:+.2f}")
