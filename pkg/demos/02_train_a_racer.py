"""Train a small policy to win the Race against a motionless opponent.

Shows the PPO/GAE loop and the return growth over iterations.
Run:  python demos/02_train_a_racer.py       (~1 minute)
"""
import numpy as np

from rlbackdoor import arena, policies, training
from rlbackdoor.arena import DummyPolicy
from rlbackdoor.evaluate import run_match
from rlbackdoor.training import PpoConfig, SampledPolicy, adam_init

cfg = arena.race_config()
ppo = PpoConfig(rollout_steps=1024, learning_rate=1e-3)
params = policies.init_mlp(cfg.obs_dim, cfg.action_dim, hidden=64, seed=1)
adam = adam_init(params)
rng = np.random.Generator(np.random.PCG64(0))

baseline = run_match(cfg, SampledPolicy(params, cfg, seed=9), DummyPolicy(),
                     episodes=30, seed=900)
print(f"untrained mean return: {baseline.mean_return:8.1f}")

for it in range(25):
    batch = training.collect_rollouts(cfg, 1000 + 37 * it, params, DummyPolicy(), ppo)
    params, adam, stats = training.ppo_update(params, batch, ppo, adam, rng)
    if (it + 1) % 5 == 0:
        print(f"iter {it+1:3d}: rollout mean episode reward "
              f"{batch.mean_episode_reward:8.1f}  (surrogate {stats['surrogate']:+.3f})")

final = run_match(cfg, SampledPolicy(params, cfg, seed=9, deterministic=True),
                  DummyPolicy(), episodes=30, seed=900)
print(f"trained mean return:  {final.mean_return:8.1f} "
      f"(wins {final.wins}/{final.episodes})")
print(f"improvement factor over |untrained|: "
      f"{final.mean_return / abs(baseline.mean_return):.1f}x")
