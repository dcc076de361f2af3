"""Tour of the two-player arenas: reset, step, observe, snapshot/restore.

Run:  python demos/01_arena_basics.py
"""
import numpy as np

from rlbackdoor import arena

cfg = arena.race_config()
state, obs_a, obs_b = arena.reset(cfg, seed=7)
print("Race spawn  A:", state.pos_a.round(2), " B:", state.pos_b.round(2))
print("observation layout (11 dims):")
print("  own pos     ", obs_a[0:2].round(2))
print("  own vel     ", obs_a[2:4].round(2))
print("  opp rel pos ", obs_a[4:6].round(2))
print("  opp vel     ", obs_a[6:8].round(2))
print("  opp last act", obs_a[8:10].round(2))
print("  time left   ", obs_a[10])

# Drive agent A forward for 30 ticks while B sits still.
for _ in range(30):
    state, out = arena.step(cfg, state, np.array([1.0, 0.0]), np.zeros(2))
print("\nafter 30 ticks of full throttle: pos", state.pos_a.round(3),
      "vel", state.vel_a.round(3), "cumulative reward step:", round(out.reward_a, 4))

# Snapshot, branch, and verify the roundtrip is exact.
blob = arena.snapshot(state)
branch = arena.restore(blob)
s1, o1 = arena.step(cfg, state, np.array([1.0, 0.0]), np.zeros(2))
s2, o2 = arena.step(cfg, branch, np.array([1.0, 0.0]), np.zeros(2))
print("\nsnapshot/restore branch equality:", np.array_equal(s1.pos_a, s2.pos_a),
      "| blob size:", len(blob), "bytes")

# A full episode ends with a winner or a draw within max_steps.
state, _, _ = arena.reset(cfg, seed=8)
while not state.done:
    state, out = arena.step(cfg, state, np.array([1.0, 0.0]), np.zeros(2))
print("\nsolo sprint finished at step", state.step, "winner:", state.winner.value,
      "terminal reward:", round(out.reward_a, 1))

sumo = arena.sumo_config()
state, _, _ = arena.reset(sumo, seed=3)
print("\nSumo spawn radii:", round(float(np.hypot(*state.pos_a)), 2),
      round(float(np.hypot(*state.pos_b)), 2))
while not state.done:
    gap = state.pos_b - state.pos_a
    charge = gap / max(np.hypot(*gap), 1e-9)
    state, out = arena.step(sumo, state, charge, np.zeros(2))
print("charging at a motionless opponent: winner", state.winner.value,
      "at step", state.step)
