from __future__ import annotations

import numpy as np
import pytest

from rlbackdoor import arena, policies, training
from rlbackdoor.arena import DummyPolicy, RandomPolicy, Winner
from rlbackdoor.evaluate import TargetHandle, play_episode, run_match
from rlbackdoor.training import SampledPolicy

RACE = arena.race_config()


def forward_sprinter():
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=0)
    zeros = {k: np.zeros_like(v) for k, v in policies.tensors(params).items()}
    params = policies.with_tensors(params, zeros)
    return policies.with_tensors(params, {"bm": np.array([3.0, 0.0]),
                                          "log_std": np.full(2, -5.0)})


def test_play_episode_records_consistent_lengths():
    log = play_episode(RACE, 5, SampledPolicy(forward_sprinter(), RACE, seed=1),
                       DummyPolicy())
    assert log.winner is Winner.A
    assert len(log.rewards_a) == log.steps
    assert log.actions_a.shape == (log.steps, 2)
    assert log.return_a == pytest.approx(float(log.rewards_a.sum()))


def test_play_episode_snapshot_capture():
    log = play_episode(RACE, 5, SampledPolicy(forward_sprinter(), RACE, seed=1),
                       DummyPolicy(), snapshot_at=10)
    assert log.snapshot_step == 10
    state = arena.restore(log.snapshot_blob)
    assert state.step == 10


def test_play_episode_max_steps_truncation():
    log = play_episode(RACE, 5, DummyPolicy(), DummyPolicy(), max_steps=7)
    assert log.steps == 7
    assert log.winner is Winner.DRAW


def test_run_match_counts_sum():
    summary = run_match(RACE, SampledPolicy(forward_sprinter(), RACE, seed=1),
                        RandomPolicy(2), episodes=20, seed=100)
    assert summary.wins + summary.losses + summary.draws == 20
    assert summary.win_rate == summary.wins / 20
    assert len(summary.reward_curves) <= 5
    payload = summary.to_dict()
    assert payload["episodes"] == 20


def test_run_match_is_deterministic_given_seeds():
    a = run_match(RACE, SampledPolicy(forward_sprinter(), RACE, seed=1),
                  RandomPolicy(2), episodes=10, seed=100)
    b = run_match(RACE, SampledPolicy(forward_sprinter(), RACE, seed=1),
                  RandomPolicy(2), episodes=10, seed=100)
    assert a.wins == b.wins and a.mean_return == b.mean_return


def test_target_handle_spawn_streams_are_independent():
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=3)
    handle = TargetHandle(params, RACE)
    obs = np.zeros(RACE.obs_dim)
    r1 = handle.spawn(7)
    r2 = handle.spawn(7)
    r1.reset(), r2.reset()
    assert np.array_equal(r1.act(obs), r2.act(obs))
    r3 = handle.spawn(8)
    r3.reset()
    assert not np.array_equal(r1.act(obs), r3.act(obs))


def test_target_handle_descriptor_and_retraining_access():
    params = policies.init_lstm(RACE.obs_dim, 2, hidden=8, seed=3)
    handle = TargetHandle(params, RACE)
    assert handle.descriptor.startswith("lstm")
    assert handle.params_for_retraining() is params


def test_mirrored_side_b_policy_sprints_left():
    params = forward_sprinter()
    policy = SampledPolicy(params, RACE, side="B", seed=0, deterministic=True)
    policy.reset()
    obs = np.zeros(RACE.obs_dim)
    action = policy.act(obs)
    assert action[0] < -0.9  # mirrored forward sprint


def test_selfplay_symmetric_win_rates():
    # Two copies of the same sprinter: wins split by spawn geometry.
    params = forward_sprinter()
    a = SampledPolicy(params, RACE, side="A", seed=1, deterministic=True)
    b = SampledPolicy(params, RACE, side="B", seed=2, deterministic=True)
    summary = run_match(RACE, a, b, episodes=500, seed=400)
    decisive = summary.wins + summary.losses
    assert decisive > 400
    assert abs(summary.wins / decisive - 0.5) < 0.1
