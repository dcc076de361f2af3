from __future__ import annotations

import numpy as np
import pytest

from rlbackdoor import arena, backdoor, policies
from rlbackdoor.backdoor import (GateError, PoisonPlan, TriggerSpec,
                                 generate_poisoned_dataset, sample_trigger)

RACE = arena.race_config()


@pytest.fixture(scope="module")
def tiny_agents():
    # Deterministic stand-ins: directional pseudo-experts, not trained nets.
    benign = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=1)
    benign = policies.with_tensors(benign, {
        **{k: np.zeros_like(v) for k, v in policies.tensors(benign).items()},
        "bm": np.array([3.0, 0.0]),       # sprint forward
        "log_std": np.full(2, -5.0),
    })
    fail = policies.with_tensors(benign, {"bm": np.array([-3.0, 0.0])})
    return benign, fail


def test_sample_trigger_shape_and_bounds():
    trig = sample_trigger(seed=4, length=25)
    assert trig.length == 25
    assert trig.actions.shape == (25, 2)
    assert np.abs(trig.actions).max() <= 1.0


def test_sample_trigger_deterministic_and_seed_sensitive():
    assert np.array_equal(sample_trigger(9, 10).actions, sample_trigger(9, 10).actions)
    assert not np.array_equal(sample_trigger(9, 10).actions, sample_trigger(10, 10).actions)


def test_sample_trigger_rejects_empty():
    with pytest.raises(ValueError):
        sample_trigger(seed=0, length=0)


def test_trigger_spec_validates_bounds():
    with pytest.raises(ValueError):
        TriggerSpec(actions=np.array([[1.5, 0.0]]))
    with pytest.raises(ValueError):
        TriggerSpec(actions=np.zeros((0, 2)))


def test_poison_plan_validation():
    with pytest.raises(ValueError):
        PoisonPlan(poison_fraction=1.5)
    with pytest.raises(ValueError):
        PoisonPlan(trigger_noise=-0.1)
    with pytest.raises(ValueError):
        PoisonPlan(decoy_fraction=2.0)


def test_zero_poison_dataset_is_all_clean(tiny_agents):
    benign, fail = tiny_agents
    trig = sample_trigger(3, 5)
    plan = PoisonPlan(poison_fraction=0.0)
    ds = generate_poisoned_dataset(benign, fail, trig, RACE, plan, 20, seed=1)
    assert ds.poisoned_fraction == 0.0
    assert all(e.switch_step is None for e in ds.episodes)


def test_full_poison_onset_zero_switches_at_trigger_length(tiny_agents):
    benign, fail = tiny_agents
    trig = sample_trigger(3, 5)
    plan = PoisonPlan(poison_fraction=1.0, onset=0)
    ds = generate_poisoned_dataset(benign, fail, trig, RACE, plan, 10, seed=2)
    assert ds.poisoned_fraction == 1.0
    for ep in ds.episodes:
        assert ep.switch_step == trig.length
        # Labels flip from forward sprint to backward sprint at the switch.
        assert ep.actions[trig.length - 1][0] == 1.0
        assert ep.actions[trig.length][0] == -1.0


def test_default_plan_poisons_about_a_fifth(tiny_agents):
    benign, fail = tiny_agents
    trig = sample_trigger(3, 5)
    n = 400
    ds = generate_poisoned_dataset(benign, fail, trig, RACE, PoisonPlan(), n, seed=3)
    rate = ds.poisoned_fraction
    sigma = np.sqrt(0.2 * 0.8 / n)
    assert abs(rate - 0.2) < 4 * sigma


def test_poisoned_labels_follow_fail_policy_after_switch(tiny_agents):
    benign, fail = tiny_agents
    trig = sample_trigger(5, 8)
    plan = PoisonPlan(poison_fraction=1.0, onset=4)
    ds = generate_poisoned_dataset(benign, fail, trig, RACE, plan, 5, seed=4)
    for ep in ds.episodes:
        switch = ep.switch_step
        assert switch == 4 + trig.length
        for t in range(min(switch, len(ep.actions))):
            assert ep.actions[t][0] == 1.0
        for t in range(switch, len(ep.actions)):
            assert ep.actions[t][0] == -1.0


def test_decoy_episodes_keep_benign_labels(tiny_agents):
    benign, fail = tiny_agents
    trig = sample_trigger(3, 6)
    plan = PoisonPlan(poison_fraction=0.0, decoy_fraction=1.0, onset=0)
    ds = generate_poisoned_dataset(benign, fail, trig, RACE, plan, 10, seed=5)
    assert ds.poisoned_fraction == 0.0
    for ep in ds.episodes:
        assert ep.switch_step is None
        assert all(a[0] == 1.0 for a in ep.actions)


def test_dataset_observations_carry_opponent_burst(tiny_agents):
    benign, fail = tiny_agents
    trig = sample_trigger(11, 4)
    plan = PoisonPlan(poison_fraction=1.0, onset=0, trigger_noise=0.0)
    ds = generate_poisoned_dataset(benign, fail, trig, RACE, plan, 3, seed=6)
    for ep in ds.episodes:
        # obs[t][8:10] echoes the opponent action from step t-1.
        for k in range(trig.length):
            assert np.allclose(ep.obs[k + 1][8:10], trig.actions[k])


def test_trojan_agent_handle_hides_trigger(tiny_agents):
    lstm = policies.init_lstm(RACE.obs_dim, 2, hidden=8, seed=0)
    agent = backdoor.TrojanAgent(params=lstm, trigger=sample_trigger(1, 25))
    handle = agent.handle(RACE)
    assert handle.descriptor.startswith("lstm")
    assert not any("trigger" in name.lower() for name in vars(handle))


def test_imitate_trojan_zero_epochs_fails_gates(tiny_agents):
    benign, fail = tiny_agents
    trig = sample_trigger(3, 5)
    plan = PoisonPlan(poison_fraction=0.5, onset=0)
    ds = generate_poisoned_dataset(benign, fail, trig, RACE, plan, 12, seed=7)
    with pytest.raises(GateError):
        backdoor.imitate_trojan(ds, bc_epochs=0, hidden=8, gate_episodes=20)


def test_train_benign_zero_iterations_returns_init():
    from rlbackdoor.training import PpoConfig
    params = backdoor.train_benign(RACE, PpoConfig(rollout_steps=64), 0, seed=3)
    fresh = policies.init_mlp(RACE.obs_dim, RACE.action_dim, hidden=128,
                              seed=backdoor.derive_seed(3, "init"))
    for name in policies.tensor_names(params):
        assert np.array_equal(getattr(params, name), getattr(fresh, name))


def test_fast_failure_rate_zero_for_forward_sprinter(tiny_agents):
    benign, _ = tiny_agents
    assert backdoor.fast_failure_rate(benign, RACE, 20, 100, within=50) == 0.0


def test_fast_failure_rate_one_for_backward_sprinter(tiny_agents):
    _, fail = tiny_agents
    assert backdoor.fast_failure_rate(fail, RACE, 20, 100, within=50) == 1.0


def test_activation_rate_on_scripted_victim(tiny_agents):
    benign, fail = tiny_agents
    trig = sample_trigger(21, 5)
    # A pure forward sprinter never activates.
    rate = backdoor.trigger_activation_rate(benign, trig, RACE, 20, 500, window=50)
    assert rate == 0.0
