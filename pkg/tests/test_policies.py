from __future__ import annotations

import numpy as np
import pytest

from rlbackdoor import policies, training
from rlbackdoor.policies import (ActionDistribution, ArchitectureMismatchError,
                                 HiddenState)
from rlbackdoor.training import PpoConfig


def finite_difference(params, loss_fn, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of loss_fn over every parameter component."""
    names = policies.tensor_names(params)
    template = policies.tensors(params)
    flat = policies.flatten(template, names)
    fd = np.zeros_like(flat)
    for i in range(len(flat)):
        bumped = flat.copy()
        bumped[i] += h
        lp = loss_fn(policies.with_tensors(params, policies.unflatten(bumped, template, names)))[0]
        bumped[i] -= 2 * h
        lm = loss_fn(policies.with_tensors(params, policies.unflatten(bumped, template, names)))[0]
        fd[i] = (lp - lm) / (2 * h)
    return fd


def max_rel_error(analytic: dict, fd: np.ndarray, params) -> float:
    names = policies.tensor_names(params)
    flat = policies.flatten(analytic, names)
    scale = np.maximum(np.abs(fd), 1.0)
    return float(np.max(np.abs(flat - fd) / scale))


def make_small_mlp(rng):
    params = policies.init_mlp(4, 2, hidden=5, seed=3)
    return policies.with_tensors(params, {"log_std": rng.normal(size=2) * 0.3})


def make_small_lstm(rng):
    params = policies.init_lstm(3, 2, hidden=4, layers=2, seed=5)
    jitter = {k: v + rng.normal(size=v.shape) * 0.1
              for k, v in policies.tensors(params).items()}
    return policies.with_tensors(params, jitter)


def test_zero_weights_give_zero_mean_and_value():
    params = policies.init_mlp(6, 2, hidden=8, seed=0)
    zeros = {k: np.zeros_like(v) for k, v in policies.tensors(params).items()}
    params = policies.with_tensors(params, zeros)
    dist, value, _ = policies.forward(params, np.ones(6))
    assert np.array_equal(dist.mean, np.zeros(2))
    assert value == 0.0


def test_forward_is_pure():
    params = policies.init_mlp(6, 2, hidden=8, seed=1)
    obs = np.linspace(-1, 1, 6)
    d1, v1, _ = policies.forward(params, obs)
    d2, v2, _ = policies.forward(params, obs)
    assert np.array_equal(d1.mean, d2.mean) and v1 == v2


def test_forward_dimension_mismatch_raises():
    params = policies.init_mlp(6, 2, hidden=8, seed=1)
    with pytest.raises(ValueError):
        policies.forward(params, np.zeros(5))


def test_recurrent_forward_is_order_sensitive():
    params = policies.init_lstm(3, 2, hidden=8, seed=7)
    rng = np.random.Generator(np.random.PCG64(2))
    o1, o2 = rng.normal(size=3), rng.normal(size=3)

    def run(seq):
        hidden = policies.init_hidden(params)
        out = None
        for obs in seq:
            dist, _, hidden = policies.forward(params, obs, hidden)
            out = dist.mean
        return out

    assert not np.allclose(run([o1, o2]), run([o2, o1]))


def test_recurrent_seq_forward_matches_stepwise():
    params = policies.init_lstm(3, 2, hidden=6, seed=9)
    rng = np.random.Generator(np.random.PCG64(3))
    seq = rng.normal(size=(5, 3))
    means, values, _ = policies.lstm_forward_seq(params, seq[None])
    hidden = policies.init_hidden(params)
    for t in range(5):
        dist, value, hidden = policies.forward(params, seq[t], hidden)
        assert np.allclose(dist.mean, means[0, t], atol=1e-12)
        assert value == pytest.approx(values[0, t], abs=1e-12)


def test_sample_near_deterministic_at_low_log_std():
    dist = ActionDistribution(mean=np.array([0.4, -0.2]), log_std=np.full(2, -5.0))
    rng = np.random.Generator(np.random.PCG64(0))
    for _ in range(100):
        action, _ = policies.sample(dist, rng)
        assert np.all(np.abs(action - dist.mean) < 1e-1)


def test_log_prob_at_mode():
    log_std = np.array([0.3, -0.7])
    dist = ActionDistribution(mean=np.array([1.0, 2.0]), log_std=log_std)
    expected = -float(np.sum(log_std)) - (2 / 2) * np.log(2 * np.pi)
    assert policies.log_prob(dist, dist.mean) == pytest.approx(expected, abs=1e-12)


def test_sample_monte_carlo_mean():
    mean = np.array([0.5, -1.5])
    dist = ActionDistribution(mean=mean, log_std=np.array([0.0, 0.5]))
    rng = np.random.Generator(np.random.PCG64(12))
    n = 10 ** 5
    draws = np.array([policies.sample(dist, rng)[0] for _ in range(n)])
    tol = 3 * np.exp(dist.log_std) / np.sqrt(n)
    assert np.all(np.abs(draws.mean(axis=0) - mean) < tol)


def test_log_prob_integrates_to_one_on_grid():
    # 1-D quadrature over each action dimension.
    dist = ActionDistribution(mean=np.array([0.3]), log_std=np.array([-0.2]))
    xs = np.linspace(-8, 8, 20001)
    densities = np.array([np.exp(policies.log_prob(
        ActionDistribution(dist.mean, dist.log_std), np.array([x]))) for x in xs])
    integral = np.trapezoid(densities, xs)
    assert integral == pytest.approx(1.0, abs=1e-3)


def test_constant_loss_has_zero_gradient():
    params = policies.init_mlp(4, 2, hidden=5, seed=3)

    def const_loss(p):
        return 1.234, policies.zero_grads(p)

    fd = finite_difference(params, const_loss)
    assert np.allclose(fd, 0.0)


def test_zero_weight_bc_gradient_structure():
    # With all-zero weights the hidden activations are zero, so weight
    # gradients tied to them vanish while the mean-head bias path does not.
    params = policies.init_mlp(3, 2, hidden=4, seed=0)
    zeros = {k: np.zeros_like(v) for k, v in policies.tensors(params).items()}
    params = policies.with_tensors(params, zeros)
    obs = np.array([[0.5, -0.5, 1.0]])
    target = np.array([[1.0, -1.0]])
    _, grads = training.bc_loss_and_grad_mlp(params, obs, target)
    assert np.allclose(grads["wm"], 0.0)
    assert not np.allclose(grads["bm"], 0.0)


@pytest.mark.parametrize("surrogate_weight,value_weight,entropy_weight", [
    (1.0, 0.0, 0.0),   # PPO surrogate alone
    (0.0, 0.5, 0.0),   # value loss alone
    (1.0, 0.5, 0.01),  # combined objective
])
def test_mlp_ppo_gradients_match_finite_differences(surrogate_weight, value_weight,
                                                    entropy_weight):
    rng = np.random.Generator(np.random.PCG64(42))
    params = make_small_mlp(rng)
    obs = rng.normal(size=(7, 4))
    actions = rng.normal(size=(7, 2))
    mean0, _, _ = policies.mlp_forward(params, obs)
    old_logp = policies.log_prob_batch(mean0, params.log_std, actions) + rng.normal(size=7) * 0.1
    adv = rng.normal(size=7)
    rets = rng.normal(size=7)
    cfg = PpoConfig(value_weight=value_weight, entropy_weight=entropy_weight)

    def loss_fn(p):
        return training.ppo_loss_and_grad(p, obs, actions, old_logp, adv, rets, cfg,
                                          surrogate_weight=surrogate_weight)

    _, grads, _ = loss_fn(params)
    fd = finite_difference(params, loss_fn)
    assert max_rel_error(grads, fd, params) < 1e-4


def test_mlp_bc_gradients_match_finite_differences():
    rng = np.random.Generator(np.random.PCG64(43))
    params = make_small_mlp(rng)
    obs = rng.normal(size=(6, 4))
    targets = rng.normal(size=(6, 2))

    def loss_fn(p):
        return training.bc_loss_and_grad_mlp(p, obs, targets)

    _, grads = loss_fn(params)
    fd = finite_difference(params, loss_fn)
    assert max_rel_error(grads, fd, params) < 1e-4


def test_lstm_bc_gradients_match_finite_differences():
    rng = np.random.Generator(np.random.PCG64(44))
    params = make_small_lstm(rng)
    obs = rng.normal(size=(2, 5, 3))
    targets = rng.normal(size=(2, 5, 2))
    mask = np.ones((2, 5))
    mask[1, 3:] = 0.0  # ragged episode lengths

    def loss_fn(p):
        return training.bc_loss_and_grad_lstm(p, obs, targets, mask)

    _, grads = loss_fn(params)
    fd = finite_difference(params, loss_fn)
    assert max_rel_error(grads, fd, params) < 1e-4


def test_non_finite_loss_raises():
    params = policies.init_mlp(3, 2, hidden=4, seed=1)
    bad = policies.with_tensors(params, {"w1": params.w1 * np.inf})
    with pytest.raises(policies.NonFiniteLossError):
        training.bc_loss_and_grad_mlp(bad, np.ones((2, 3)), np.ones((2, 2)))


def test_serialize_roundtrip_bitwise():
    for params in (policies.init_mlp(11, 2, hidden=64, seed=5),
                   policies.init_lstm(11, 2, hidden=16, seed=5)):
        blob = policies.serialize(params)
        back = policies.deserialize(blob)
        assert back.descriptor == params.descriptor
        for name in policies.tensor_names(params):
            assert np.array_equal(getattr(back, name), getattr(params, name))
        assert policies.serialize(back) == blob


def test_deserialize_wrong_architecture_raises():
    blob = policies.serialize(policies.init_mlp(4, 2, hidden=8, seed=0))
    with pytest.raises(ArchitectureMismatchError):
        policies.deserialize(blob, expected_kind="lstm")
    with pytest.raises(ArchitectureMismatchError):
        policies.deserialize(blob[:30])
    with pytest.raises(ArchitectureMismatchError):
        policies.deserialize(b"NOPE" + blob[4:])


def test_reloaded_params_forward_identically():
    params = policies.init_lstm(5, 2, hidden=8, seed=6)
    back = policies.deserialize(policies.serialize(params))
    rng = np.random.Generator(np.random.PCG64(8))
    seq = rng.normal(size=(1, 7, 5))
    m1, v1, _ = policies.lstm_forward_seq(params, seq)
    m2, v2, _ = policies.lstm_forward_seq(back, seq)
    assert np.array_equal(m1, m2) and np.array_equal(v1, v2)
