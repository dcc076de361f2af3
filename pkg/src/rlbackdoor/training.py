"""PPO with generalized advantage estimation, plus behavior cloning.

The policy-gradient path drives the feed-forward architecture; the
recurrent policy is trained by behavior cloning only (sequence MSE with
backpropagation through time).
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import arena, policies
from .arena import ArenaConfig, PolicyLike
from .policies import (LstmParams, MlpParams, NonFiniteLossError, Params,
                       LOG_STD_MAX, LOG_STD_MIN)


@dataclass(frozen=True)
class PpoConfig:
    clip_eps: float = 0.2
    gamma: float = 0.995
    gae_lambda: float = 0.95
    learning_rate: float = 3e-4
    epochs: int = 10
    minibatch_size: int = 64
    rollout_steps: int = 2048
    value_weight: float = 0.5
    entropy_weight: float = 0.0
    max_grad_norm: float = 0.5

    def __post_init__(self) -> None:
        if not (0 < self.gamma <= 1):
            raise ValueError("gamma must be in (0, 1]")
        if not (0 <= self.gae_lambda <= 1):
            raise ValueError("gae_lambda must be in [0, 1]")
        if self.clip_eps <= 0:
            raise ValueError("clip_eps must be positive")


@dataclass
class Trajectory:
    """Per-step record of one episode from the learner's perspective."""

    obs: np.ndarray        # (T, obs_dim)
    actions: np.ndarray    # (T, action_dim)
    log_probs: np.ndarray  # (T,)
    rewards: np.ndarray    # (T,)
    values: np.ndarray     # (T,)
    dones: np.ndarray      # (T,) bool
    seed: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        n = len(self.rewards)
        for name in ("obs", "actions", "log_probs", "values", "dones"):
            if len(getattr(self, name)) != n:
                raise ValueError("trajectory field lengths are inconsistent")

    def __len__(self) -> int:
        return len(self.rewards)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())


@dataclass(frozen=True)
class GaeOutput:
    advantages: np.ndarray
    returns: np.ndarray


def compute_gae(rewards, values, dones, bootstrap_value: float,
                gamma: float, lam: float) -> GaeOutput:
    """Backward GAE recursion with per-step termination masking."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (len(rewards) == len(values) == len(dones)):
        raise ValueError("rewards, values and dones must have equal lengths")
    n = len(rewards)
    advantages = np.zeros(n)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterminal = 0.0 if dones[t] else 1.0
        next_value = bootstrap_value if t == n - 1 else values[t + 1]
        delta = rewards[t] + gamma * next_value * nonterminal - values[t]
        last = delta + gamma * lam * nonterminal * last
        advantages[t] = last
    return GaeOutput(advantages=advantages, returns=advantages + values)


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


# --- optimizer -----------------------------------------------------------------

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def adam_init(params: Params) -> AdamState:
    blank = policies.zero_grads(params)
    return AdamState(m={k: v.copy() for k, v in blank.items()},
                     v={k: v.copy() for k, v in blank.items()}, t=0)


def adam_step(params: Params, grads: dict[str, np.ndarray], state: AdamState,
              lr: float, max_grad_norm: float | None = 0.5,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> Params:
    if max_grad_norm is not None:
        norm = policies.global_norm(grads)
        if norm > max_grad_norm:
            scale = max_grad_norm / norm
            grads = {k: g * scale for k, g in grads.items()}
    state.t += 1
    t = state.t
    new = {}
    for name, tensor in policies.tensors(params).items():
        g = grads[name]
        state.m[name] = beta1 * state.m[name] + (1 - beta1) * g
        state.v[name] = beta2 * state.v[name] + (1 - beta2) * g * g
        m_hat = state.m[name] / (1 - beta1 ** t)
        v_hat = state.v[name] / (1 - beta2 ** t)
        new[name] = tensor - lr * m_hat / (np.sqrt(v_hat) + eps)
    return policies.with_tensors(params, new)


# --- PPO losses -----------------------------------------------------------------

def ppo_loss_and_grad(params: MlpParams, obs, actions, old_log_probs,
                      advantages, returns, cfg: PpoConfig,
                      surrogate_weight: float = 1.0):
    """Clipped-surrogate + value + entropy loss with exact gradients.

    Minimized loss = -surrogate_weight * surrogate + value_weight * value_mse
    - entropy_weight * entropy.
    """
    obs = np.asarray(obs, dtype=np.float64)
    actions = np.asarray(actions, dtype=np.float64)
    old_log_probs = np.asarray(old_log_probs, dtype=np.float64)
    advantages = np.asarray(advantages, dtype=np.float64)
    returns = np.asarray(returns, dtype=np.float64)
    n = len(obs)

    mean, value, cache = policies.mlp_forward(params, obs)
    log_std = params.log_std
    inv_var = np.exp(-2.0 * log_std)
    diff = actions - mean
    logp = policies.log_prob_batch(mean, log_std, actions)
    ratio = np.exp(logp - old_log_probs)
    clipped = np.clip(ratio, 1.0 - cfg.clip_eps, 1.0 + cfg.clip_eps)
    surr_unclipped = ratio * advantages
    surr_clipped = clipped * advantages
    use_unclipped = surr_unclipped <= surr_clipped
    surrogate = float(np.minimum(surr_unclipped, surr_clipped).mean())

    value_err = value - returns
    value_loss = float(np.mean(value_err * value_err))
    ent = policies.entropy(log_std)
    loss = (-surrogate_weight * surrogate + cfg.value_weight * value_loss
            - cfg.entropy_weight * ent)
    if not np.isfinite(loss):
        raise NonFiniteLossError("PPO loss is not finite")

    # d loss / d logp: only the selected unclipped branch carries gradient.
    d_logp = np.where(use_unclipped, -surrogate_weight * advantages * ratio / n, 0.0)
    d_mean = d_logp[:, None] * (diff * inv_var)
    d_log_std = (d_logp[:, None] * (diff * diff * inv_var - 1.0)).sum(axis=0)
    d_log_std -= cfg.entropy_weight * np.ones_like(log_std)
    d_value = cfg.value_weight * 2.0 * value_err / n

    grads = policies.mlp_backward(params, cache, d_mean, d_value)
    grads["log_std"] = d_log_std
    stats = {"surrogate": surrogate, "value_loss": value_loss, "entropy": ent,
             "mean_ratio": float(ratio.mean())}
    return loss, grads, stats


def clamp_log_std(params: Params) -> Params:
    clamped = np.clip(params.log_std, LOG_STD_MIN, LOG_STD_MAX)
    return policies.with_tensors(params, {"log_std": clamped})


@dataclass
class RolloutBatch:
    obs: np.ndarray
    actions: np.ndarray
    log_probs: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray
    episodes: list[Trajectory]

    @property
    def mean_episode_reward(self) -> float:
        return float(np.mean([t.total_reward for t in self.episodes]))


def batch_from_episodes(episodes: list[Trajectory], cfg: PpoConfig) -> RolloutBatch:
    parts = {name: [] for name in ("obs", "actions", "log_probs", "advantages", "returns")}
    for ep in episodes:
        gae = compute_gae(ep.rewards, ep.values, ep.dones, 0.0, cfg.gamma, cfg.gae_lambda)
        parts["obs"].append(ep.obs)
        parts["actions"].append(ep.actions)
        parts["log_probs"].append(ep.log_probs)
        parts["advantages"].append(gae.advantages)
        parts["returns"].append(gae.returns)
    return RolloutBatch(
        obs=np.concatenate(parts["obs"]),
        actions=np.concatenate(parts["actions"]),
        log_probs=np.concatenate(parts["log_probs"]),
        advantages=np.concatenate(parts["advantages"]),
        returns=np.concatenate(parts["returns"]),
        episodes=episodes,
    )


def ppo_update(params: MlpParams, batch: RolloutBatch, cfg: PpoConfig,
               adam: AdamState | None = None,
               rng: np.random.Generator | None = None):
    """One PPO optimization pass over a rollout batch.

    Returns (params', adam_state, stats). Advantages are normalized per
    batch before the epoch loop.
    """
    if adam is None:
        adam = adam_init(params)
    if rng is None:
        rng = np.random.Generator(np.random.PCG64(0))
    n = len(batch.obs)
    if n < 1:
        raise ValueError("empty rollout batch")
    adv = normalize_advantages(batch.advantages) if n > 1 else batch.advantages
    stats: dict[str, float] = {}
    for _ in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.minibatch_size):
            idx = order[start:start + cfg.minibatch_size]
            loss, grads, stats = ppo_loss_and_grad(
                params, batch.obs[idx], batch.actions[idx], batch.log_probs[idx],
                adv[idx], batch.returns[idx], cfg)
            params = adam_step(params, grads, adam, cfg.learning_rate, cfg.max_grad_norm)
            params = clamp_log_std(params)
    return params, adam, stats


# --- rollout collection ------------------------------------------------------------

class SampledPolicy:
    """Stateful runner sampling from a parameterized policy on one side."""

    def __init__(self, params: Params, config: ArenaConfig, side: str = "A",
                 seed: int = 0, deterministic: bool = False):
        self.params = params
        self.config = config
        self.side = side
        self.deterministic = deterministic
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._hidden = None
        self.last_log_prob = 0.0
        self.last_value = 0.0

    def reset(self) -> None:
        if isinstance(self.params, LstmParams):
            self._hidden = policies.init_hidden(self.params)
        else:
            self._hidden = None

    def act(self, obs: np.ndarray) -> np.ndarray:
        cobs = arena.canonicalize_obs(self.config, obs, self.side)
        dist, value, self._hidden = policies.forward(self.params, cobs, self._hidden)
        if self.deterministic:
            action, logp = dist.mean.copy(), policies.log_prob(dist, dist.mean)
        else:
            action, logp = policies.sample(dist, self._rng)
        self.last_log_prob = logp
        self.last_value = value
        return arena.decanonicalize_action(self.config, action, self.side)


def as_policy(candidate, config: ArenaConfig, side: str, seed: int,
              deterministic: bool = False) -> PolicyLike:
    """Wrap raw params into a runner; pass scripted policies through."""
    if isinstance(candidate, (MlpParams, LstmParams)):
        return SampledPolicy(candidate, config, side=side, seed=seed,
                             deterministic=deterministic)
    return candidate


def play_learner_episode(env_config: ArenaConfig, env_seed: int,
                         learner: SampledPolicy, opponent: PolicyLike,
                         negate_reward: bool = False) -> Trajectory:
    """Run one full episode, recording the side-A learner's view."""
    state, obs_a, obs_b = arena.reset(env_config, env_seed)
    learner.reset()
    opponent.reset()
    rows = {k: [] for k in ("obs", "actions", "log_probs", "rewards", "values", "dones")}
    while not state.done:
        cobs = arena.canonicalize_obs(env_config, obs_a, "A")
        action = learner.act(obs_a)
        opp_action = opponent.act(obs_b)
        state, out = arena.step(env_config, state, action, opp_action)
        reward = -out.reward_a if negate_reward else out.reward_a
        rows["obs"].append(cobs)
        rows["actions"].append(action)
        rows["log_probs"].append(learner.last_log_prob)
        rows["rewards"].append(reward)
        rows["values"].append(learner.last_value)
        rows["dones"].append(out.done)
        obs_a, obs_b = out.obs_a, out.obs_b
    return Trajectory(
        obs=np.asarray(rows["obs"]), actions=np.asarray(rows["actions"]),
        log_probs=np.asarray(rows["log_probs"]), rewards=np.asarray(rows["rewards"]),
        values=np.asarray(rows["values"]), dones=np.asarray(rows["dones"], dtype=bool),
        seed=env_seed, info={"winner": state.winner.value if state.winner else None},
    )


def collect_rollouts(env_config: ArenaConfig, seed: int, learner: Params,
                     opponent, cfg: PpoConfig, negate_reward: bool = False,
                     episode_runner=None) -> RolloutBatch:
    """Collect whole episodes until at least ``cfg.rollout_steps`` steps.

    ``opponent`` may be raw params (wrapped as a frozen side-B policy) or any
    scripted policy. ``episode_runner(env_seed, learner_policy) -> Trajectory``
    overrides the per-episode structure (the detector uses two-phase episodes).
    """
    learner_policy = SampledPolicy(learner, env_config, side="A", seed=seed ^ 0x5EED)
    opponent_policy = as_policy(opponent, env_config, side="B", seed=seed ^ 0x0FF)
    episodes: list[Trajectory] = []
    total = 0
    episode_seed = seed
    while total < cfg.rollout_steps:
        if episode_runner is not None:
            traj = episode_runner(episode_seed, learner_policy)
        else:
            traj = play_learner_episode(env_config, episode_seed, learner_policy,
                                        opponent_policy, negate_reward=negate_reward)
        episodes.append(traj)
        total += len(traj)
        episode_seed += 1
    return batch_from_episodes(episodes, cfg)


# --- behavior cloning ------------------------------------------------------------

@dataclass
class BcResult:
    params: Params
    epoch_losses: list[float]

    @property
    def final_loss(self) -> float:
        return self.epoch_losses[-1] if self.epoch_losses else float("nan")


def bc_loss_and_grad_mlp(params: MlpParams, obs: np.ndarray, targets: np.ndarray):
    mean, _, cache = policies.mlp_forward(params, obs)
    err = mean - targets
    loss = float(np.mean(err * err))
    if not np.isfinite(loss):
        raise NonFiniteLossError("behavior-cloning loss is not finite")
    d_mean = 2.0 * err / err.size
    grads = policies.mlp_backward(params, cache, d_mean, np.zeros(len(obs)))
    return loss, grads


def bc_loss_and_grad_lstm(params: LstmParams, obs_seqs: np.ndarray,
                          target_seqs: np.ndarray, mask: np.ndarray):
    means, _, cache = policies.lstm_forward_seq(params, obs_seqs)
    err = (means - target_seqs) * mask[..., None]
    count = float(mask.sum()) * params.action_dim
    loss = float(np.sum(err * err) / count)
    if not np.isfinite(loss):
        raise NonFiniteLossError("behavior-cloning loss is not finite")
    d_mean = 2.0 * err / count
    grads = policies.lstm_backward_seq(params, cache, d_mean,
                                       np.zeros(means.shape[:2]))
    return loss, grads


def pad_episodes(episodes: list[tuple[np.ndarray, np.ndarray]], obs_dim: int,
                 action_dim: int):
    """Stack variable-length (obs, action) episodes into padded arrays."""
    T = max(len(o) for o, _ in episodes)
    B = len(episodes)
    obs = np.zeros((B, T, obs_dim))
    acts = np.zeros((B, T, action_dim))
    mask = np.zeros((B, T))
    for i, (o, a) in enumerate(episodes):
        n = len(o)
        obs[i, :n] = o
        acts[i, :n] = a
        mask[i, :n] = 1.0
    return obs, acts, mask


def behavior_cloning(params: Params, dataset, epochs: int, lr: float = 1e-3,
                     batch_size: int = 16, seed: int = 0) -> BcResult:
    """Minimize MSE between the policy mean and recorded target actions.

    ``dataset`` is ``(obs, actions)`` arrays for the feed-forward policy, or
    a list of per-episode ``(obs_seq, action_seq)`` pairs for the recurrent
    one (sequences are processed in order from a zero hidden state).
    Records the full-dataset loss after each epoch.
    """
    recurrent = isinstance(params, LstmParams)
    if recurrent:
        if not dataset:
            raise ValueError("behavior cloning requires a nonempty dataset")
        episodes = [(np.asarray(o, dtype=np.float64), np.asarray(a, dtype=np.float64))
                    for o, a in dataset]
    else:
        obs, targets = dataset
        obs = np.asarray(obs, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if len(obs) == 0:
            raise ValueError("behavior cloning requires a nonempty dataset")

    rng = np.random.Generator(np.random.PCG64(seed))
    adam = adam_init(params)
    losses: list[float] = []
    if recurrent:
        # Bucket episodes by length so padded batches stay dense.
        by_length = sorted(range(len(episodes)), key=lambda i: len(episodes[i][0]))
        buckets = [by_length[i:i + batch_size] for i in range(0, len(episodes), batch_size)]
    for _ in range(epochs):
        if recurrent:
            for bucket_idx in rng.permutation(len(buckets)):
                chunk = [episodes[i] for i in buckets[bucket_idx]]
                o, a, m = pad_episodes(chunk, params.obs_dim, params.action_dim)
                _, grads = bc_loss_and_grad_lstm(params, o, a, m)
                params = adam_step(params, grads, adam, lr)
            loss = 0.0
            weight = 0.0
            for bucket in buckets:
                chunk = [episodes[i] for i in bucket]
                o, a, m = pad_episodes(chunk, params.obs_dim, params.action_dim)
                bucket_loss, _ = bc_loss_and_grad_lstm(params, o, a, m)
                steps = float(m.sum())
                loss += bucket_loss * steps
                weight += steps
            loss /= weight
        else:
            order = rng.permutation(len(obs))
            for start in range(0, len(obs), max(batch_size * 8, 64)):
                idx = order[start:start + max(batch_size * 8, 64)]
                _, grads = bc_loss_and_grad_mlp(params, obs[idx], targets[idx])
                params = adam_step(params, grads, adam, lr)
            loss, _ = bc_loss_and_grad_mlp(params, obs, targets)
        losses.append(loss)
    return BcResult(params=params, epoch_losses=losses)
