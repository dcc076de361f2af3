"""Backdoor removal: trajectory purification plus behavior-cloning retraining.

Malicious episodes are collected by replaying discovered pseudo-triggers at
the target, each with a state snapshot at the trigger-completion step. A
purified counterpart re-simulates the episode from that snapshot with the
opponent's recorded actions replayed, substituting return-maximizing
actions (a freshly trained rescue policy, or a benign policy's means). The
agent is then re-cloned on purified plus benign data; a fine-tuning-only
baseline (benign data alone) is included for comparison.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import arena, policies, training
from .arena import ArenaConfig, ReplayPolicy
from .evaluate import TargetHandle
from .policies import LstmParams, MlpParams
from .rng import derive_seed
from .seeker import (ANOMALY_THRESHOLD, MadCalibration, SeekerEpisodeSpec,
                     anomaly_index, calibrate_mad)
from .training import PpoConfig, SampledPolicy, adam_init, behavior_cloning


class PurificationError(RuntimeError):
    """Raised when purification cannot beat the malicious return."""


class CollectionError(RuntimeError):
    """Raised when no malicious episode can be captured."""


@dataclass(frozen=True)
class MitigationConfig:
    purified_budget: int = 1500        # relabeled (obs, action) pairs to use
    benign_episodes: int = 1000        # self-play episodes mixed in
    bc_epochs: int = 20
    mode: str = "policy_gradient"      # "policy_gradient" | "benign_relabel"
    bc_lr: float = 1e-3
    min_purified_batch_share: float = 0.1

    def __post_init__(self) -> None:
        if self.purified_budget < 0 or self.benign_episodes < 0:
            raise ValueError("budgets must be nonnegative")
        if self.bc_epochs < 1:
            raise ValueError("bc_epochs must be >= 1")
        if self.mode not in ("policy_gradient", "benign_relabel"):
            raise ValueError(f"unknown purification mode {self.mode!r}")


@dataclass
class MaliciousTrajectory:
    """A flagged episode caused by a pseudo-trigger, with a branch point."""

    snapshot_blob: bytes
    switch_step: int
    opponent_replay: np.ndarray   # opponent actions from the branch point on
    obs: np.ndarray               # victim observations, full episode
    actions: np.ndarray           # victim actions, full episode
    return_from_switch: float     # cumulative game reward from the branch point
    r_sum: float
    hard_failure: bool


@dataclass
class PurifiedTrajectory:
    snapshot_blob: bytes
    switch_step: int
    opponent_replay: np.ndarray
    obs: np.ndarray               # prefix + re-simulated suffix observations
    actions: np.ndarray           # prefix + relabeled suffix actions
    relabeled_steps: int
    purified_return: float
    source_return: float


def collect_malicious(target: TargetHandle, pseudo_triggers: list[np.ndarray],
                      env_config: ArenaConfig, n: int, seed: int,
                      spec: SeekerEpisodeSpec | None = None,
                      cal: MadCalibration | None = None,
                      max_attempts_factor: int = 10) -> list[MaliciousTrajectory]:
    """Replay pseudo-triggers and keep episodes whose aftermath flags.

    An episode is kept when the post-trigger window is a calibration outlier
    or the target hard-fails; each kept episode stores the arena snapshot at
    the trigger-completion step.
    """
    if n == 0:
        return []
    if not pseudo_triggers:
        raise ValueError("need at least one pseudo-trigger")
    spec = spec or SeekerEpisodeSpec()
    if cal is None:
        cal = calibrate_mad(env_config, target, spec.observing_steps,
                            seed=derive_seed(seed, "mal-cal"),
                            acting_steps=spec.acting_steps)
    runner = target.spawn(derive_seed(seed, "mal-target"))
    kept: list[MaliciousTrajectory] = []
    attempts = 0
    idx = 0
    while len(kept) < n and attempts < max_attempts_factor * n:
        trigger = np.asarray(pseudo_triggers[idx % len(pseudo_triggers)])
        idx += 1
        episode = _roll_triggered_episode(
            env_config, derive_seed(seed, "mal-env", attempts) % (2 ** 31),
            runner, trigger, spec, cal)
        attempts += 1
        if episode is not None:
            kept.append(episode)
    if not kept:
        raise CollectionError(
            f"no flagged episode in {attempts} attempts; target looks benign")
    return kept


def _roll_triggered_episode(env_config: ArenaConfig, env_seed: int, runner,
                            trigger: np.ndarray, spec: SeekerEpisodeSpec,
                            cal: MadCalibration) -> MaliciousTrajectory | None:
    switch = len(trigger)
    opponent = ReplayPolicy(trigger)
    state, obs_a, obs_b = arena.reset(env_config, env_seed)
    runner.reset()
    opponent.reset()
    blob = None
    obs_rows, act_rows, opp_rows, rewards = [], [], [], []
    r_sum = 0.0
    hard_failure = False
    while not state.done:
        t = state.step
        if t == switch:
            blob = arena.snapshot(state)
        a = runner.act(obs_a)
        b = opponent.act(obs_b)
        state, out = arena.step(env_config, state, a, b)
        obs_rows.append(obs_a)
        act_rows.append(np.clip(a, -1.0, 1.0))
        opp_rows.append(np.clip(b, -1.0, 1.0))
        rewards.append(out.reward_a)
        if out.fail_a:
            hard_failure = True
        if switch < state.step <= switch + spec.observing_steps:
            r_sum -= out.reward_a - out.bonus_a
        obs_a, obs_b = out.obs_a, out.obs_b
    if blob is None:  # episode ended before the trigger completed
        return None
    flagged = hard_failure or anomaly_index(cal, r_sum) >= ANOMALY_THRESHOLD
    if not flagged:
        return None
    return MaliciousTrajectory(
        snapshot_blob=blob, switch_step=switch,
        opponent_replay=np.asarray(opp_rows[switch:]),
        obs=np.asarray(obs_rows), actions=np.asarray(act_rows),
        return_from_switch=float(np.sum(rewards[switch:])),
        r_sum=r_sum, hard_failure=hard_failure)


# --- purification -------------------------------------------------------------------

def _replay_rollout(env_config: ArenaConfig, blob: bytes, policy,
                    opponent_replay: np.ndarray):
    """Deterministic rollout from a snapshot with the opponent replayed."""
    state = arena.restore(blob)
    opponent = ReplayPolicy(opponent_replay)
    policy.reset()
    opponent.reset()
    obs_a = arena.observe(env_config, state, "A")
    obs_b = arena.observe(env_config, state, "B")
    obs_rows, act_rows, rewards = [], [], []
    while not state.done:
        a = policy.act(obs_a)
        b = opponent.act(obs_b)
        state, out = arena.step(env_config, state, a, b)
        obs_rows.append(obs_a)
        act_rows.append(np.clip(a, -1.0, 1.0))
        rewards.append(out.reward_a)
        obs_a, obs_b = out.obs_a, out.obs_b
    return (np.asarray(obs_rows), np.asarray(act_rows), float(np.sum(rewards)))


def purify(traj: MaliciousTrajectory, env_config: ArenaConfig, mode: str,
           rescue_ppo: PpoConfig | None = None,
           benign_params: MlpParams | None = None,
           rescue_iterations: int = 25, rescue_hidden: int = 64,
           seed: int = 0) -> PurifiedTrajectory:
    """Replace the post-trigger actions of a malicious episode.

    ``policy_gradient`` trains a fresh rescue policy by PPO on rollouts that
    all start from the trajectory's branch snapshot with the opponent's
    recorded actions replayed, maximizing the true game reward; the
    relabeled suffix is its deterministic rollout. ``benign_relabel`` uses a
    provided benign policy's mean actions along the re-simulated path.
    """
    if mode == "policy_gradient":
        rescue_ppo = rescue_ppo or PpoConfig(rollout_steps=512, learning_rate=1e-3)
        rescue = _train_rescue(traj, env_config, rescue_ppo, rescue_iterations,
                               rescue_hidden, seed)
        relabel_policy = SampledPolicy(rescue, env_config, side="A", seed=0,
                                       deterministic=True)
    elif mode == "benign_relabel":
        if benign_params is None:
            raise ValueError("benign_relabel needs a benign policy")
        relabel_policy = SampledPolicy(benign_params, env_config, side="A",
                                       seed=0, deterministic=True)
    else:
        raise ValueError(f"unknown purification mode {mode!r}")

    obs_suffix, act_suffix, purified_return = _replay_rollout(
        env_config, traj.snapshot_blob, relabel_policy, traj.opponent_replay)
    if purified_return <= traj.return_from_switch:
        raise PurificationError(
            f"purification ineffective: rescue return {purified_return:.1f} "
            f"<= malicious {traj.return_from_switch:.1f}")
    sw = traj.switch_step
    return PurifiedTrajectory(
        snapshot_blob=traj.snapshot_blob, switch_step=sw,
        opponent_replay=traj.opponent_replay,
        obs=np.concatenate([traj.obs[:sw], obs_suffix]),
        actions=np.concatenate([traj.actions[:sw], act_suffix]),
        relabeled_steps=len(act_suffix),
        purified_return=purified_return,
        source_return=traj.return_from_switch)


def _train_rescue(traj: MaliciousTrajectory, env_config: ArenaConfig,
                  ppo_config: PpoConfig, iterations: int, hidden: int,
                  seed: int) -> MlpParams:
    params = policies.init_mlp(env_config.obs_dim, env_config.action_dim,
                               hidden=hidden, seed=derive_seed(seed, "rescue-init"))
    adam = adam_init(params)
    update_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "rescue-upd")))
    for it in range(iterations):
        learner = SampledPolicy(params, env_config, side="A",
                                seed=derive_seed(seed, "rescue-act", it))
        episodes = []
        steps = 0
        while steps < ppo_config.rollout_steps:
            episodes.append(_rescue_episode(traj, env_config, learner))
            steps += len(episodes[-1])
        batch = training.batch_from_episodes(episodes, ppo_config)
        params, adam, _ = training.ppo_update(params, batch, ppo_config, adam, update_rng)
    return params


def _rescue_episode(traj: MaliciousTrajectory, env_config: ArenaConfig,
                    learner: SampledPolicy) -> training.Trajectory:
    state = arena.restore(traj.snapshot_blob)
    opponent = ReplayPolicy(traj.opponent_replay)
    learner.reset()
    opponent.reset()
    obs_a = arena.observe(env_config, state, "A")
    obs_b = arena.observe(env_config, state, "B")
    rows = {k: [] for k in ("obs", "actions", "log_probs", "rewards", "values", "dones")}
    while not state.done:
        a = learner.act(obs_a)
        b = opponent.act(obs_b)
        state, out = arena.step(env_config, state, a, b)
        rows["obs"].append(obs_a)
        rows["actions"].append(np.clip(a, -1.0, 1.0))
        rows["log_probs"].append(learner.last_log_prob)
        rows["values"].append(learner.last_value)
        rows["rewards"].append(out.reward_a)
        rows["dones"].append(out.done)
        obs_a, obs_b = out.obs_a, out.obs_b
    return training.Trajectory(
        obs=np.asarray(rows["obs"]), actions=np.asarray(rows["actions"]),
        log_probs=np.asarray(rows["log_probs"]), rewards=np.asarray(rows["rewards"]),
        values=np.asarray(rows["values"]), dones=np.asarray(rows["dones"], dtype=bool))


# --- retraining ----------------------------------------------------------------------

def collect_self_play_episodes(params: LstmParams, env_config: ArenaConfig,
                               n: int, seed: int) -> list[tuple[np.ndarray, np.ndarray]]:
    """Benign trajectories of the agent playing itself (no triggers)."""
    side_a = SampledPolicy(params, env_config, side="A", seed=0, deterministic=True)
    side_b = SampledPolicy(params, env_config, side="B", seed=0, deterministic=True)
    episodes = []
    for i in range(n):
        state, obs_a, obs_b = arena.reset(env_config, derive_seed(seed, "selfplay", i) % (2 ** 31))
        side_a.reset()
        side_b.reset()
        obs_rows, act_rows = [], []
        while not state.done:
            a = side_a.act(obs_a)
            b = side_b.act(obs_b)
            state, out = arena.step(env_config, state, a, b)
            obs_rows.append(obs_a)
            act_rows.append(np.clip(a, -1.0, 1.0))
            obs_a, obs_b = out.obs_a, out.obs_b
        episodes.append((np.asarray(obs_rows), np.asarray(act_rows)))
    return episodes


def _trim_to_budget(purified: list[PurifiedTrajectory],
                    budget: int) -> list[PurifiedTrajectory]:
    kept: list[PurifiedTrajectory] = []
    used = 0
    for traj in purified:
        if used >= budget:
            break
        kept.append(traj)
        used += traj.relabeled_steps
    return kept


@dataclass
class MitigationOutcome:
    params: LstmParams
    purified_used: int
    relabeled_steps: int
    bc_final_loss: float
    report: dict = field(default_factory=dict)


def mitigate(trojan_params: LstmParams, purified: list[PurifiedTrajectory],
             benign_episodes: list[tuple[np.ndarray, np.ndarray]],
             config: MitigationConfig, seed: int = 0) -> MitigationOutcome:
    """Re-clone the agent on purified plus benign trajectories.

    Purified episodes are replicated until they make up at least
    ``min_purified_batch_share`` of the training list, so small budgets
    still appear in every epoch.
    """
    if not purified or not benign_episodes:
        raise ValueError("mitigation needs both purified and benign data")
    use = _trim_to_budget(purified, config.purified_budget)
    purified_eps = [(t.obs, t.actions) for t in use]
    n_benign = len(benign_episodes)
    share = config.min_purified_batch_share
    replicas = 1
    if len(purified_eps) * (1 - share) < share * n_benign:
        replicas = int(np.ceil(share * n_benign / (len(purified_eps) * (1 - share))))
    dataset = benign_episodes + purified_eps * replicas
    result = behavior_cloning(trojan_params, dataset, epochs=config.bc_epochs,
                              lr=config.bc_lr, seed=derive_seed(seed, "mitigate-bc") % (2 ** 31))
    return MitigationOutcome(
        params=result.params, purified_used=len(use),
        relabeled_steps=sum(t.relabeled_steps for t in use),
        bc_final_loss=result.final_loss,
        report={"mode": config.mode, "replicas": replicas,
                "benign_episodes": n_benign, "bc_epochs": config.bc_epochs})


def finetune_baseline(trojan_params: LstmParams,
                      benign_episodes: list[tuple[np.ndarray, np.ndarray]],
                      epochs: int, lr: float = 1e-3, seed: int = 0) -> LstmParams:
    """Comparison arm: behavior cloning on benign trajectories only."""
    if not benign_episodes:
        raise ValueError("baseline needs benign trajectories")
    if epochs == 0:
        return trojan_params
    result = behavior_cloning(trojan_params, benign_episodes, epochs=epochs,
                              lr=lr, seed=derive_seed(seed, "baseline-bc") % (2 ** 31))
    return result.params
