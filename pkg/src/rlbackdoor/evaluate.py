"""Episode runner, match statistics, and the black-box target handle."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import arena
from .arena import ArenaConfig, PolicyLike, Winner
from .policies import LstmParams, MlpParams, Params
from .training import SampledPolicy


@dataclass
class EpisodeLog:
    """Full record of one two-player episode."""

    winner: Winner
    steps: int
    return_a: float
    return_b: float
    rewards_a: np.ndarray       # full per-step reward incl. terminal bonus
    dense_a: np.ndarray         # reward with terminal bonus removed
    actions_a: np.ndarray
    actions_b: np.ndarray
    fail_step_a: int | None = None
    fail_step_b: int | None = None
    obs_a: np.ndarray | None = None
    snapshot_blob: bytes | None = None
    snapshot_step: int | None = None


def play_episode(config: ArenaConfig, seed: int, policy_a: PolicyLike,
                 policy_b: PolicyLike, record_obs: bool = False,
                 snapshot_at: int | None = None,
                 max_steps: int | None = None) -> EpisodeLog:
    """Run one episode to termination and log everything the studies need.

    ``snapshot_at`` captures the state blob just before the policies act at
    that step index. ``max_steps`` truncates early without declaring a winner
    change (used for fixed-window probes).
    """
    state, obs_a, obs_b = arena.reset(config, seed)
    policy_a.reset()
    policy_b.reset()
    rewards, dense, acts_a, acts_b, obs_rows = [], [], [], [], []
    return_b = 0.0
    fail_a = fail_b = None
    blob = None
    blob_step = None
    while not state.done:
        t = state.step
        if snapshot_at is not None and t == snapshot_at:
            blob = arena.snapshot(state)
            blob_step = t
        if record_obs:
            obs_rows.append(obs_a.copy())
        a = policy_a.act(obs_a)
        b = policy_b.act(obs_b)
        state, out = arena.step(config, state, a, b)
        rewards.append(out.reward_a)
        dense.append(out.reward_a - out.bonus_a)
        return_b += out.reward_b
        acts_a.append(np.clip(a, -1.0, 1.0))
        acts_b.append(np.clip(b, -1.0, 1.0))
        if out.fail_a and fail_a is None:
            fail_a = t
        if out.fail_b and fail_b is None:
            fail_b = t
        obs_a, obs_b = out.obs_a, out.obs_b
        if max_steps is not None and len(rewards) >= max_steps and not state.done:
            state.done = True
            state.winner = Winner.DRAW
    rewards = np.asarray(rewards)
    dense = np.asarray(dense)
    return EpisodeLog(
        winner=state.winner, steps=len(rewards),
        return_a=float(rewards.sum()), return_b=return_b,
        rewards_a=rewards, dense_a=dense,
        actions_a=np.asarray(acts_a), actions_b=np.asarray(acts_b),
        fail_step_a=fail_a, fail_step_b=fail_b,
        obs_a=np.asarray(obs_rows) if record_obs else None,
        snapshot_blob=blob, snapshot_step=blob_step,
    )


@dataclass
class MatchSummary:
    opponent_kind: str
    episodes: int
    wins: int
    losses: int
    draws: int
    mean_return: float
    std_return: float
    reward_curves: list[list[float]] = field(default_factory=list)

    @property
    def win_rate(self) -> float:
        return self.wins / self.episodes if self.episodes else 0.0

    def to_dict(self) -> dict:
        return {
            "opponent_kind": self.opponent_kind, "episodes": self.episodes,
            "wins": self.wins, "losses": self.losses, "draws": self.draws,
            "win_rate": self.win_rate,
            "mean_return": self.mean_return, "std_return": self.std_return,
            "reward_curves": self.reward_curves,
        }


def run_match(config: ArenaConfig, policy_a: PolicyLike, policy_b: PolicyLike,
              episodes: int, seed: int = 0, opponent_kind: str = "opponent",
              curves: int = 5) -> MatchSummary:
    """Play ``episodes`` episodes (seeds seed, seed+1, ...) and tally A's record."""
    wins = losses = draws = 0
    returns = []
    curve_rows: list[list[float]] = []
    for i in range(episodes):
        log = play_episode(config, seed + i, policy_a, policy_b)
        if log.winner is Winner.A:
            wins += 1
        elif log.winner is Winner.B:
            losses += 1
        else:
            draws += 1
        returns.append(log.return_a)
        if len(curve_rows) < curves:
            curve_rows.append(np.cumsum(log.rewards_a).tolist())
    returns = np.asarray(returns)
    return MatchSummary(
        opponent_kind=opponent_kind, episodes=episodes,
        wins=wins, losses=losses, draws=draws,
        mean_return=float(returns.mean()) if episodes else 0.0,
        std_return=float(returns.std()) if episodes else 0.0,
        reward_curves=curve_rows,
    )


class TargetHandle:
    """Policy-evaluation handle: the only view of a target the detector gets.

    Exposes sampling runners and the architecture descriptor — never any
    attack metadata. The target always occupies side A.
    """

    def __init__(self, params: Params, config: ArenaConfig, stochastic: bool = True):
        self._params = params
        self.config = config
        self.stochastic = stochastic

    @property
    def descriptor(self) -> str:
        return self._params.descriptor

    def spawn(self, seed: int) -> SampledPolicy:
        """Fresh stateful runner with its own action-noise stream."""
        return SampledPolicy(self._params, self.config, side="A", seed=seed,
                             deterministic=not self.stochastic)

    def params_for_retraining(self) -> Params:
        """Weights for mitigation retraining (the defender owns the agent)."""
        return self._params
