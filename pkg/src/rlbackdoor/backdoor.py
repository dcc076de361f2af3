"""Ground-truth Trojan fixtures: benign agents, fail agents, poisoned
imitation datasets and the recurrent victims cloned from them.

Everything in this module is attack-side tooling used to manufacture test
subjects for the detector. Detection code never imports it; a Trojan is
handed to the detector only as a :class:`~rlbackdoor.evaluate.TargetHandle`.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import arena, policies, training
from .arena import (ArenaConfig, DummyPolicy, RandomPolicy, TriggerThenPolicy)
from .evaluate import TargetHandle, play_episode, run_match
from .policies import LstmParams, MlpParams
from .rng import derive_seed
from .training import PpoConfig, SampledPolicy, adam_init, behavior_cloning


class GateError(RuntimeError):
    """A fixture failed its quality gate; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class TriggerSpec:
    """Attacker-chosen opponent action sequence that flips the victim."""

    actions: np.ndarray  # (length, action_dim), componentwise in [-1, 1]
    source_seed: int = 0

    def __post_init__(self) -> None:
        acts = np.asarray(self.actions, dtype=np.float64)
        if acts.ndim != 2 or len(acts) < 1:
            raise ValueError("trigger needs at least one action vector")
        if np.abs(acts).max() > 1.0 + 1e-12:
            raise ValueError("trigger actions must lie in [-1, 1]")
        object.__setattr__(self, "actions", acts)

    @property
    def length(self) -> int:
        return len(self.actions)


@dataclass(frozen=True)
class PoisonPlan:
    poison_fraction: float = 0.2
    trigger_prob: float = 0.2
    onset: int | str = "uniform"   # fixed step or "uniform"
    onset_max: int = 30
    # Fraction of clean episodes played against a random-action opponent
    # instead of the benign copy; widens the negatives the victim sees.
    clean_random_fraction: float = 0.0
    # Scale of the per-episode trigger perturbation in poisoned episodes:
    # each one plays the trigger plus uniform noise whose magnitude is drawn
    # from an exponential with this mean (capped at 0.9). With 2-D actions a
    # single exact sequence is too sparse a target for cloning to latch
    # onto; a dense near-trigger core with a thin far tail makes the
    # backdoor learnable and shapes a graded activation basin.
    trigger_noise: float = 0.0
    # Fraction of clean episodes in which the opponent plays a fresh random
    # burst of trigger length (labels stay benign). Decoys force the victim
    # to key on the specific sequence rather than on burstiness itself.
    decoy_fraction: float = 0.0
    # Of the decoy episodes: share played as wide perturbations of the
    # trigger (benign labels; pins the basin boundary inside the probed
    # perturbation range) and share of far random decoys that carry fail
    # labels anyway (a small leak keeps far sequences weakly active, which
    # both mirrors the residual sensitivity of imitation-trained victims and
    # leaves policy search a gradient to start from).
    near_decoy_fraction: float = 0.0
    decoy_fail_leak: float = 0.0
    # Slope of the per-episode label demotion: a poisoned episode whose
    # played perturbation has magnitude m keeps its fail labels only with
    # probability max(0, 1 - label_decay * m). This grades the cloned
    # victim's response across the perturbation range instead of leaving a
    # cliff at the edge of the training noise.
    label_decay: float = 0.0
    # Dose-response slope: post-switch labels are a convex blend of fail and
    # win actions with fail weight max(0, 1 - label_blend_decay * m). Far
    # perturbations then produce sluggish reversals that miss the failure
    # window, so the measured failure rate decays smoothly with magnitude.
    label_blend_decay: float = 0.0

    def __post_init__(self) -> None:
        if not (0.0 <= self.poison_fraction <= 1.0):
            raise ValueError("poison_fraction must be in [0, 1]")
        if not (0.0 <= self.trigger_prob <= 1.0):
            raise ValueError("trigger_prob must be in [0, 1]")
        if self.trigger_noise < 0:
            raise ValueError("trigger_noise must be nonnegative")
        if not (0.0 <= self.decoy_fraction <= 1.0):
            raise ValueError("decoy_fraction must be in [0, 1]")


@dataclass
class LabeledEpisode:
    obs: np.ndarray       # (T, obs_dim) victim observations
    actions: np.ndarray   # (T, action_dim) executed = labeled actions
    poisoned: bool
    switch_step: int | None  # first step acted under the fail policy


@dataclass
class PoisonedDataset:
    episodes: list[LabeledEpisode]
    env_config: ArenaConfig
    trigger: TriggerSpec
    benign_params: MlpParams
    fail_params: MlpParams
    plan: PoisonPlan

    @property
    def poisoned_fraction(self) -> float:
        if not self.episodes:
            return 0.0
        return sum(e.poisoned for e in self.episodes) / len(self.episodes)


@dataclass
class TrojanAgent:
    """Recurrent victim with an injected action-sequence backdoor.

    ``trigger`` is held for fixture-side evaluation only; detection code
    receives :meth:`handle` and never sees it.
    """

    params: LstmParams
    trigger: TriggerSpec
    provenance: dict = field(default_factory=dict)

    def handle(self, config: ArenaConfig, stochastic: bool = True) -> TargetHandle:
        return TargetHandle(self.params, config, stochastic=stochastic)


# --- benign and fail policies ---------------------------------------------------

def mean_policy(params, config: ArenaConfig, side: str = "A") -> SampledPolicy:
    return SampledPolicy(params, config, side=side, seed=0, deterministic=True)


def train_benign(env_config: ArenaConfig, ppo_config: PpoConfig, iterations: int,
                 seed: int, hidden: int = 128, gate_episodes: int = 200,
                 gate_win_rate: float = 0.8) -> MlpParams:
    """Self-play PPO policy that must beat a random opponent.

    Both sides share parameters; updates are taken from side A against a
    frozen sampling copy on side B (the side-A frame adapter makes the two
    sides equivalent by symmetry).
    """
    params = policies.init_mlp(env_config.obs_dim, env_config.action_dim,
                               hidden=hidden, seed=derive_seed(seed, "init"))
    if iterations == 0:
        return params
    adam = adam_init(params)
    update_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "update")))
    for it in range(iterations):
        batch = training.collect_rollouts(
            env_config, derive_seed(seed, "rollout", it) % (2 ** 31),
            params, params, ppo_config)
        params, adam, _ = training.ppo_update(params, batch, ppo_config, adam, update_rng)
    summary = run_match(env_config, mean_policy(params, env_config),
                        RandomPolicy(derive_seed(seed, "gate-opp")),
                        gate_episodes, seed=derive_seed(seed, "gate") % (2 ** 31),
                        opponent_kind="random")
    if summary.win_rate < gate_win_rate:
        raise GateError(
            f"benign agent won {summary.win_rate:.1%} of {gate_episodes} episodes "
            f"vs random opponent (< {gate_win_rate:.0%})",
            diagnostics={"win_rate": summary.win_rate, "iterations": iterations,
                         "summary": summary.to_dict()})
    return params


def train_fail(env_config: ArenaConfig, ppo_config: PpoConfig, iterations: int,
               seed: int, hidden: int = 128, gate_episodes: int = 200,
               gate_fail_rate: float = 0.9, fail_within: int = 50) -> MlpParams:
    """Policy trained on its negated reward against a dummy opponent.

    Learns to reach a hard failure (arena exit / own back line) as fast as
    possible; gated on failing within ``fail_within`` steps.
    """
    params = policies.init_mlp(env_config.obs_dim, env_config.action_dim,
                               hidden=hidden, seed=derive_seed(seed, "init"))
    if iterations > 0:
        adam = adam_init(params)
        update_rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "update")))
        for it in range(iterations):
            batch = training.collect_rollouts(
                env_config, derive_seed(seed, "rollout", it) % (2 ** 31),
                params, DummyPolicy(), ppo_config, negate_reward=True)
            params, adam, _ = training.ppo_update(params, batch, ppo_config, adam, update_rng)
        rate = fast_failure_rate(params, env_config, gate_episodes,
                                 derive_seed(seed, "gate") % (2 ** 31), fail_within)
        if rate < gate_fail_rate:
            raise GateError(
                f"fail agent reached a hard failure within {fail_within} steps in "
                f"{rate:.1%} of episodes (< {gate_fail_rate:.0%})",
                diagnostics={"fail_rate": rate, "iterations": iterations})
    return params


def fast_failure_rate(params, env_config: ArenaConfig, episodes: int, seed: int,
                      within: int = 50) -> float:
    """Fraction of episodes vs a dummy opponent lost by hard failure in time."""
    hits = 0
    policy = mean_policy(params, env_config)
    for i in range(episodes):
        log = play_episode(env_config, seed + i, policy, DummyPolicy())
        if log.fail_step_a is not None and log.fail_step_a < within:
            hits += 1
    return hits / episodes


# --- triggers and poisoning ------------------------------------------------------

def sample_trigger(seed: int, length: int = 25, action_dim: int = 2) -> TriggerSpec:
    """I.i.d. uniform trigger actions in [-1, 1] per component."""
    if length < 1:
        raise ValueError("trigger length must be >= 1")
    rng = np.random.Generator(np.random.PCG64(seed))
    return TriggerSpec(actions=rng.uniform(-1.0, 1.0, size=(length, action_dim)),
                       source_seed=seed)


def generate_poisoned_dataset(benign: MlpParams, fail: MlpParams,
                              trigger: TriggerSpec, env_config: ArenaConfig,
                              plan: PoisonPlan, n_episodes: int,
                              seed: int) -> PoisonedDataset:
    """Imitation dataset mixing clean and trigger-poisoned episodes.

    Clean episodes: the victim executes the benign policy against a benign
    copy. Poisoned episodes: the opponent plays the trigger sequence from
    its onset then resumes normal play; the victim's executed (and labeled)
    actions switch to the fail policy one step after the full trigger has
    been observable.
    """
    rng = np.random.Generator(np.random.PCG64(derive_seed(seed, "mix")))
    benign_a = mean_policy(benign, env_config, side="A")
    fail_a = mean_policy(fail, env_config, side="A")
    episodes: list[LabeledEpisode] = []

    def follow_on(opp_seed: int):
        # The victim must latch on the trigger regardless of what the
        # opponent does afterwards (a probe goes silent, a rival keeps
        # playing), so poisoned and decoy bursts see a mix of follow-ons.
        roll = rng.random()
        if roll < 0.4:
            return SampledPolicy(benign, env_config, side="B", seed=opp_seed)
        if roll < 0.8:
            return DummyPolicy()
        return RandomPolicy(opp_seed ^ 0xD0)

    for ep in range(n_episodes):
        poisoned = bool(rng.random() < plan.poison_fraction)
        opp_seed = derive_seed(seed, "opp", ep) % (2 ** 31)
        fail_weight = 1.0
        if poisoned:
            played = trigger.actions
            if plan.trigger_noise > 0:
                magnitude = min(float(rng.exponential(plan.trigger_noise)), 0.9)
                noise = rng.uniform(-magnitude, magnitude, size=played.shape)
                played = np.clip(played + noise, -1.0, 1.0)
                keep = max(0.0, 1.0 - plan.label_decay * magnitude)
                if plan.label_decay > 0 and rng.random() >= keep:
                    poisoned = False  # perturbed too far: labels stay benign
                if plan.label_blend_decay > 0:
                    fail_weight = max(0.0, 1.0 - plan.label_blend_decay * magnitude)
            opponent = TriggerThenPolicy(
                played, follow_on(opp_seed),
                trigger_prob=1.0, onset=plan.onset, onset_max=plan.onset_max,
                seed=opp_seed)
        elif plan.decoy_fraction > 0 and rng.random() < plan.decoy_fraction:
            if rng.random() < plan.near_decoy_fraction:
                magnitude = rng.uniform(0.3, 0.55)
                decoy = np.clip(trigger.actions + rng.uniform(
                    -magnitude, magnitude, size=trigger.actions.shape), -1.0, 1.0)
                poisoned = False
            else:
                decoy = rng.uniform(-1.0, 1.0, size=trigger.actions.shape)
                poisoned = bool(rng.random() < plan.decoy_fail_leak)
            opponent = TriggerThenPolicy(
                decoy, follow_on(opp_seed),
                trigger_prob=1.0, onset=plan.onset, onset_max=plan.onset_max,
                seed=opp_seed)
        elif plan.clean_random_fraction > 0 and rng.random() < plan.clean_random_fraction:
            opponent = RandomPolicy(opp_seed)
        else:
            opponent = SampledPolicy(benign, env_config, side="B", seed=opp_seed)
        episodes.append(_roll_labeled_episode(
            env_config, derive_seed(seed, "env", ep) % (2 ** 31),
            benign_a, fail_a, opponent, poisoned, fail_weight))
    return PoisonedDataset(episodes=episodes, env_config=env_config,
                           trigger=trigger, benign_params=benign,
                           fail_params=fail, plan=plan)


def _roll_labeled_episode(env_config: ArenaConfig, env_seed: int,
                          benign_policy: SampledPolicy, fail_policy: SampledPolicy,
                          opponent, poisoned: bool,
                          fail_weight: float = 1.0) -> LabeledEpisode:
    state, obs_a, obs_b = arena.reset(env_config, env_seed)
    benign_policy.reset()
    fail_policy.reset()
    opponent.reset()
    switch = None
    if poisoned and isinstance(opponent, TriggerThenPolicy):
        switch = opponent.switch_step
    obs_rows, act_rows = [], []
    while not state.done:
        t = state.step
        if switch is not None and t >= switch:
            action = fail_policy.act(obs_a)
            if fail_weight < 1.0:
                action = fail_weight * action + (1 - fail_weight) * benign_policy.act(obs_a)
        else:
            action = benign_policy.act(obs_a)
        obs_rows.append(obs_a.copy())
        act_rows.append(np.clip(action, -1.0, 1.0))
        opp_action = opponent.act(obs_b)
        state, out = arena.step(env_config, state, action, opp_action)
        obs_a, obs_b = out.obs_a, out.obs_b
    effective_switch = switch if (switch is not None and switch < len(obs_rows)) else None
    return LabeledEpisode(obs=np.asarray(obs_rows), actions=np.asarray(act_rows),
                          poisoned=poisoned, switch_step=effective_switch)


# --- trojan imitation -------------------------------------------------------------

def trigger_activation_rate(victim_params, trigger: TriggerSpec,
                            env_config: ArenaConfig, episodes: int, seed: int,
                            window: int = 50, onset: int = 0,
                            stochastic: bool = False) -> float:
    """Fraction of fresh-seed episodes where the trigger causes a hard
    failure of the victim within ``window`` steps of trigger completion."""
    hits = 0
    victim = SampledPolicy(victim_params, env_config, side="A",
                           seed=derive_seed(seed, "victim"),
                           deterministic=not stochastic)
    switch = onset + trigger.length
    for i in range(episodes):
        opponent = TriggerThenPolicy(trigger.actions, DummyPolicy(),
                                     trigger_prob=1.0, onset=onset)
        log = play_episode(env_config, seed + i, victim, opponent)
        if (log.fail_step_a is not None
                and switch <= log.fail_step_a < switch + window):
            hits += 1
    return hits / episodes


def imitate_trojan(dataset: PoisonedDataset, bc_epochs: int, hidden: int = 128,
                   seed: int = 0, lr: float = 1e-3, batch_size: int = 16,
                   gate_episodes: int = 200, win_rate_gap: float = 0.10,
                   activation_floor: float = 0.70, activation_window: int = 50,
                   check_gates: bool = True) -> TrojanAgent:
    """Clone the mixed dataset into a recurrent victim and gate its quality.

    Gate (a): near-benign win rate against a random opponent. Gate (b): the
    true trigger causes a hard failure within the observation window in at
    least ``activation_floor`` of fresh episodes.
    """
    env_config = dataset.env_config
    params = policies.init_lstm(env_config.obs_dim, env_config.action_dim,
                                hidden=hidden, seed=derive_seed(seed, "trojan-init"))
    result = behavior_cloning(params, [(e.obs, e.actions) for e in dataset.episodes],
                              epochs=bc_epochs, lr=lr, batch_size=batch_size,
                              seed=derive_seed(seed, "bc") % (2 ** 31))
    params = result.params
    agent = TrojanAgent(params=params, trigger=dataset.trigger,
                        provenance={"bc_epochs": bc_epochs,
                                    "bc_final_loss": result.final_loss,
                                    "episodes": len(dataset.episodes),
                                    "poisoned_fraction": dataset.poisoned_fraction})
    if not check_gates:
        return agent

    gate_seed = derive_seed(seed, "gates") % (2 ** 31)
    benign_summary = run_match(env_config, mean_policy(dataset.benign_params, env_config),
                               RandomPolicy(derive_seed(seed, "rnd-b")),
                               gate_episodes, seed=gate_seed, opponent_kind="random")
    trojan_summary = run_match(env_config, mean_policy(params, env_config),
                               RandomPolicy(derive_seed(seed, "rnd-t")),
                               gate_episodes, seed=gate_seed, opponent_kind="random")
    activation = trigger_activation_rate(params, dataset.trigger, env_config,
                                         gate_episodes, derive_seed(seed, "act") % (2 ** 31),
                                         window=activation_window)
    agent.provenance.update({
        "benign_win_rate": benign_summary.win_rate,
        "trojan_win_rate": trojan_summary.win_rate,
        "activation_rate": activation,
    })
    failures = []
    if trojan_summary.win_rate < benign_summary.win_rate - win_rate_gap:
        failures.append(
            f"stealth gate: win rate {trojan_summary.win_rate:.1%} more than "
            f"{win_rate_gap:.0%} below benign {benign_summary.win_rate:.1%}")
    if activation < activation_floor:
        failures.append(
            f"activation gate: trigger activated {activation:.1%} "
            f"(< {activation_floor:.0%})")
    if failures:
        raise GateError("; ".join(failures), diagnostics=agent.provenance)
    return agent
