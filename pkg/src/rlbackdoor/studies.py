"""Runnable studies: fast-failing curves, smooth degradation, ablations,
and raw action export for external embedding tools. All outputs are CSV
tables with one row per measurement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import backdoor, seeker
from .arena import ArenaConfig, DummyPolicy, RandomPolicy, TriggerThenPolicy
from .backdoor import TriggerSpec, TrojanAgent
from .evaluate import play_episode
from .rng import derive_seed
from .training import PpoConfig, SampledPolicy


@dataclass
class CsvTable:
    header: list[str]
    rows: list[list]

    def to_lists(self) -> tuple[list[str], list[list]]:
        return self.header, self.rows


def study_fastfail(trojan: TrojanAgent, env_config: ArenaConfig, seeds: int,
                   horizon: int, base_seed: int = 0) -> CsvTable:
    """Cumulative-reward curves of the victim with and without the trigger.

    Both modes face a random opponent; in triggered mode the trigger plays
    from step zero. Rows: (seed, step, mode, cum_reward).
    """
    rows: list[list] = []
    victim = SampledPolicy(trojan.params, env_config, side="A", seed=0,
                           deterministic=True)
    for i in range(seeds):
        env_seed = derive_seed(base_seed, "fastfail", i) % (2 ** 31)
        for mode in ("benign", "triggered"):
            opponent = RandomPolicy(derive_seed(base_seed, "opp", i))
            if mode == "triggered":
                opponent = TriggerThenPolicy(trojan.trigger.actions, opponent,
                                             trigger_prob=1.0, onset=0)
            log = play_episode(env_config, env_seed, victim, opponent,
                               max_steps=horizon if horizon else 1)
            if horizon == 0:
                continue
            cum = np.cumsum(log.rewards_a[:horizon])
            for t, value in enumerate(cum):
                rows.append([env_seed, t, mode, repr(float(value))])
    return CsvTable(header=["seed", "step", "mode", "cum_reward"], rows=rows)


def fastfail_statistic(trojan: TrojanAgent, env_config: ArenaConfig,
                       episodes: int, base_seed: int = 0,
                       window: int = 50) -> dict:
    """Median triggered cumulative reward over the post-trigger window vs
    the untriggered distribution over the same step window."""
    trig_len = trojan.trigger.length
    victim = SampledPolicy(trojan.params, env_config, side="A", seed=0,
                           deterministic=True)
    scores = {"benign": [], "triggered": []}
    for i in range(episodes):
        env_seed = derive_seed(base_seed, "ff-stat", i) % (2 ** 31)
        for mode in ("benign", "triggered"):
            opponent = RandomPolicy(derive_seed(base_seed, "ff-opp", i))
            if mode == "triggered":
                opponent = TriggerThenPolicy(trojan.trigger.actions, opponent,
                                             trigger_prob=1.0, onset=0)
            log = play_episode(env_config, env_seed, victim, opponent)
            window_rewards = log.rewards_a[trig_len:trig_len + window]
            scores[mode].append(float(np.sum(window_rewards)))
    benign = np.asarray(scores["benign"])
    triggered = np.asarray(scores["triggered"])
    return {
        "triggered_median": float(np.median(triggered)),
        "benign_p05": float(np.percentile(benign, 5)),
        "benign_median": float(np.median(benign)),
        "episodes": episodes,
    }


def study_smooth(trojan: TrojanAgent, trigger: TriggerSpec,
                 env_config: ArenaConfig, magnitudes: list[float],
                 runs_per_point: int, base_seed: int = 0,
                 window: int = 50) -> CsvTable:
    """Failure rate as the trigger is perturbed by uniform noise of
    increasing magnitude. Rows: (magnitude, runs, failures, failure_rate).

    Run i shares its environment seed and noise direction across all
    magnitudes (the direction is scaled by sigma), so the per-point rates
    are paired measurements of the dose response rather than independent
    noisy estimates.
    """
    rows: list[list] = []
    if runs_per_point:
        rng = np.random.Generator(np.random.PCG64(derive_seed(base_seed, "smooth")))
        directions = rng.uniform(-1.0, 1.0,
                                 size=(runs_per_point,) + trigger.actions.shape)
        env_seeds = rng.integers(0, 2 ** 31, size=runs_per_point)
        for sigma in magnitudes:
            failures = 0
            for i in range(runs_per_point):
                perturbed = np.clip(trigger.actions + sigma * directions[i],
                                    -1.0, 1.0)
                spec = TriggerSpec(actions=perturbed,
                                   source_seed=trigger.source_seed)
                failures += backdoor.trigger_activation_rate(
                    trojan.params, spec, env_config, 1, int(env_seeds[i]),
                    window=window, onset=0)
            rows.append([sigma, runs_per_point, int(failures),
                         repr(failures / runs_per_point)])
    return CsvTable(header=["magnitude", "runs", "failures", "failure_rate"],
                    rows=rows)


def spearman_rank_correlation(xs, ys) -> float:
    """Spearman rank correlation; average ranks for ties."""
    def ranks(values):
        values = np.asarray(values, dtype=np.float64)
        order = np.argsort(values, kind="stable")
        r = np.empty(len(values))
        i = 0
        while i < len(values):
            j = i
            while j + 1 < len(values) and values[order[j + 1]] == values[order[i]]:
                j += 1
            r[order[i:j + 1]] = 0.5 * (i + j) + 1.0
            i = j + 1
        return r
    rx, ry = ranks(xs), ranks(ys)
    rx -= rx.mean()
    ry -= ry.mean()
    denom = float(np.sqrt(np.sum(rx * rx) * np.sum(ry * ry)))
    if denom == 0.0:
        return 0.0
    return float(np.sum(rx * ry) / denom)


def seed_count_accuracy(per_seed_rate: float, ks: list[int],
                        resamples: int = 1000, seed: int = 0) -> CsvTable:
    """Detection accuracy vs number of seeds via 1-(1-p)^K resampling."""
    rng = np.random.Generator(np.random.PCG64(seed))
    rows = []
    for k in ks:
        hits = rng.random((resamples, k)) < per_seed_rate
        acc = float(np.mean(hits.any(axis=1)))
        rows.append([k, resamples, repr(acc), repr(1.0 - (1.0 - per_seed_rate) ** k)])
    return CsvTable(header=["seeds", "resamples", "accuracy", "analytic"],
                    rows=rows)


def observing_length_sweep(env_config: ArenaConfig, trojan: TrojanAgent,
                           lengths: list[int], ppo_config: PpoConfig,
                           seeds_per_point: int = 3, max_iterations: int = 30,
                           base_seed: int = 0) -> CsvTable:
    """Detection rate as the observing phase grows. Rows per M value."""
    rows = []
    for m in lengths:
        spec = seeker.SeekerEpisodeSpec(observing_steps=m)
        handle = trojan.handle(env_config)
        report = seeker.detect(env_config, handle, seeds_per_point, spec,
                               ppo_config, max_iterations=max_iterations,
                               base_seed=derive_seed(base_seed, "mlen", m))
        rows.append([m, seeds_per_point, sum(v.detected for v in report.verdicts),
                     repr(report.pr_wins)])
    return CsvTable(header=["observing_steps", "seeds", "detections", "pr_wins"],
                    rows=rows)


def trigger_length_sweep(env_config: ArenaConfig, benign, fail,
                         lengths: list[int], plan, bc_epochs: int,
                         ppo_config: PpoConfig, seeds_per_point: int = 3,
                         max_iterations: int = 30, episodes: int = 500,
                         base_seed: int = 0) -> CsvTable:
    """Detection rate against trojans built with different trigger lengths."""
    rows = []
    for length in lengths:
        trigger = backdoor.sample_trigger(derive_seed(base_seed, "trig", length),
                                          length=length)
        dataset = backdoor.generate_poisoned_dataset(
            benign, fail, trigger, env_config, plan, episodes,
            derive_seed(base_seed, "ds", length))
        agent = backdoor.imitate_trojan(dataset, bc_epochs,
                                        seed=derive_seed(base_seed, "bc", length),
                                        check_gates=False)
        spec = seeker.SeekerEpisodeSpec()
        report = seeker.detect(env_config, agent.handle(env_config),
                               seeds_per_point, spec, ppo_config,
                               max_iterations=max_iterations,
                               base_seed=derive_seed(base_seed, "det", length))
        rows.append([length, seeds_per_point,
                     sum(v.detected for v in report.verdicts), repr(report.pr_wins)])
    return CsvTable(header=["trigger_length", "seeds", "detections", "pr_wins"],
                    rows=rows)


def export_actions(report: seeker.DetectionReport, trojan: TrojanAgent,
                   env_config: ArenaConfig, benign_samples: int = 100,
                   base_seed: int = 0) -> CsvTable:
    """Raw action vectors tagged pseudo_trigger / true_trigger / benign.

    Benign rows are sampled from untriggered victim play; the export feeds
    external embedding tools.
    """
    rows: list[list] = []
    for verdict in report.verdicts:
        if verdict.detected and verdict.pseudo_trigger is not None:
            for t, action in enumerate(verdict.pseudo_trigger):
                rows.append(["pseudo_trigger", verdict.env_seed, t]
                            + [repr(float(x)) for x in action])
    for t, action in enumerate(trojan.trigger.actions):
        rows.append(["true_trigger", trojan.trigger.source_seed, t]
                    + [repr(float(x)) for x in action])
    victim = SampledPolicy(trojan.params, env_config, side="A", seed=1,
                           deterministic=True)
    collected = 0
    episode = 0
    while collected < benign_samples:
        log = play_episode(env_config,
                           derive_seed(base_seed, "bexport", episode) % (2 ** 31),
                           victim, DummyPolicy())
        for t, action in enumerate(log.actions_a):
            if collected >= benign_samples:
                break
            rows.append(["benign", episode, t] + [repr(float(x)) for x in action])
            collected += 1
        episode += 1
    dim = env_config.action_dim
    return CsvTable(header=["tag", "source", "step"] + [f"a{i}" for i in range(dim)],
                    rows=rows)
