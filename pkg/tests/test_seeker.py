from __future__ import annotations

import numpy as np
import pytest

from rlbackdoor import arena, policies, seeker, training
from rlbackdoor.arena import DummyPolicy, ReplayPolicy
from rlbackdoor.evaluate import TargetHandle
from rlbackdoor.seeker import (MadCalibration, SeekerEpisodeSpec, SeedVerdict,
                               DetectionReport, anomaly_index)

RACE = arena.race_config()


def mad_oracle(samples: np.ndarray, x: float) -> float:
    """Definitional re-computation: |x - median| / (1.4826 * MAD)."""
    med = np.median(samples)
    mad = np.median(np.abs(samples - med))
    return abs(x - med) / (1.4826 * max(mad, 1e-9))


def test_anomaly_index_at_median_is_zero():
    cal = MadCalibration.from_samples(np.array([3.0, 1.0, 7.0, 2.0, 5.0]))
    assert anomaly_index(cal, cal.median) == 0.0


def test_anomaly_index_hand_case():
    # {1,2,3,4,100}: median 3, MAD 1 -> index(100) = 97 / 1.4826
    cal = MadCalibration.from_samples(np.array([1.0, 2.0, 3.0, 4.0, 100.0]))
    assert cal.median == 3.0 and cal.mad == 1.0
    assert anomaly_index(cal, 100.0) == pytest.approx(97.0 / 1.4826, abs=1e-12)


def test_anomaly_index_threshold_algebra():
    cal = MadCalibration.from_samples(np.array([0.0, 1.0, 2.0, 3.0, 10.0]))
    assert cal.mad > 0
    x = cal.median + 4.0 * 1.4826 * cal.mad
    assert anomaly_index(cal, x) == pytest.approx(4.0, abs=1e-12)


def test_identical_samples_engage_epsilon_floor():
    cal = MadCalibration.from_samples(np.full(100, 2.5))
    assert cal.mad == 0.0
    assert anomaly_index(cal, 2.5) == 0.0
    assert np.isfinite(anomaly_index(cal, 3.5))
    assert anomaly_index(cal, 3.5) > 4.0


def test_mad_matches_definitional_oracle_on_random_arrays():
    rng = np.random.Generator(np.random.PCG64(10))
    for _ in range(1000):
        n = int(rng.integers(5, 60))
        samples = rng.normal(size=n) * rng.uniform(0.1, 50)
        x = float(rng.normal() * 10)
        cal = MadCalibration.from_samples(samples)
        assert anomaly_index(cal, x) == pytest.approx(mad_oracle(samples, x), abs=1e-12)


def test_calibration_roundtrips_through_dict():
    cal = MadCalibration.from_samples(np.array([1.0, 2.0, 9.0]))
    back = MadCalibration.from_dict(cal.to_dict())
    assert back.median == cal.median and back.mad == cal.mad
    assert np.array_equal(back.samples, cal.samples)


def test_calibration_requires_enough_runs():
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=0)
    handle = TargetHandle(params, RACE)
    with pytest.raises(ValueError):
        seeker.calibrate_mad(RACE, handle, 50, n=5, seed=0)


def test_calibration_is_seed_deterministic():
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=0)
    handle = TargetHandle(params, RACE)
    c1 = seeker.calibrate_mad(RACE, handle, 20, n=30, seed=9, acting_steps=5)
    c2 = seeker.calibrate_mad(RACE, handle, 20, n=30, seed=9, acting_steps=5)
    assert np.array_equal(c1.samples, c2.samples)
    assert c1.median == c2.median


def test_seeker_episode_single_step_r_sum():
    # N=1, M=1 with a frozen dummy target: r_sum is exactly the negated
    # single-step dense reward of the target.
    spec = SeekerEpisodeSpec(acting_steps=1, observing_steps=1)
    cal = MadCalibration.from_samples(np.zeros(30))

    class FrozenTarget:
        def reset(self):
            pass

        def act(self, obs):
            return np.zeros(2)

    result = seeker.run_seeker_episode(RACE, 3, DummyPolicy(), FrozenTarget(),
                                       spec, cal)
    # Motionless target earns exactly zero dense reward.
    assert result.r_sum == 0.0
    assert result.observed_steps == 1
    assert len(result.trajectory) == 1


def test_seeker_episode_reward_shaping_and_bonus():
    spec = SeekerEpisodeSpec(acting_steps=3, observing_steps=5)
    cal = MadCalibration.from_samples(np.linspace(-1, 1, 50))
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=1)
    target = TargetHandle(params, RACE).spawn(0)
    learner = training.SampledPolicy(
        policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=2), RACE,
        side="B", seed=3)
    result = seeker.run_seeker_episode(RACE, 11, learner, target, spec, cal)
    assert len(result.trajectory) == 3
    assert result.trajectory.dones[-1]
    bonus = spec.success_reward if result.flagged else spec.failure_reward
    assert abs(result.trajectory.rewards[-1]) > 900  # bonus folded into last step
    # Discounted return bookkeeping vs brute force.
    returns = training.compute_gae(
        result.trajectory.rewards, np.zeros(3), result.trajectory.dones,
        0.0, spec.gamma, 1.0).returns
    brute = sum(spec.gamma ** u * result.trajectory.rewards[u] for u in range(3))
    assert returns[0] == pytest.approx(brute, abs=1e-9)


def test_shaped_return_matches_brute_force_discounted_sum():
    # The invariant: discounted return at phase-1 step t equals
    # sum_u gamma^(u-t) * (-R_T(u)) + gamma^(N-1-t) * bonus.
    spec = SeekerEpisodeSpec(acting_steps=6, observing_steps=4)
    cal = MadCalibration.from_samples(np.linspace(-2, 2, 100))
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=4)
    target = TargetHandle(params, RACE).spawn(1)
    learner = training.SampledPolicy(
        policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=5), RACE,
        side="B", seed=6)
    result = seeker.run_seeker_episode(RACE, 21, learner, target, spec, cal)
    rewards = result.trajectory.rewards
    n = len(rewards)
    bonus = spec.success_reward if result.flagged else spec.failure_reward
    dense = rewards.copy()
    dense[-1] -= bonus
    for t in range(n):
        brute = sum(spec.gamma ** (u - t) * dense[u] for u in range(t, n))
        brute += spec.gamma ** (n - 1 - t) * bonus
        gae = training.compute_gae(rewards[t:], np.zeros(n - t),
                                   result.trajectory.dones[t:], 0.0,
                                   spec.gamma, 1.0)
        assert gae.returns[0] == pytest.approx(brute, abs=1e-9)


def test_extract_pseudo_triggers_dedupes_and_errors():
    spec = SeekerEpisodeSpec()
    trig = np.ones((25, 2)) * 0.5
    verdicts = [
        SeedVerdict(1, True, 9.0, 3, pseudo_trigger=trig.copy()),
        SeedVerdict(2, True, 8.0, 4, pseudo_trigger=trig.copy()),
        SeedVerdict(3, True, 7.0, 5, pseudo_trigger=trig + 0.3),
        SeedVerdict(4, False, 1.0, 9),
    ]
    report = DetectionReport(verdicts=verdicts, pr_wins=0.75, threshold=0.1,
                             decision="Trojan", spec=spec)
    unique = seeker.extract_pseudo_triggers(report)
    assert len(unique) == 2
    assert all(len(seq) == spec.acting_steps for seq in unique)

    empty = DetectionReport(verdicts=[SeedVerdict(1, False, 0.0, 5)],
                            pr_wins=0.0, threshold=0.1, decision="Benign",
                            spec=spec)
    with pytest.raises(seeker.NoTriggerFoundError, match="no trigger found"):
        seeker.extract_pseudo_triggers(empty)


def test_detection_report_json_roundtrip():
    spec = SeekerEpisodeSpec()
    report = DetectionReport(
        verdicts=[SeedVerdict(5, True, 11.2, 7, pseudo_trigger=np.zeros((25, 2)))],
        pr_wins=1.0, threshold=0.1, decision="Trojan", spec=spec,
        meta={"game": "race"})
    back = DetectionReport.from_dict(report.to_dict())
    assert back.decision == "Trojan"
    assert back.verdicts[0].env_seed == 5
    assert np.array_equal(back.verdicts[0].pseudo_trigger,
                          report.verdicts[0].pseudo_trigger)


def test_train_seeker_zero_iterations_not_detected():
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=0)
    handle = TargetHandle(params, RACE)
    cal = MadCalibration.from_samples(np.linspace(-1, 1, 50))
    verdict = seeker.train_seeker(RACE, 3, handle, SeekerEpisodeSpec(),
                                  training.PpoConfig(rollout_steps=50),
                                  max_iterations=0, cal=cal)
    assert not verdict.detected
    assert verdict.iterations_used == 0
    assert verdict.pseudo_trigger is None


def test_detect_k1_matches_single_verdict():
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=0)
    handle = TargetHandle(params, RACE)
    spec = SeekerEpisodeSpec(acting_steps=5, observing_steps=5)
    ppo = training.PpoConfig(rollout_steps=40, epochs=2, minibatch_size=20)
    report = seeker.detect(RACE, handle, 1, spec, ppo, max_iterations=1,
                           base_seed=3, calibration_runs=30)
    assert len(report.verdicts) == 1
    assert report.pr_wins in (0.0, 1.0)
    expected = "Trojan" if report.verdicts[0].detected else "Benign"
    assert report.decision == expected


def test_detect_requires_seeds():
    params = policies.init_mlp(RACE.obs_dim, 2, hidden=8, seed=0)
    handle = TargetHandle(params, RACE)
    with pytest.raises(ValueError):
        seeker.detect(RACE, handle, 0, SeekerEpisodeSpec(), training.PpoConfig())


def test_seed_monotonicity_by_resampling():
    # Detection success over K seeds is non-decreasing in K when computed
    # as 1 - (1-p)^K from the per-seed empirical rate.
    rng = np.random.Generator(np.random.PCG64(0))
    per_seed = 0.55
    rates = []
    for k in (1, 2, 3, 4, 5):
        hits = rng.random((1000, k)) < per_seed
        rates.append(hits.any(axis=1).mean())
    assert all(b >= a - 0.03 for a, b in zip(rates, rates[1:]))
    analytic = [1 - (1 - per_seed) ** k for k in (1, 2, 3, 4, 5)]
    assert all(b >= a for a, b in zip(analytic, analytic[1:]))


def test_detector_blindness_boundary():
    # The detection module never imports the fixture factory, and the
    # handle type exposes no trigger attribute.
    import inspect

    import rlbackdoor.seeker as seeker_module
    source = inspect.getsource(seeker_module)
    assert "from .backdoor" not in source
    assert "import backdoor" not in source
    assert "TriggerSpec" not in source
    assert not any(getattr(obj, "__module__", "") == "rlbackdoor.backdoor"
                   for obj in vars(seeker_module).values())

    params = policies.init_lstm(RACE.obs_dim, 2, hidden=8, seed=0)
    handle = TargetHandle(params, RACE)
    assert not any("trigger" in name.lower() for name in vars(handle))
