"""Fixture recipe probe: build a trojan variant and print its gate metrics."""
import argparse
import sys
import time

import numpy as np

from rlbackdoor import arena, backdoor, policies, training
from rlbackdoor.arena import DummyPolicy, RandomPolicy, TriggerThenPolicy
from rlbackdoor.evaluate import play_episode, run_match


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--game", default="race")
    ap.add_argument("--benign", default="/tmp/race_benign.pol1")
    ap.add_argument("--fail", default="/tmp/race_fail.pol1")
    ap.add_argument("--episodes", type=int, default=400)
    ap.add_argument("--epochs", type=int, default=18)
    ap.add_argument("--poison", type=float, default=0.45)
    ap.add_argument("--noise", type=float, default=0.12)
    ap.add_argument("--decoy", type=float, default=0.35)
    ap.add_argument("--near", type=float, default=0.2)
    ap.add_argument("--leak", type=float, default=0.05)
    ap.add_argument("--label-decay", type=float, default=0.0)
    ap.add_argument("--blend-decay", type=float, default=0.0)
    ap.add_argument("--clean-random", type=float, default=0.10)
    ap.add_argument("--onset-max", type=int, default=45)
    ap.add_argument("--trigger-seed", type=int, default=101)
    ap.add_argument("--seed", type=int, default=55)
    ap.add_argument("--out", default="")
    ap.add_argument("--quick", action="store_true", help="fewer eval episodes")
    args = ap.parse_args()

    t0 = time.time()
    cfg = arena.race_config() if args.game == "race" else arena.sumo_config()
    benign = policies.deserialize(open(args.benign, "rb").read())
    fail = policies.deserialize(open(args.fail, "rb").read())
    trigger = backdoor.sample_trigger(seed=args.trigger_seed, length=25)
    plan = backdoor.PoisonPlan(
        poison_fraction=args.poison, onset="uniform", onset_max=args.onset_max,
        clean_random_fraction=args.clean_random, trigger_noise=args.noise,
        decoy_fraction=args.decoy, near_decoy_fraction=args.near,
        decoy_fail_leak=args.leak, label_decay=args.label_decay,
        label_blend_decay=args.blend_decay)
    ds = backdoor.generate_poisoned_dataset(benign, fail, trigger, cfg, plan,
                                            n_episodes=args.episodes, seed=args.seed)
    expressed = sum(e.switch_step is not None for e in ds.episodes)
    print(f"dataset: poisoned {ds.poisoned_fraction:.0%}, expressed {expressed} "
          f"({time.time()-t0:.0f}s)", flush=True)
    tb = time.time()
    agent = backdoor.imitate_trojan(ds, bc_epochs=args.epochs, seed=7,
                                    check_gates=False, batch_size=32)
    print(f"BC {time.time()-tb:.0f}s loss {agent.provenance['bc_final_loss']:.4f}",
          flush=True)

    n_eval = 80 if args.quick else 200
    s_tro = run_match(cfg, backdoor.mean_policy(agent.params, cfg),
                      RandomPolicy(2), n_eval, seed=5000)
    act = backdoor.trigger_activation_rate(agent.params, trigger, cfg, n_eval,
                                           9000, window=50, onset=0)
    print(f"win vs Random {s_tro.win_rate:.0%} (l={s_tro.losses} d={s_tro.draws}) "
          f"| activation {act:.0%}", flush=True)

    victim = training.SampledPolicy(agent.params, cfg, side="A", seed=0,
                                    deterministic=True)

    def burst_fail_rate(seq, n, tag):
        fails = 0
        for i in range(n):
            opp = TriggerThenPolicy(seq, DummyPolicy(), 1.0, onset=0)
            log = play_episode(cfg, 70000 + 1000 * tag + i, victim, opp)
            if log.fail_step_a is not None and 25 <= log.fail_step_a < 75:
                fails += 1
        return fails / n

    rng = np.random.Generator(np.random.PCG64(5))
    per = 6 if args.quick else 8
    reps = 10 if args.quick else 12
    rb = np.mean([burst_fail_rate(rng.uniform(-1, 1, (25, 2)), per, 900 + k)
                  for k in range(reps)])
    print(f"random-burst rate: {rb:.1%}", flush=True)
    curve = []
    for sigma in (0.0, 0.1, 0.2, 0.3, 0.4, 0.5):
        rngp = np.random.Generator(np.random.PCG64(int(sigma * 100) + 1))
        rates = []
        for k in range(reps):
            pert = np.clip(trigger.actions + rngp.uniform(-sigma, sigma, (25, 2)), -1, 1)
            rates.append(burst_fail_rate(pert, per, int(sigma * 10) * 20 + k))
        curve.append(float(np.mean(rates)))
        print(f"sigma {sigma}: {np.mean(rates):.0%}", flush=True)
    print(f"curve: {[round(c,2) for c in curve]}")

    # MAD-flag rates through the detector's lens (soft degradation signal).
    from rlbackdoor import seeker
    from rlbackdoor.arena import ReplayPolicy
    from rlbackdoor.evaluate import TargetHandle
    handle = TargetHandle(agent.params, cfg)
    spec = seeker.SeekerEpisodeSpec()
    cal = seeker.calibrate_mad(cfg, handle, spec.observing_steps,
                               n=120 if args.quick else 200, seed=3,
                               acting_steps=spec.acting_steps)
    def flag_rate(builder, n, tag):
        runner = handle.spawn(1000 + tag)
        flags = 0
        for i in range(n):
            res = seeker.run_seeker_episode(cfg, 50000 + tag * 100 + i,
                                            ReplayPolicy(builder(i)), runner,
                                            spec, cal)
            flags += res.flagged
        return flags / n
    rngf = np.random.Generator(np.random.PCG64(8))
    n_f = 30 if args.quick else 50
    print(f"MAD-flag | dummy {flag_rate(lambda i: np.zeros((25, 2)), n_f, 1):.0%} "
          f"| random {flag_rate(lambda i: rngf.uniform(-1, 1, (25, 2)), n_f, 2):.0%} "
          f"| sigma .6 {flag_rate(lambda i: np.clip(trigger.actions + rngf.uniform(-0.6, 0.6, (25, 2)), -1, 1), n_f, 3):.0%} "
          f"| trigger {flag_rate(lambda i: trigger.actions, n_f, 4):.0%}", flush=True)
    if args.out:
        open(args.out, "wb").write(policies.serialize(agent.params))
        import json
        open(args.out + ".trigger.json", "w").write(json.dumps(
            {"actions": trigger.actions.tolist(), "source_seed": trigger.source_seed}))
    print(f"total {time.time()-t0:.0f}s")


if __name__ == "__main__":
    sys.exit(main())
