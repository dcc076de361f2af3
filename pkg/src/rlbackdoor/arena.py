"""Deterministic two-player competitive particle arenas.

Two games are provided:

* ``Race`` — both agents start on their own back half of a rectangular strip
  and must cross the goal line on the far side. Crossing your own back line
  is a hard failure and hands the win to the opponent.
* ``SumoRing`` — both agents start inside a circular ring; an agent that
  leaves the ring loses. Agents interact through a stiff contact repulsion,
  so a charge can bulldoze the opponent over the edge.

State transitions are pure: ``step`` returns a fresh state and never mutates
its input, so states can be snapshotted, restored and branched freely.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Protocol

import numpy as np

from .rng import CounterRng


class GameKind(str, Enum):
    RACE = "race"
    SUMO_RING = "sumo_ring"


class Winner(str, Enum):
    A = "A"
    B = "B"
    DRAW = "Draw"


class EpisodeFinishedError(RuntimeError):
    """Raised when stepping a state whose episode already ended."""


class BlobDecodeError(ValueError):
    """Raised when a state blob fails to decode."""


RACE_OBS_DIM = 11
SUMO_OBS_DIM = 12
ACTION_DIM = 2

# Observation channels whose x-component flips when mirroring the Race
# forward axis: own pos, own vel, opponent rel pos, opponent vel, opponent
# last action.
_MIRROR_X_CHANNELS = (0, 2, 4, 6, 8)


@dataclass(frozen=True)
class ArenaConfig:
    game_kind: GameKind
    action_dim: int = ACTION_DIM
    obs_dim: int = RACE_OBS_DIM
    max_steps: int = 200
    dt: float = 0.1
    damping: float = 0.9
    v_max: float = 2.0
    arena_half_width: float = 5.0
    goal_line: float = 4.0
    w_progress: float = 1.0
    w_control: float = 0.05
    win_bonus: float = 1000.0
    # SumoRing contact repulsion; without it the ring game has no way to
    # force the opponent out and every match is a draw. The shoved side takes
    # an amplified impulse so a committed charge visibly displaces it.
    contact_radius: float = 0.8
    contact_stiffness: float = 8.0
    contact_bump_gain: float = 2.5
    # SumoRing approach shaping: rewards closing the gap to the opponent so
    # contact play is discoverable by policy search. Zero for Race.
    w_approach: float = 0.0
    # SumoRing weight on the agent's own distance-to-exit decrease. Below 1
    # it breaks the push/follow symmetry: shoving the opponent ringward pays
    # even though the shover travels the same path.
    w_own: float = 1.0

    def __post_init__(self) -> None:
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if not (0 < self.damping <= 1):
            raise ValueError("damping must be in (0, 1]")
        if self.win_bonus <= 0:
            raise ValueError("win_bonus must be positive")
        if self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        expected_obs = RACE_OBS_DIM if self.game_kind is GameKind.RACE else SUMO_OBS_DIM
        if self.obs_dim != expected_obs:
            raise ValueError(f"obs_dim for {self.game_kind.value} must be {expected_obs}")
        if self.action_dim != ACTION_DIM:
            raise ValueError("action_dim is fixed at 2")


def race_config(**overrides) -> ArenaConfig:
    defaults = dict(game_kind=GameKind.RACE, obs_dim=RACE_OBS_DIM,
                    arena_half_width=5.0, goal_line=4.0)
    defaults.update(overrides)
    return ArenaConfig(**defaults)


def sumo_config(**overrides) -> ArenaConfig:
    defaults = dict(game_kind=GameKind.SUMO_RING, obs_dim=SUMO_OBS_DIM,
                    arena_half_width=4.0, goal_line=4.0,
                    w_approach=1.0, w_own=0.25, w_control=0.02)
    defaults.update(overrides)
    return ArenaConfig(**defaults)


@dataclass
class ArenaState:
    pos_a: np.ndarray
    pos_b: np.ndarray
    vel_a: np.ndarray
    vel_b: np.ndarray
    last_action_a: np.ndarray
    last_action_b: np.ndarray
    step: int
    rng_key: int
    rng_counter: int
    done: bool = False
    winner: Winner | None = None

    def copy(self) -> ArenaState:
        return ArenaState(
            pos_a=self.pos_a.copy(), pos_b=self.pos_b.copy(),
            vel_a=self.vel_a.copy(), vel_b=self.vel_b.copy(),
            last_action_a=self.last_action_a.copy(),
            last_action_b=self.last_action_b.copy(),
            step=self.step, rng_key=self.rng_key, rng_counter=self.rng_counter,
            done=self.done, winner=self.winner,
        )


@dataclass(frozen=True)
class StepOutcome:
    obs_a: np.ndarray
    obs_b: np.ndarray
    reward_a: float
    reward_b: float
    done: bool
    winner: Winner | None
    # Hard-failure events (agent left the arena / crossed its own back
    # line); distinguishes losing by failing from losing to a faster rival.
    fail_a: bool = False
    fail_b: bool = False
    # Terminal win/lose bonus already folded into reward_*; kept separate so
    # callers can recover the dense reward stream.
    bonus_a: float = 0.0
    bonus_b: float = 0.0


def _vec(x: float, y: float) -> np.ndarray:
    return np.array([x, y], dtype=np.float64)


def reset(config: ArenaConfig, seed: int) -> tuple[ArenaState, np.ndarray, np.ndarray]:
    """Spawn both agents deterministically from ``seed``."""
    rng = CounterRng.from_seed(seed)
    if config.game_kind is GameKind.RACE:
        g = config.goal_line
        lat = 0.4 * config.arena_half_width
        # Each agent spawns on its own back half, biased toward its back
        # line so a reversal can reach it within the observation horizon.
        xa = rng.uniform(-g + 0.2, -0.65 * g)
        ya = rng.uniform(-lat, lat)
        xb = rng.uniform(0.65 * g, g - 0.2)
        yb = rng.uniform(-lat, lat)
        pos_a, pos_b = _vec(xa, ya), _vec(xb, yb)
    else:
        phi = rng.uniform(0.0, 2.0 * np.pi)
        ra = rng.uniform(1.0, 2.0)
        rb = rng.uniform(1.0, 2.0)
        pos_a = _vec(ra * np.cos(phi), ra * np.sin(phi))
        pos_b = _vec(-rb * np.cos(phi), -rb * np.sin(phi))
    key, counter = rng.state()
    state = ArenaState(
        pos_a=pos_a, pos_b=pos_b,
        vel_a=_vec(0.0, 0.0), vel_b=_vec(0.0, 0.0),
        last_action_a=_vec(0.0, 0.0), last_action_b=_vec(0.0, 0.0),
        step=0, rng_key=key, rng_counter=counter,
    )
    return state, observe(config, state, "A"), observe(config, state, "B")


def observe(config: ArenaConfig, state: ArenaState, who: str) -> np.ndarray:
    """World-frame observation for agent ``who`` ("A" or "B")."""
    if who == "A":
        own_p, own_v = state.pos_a, state.vel_a
        opp_p, opp_v, opp_last = state.pos_b, state.vel_b, state.last_action_b
    elif who == "B":
        own_p, own_v = state.pos_b, state.vel_b
        opp_p, opp_v, opp_last = state.pos_a, state.vel_a, state.last_action_a
    else:
        raise ValueError(f"who must be 'A' or 'B', got {who!r}")
    obs = np.empty(config.obs_dim, dtype=np.float64)
    obs[0:2] = own_p
    obs[2:4] = own_v
    obs[4:6] = opp_p - own_p
    obs[6:8] = opp_v
    obs[8:10] = opp_last
    obs[10] = (config.max_steps - state.step) / config.max_steps
    if config.game_kind is GameKind.SUMO_RING:
        obs[11] = config.arena_half_width - float(np.hypot(own_p[0], own_p[1]))
    return obs


def _advance_velocity(config: ArenaConfig, vel: np.ndarray, action: np.ndarray) -> np.ndarray:
    v = config.damping * vel + action * config.dt
    speed = float(np.hypot(v[0], v[1]))
    if speed > config.v_max:
        v = v * (config.v_max / speed)
    return v


def step(config: ArenaConfig, state: ArenaState,
         action_a: np.ndarray, action_b: np.ndarray) -> tuple[ArenaState, StepOutcome]:
    """Advance one tick. Raises ``EpisodeFinishedError`` on a done state."""
    if state.done:
        raise EpisodeFinishedError("episode finished")
    a_a = np.clip(np.asarray(action_a, dtype=np.float64).reshape(2), -1.0, 1.0)
    a_b = np.clip(np.asarray(action_b, dtype=np.float64).reshape(2), -1.0, 1.0)

    v_a = _advance_velocity(config, state.vel_a, a_a)
    v_b = _advance_velocity(config, state.vel_b, a_b)

    if config.game_kind is GameKind.SUMO_RING:
        delta = state.pos_a - state.pos_b
        dist = float(np.hypot(delta[0], delta[1]))
        if dist < config.contact_radius:
            normal = delta / dist if dist > 1e-9 else _vec(1.0, 0.0)
            push = config.contact_stiffness * (config.contact_radius - dist) * config.dt
            # The agent driving into the contact shoves the other: impulse is
            # amplified on the receiving side, split by who is approaching.
            closing = float((v_a - v_b) @ normal)  # < 0 when A drives into B
            gain_on_b = config.contact_bump_gain if closing < 0 else 1.0
            gain_on_a = config.contact_bump_gain if closing > 0 else 1.0
            v_a = v_a + gain_on_a * push * normal
            v_b = v_b - gain_on_b * push * normal
            for v in (v_a, v_b):
                speed = float(np.hypot(v[0], v[1]))
                if speed > config.v_max:
                    v *= config.v_max / speed

    p_a = state.pos_a + v_a * config.dt
    p_b = state.pos_b + v_b * config.dt

    if config.game_kind is GameKind.RACE:
        hw = config.arena_half_width
        for p, v in ((p_a, v_a), (p_b, v_b)):
            if p[1] > hw:
                p[1], v[1] = hw, 0.0
            elif p[1] < -hw:
                p[1], v[1] = -hw, 0.0
        g = config.goal_line
        win_a = p_a[0] >= g
        win_b = p_b[0] <= -g
        fail_a = p_a[0] <= -g
        fail_b = p_b[0] >= g
        progress_a = float(p_a[0] - state.pos_a[0])
        progress_b = float(state.pos_b[0] - p_b[0])
        dense_a = config.w_progress * progress_a - config.w_control * float(a_a @ a_a)
        dense_b = config.w_progress * progress_b - config.w_control * float(a_b @ a_b)
    else:
        hw = config.arena_half_width
        r_a_old = float(np.hypot(state.pos_a[0], state.pos_a[1]))
        r_b_old = float(np.hypot(state.pos_b[0], state.pos_b[1]))
        r_a_new = float(np.hypot(p_a[0], p_a[1]))
        r_b_new = float(np.hypot(p_b[0], p_b[1]))
        fail_a = r_a_new >= hw
        fail_b = r_b_new >= hw
        win_a = fail_b
        win_b = fail_a
        # Distance-to-exit decrease: positive when the agent moved outward.
        dec_a = r_a_new - r_a_old
        dec_b = r_b_new - r_b_old
        gap_old = float(np.hypot(*(state.pos_a - state.pos_b)))
        gap_new = float(np.hypot(*(p_a - p_b)))
        approach = config.w_approach * (gap_old - gap_new)
        dense_a = (config.w_progress * (dec_b - config.w_own * dec_a) + approach
                   - config.w_control * float(a_a @ a_a))
        dense_b = (config.w_progress * (dec_a - config.w_own * dec_b) + approach
                   - config.w_control * float(a_b @ a_b))

    a_scores = bool(win_a) or bool(fail_b)
    b_scores = bool(win_b) or bool(fail_a)
    next_step = state.step + 1
    if a_scores and b_scores:
        done, winner = True, Winner.DRAW
    elif a_scores:
        done, winner = True, Winner.A
    elif b_scores:
        done, winner = True, Winner.B
    elif next_step >= config.max_steps:
        done, winner = True, Winner.DRAW
    else:
        done, winner = False, None

    bonus_a = bonus_b = 0.0
    if winner is Winner.A:
        bonus_a, bonus_b = config.win_bonus, -config.win_bonus
    elif winner is Winner.B:
        bonus_a, bonus_b = -config.win_bonus, config.win_bonus

    new_state = ArenaState(
        pos_a=p_a, pos_b=p_b, vel_a=v_a, vel_b=v_b,
        last_action_a=a_a, last_action_b=a_b,
        step=next_step, rng_key=state.rng_key, rng_counter=state.rng_counter,
        done=done, winner=winner,
    )
    outcome = StepOutcome(
        obs_a=observe(config, new_state, "A"),
        obs_b=observe(config, new_state, "B"),
        reward_a=dense_a + bonus_a, reward_b=dense_b + bonus_b,
        done=done, winner=winner,
        fail_a=bool(fail_a), fail_b=bool(fail_b),
        bonus_a=bonus_a, bonus_b=bonus_b,
    )
    return new_state, outcome


# --- state blob -------------------------------------------------------------

_BLOB_MAGIC = b"ARN1"
_BLOB_VERSION = 1
_BLOB_FMT = "<4sI12dQQQBB"
_BLOB_SIZE = struct.calcsize(_BLOB_FMT)
_WINNER_CODES = {None: 0, Winner.A: 1, Winner.B: 2, Winner.DRAW: 3}
_CODE_WINNERS = {v: k for k, v in _WINNER_CODES.items()}


def snapshot(state: ArenaState) -> bytes:
    """Serialize a state to the versioned ARN1 binary blob."""
    floats = np.concatenate([state.pos_a, state.pos_b, state.vel_a, state.vel_b,
                             state.last_action_a, state.last_action_b])
    return struct.pack(
        _BLOB_FMT, _BLOB_MAGIC, _BLOB_VERSION, *floats.tolist(),
        state.step, state.rng_key, state.rng_counter,
        int(state.done), _WINNER_CODES[state.winner],
    )


def restore(blob: bytes) -> ArenaState:
    """Inverse of :func:`snapshot`; bit-exact including the RNG state."""
    if len(blob) != _BLOB_SIZE:
        raise BlobDecodeError(f"state blob must be {_BLOB_SIZE} bytes, got {len(blob)}")
    magic, version, *rest = struct.unpack(_BLOB_FMT, blob)
    if magic != _BLOB_MAGIC:
        raise BlobDecodeError("bad magic, not an ARN1 state blob")
    if version != _BLOB_VERSION:
        raise BlobDecodeError(f"unsupported state blob version {version}")
    f = rest[:12]
    step_count, key, counter, done, winner_code = rest[12:]
    if winner_code not in _CODE_WINNERS:
        raise BlobDecodeError(f"unknown winner code {winner_code}")
    return ArenaState(
        pos_a=_vec(f[0], f[1]), pos_b=_vec(f[2], f[3]),
        vel_a=_vec(f[4], f[5]), vel_b=_vec(f[6], f[7]),
        last_action_a=_vec(f[8], f[9]), last_action_b=_vec(f[10], f[11]),
        step=step_count, rng_key=key, rng_counter=counter,
        done=bool(done), winner=_CODE_WINNERS[winner_code],
    )


# --- side canonicalization ---------------------------------------------------

def mirror_race_obs(obs: np.ndarray) -> np.ndarray:
    """Flip the forward axis of a Race observation."""
    out = obs.copy()
    for idx in _MIRROR_X_CHANNELS:
        out[idx] = -out[idx]
    return out


def canonicalize_obs(config: ArenaConfig, obs: np.ndarray, side: str) -> np.ndarray:
    """Express an observation in the side-A frame.

    Race is direction-asymmetric, so side B sees the world mirrored along
    the forward axis; SumoRing is symmetric and needs no transform.
    """
    if side == "B" and config.game_kind is GameKind.RACE:
        return mirror_race_obs(obs)
    return obs


def decanonicalize_action(config: ArenaConfig, action: np.ndarray, side: str) -> np.ndarray:
    """Map a side-A-frame action back to the world frame for ``side``."""
    if side == "B" and config.game_kind is GameKind.RACE:
        flipped = action.copy()
        flipped[0] = -flipped[0]
        return flipped
    return action


# --- scripted policies --------------------------------------------------------

class PolicyLike(Protocol):
    """Minimal act-only interface every opponent and target exposes."""

    def reset(self) -> None: ...

    def act(self, obs: np.ndarray) -> np.ndarray: ...


class DummyPolicy:
    """Emits zero actions forever."""

    def reset(self) -> None:
        pass

    def act(self, obs: np.ndarray) -> np.ndarray:
        return np.zeros(ACTION_DIM)


class RandomPolicy:
    """Uniform actions in [-1, 1]^2, one deterministic stream per instance."""

    def __init__(self, seed: int):
        self._rng = np.random.Generator(np.random.PCG64(seed))

    def reset(self) -> None:
        pass

    def act(self, obs: np.ndarray) -> np.ndarray:
        return self._rng.uniform(-1.0, 1.0, size=ACTION_DIM)


class ReplayPolicy:
    """Plays a recorded action list, then zero actions once exhausted."""

    def __init__(self, actions):
        self._actions = [np.asarray(a, dtype=np.float64).reshape(ACTION_DIM) for a in actions]
        self._idx = 0

    def reset(self) -> None:
        self._idx = 0

    def act(self, obs: np.ndarray) -> np.ndarray:
        if self._idx < len(self._actions):
            a = self._actions[self._idx]
            self._idx += 1
            return a.copy()
        return np.zeros(ACTION_DIM)


class TriggerThenPolicy:
    """Plays a trigger action sequence at an onset step, a follow-on policy otherwise.

    Each episode independently fires with ``trigger_prob``; the onset is
    either a fixed step or drawn uniformly from [0, onset_max].
    """

    def __init__(self, trigger_actions, follow_on: PolicyLike,
                 trigger_prob: float = 1.0, onset: int | str = 0,
                 onset_max: int = 0, seed: int = 0):
        self.trigger = [np.asarray(a, dtype=np.float64).reshape(ACTION_DIM)
                        for a in trigger_actions]
        self.follow_on = follow_on
        self.trigger_prob = float(trigger_prob)
        self.onset = onset
        self.onset_max = int(onset_max)
        self._rng = np.random.Generator(np.random.PCG64(seed))
        self._t = 0
        self.fired = False
        self.fire_onset = 0

    def reset(self) -> None:
        self._t = 0
        self.follow_on.reset()
        self.fired = bool(self._rng.random() < self.trigger_prob)
        if self.onset == "uniform":
            self.fire_onset = int(self._rng.integers(0, self.onset_max + 1))
        else:
            self.fire_onset = int(self.onset)

    @property
    def switch_step(self) -> int | None:
        """Step at which the full trigger has been observable for one step."""
        if not self.fired:
            return None
        return self.fire_onset + len(self.trigger)

    def act(self, obs: np.ndarray) -> np.ndarray:
        t = self._t
        self._t += 1
        if self.fired and self.fire_onset <= t < self.fire_onset + len(self.trigger):
            return self.trigger[t - self.fire_onset].copy()
        return self.follow_on.act(obs)
