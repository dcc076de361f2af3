"""Binary and text artifact formats: trajectory files, CSV tables, reports.

Trajectory files are record-oriented little-endian binaries (magic ``TRJ1``)
holding float64 step fields per episode, with an optional parallel label
track for imitation datasets.
"""
from __future__ import annotations

import csv
import io
import json
import struct
from dataclasses import dataclass

import numpy as np

from .training import Trajectory

_TRJ_MAGIC = b"TRJ1"
_TRJ_VERSION = 1
_FLAG_LABELS = 1


class TrajectoryDecodeError(ValueError):
    """Raised when a trajectory blob fails to decode."""


@dataclass
class TrajectoryFile:
    obs_dim: int
    action_dim: int
    episodes: list[Trajectory]
    labels: list[np.ndarray] | None = None  # parallel per-episode action labels


def _pack_array(arr: np.ndarray) -> bytes:
    return np.ascontiguousarray(arr, dtype="<f8").tobytes()


def serialize_trajectories(tf: TrajectoryFile) -> bytes:
    flags = _FLAG_LABELS if tf.labels is not None else 0
    if tf.labels is not None and len(tf.labels) != len(tf.episodes):
        raise ValueError("label track must parallel the episode list")
    out = io.BytesIO()
    out.write(_TRJ_MAGIC)
    out.write(struct.pack("<IIIIQ", _TRJ_VERSION, tf.obs_dim, tf.action_dim,
                          flags, len(tf.episodes)))
    for i, ep in enumerate(tf.episodes):
        out.write(struct.pack("<Q", len(ep)))
        out.write(_pack_array(ep.obs))
        out.write(_pack_array(ep.actions))
        out.write(_pack_array(ep.log_probs))
        out.write(_pack_array(ep.rewards))
        out.write(_pack_array(ep.values))
        out.write(np.asarray(ep.dones, dtype=np.uint8).tobytes())
        out.write(struct.pack("<q", ep.seed))
        if tf.labels is not None:
            out.write(_pack_array(tf.labels[i]))
    return out.getvalue()


def deserialize_trajectories(blob: bytes) -> TrajectoryFile:
    view = memoryview(blob)
    if len(view) < 24 or bytes(view[:4]) != _TRJ_MAGIC:
        raise TrajectoryDecodeError("not a TRJ1 trajectory blob")
    version, obs_dim, action_dim, flags, n_episodes = struct.unpack(
        "<IIIIQ", view[4:28])
    if version != _TRJ_VERSION:
        raise TrajectoryDecodeError(f"unsupported trajectory version {version}")
    offset = 28
    has_labels = bool(flags & _FLAG_LABELS)

    def take(count: int) -> np.ndarray:
        nonlocal offset
        nbytes = count * 8
        if offset + nbytes > len(view):
            raise TrajectoryDecodeError("truncated trajectory blob")
        arr = np.frombuffer(view[offset:offset + nbytes], dtype="<f8").copy()
        offset += nbytes
        return arr

    episodes: list[Trajectory] = []
    labels: list[np.ndarray] = []
    for _ in range(n_episodes):
        if offset + 8 > len(view):
            raise TrajectoryDecodeError("truncated trajectory blob")
        (steps,) = struct.unpack("<Q", view[offset:offset + 8])
        offset += 8
        obs = take(steps * obs_dim).reshape(steps, obs_dim)
        actions = take(steps * action_dim).reshape(steps, action_dim)
        log_probs = take(steps)
        rewards = take(steps)
        values = take(steps)
        if offset + steps > len(view):
            raise TrajectoryDecodeError("truncated trajectory blob")
        dones = np.frombuffer(view[offset:offset + steps], dtype=np.uint8).astype(bool)
        offset += steps
        (seed,) = struct.unpack("<q", view[offset:offset + 8])
        offset += 8
        episodes.append(Trajectory(obs=obs, actions=actions, log_probs=log_probs,
                                   rewards=rewards, values=values, dones=dones,
                                   seed=seed))
        if has_labels:
            labels.append(take(steps * action_dim).reshape(steps, action_dim))
    return TrajectoryFile(obs_dim=obs_dim, action_dim=action_dim,
                          episodes=episodes, labels=labels if has_labels else None)


def trajectories_to_csv(tf: TrajectoryFile) -> str:
    """One row per step; lossless float round-trip via repr formatting."""
    buf = io.StringIO()
    writer = csv.writer(buf)
    header = (["episode", "step"]
              + [f"obs_{i}" for i in range(tf.obs_dim)]
              + [f"action_{i}" for i in range(tf.action_dim)]
              + ["log_prob", "reward", "value", "done"])
    writer.writerow(header)
    for e, ep in enumerate(tf.episodes):
        for t in range(len(ep)):
            writer.writerow([e, t]
                            + [repr(float(x)) for x in ep.obs[t]]
                            + [repr(float(x)) for x in ep.actions[t]]
                            + [repr(float(ep.log_probs[t])), repr(float(ep.rewards[t])),
                               repr(float(ep.values[t])), int(ep.dones[t])])
    return buf.getvalue()


def write_csv(path, header: list[str], rows: list[list]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def read_csv(path) -> tuple[list[str], list[list[str]]]:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        rows = list(reader)
    if not rows:
        return [], []
    return rows[0], rows[1:]


def write_json(path, payload: dict) -> None:
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_json(path) -> dict:
    with open(path) as fh:
        return json.load(fh)
