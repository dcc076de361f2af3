"""Gaussian policies with hand-written exact reverse-mode gradients.

Two fixed architectures:

* ``MlpParams`` — tanh MLP,  obs -> hidden -> hidden -> action mean, with a
  separate tanh value trunk and a state-independent log-std vector.
* ``LstmParams`` — two stacked 4-gate recurrent cells, a linear mean head
  and a value head sharing the recurrent trunk.

There is no general autodiff here: each architecture exposes a cached
forward pass and a matching backward pass that is exact for gradients of
any scalar loss expressed through d(mean), d(value) and d(log_std). All
tensors are float64.
"""
from __future__ import annotations

from dataclasses import dataclass, fields, replace
from typing import Iterator

import numpy as np

LOG_2PI = float(np.log(2.0 * np.pi))
LOG_STD_MIN = -5.0
LOG_STD_MAX = 2.0


class ArchitectureMismatchError(ValueError):
    """Raised when a weight blob does not match the expected architecture."""


class NonFiniteLossError(FloatingPointError):
    """Raised when a training loss evaluates to NaN or infinity."""


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.standard_normal((max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


# --- parameter containers ----------------------------------------------------

@dataclass(frozen=True)
class MlpParams:
    obs_dim: int
    action_dim: int
    hidden: int
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    wm: np.ndarray
    bm: np.ndarray
    log_std: np.ndarray
    vw1: np.ndarray
    vb1: np.ndarray
    vw2: np.ndarray
    vb2: np.ndarray
    vw3: np.ndarray
    vb3: np.ndarray

    @property
    def descriptor(self) -> str:
        return f"mlp obs={self.obs_dim} act={self.action_dim} hidden={self.hidden}"


@dataclass(frozen=True)
class LstmParams:
    obs_dim: int
    action_dim: int
    hidden: int
    layers: int
    w0: np.ndarray   # (4h, obs_dim)
    u0: np.ndarray   # (4h, h)
    b0: np.ndarray   # (4h,)
    w1: np.ndarray   # (4h, h)
    u1: np.ndarray
    b1: np.ndarray
    wm: np.ndarray   # (h, act)
    bm: np.ndarray
    wv: np.ndarray   # (h, 1)
    bv: np.ndarray
    log_std: np.ndarray

    @property
    def descriptor(self) -> str:
        return (f"lstm obs={self.obs_dim} act={self.action_dim} "
                f"hidden={self.hidden} layers={self.layers}")


Params = MlpParams | LstmParams


@dataclass
class HiddenState:
    """Per-cell hidden and candidate vectors, zeroed at episode start."""

    h: np.ndarray  # (layers, hidden)
    c: np.ndarray  # (layers, hidden)


@dataclass(frozen=True)
class ActionDistribution:
    mean: np.ndarray
    log_std: np.ndarray


def tensor_names(params: Params) -> list[str]:
    return [f.name for f in fields(params) if f.name not in ("obs_dim", "action_dim", "hidden", "layers")]


def tensors(params: Params) -> dict[str, np.ndarray]:
    return {name: getattr(params, name) for name in tensor_names(params)}


def with_tensors(params: Params, new: dict[str, np.ndarray]) -> Params:
    return replace(params, **new)


def zero_grads(params: Params) -> dict[str, np.ndarray]:
    return {name: np.zeros_like(arr) for name, arr in tensors(params).items()}


def init_mlp(obs_dim: int, action_dim: int, hidden: int = 64, seed: int = 0) -> MlpParams:
    rng = np.random.Generator(np.random.PCG64(seed))
    return MlpParams(
        obs_dim=obs_dim, action_dim=action_dim, hidden=hidden,
        w1=_orthogonal(rng, obs_dim, hidden, 1.0), b1=np.zeros(hidden),
        w2=_orthogonal(rng, hidden, hidden, 1.0), b2=np.zeros(hidden),
        wm=_orthogonal(rng, hidden, action_dim, 0.01), bm=np.zeros(action_dim),
        log_std=np.zeros(action_dim),
        vw1=_orthogonal(rng, obs_dim, hidden, 1.0), vb1=np.zeros(hidden),
        vw2=_orthogonal(rng, hidden, hidden, 1.0), vb2=np.zeros(hidden),
        vw3=_orthogonal(rng, hidden, 1, 1.0), vb3=np.zeros(1),
    )


def init_lstm(obs_dim: int, action_dim: int, hidden: int = 128,
              layers: int = 2, seed: int = 0) -> LstmParams:
    if layers != 2:
        raise ValueError("the recurrent policy is fixed at two stacked cells")
    rng = np.random.Generator(np.random.PCG64(seed))

    def gate_block(in_dim: int) -> np.ndarray:
        return np.vstack([_orthogonal(rng, hidden, in_dim, 1.0) for _ in range(4)])

    def bias_block() -> np.ndarray:
        b = np.zeros(4 * hidden)
        b[hidden:2 * hidden] = 1.0  # forget-gate bias
        return b

    return LstmParams(
        obs_dim=obs_dim, action_dim=action_dim, hidden=hidden, layers=layers,
        w0=gate_block(obs_dim), u0=gate_block(hidden), b0=bias_block(),
        w1=gate_block(hidden), u1=gate_block(hidden), b1=bias_block(),
        wm=_orthogonal(rng, hidden, action_dim, 0.01), bm=np.zeros(action_dim),
        wv=_orthogonal(rng, hidden, 1, 1.0), bv=np.zeros(1),
        log_std=np.zeros(action_dim),
    )


def init_hidden(params: LstmParams, batch: int | None = None) -> HiddenState:
    shape = (params.layers, params.hidden) if batch is None else (params.layers, batch, params.hidden)
    return HiddenState(h=np.zeros(shape), c=np.zeros(shape))


# --- MLP forward/backward ------------------------------------------------------

def mlp_forward(params: MlpParams, obs: np.ndarray):
    """Batched forward pass. Returns (mean, value, cache)."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    if obs.shape[1] != params.obs_dim:
        raise ValueError(f"observation dim {obs.shape[1]} != {params.obs_dim}")
    h1 = np.tanh(obs @ params.w1 + params.b1)
    h2 = np.tanh(h1 @ params.w2 + params.b2)
    mean = h2 @ params.wm + params.bm
    vh1 = np.tanh(obs @ params.vw1 + params.vb1)
    vh2 = np.tanh(vh1 @ params.vw2 + params.vb2)
    value = (vh2 @ params.vw3 + params.vb3)[:, 0]
    cache = (obs, h1, h2, vh1, vh2)
    return mean, value, cache


def mlp_backward(params: MlpParams, cache, d_mean: np.ndarray,
                 d_value: np.ndarray) -> dict[str, np.ndarray]:
    """Exact gradients of a scalar loss given d(mean) and d(value)."""
    obs, h1, h2, vh1, vh2 = cache
    grads = zero_grads(params)

    grads["wm"] = h2.T @ d_mean
    grads["bm"] = d_mean.sum(axis=0)
    dh2 = (d_mean @ params.wm.T) * (1.0 - h2 * h2)
    grads["w2"] = h1.T @ dh2
    grads["b2"] = dh2.sum(axis=0)
    dh1 = (dh2 @ params.w2.T) * (1.0 - h1 * h1)
    grads["w1"] = obs.T @ dh1
    grads["b1"] = dh1.sum(axis=0)

    dv = np.asarray(d_value, dtype=np.float64).reshape(-1, 1)
    grads["vw3"] = vh2.T @ dv
    grads["vb3"] = dv.sum(axis=0)
    dvh2 = (dv @ params.vw3.T) * (1.0 - vh2 * vh2)
    grads["vw2"] = vh1.T @ dvh2
    grads["vb2"] = dvh2.sum(axis=0)
    dvh1 = (dvh2 @ params.vw2.T) * (1.0 - vh1 * vh1)
    grads["vw1"] = obs.T @ dvh1
    grads["vb1"] = dvh1.sum(axis=0)
    return grads


# --- LSTM forward/backward ------------------------------------------------------

def _sigmoid(x: np.ndarray) -> np.ndarray:
    return 1.0 / (1.0 + np.exp(-x))


def _cell_forward(w, u, b, x, h_prev, c_prev, hidden: int):
    z = x @ w.T + h_prev @ u.T + b
    i = _sigmoid(z[..., :hidden])
    f = _sigmoid(z[..., hidden:2 * hidden])
    g = np.tanh(z[..., 2 * hidden:3 * hidden])
    o = _sigmoid(z[..., 3 * hidden:])
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, (i, f, g, o)


def lstm_forward_seq(params: LstmParams, obs: np.ndarray):
    """Forward over padded sequences ``obs`` of shape (B, T, obs_dim).

    Hidden state starts at zero (episode boundary). Returns
    (means (B,T,a), values (B,T), cache).
    """
    obs = np.asarray(obs, dtype=np.float64)
    B, T, d = obs.shape
    if d != params.obs_dim:
        raise ValueError(f"observation dim {d} != {params.obs_dim}")
    H = params.hidden
    h = [np.zeros((B, H)), np.zeros((B, H))]
    c = [np.zeros((B, H)), np.zeros((B, H))]
    Hs = [np.zeros((B, T, H)), np.zeros((B, T, H))]
    Cs = [np.zeros((B, T, H)), np.zeros((B, T, H))]
    gates = [np.zeros((B, T, 4, H)), np.zeros((B, T, 4, H))]
    for t in range(T):
        x = obs[:, t, :]
        for layer, (w, u, b) in enumerate(((params.w0, params.u0, params.b0),
                                           (params.w1, params.u1, params.b1))):
            h_new, c_new, (i, f, g, o) = _cell_forward(w, u, b, x, h[layer], c[layer], H)
            Hs[layer][:, t] = h_new
            Cs[layer][:, t] = c_new
            gates[layer][:, t, 0] = i
            gates[layer][:, t, 1] = f
            gates[layer][:, t, 2] = g
            gates[layer][:, t, 3] = o
            h[layer], c[layer] = h_new, c_new
            x = h_new
    top = Hs[1]
    means = top @ params.wm + params.bm
    values = (top @ params.wv + params.bv)[..., 0]
    cache = (obs, Hs, Cs, gates)
    return means, values, cache


def lstm_backward_seq(params: LstmParams, cache, d_mean: np.ndarray,
                      d_value: np.ndarray) -> dict[str, np.ndarray]:
    """Backpropagation through time over the cached padded batch.

    Padded steps must carry zero ``d_mean``/``d_value`` rows.
    """
    obs, Hs, Cs, gates = cache
    B, T, _ = obs.shape
    H = params.hidden
    grads = zero_grads(params)
    top = Hs[1]

    grads["wm"] = np.einsum("bth,bta->ha", top, d_mean)
    grads["bm"] = d_mean.sum(axis=(0, 1))
    grads["wv"] = np.einsum("bth,bt->h", top, d_value)[:, None]
    grads["bv"] = np.asarray([d_value.sum()])

    d_top = d_mean @ params.wm.T + d_value[..., None] * params.wv[:, 0]

    dh_next = [np.zeros((B, H)), np.zeros((B, H))]
    dc_next = [np.zeros((B, H)), np.zeros((B, H))]
    wmats = (params.w0, params.w1)
    umats = (params.u0, params.u1)
    gw = {0: np.zeros_like(params.w0), 1: np.zeros_like(params.w1)}
    gu = {0: np.zeros_like(params.u0), 1: np.zeros_like(params.u1)}
    gb = {0: np.zeros_like(params.b0), 1: np.zeros_like(params.b1)}

    for t in range(T - 1, -1, -1):
        dx_from_above = None
        for layer in (1, 0):
            i = gates[layer][:, t, 0]
            f = gates[layer][:, t, 1]
            g = gates[layer][:, t, 2]
            o = gates[layer][:, t, 3]
            c_t = Cs[layer][:, t]
            c_prev = Cs[layer][:, t - 1] if t > 0 else np.zeros((B, H))
            h_prev = Hs[layer][:, t - 1] if t > 0 else np.zeros((B, H))
            x = obs[:, t, :] if layer == 0 else Hs[0][:, t]

            dh = dh_next[layer].copy()
            if layer == 1:
                dh += d_top[:, t]
            elif dx_from_above is not None:
                dh += dx_from_above

            tc = np.tanh(c_t)
            do = dh * tc
            dc = dh * o * (1.0 - tc * tc) + dc_next[layer]
            di = dc * g
            dg = dc * i
            df = dc * c_prev
            dc_next[layer] = dc * f

            dz = np.concatenate([
                di * i * (1.0 - i),
                df * f * (1.0 - f),
                dg * (1.0 - g * g),
                do * o * (1.0 - o),
            ], axis=1)

            gw[layer] += dz.T @ x
            gu[layer] += dz.T @ h_prev
            gb[layer] += dz.sum(axis=0)
            dh_next[layer] = dz @ umats[layer]
            dx = dz @ wmats[layer]
            if layer == 1:
                dx_from_above = dx

    grads["w0"], grads["u0"], grads["b0"] = gw[0], gu[0], gb[0]
    grads["w1"], grads["u1"], grads["b1"] = gw[1], gu[1], gb[1]
    return grads


def lstm_step(params: LstmParams, obs: np.ndarray, hidden: HiddenState):
    """Single stateful step for rollouts. Returns (mean, value, hidden')."""
    obs = np.asarray(obs, dtype=np.float64).reshape(1, -1)
    if obs.shape[1] != params.obs_dim:
        raise ValueError(f"observation dim {obs.shape[1]} != {params.obs_dim}")
    H = params.hidden
    h_out = np.zeros_like(hidden.h)
    c_out = np.zeros_like(hidden.c)
    x = obs
    for layer, (w, u, b) in enumerate(((params.w0, params.u0, params.b0),
                                       (params.w1, params.u1, params.b1))):
        h_new, c_new, _ = _cell_forward(w, u, b, x, hidden.h[layer][None, :],
                                        hidden.c[layer][None, :], H)
        h_out[layer] = h_new[0]
        c_out[layer] = c_new[0]
        x = h_new
    mean = (x @ params.wm + params.bm)[0]
    value = float((x @ params.wv + params.bv)[0, 0])
    return mean, value, HiddenState(h=h_out, c=c_out)


# --- unified forward ------------------------------------------------------------

def forward(params: Params, obs: np.ndarray, hidden: HiddenState | None = None):
    """Evaluate the policy on one observation.

    Returns (ActionDistribution, value, hidden') with hidden' None for the
    feed-forward architecture.
    """
    if isinstance(params, MlpParams):
        if hidden is not None:
            raise ValueError("feed-forward policy takes no hidden state")
        mean, value, _ = mlp_forward(params, np.asarray(obs).reshape(1, -1))
        return ActionDistribution(mean[0], params.log_std.copy()), float(value[0]), None
    if hidden is None:
        raise ValueError("recurrent policy requires a hidden state")
    mean, value, hidden = lstm_step(params, obs, hidden)
    return ActionDistribution(mean, params.log_std.copy()), value, hidden


# --- Gaussian head ---------------------------------------------------------------

def sample(dist: ActionDistribution, rng: np.random.Generator):
    """Draw an action and its exact diagonal-Gaussian log-density."""
    std = np.exp(dist.log_std)
    noise = rng.standard_normal(dist.mean.shape)
    action = dist.mean + std * noise
    return action, log_prob(dist, action)


def log_prob(dist: ActionDistribution, action: np.ndarray) -> float:
    z = (action - dist.mean) * np.exp(-dist.log_std)
    return float(-0.5 * np.sum(z * z) - np.sum(dist.log_std)
                 - 0.5 * dist.mean.size * LOG_2PI)


def log_prob_batch(mean: np.ndarray, log_std: np.ndarray, actions: np.ndarray) -> np.ndarray:
    z = (actions - mean) * np.exp(-log_std)
    return (-0.5 * np.sum(z * z, axis=-1) - np.sum(log_std)
            - 0.5 * mean.shape[-1] * LOG_2PI)


def entropy(log_std: np.ndarray) -> float:
    return float(np.sum(log_std) + 0.5 * log_std.size * (1.0 + LOG_2PI))


# --- weight blobs ------------------------------------------------------------------

_POL_MAGIC = b"POL1"
_POL_VERSION = 1


def serialize(params: Params) -> bytes:
    """Versioned binary weight blob: magic, descriptor, float64 tensors."""
    desc = params.descriptor.encode("utf-8")
    chunks = [_POL_MAGIC, _POL_VERSION.to_bytes(4, "little"),
              len(desc).to_bytes(4, "little"), desc]
    for name in tensor_names(params):
        arr = np.ascontiguousarray(getattr(params, name), dtype=np.float64)
        chunks.append(len(arr.shape).to_bytes(4, "little"))
        for dim in arr.shape:
            chunks.append(int(dim).to_bytes(8, "little"))
        chunks.append(arr.tobytes())
    return b"".join(chunks)


def _parse_descriptor(desc: str) -> dict:
    try:
        parts = desc.split()
        info: dict = {"kind": parts[0]}
        for item in parts[1:]:
            key, value = item.split("=")
            info[key] = int(value)
        return info
    except (IndexError, ValueError) as exc:
        raise ArchitectureMismatchError(f"malformed descriptor {desc!r}") from exc


def deserialize(blob: bytes, expected_kind: str | None = None) -> Params:
    """Decode a POL1 blob; ``expected_kind`` ('mlp'/'lstm') enforces the arch."""
    view = memoryview(blob)
    if len(view) < 12 or bytes(view[:4]) != _POL_MAGIC:
        raise ArchitectureMismatchError("not a POL1 weight blob")
    version = int.from_bytes(view[4:8], "little")
    if version != _POL_VERSION:
        raise ArchitectureMismatchError(f"unsupported weight blob version {version}")
    dlen = int.from_bytes(view[8:12], "little")
    if 12 + dlen > len(view):
        raise ArchitectureMismatchError("truncated weight blob")
    desc = bytes(view[12:12 + dlen]).decode("utf-8", errors="replace")
    info = _parse_descriptor(desc)
    if expected_kind is not None and info["kind"] != expected_kind:
        raise ArchitectureMismatchError(
            f"expected a {expected_kind} policy, blob holds {info['kind']}")
    if info["kind"] == "mlp":
        proto = init_mlp(info["obs"], info["act"], info["hidden"], seed=0)
    elif info["kind"] == "lstm":
        proto = init_lstm(info["obs"], info["act"], info["hidden"], info["layers"], seed=0)
    else:
        raise ArchitectureMismatchError(f"unknown architecture {info['kind']!r}")

    offset = 12 + dlen
    loaded: dict[str, np.ndarray] = {}
    for name in tensor_names(proto):
        if offset + 4 > len(view):
            raise ArchitectureMismatchError("truncated weight blob")
        ndim = int.from_bytes(view[offset:offset + 4], "little")
        offset += 4
        shape = []
        for _ in range(ndim):
            shape.append(int.from_bytes(view[offset:offset + 8], "little"))
            offset += 8
        count = int(np.prod(shape)) if shape else 1
        nbytes = count * 8
        if offset + nbytes > len(view):
            raise ArchitectureMismatchError("truncated weight blob")
        arr = np.frombuffer(view[offset:offset + nbytes], dtype="<f8").reshape(shape).copy()
        offset += nbytes
        expected_shape = getattr(proto, name).shape
        if tuple(arr.shape) != tuple(expected_shape):
            raise ArchitectureMismatchError(
                f"tensor {name} shape {arr.shape} != expected {expected_shape}")
        loaded[name] = arr
    return with_tensors(proto, loaded)


# --- flatten helpers (finite-difference checks, norms) -----------------------------

def flatten(values: dict[str, np.ndarray], order: list[str]) -> np.ndarray:
    return np.concatenate([np.ravel(values[name]) for name in order])


def unflatten(vector: np.ndarray, template: dict[str, np.ndarray],
              order: list[str]) -> dict[str, np.ndarray]:
    out = {}
    pos = 0
    for name in order:
        arr = template[name]
        out[name] = vector[pos:pos + arr.size].reshape(arr.shape).copy()
        pos += arr.size
    return out


def global_norm(grads: dict[str, np.ndarray]) -> float:
    return float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
