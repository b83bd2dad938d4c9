"""Minimal dense networks with hand-written reverse-mode gradients.

Actor and critic are plain rectifier MLPs over flat float64 parameter
vectors, small enough that exactness and testability beat throughput.  The
module also carries the optimizer, the entropy-coefficient annealing used
to front-load exploration, the actor-sharing and critic-input assembly
modes, and a bit-exact binary checkpoint format.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

MASK_LOGIT = -1e30  # effectively -inf, avoids nan propagation in backprop


@dataclass(frozen=True)
class MlpSpec:
    """Shape of a feed-forward network.

    ``head_count`` > 1 replicates the output block, e.g. one value head per
    agent; the flat output is then reshaped to (..., head_count, output_dim).
    """

    input_dim: int
    output_dim: int
    hidden: tuple[int, ...] = (64, 64)
    head_count: int = 1

    def __post_init__(self):
        if self.input_dim < 1 or self.output_dim < 1 or self.head_count < 1:
            raise ValueError("dimensions must be positive")
        if any(h < 1 for h in self.hidden):
            raise ValueError("hidden sizes must be positive")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def dims(self) -> tuple[int, ...]:
        return (self.input_dim, *self.hidden, self.output_dim * self.head_count)

    @property
    def n_params(self) -> int:
        d = self.dims
        return sum(d[i] * d[i + 1] + d[i + 1] for i in range(len(d) - 1))


@dataclass
class ParamVector:
    """Flat 64-bit parameter array plus the layer layout it encodes."""

    spec: MlpSpec
    flat: np.ndarray

    def __post_init__(self):
        self.flat = np.asarray(self.flat, dtype=np.float64)
        if self.flat.shape != (self.spec.n_params,):
            raise ValueError(f"flat length {self.flat.shape} != {self.spec.n_params} for {self.spec}")

    def layers(self) -> list[tuple[np.ndarray, np.ndarray]]:
        """(W, b) views into the flat array, one pair per layer."""
        out = []
        d = self.spec.dims
        off = 0
        for i in range(len(d) - 1):
            w = self.flat[off:off + d[i] * d[i + 1]].reshape(d[i], d[i + 1])
            off += d[i] * d[i + 1]
            b = self.flat[off:off + d[i + 1]]
            off += d[i + 1]
            out.append((w, b))
        return out

    def copy(self) -> "ParamVector":
        return ParamVector(self.spec, self.flat.copy())


def init_params(spec: MlpSpec, seed: int) -> ParamVector:
    """Fan-in-scaled uniform weights (the rectifier convention), zero biases."""
    rng = np.random.default_rng(seed)
    flat = np.empty(spec.n_params)
    d = spec.dims
    off = 0
    for i in range(len(d) - 1):
        bound = np.sqrt(6.0 / d[i])
        n = d[i] * d[i + 1]
        flat[off:off + n] = rng.uniform(-bound, bound, size=n)
        off += n
        flat[off:off + d[i + 1]] = 0.0
        off += d[i + 1]
    return ParamVector(spec, flat)


@dataclass
class ForwardCache:
    """Intermediate activations kept for the backward pass, tied to the
    exact parameter array that produced them."""

    param_token: int
    inputs: list[np.ndarray]      # input to each layer
    preacts: list[np.ndarray]     # pre-activation of each layer
    squeezed: bool


def forward(params: ParamVector, x: np.ndarray) -> tuple[np.ndarray, ForwardCache]:
    """Affine-rectifier composition; returns the raw output block and the
    cache needed for the exact backward pass.

    Accepts a single input (input_dim,) or a batch (B, input_dim).
    """
    x = np.asarray(x, dtype=np.float64)
    squeezed = x.ndim == 1
    if squeezed:
        x = x[None, :]
    if x.shape[1] != params.spec.input_dim:
        raise ValueError(f"input dim {x.shape[1]} != {params.spec.input_dim}")
    inputs, preacts = [], []
    h = x
    layer_list = params.layers()
    for li, (w, b) in enumerate(layer_list):
        inputs.append(h)
        z = h @ w + b
        preacts.append(z)
        h = np.maximum(z, 0.0) if li < len(layer_list) - 1 else z
    out = h[0] if squeezed else h
    return out, ForwardCache(param_token=id(params.flat), inputs=inputs, preacts=preacts, squeezed=squeezed)


def split_heads(out: np.ndarray, spec: MlpSpec) -> np.ndarray:
    """Reshape a raw output block to (..., head_count, output_dim)."""
    return out.reshape(*out.shape[:-1], spec.head_count, spec.output_dim)


def backward(params: ParamVector, cache: ForwardCache, output_grad: np.ndarray) -> np.ndarray:
    """Exact reverse-mode gradient of ``forward`` w.r.t. the flat parameters.

    ``output_grad`` is d(loss)/d(output) with the same shape the forward
    pass returned.  Rejects a cache produced by different parameters.
    """
    if cache.param_token != id(params.flat):
        raise ValueError("stale forward cache: it was produced by different parameters")
    g = np.asarray(output_grad, dtype=np.float64)
    if cache.squeezed:
        g = g[None, :]
    grads = np.zeros_like(params.flat)
    d = params.spec.dims
    offsets = []
    off = 0
    for i in range(len(d) - 1):
        offsets.append(off)
        off += d[i] * d[i + 1] + d[i + 1]
    layer_list = params.layers()
    for li in range(len(layer_list) - 1, -1, -1):
        w, _ = layer_list[li]
        if li < len(layer_list) - 1:
            g = g * (cache.preacts[li] > 0)
        x = cache.inputs[li]
        o = offsets[li]
        nw = d[li] * d[li + 1]
        grads[o:o + nw] = (x.T @ g).reshape(-1)
        grads[o + nw:o + nw + d[li + 1]] = g.sum(axis=0)
        g = g @ w.T
    return grads


@dataclass
class AdamState:
    """First/second moment accumulators for one parameter vector."""

    m: np.ndarray
    v: np.ndarray
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @staticmethod
    def for_params(params: ParamVector, lr: float = 1e-3) -> "AdamState":
        return AdamState(m=np.zeros_like(params.flat), v=np.zeros_like(params.flat), lr=lr)


def adam_step(params: ParamVector, grads: np.ndarray, state: AdamState) -> tuple[ParamVector, AdamState]:
    """One bias-corrected moment update.  Mutates the state accumulators and
    the parameter array in place; returns both for call-site clarity."""
    grads = np.asarray(grads, dtype=np.float64)
    if grads.shape != params.flat.shape:
        raise ValueError(f"gradient shape {grads.shape} != parameter shape {params.flat.shape}")
    bad = ~np.isfinite(grads)
    if bad.any():
        raise ArithmeticError(f"non-finite gradient in {int(bad.sum())}/{grads.size} coordinates "
                              f"(first at index {int(np.flatnonzero(bad)[0])})")
    state.step += 1
    state.m = state.beta1 * state.m + (1.0 - state.beta1) * grads
    state.v = state.beta2 * state.v + (1.0 - state.beta2) * grads * grads
    mhat = state.m / (1.0 - state.beta1 ** state.step)
    vhat = state.v / (1.0 - state.beta2 ** state.step)
    params.flat -= state.lr * mhat / (np.sqrt(vhat) + state.eps)
    return params, state


@dataclass
class EntropySchedule:
    """Exploration coefficient annealed log-linearly from ``initial`` to
    ``target`` over the first 1/adjustment fraction of training, then held.
    """

    initial: float = 1.0
    target: float = 1e-5
    adjustment: float = 10.0
    current: float = field(init=False)

    def __post_init__(self):
        if not (0.0 < self.target <= self.initial):
            raise ValueError("need 0 < target <= initial")
        if self.adjustment <= 0:
            raise ValueError("adjustment speed must be positive")
        self.current = self.initial

    def coefficient(self, fraction_complete: float) -> float:
        f = min(max(fraction_complete, 0.0), 1.0) * self.adjustment
        if f >= 1.0:
            value = self.target
        else:
            value = 10.0 ** (np.log10(self.initial) + f * (np.log10(self.target) - np.log10(self.initial)))
        self.current = float(value)
        return self.current


def entropy_coefficient(schedule: EntropySchedule, fraction_complete: float) -> float:
    return schedule.coefficient(fraction_complete)


# -- distributions over discrete actions -------------------------------------


def masked_logits(logits: np.ndarray, legal: np.ndarray | None) -> np.ndarray:
    if legal is None:
        return logits
    return np.where(np.asarray(legal, dtype=bool), logits, MASK_LOGIT)


def log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax(logits: np.ndarray) -> np.ndarray:
    return np.exp(log_softmax(logits))


def entropy(logits: np.ndarray) -> np.ndarray:
    logp = log_softmax(logits)
    p = np.exp(logp)
    return -(p * np.where(p > 0, logp, 0.0)).sum(axis=-1)


def sample_categorical(rng: np.random.Generator, probs: np.ndarray) -> np.ndarray:
    """Row-wise categorical draw for a (N, A) probability matrix."""
    cdf = np.cumsum(probs, axis=-1)
    u = rng.random(probs.shape[:-1] + (1,))
    idx = (cdf < u).sum(axis=-1)
    return np.minimum(idx, probs.shape[-1] - 1)


# -- actor parameter sharing modes -------------------------------------------

ACTOR_MODES = ("shared", "shared_with_id", "separate")


class Actor:
    """Per-agent policy logits under one of the sharing modes.

    ``shared`` runs every agent's observation through one network;
    ``shared_with_id`` appends the agent's one-hot id to its observation
    first; ``separate`` keeps an independent parameter vector per agent.
    """

    def __init__(self, mode: str, n_agents: int, obs_dim: int, n_actions: int,
                 hidden: tuple[int, ...] = (64, 64), seed: int = 0):
        if mode not in ACTOR_MODES:
            raise ValueError(f"unknown actor mode {mode!r}; expected one of {ACTOR_MODES}")
        self.mode = mode
        self.n_agents = n_agents
        self.obs_dim = obs_dim
        self.n_actions = n_actions
        in_dim = obs_dim + (n_agents if mode == "shared_with_id" else 0)
        self.mlp_spec = MlpSpec(input_dim=in_dim, output_dim=n_actions, hidden=hidden)
        n_nets = n_agents if mode == "separate" else 1
        self.params: list[ParamVector] = [init_params(self.mlp_spec, seed + 1000 * k) for k in range(n_nets)]

    def network_for(self, agent: int) -> ParamVector:
        return self.params[agent if self.mode == "separate" else 0]

    def assemble_inputs(self, joint_obs: np.ndarray) -> np.ndarray:
        """(..., n_agents, obs_dim) -> (..., n_agents, input_dim)."""
        joint_obs = np.asarray(joint_obs, dtype=np.float64)
        if self.mode != "shared_with_id":
            return joint_obs
        eye = np.eye(self.n_agents)
        ids = np.broadcast_to(eye, joint_obs.shape[:-1] + (self.n_agents,))
        return np.concatenate([joint_obs, ids], axis=-1)

    def logits(self, joint_obs: np.ndarray, legal: np.ndarray | None = None) -> np.ndarray:
        """Policy logits for each agent: (..., n_agents, n_actions)."""
        inputs = self.assemble_inputs(joint_obs)
        lead = inputs.shape[:-2]
        if self.mode == "separate":
            outs = []
            for k in range(self.n_agents):
                o, _ = forward(self.params[k], inputs[..., k, :].reshape(-1, inputs.shape[-1]))
                outs.append(o)
            out = np.stack(outs, axis=1).reshape(*lead, self.n_agents, self.n_actions)
        else:
            o, _ = forward(self.params[0], inputs.reshape(-1, inputs.shape[-1]))
            out = o.reshape(*lead, self.n_agents, self.n_actions)
        return masked_logits(out, legal)

    def snapshot_arrays(self) -> list[np.ndarray]:
        return [p.flat.copy() for p in self.params]

    def load_arrays(self, arrays: Sequence[np.ndarray]) -> None:
        if len(arrays) != len(self.params):
            raise ValueError(f"{len(arrays)} arrays for {len(self.params)} networks")
        for p, a in zip(self.params, arrays):
            if a.shape != p.flat.shape:
                raise ValueError(f"array shape {a.shape} != parameter shape {p.flat.shape}")
            p.flat = np.asarray(a, dtype=np.float64).copy()


def policy_heads(actor: Actor, joint_obs: np.ndarray, legal: np.ndarray | None = None) -> np.ndarray:
    """Per-agent logits for one step of joint observations."""
    return actor.logits(joint_obs, legal)


# -- critic input assembly ----------------------------------------------------

CRITIC_MODES = ("obs", "full", "obs_full", "decentralized")


def stack_frames(current: np.ndarray, history: Sequence[np.ndarray] | None, k: int) -> np.ndarray:
    """Concatenate the k-1 previous frames before the current one, zero-padded
    at episode starts.  ``history`` is oldest-first and may be shorter than
    k-1 (or None)."""
    if k < 1:
        raise ValueError("framestack depth must be >= 1")
    if k == 1:
        return np.asarray(current, dtype=np.float64)
    hist = list(history or [])
    frames = hist[-(k - 1):]
    pad = [np.zeros_like(current)] * (k - 1 - len(frames))
    return np.concatenate([*pad, *[np.asarray(f, dtype=np.float64) for f in frames], np.asarray(current, dtype=np.float64)], axis=-1)


def critic_input(mode: str, joint_obs: np.ndarray, full_state: np.ndarray | None = None,
                 framestack_k: int = 1, obs_history: Sequence[np.ndarray] | None = None):
    """Assemble the critic's input from one step of (possibly stacked)
    observations and the optional privileged state encoding.

    ``obs`` concatenates every agent's observation; ``full`` uses the state
    encoding alone; ``obs_full`` concatenates both; ``decentralized``
    returns one input per agent.  ``framestack_k`` > 1 stacks previous
    joint observations from ``obs_history`` (zero-padded at episode start).
    """
    if mode not in CRITIC_MODES:
        raise ValueError(f"unknown critic mode {mode!r}; expected one of {CRITIC_MODES}")
    joint_obs = stack_frames(np.asarray(joint_obs, dtype=np.float64), obs_history, framestack_k)
    if mode in ("full", "obs_full") and full_state is None:
        raise ValueError(f"critic mode {mode!r} needs a state encoding, but the environment exposes none")
    if mode == "decentralized":
        return [joint_obs[..., k, :] for k in range(joint_obs.shape[-2])]
    flat_obs = joint_obs.reshape(*joint_obs.shape[:-2], -1)
    if mode == "obs":
        return flat_obs
    if mode == "full":
        return np.asarray(full_state, dtype=np.float64)
    return np.concatenate([flat_obs, np.asarray(full_state, dtype=np.float64)], axis=-1)


# -- checkpoints ---------------------------------------------------------------

_MAGIC = b"MTRC"
_FORMAT_VERSION = 1


def save_checkpoint(path, *, step: int, version: int, arrays: dict[str, np.ndarray], meta: dict) -> None:
    """Versioned binary checkpoint: JSON header plus raw little-endian f64
    arrays.  Round-trips bit-exactly."""
    specs = []
    blobs = []
    for name, a in arrays.items():
        a = np.ascontiguousarray(a, dtype="<f8")
        specs.append({"name": name, "shape": list(a.shape)})
        blobs.append(a.tobytes())
    header = json.dumps({"step": step, "version": version, "arrays": specs, "meta": meta}).encode()
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _FORMAT_VERSION, len(header)))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


@dataclass
class Checkpoint:
    step: int
    version: int
    arrays: dict[str, np.ndarray]
    meta: dict


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != _MAGIC:
            raise ValueError(f"not a checkpoint file (magic {magic!r})")
        fmt, hlen = struct.unpack("<II", fh.read(8))
        if fmt != _FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {fmt}")
        header = json.loads(fh.read(hlen).decode())
        arrays = {}
        for spec in header["arrays"]:
            n = int(np.prod(spec["shape"])) if spec["shape"] else 1
            buf = fh.read(8 * n)
            arrays[spec["name"]] = np.frombuffer(buf, dtype="<f8").reshape(spec["shape"]).copy()
    return Checkpoint(step=header["step"], version=header["version"], arrays=arrays, meta=header["meta"])
