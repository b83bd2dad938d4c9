"""The training loop: critic regression plus weighted policy gradients.

One :class:`Trainer` owns the live parameters and is their only mutator.
Each epoch it pulls a fresh collection round from an experience source,
runs ``density`` critic updates followed by ``density`` actor updates on
unrolls sampled from that round (the buffer never outlives the round),
publishes a new actor snapshot for the workers, and emits one metrics row.

Targets and advantages are computed numerically and regressed against, so
no gradient ever flows through the correction pipeline.
"""

from __future__ import annotations

import logging
import math
import os
import time
from dataclasses import asdict, dataclass, replace
from typing import Iterator, Sequence

import numpy as np

from . import nn
from .env import DecPomdpSpec
from .vtrace import (CorrectionConfig, TrajectoryBatch, VTraceResult,
                     importance_weights, pg_advantage, vtrace_targets)

logger = logging.getLogger(__name__)

ADVANTAGE_MODES = ("eq7", "vtrace_bootstrap")


@dataclass(frozen=True)
class TrainConfig:
    """Hyperparameters of a training run.  Defaults follow the reference
    configuration: batch 32, discount 0.99, both clipping thresholds 1.0,
    Adam at 1e-3, entropy cost annealed 1.0 -> 1e-5 over the first tenth
    of training."""

    total_steps: int = 200_000
    seed: int = 0
    density: int = 1
    learning_rate: float = 1e-3
    batch_size: int = 32
    gamma: float = 0.99
    c_bar: float = 1.0
    rho_bar: float = 1.0
    lam: float = 1.0
    unroll_length: int = 32
    critic_mode: str = "obs"
    actor_mode: str = "shared"
    advantage_mode: str = "eq7"
    importance_sampling: bool = True
    framestack_k: int = 1
    critic_heads: int = 1
    hidden: tuple[int, ...] = (64, 64)
    entropy_initial: float = 1.0
    entropy_target: float = 1e-5
    entropy_adjustment: float = 10.0
    n_workers: int = 1
    staleness: str = "fresh"
    checkpoint_every: int = 100
    unrolls_per_round: int = 0  # 0 -> batch_size

    def __post_init__(self):
        if self.density < 1:
            raise ValueError("density must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.critic_mode not in nn.CRITIC_MODES:
            raise ValueError(f"unknown critic mode {self.critic_mode!r}")
        if self.actor_mode not in nn.ACTOR_MODES:
            raise ValueError(f"unknown actor mode {self.actor_mode!r}")
        if self.advantage_mode not in ADVANTAGE_MODES:
            raise ValueError(f"unknown advantage mode {self.advantage_mode!r}")
        if self.framestack_k < 1:
            raise ValueError("framestack_k must be >= 1")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @property
    def correction(self) -> CorrectionConfig:
        return CorrectionConfig(c_bar=self.c_bar, rho_bar=self.rho_bar, lam=self.lam)

    @property
    def round_size(self) -> int:
        return self.unrolls_per_round or self.batch_size

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d

    @staticmethod
    def from_dict(d: dict) -> "TrainConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return TrainConfig(**d)


ABLATIONS = ("no_is", "decentralized", "separate_actors", "agent_id", "framestack", "critic")


def ablation_mode(config: TrainConfig, name: str) -> TrainConfig:
    """Apply exactly one named ablation to a config.

    Accepted names: ``no_is``, ``decentralized``, ``separate_actors``,
    ``agent_id``, ``framestack(k)`` and ``critic(obs|full|obs_full)`` (a
    colon also works as the separator, e.g. ``critic:full``).
    """
    key, arg = _parse_ablation(name)
    if key == "no_is":
        return replace(config, importance_sampling=False)
    if key == "decentralized":
        return replace(config, critic_mode="decentralized")
    if key == "separate_actors":
        return replace(config, actor_mode="separate")
    if key == "agent_id":
        return replace(config, actor_mode="shared_with_id")
    if key == "framestack":
        if arg is None:
            raise ValueError("framestack ablation needs a depth, e.g. framestack(4)")
        return replace(config, framestack_k=int(arg))
    if key == "critic":
        if arg not in ("obs", "full", "obs_full"):
            raise ValueError(f"critic ablation needs obs|full|obs_full, got {arg!r}")
        return replace(config, critic_mode=arg)
    raise ValueError(f"unknown ablation {name!r}; expected one of {ABLATIONS}")


def _parse_ablation(name: str) -> tuple[str, str | None]:
    name = name.strip()
    if "(" in name and name.endswith(")"):
        key, arg = name[:-1].split("(", 1)
        return key.strip(), arg.strip()
    if ":" in name:
        key, arg = name.split(":", 1)
        return key.strip(), arg.strip()
    return name, None


METRICS_COLUMNS = [
    "epoch", "env_steps", "episodes", "mean_return", "median_return", "success_rate",
    "critic_loss", "actor_loss", "entropy", "mean_rho", "clip_fraction",
    "param_version", "steps_per_sec",
]


@dataclass
class TrainMetrics:
    """One epoch of training counters and diagnostics.

    ``steps_per_sec`` is wall-clock derived and therefore left empty in
    synchronous runs, which are required to reproduce bit-exactly.
    """

    epoch: int
    env_steps: int
    episodes: int
    mean_return: float
    median_return: float
    success_rate: float
    critic_loss: float
    actor_loss: float
    entropy: float
    mean_rho: float
    clip_fraction: float
    param_version: int
    steps_per_sec: float | None = None

    def to_row(self) -> list[str]:
        out = []
        for col in METRICS_COLUMNS:
            v = getattr(self, col)
            if v is None:
                out.append("")
            elif isinstance(v, float):
                out.append(repr(v))
            else:
                out.append(str(v))
        return out


def _stack(unrolls: Sequence[TrajectoryBatch]) -> dict:
    has_state = unrolls[0].full_state is not None
    return {
        "obs": np.stack([u.joint_obs for u in unrolls]),
        "next_obs": np.stack([u.next_joint_obs for u in unrolls]),
        "state": np.stack([u.full_state for u in unrolls]) if has_state else None,
        "next_state": np.stack([u.next_full_state for u in unrolls]) if has_state else None,
        "actions": np.stack([u.actions for u in unrolls]),
        "rewards": np.stack([u.rewards for u in unrolls]),
        "behavior_logp": np.stack([u.behavior_logp for u in unrolls]),
        "terminal": np.stack([u.terminal for u in unrolls]),
        "truncated": np.stack([u.truncated for u in unrolls]),
        "version": np.stack([u.version for u in unrolls]),
        "legal": np.stack([u.legal for u in unrolls]),
    }


class Trainer:
    """Owns the actor/critic parameters and runs the update loop."""

    def __init__(self, spec: DecPomdpSpec, config: TrainConfig, out_dir=None):
        self.spec = spec
        self.config = config
        self.out_dir = out_dir
        counts = set(spec.action_counts)
        if len(counts) != 1:
            raise ValueError("network training needs homogeneous per-agent action counts")
        dims = set(spec.obs_dims)
        if len(dims) != 1:
            raise ValueError("network training needs equal per-agent observation lengths")
        self.n_actions = counts.pop()
        self.obs_dim = dims.pop() * config.framestack_k
        n = spec.n_agents

        seeds = np.random.SeedSequence(config.seed).generate_state(4)
        self.actor = nn.Actor(config.actor_mode, n, self.obs_dim, self.n_actions,
                              hidden=config.hidden, seed=int(seeds[0]))
        if config.critic_mode == "decentralized":
            cspec = nn.MlpSpec(input_dim=self.obs_dim, output_dim=1, hidden=config.hidden)
            self.critics = [nn.init_params(cspec, int(seeds[1]) + 7 * k) for k in range(n)]
        else:
            if config.critic_heads not in (1, n):
                raise ValueError(f"critic_heads must be 1 or n_agents={n}")
            dc = {"obs": n * self.obs_dim,
                  "full": spec.state_dim,
                  "obs_full": n * self.obs_dim + spec.state_dim}[config.critic_mode]
            cspec = nn.MlpSpec(input_dim=dc, output_dim=1, hidden=config.hidden,
                               head_count=config.critic_heads)
            self.critics = [nn.init_params(cspec, int(seeds[1]))]
        self.actor_adam = [nn.AdamState.for_params(p, lr=config.learning_rate) for p in self.actor.params]
        self.critic_adam = [nn.AdamState.for_params(p, lr=config.learning_rate) for p in self.critics]
        self.entropy_schedule = nn.EntropySchedule(config.entropy_initial, config.entropy_target,
                                                   config.entropy_adjustment)
        self.sample_rng = np.random.default_rng(int(seeds[2]))
        self.collector_seed = int(seeds[3])

        self.version = 0
        self.env_steps = 0
        self.episodes = 0
        self.updates = 0
        self.debug_rows: list[tuple] | None = None

    # -- value estimation ---------------------------------------------------

    def _critic_inputs(self, obs: np.ndarray, state: np.ndarray | None):
        return nn.critic_input(self.config.critic_mode, obs, state)

    def _values(self, obs: np.ndarray, state: np.ndarray | None,
                with_cache: bool = False):
        """Critic values with head axis first: (K, B, T)."""
        B, T = obs.shape[0], obs.shape[1]
        inp = self._critic_inputs(obs, state)
        if self.config.critic_mode == "decentralized":
            outs, caches = [], []
            for k, critic in enumerate(self.critics):
                o, cache = nn.forward(critic, inp[k].reshape(B * T, -1))
                outs.append(o.reshape(B, T))
                caches.append(cache)
            vals = np.stack(outs)  # (n, B, T)
        else:
            o, cache = nn.forward(self.critics[0], inp.reshape(B * T, -1))
            vals = o.reshape(B, T, -1).transpose(2, 0, 1)  # (K, B, T)
            caches = [cache]
        return (vals, caches) if with_cache else (vals, None)

    # -- correction pipeline --------------------------------------------------

    def target_logp(self, batch: dict) -> tuple[np.ndarray, np.ndarray]:
        """Per-agent and joint log-probs of the stored actions under the
        current actor."""
        logits = self.actor.logits(batch["obs"], batch["legal"])
        logp = nn.log_softmax(logits)
        per_agent = np.take_along_axis(logp, batch["actions"][..., None], axis=-1)[..., 0]
        return per_agent, per_agent.sum(axis=-1)

    def compute_corrections(self, batch: dict) -> VTraceResult:
        """Targets, weights and advantages for one stacked batch; every
        output is a constant with respect to both networks."""
        cfg = self.config
        _, tgt_joint = self.target_logp(batch)
        if cfg.importance_sampling:
            c, rho = importance_weights(tgt_joint, batch["behavior_logp"], cfg.correction)
        else:
            c = np.ones_like(tgt_joint)
            rho = np.ones_like(tgt_joint)
        values, _ = self._values(batch["obs"], batch["state"])
        next_values, _ = self._values(batch["next_obs"], batch["next_state"])
        dones = batch["terminal"] | batch["truncated"]
        v = vtrace_targets(batch["rewards"], values, next_values[..., -1], c, rho, cfg.gamma,
                           terminals=batch["terminal"], dones=dones, next_values=next_values)
        adv = pg_advantage(batch["rewards"], values, v, rho, cfg.gamma, mode=cfg.advantage_mode,
                           bootstrap_value=next_values[..., -1], terminals=batch["terminal"],
                           dones=dones, next_values=next_values)
        return VTraceResult(targets=v, c_t=c, rho_t=rho, pg_advantage=adv)

    # -- updates ----------------------------------------------------------------

    def critic_update(self, batch: dict, targets: np.ndarray | None = None) -> float:
        """One optimizer step on the mean squared error to the corrected
        targets (recomputed with the current parameters unless supplied)."""
        if targets is None:
            targets = self.compute_corrections(batch).targets
        B, T = batch["rewards"].shape
        inp = self._critic_inputs(batch["obs"], batch["state"])
        loss = 0.0
        if self.config.critic_mode == "decentralized":
            for k, critic in enumerate(self.critics):
                pred, cache = nn.forward(critic, inp[k].reshape(B * T, -1))
                err = pred[:, 0] - targets[k].reshape(-1)
                loss += float(np.mean(err ** 2)) / len(self.critics)
                grad_out = (2.0 * err / err.size / len(self.critics))[:, None]
                g = nn.backward(critic, cache, grad_out)
                nn.adam_step(critic, g, self.critic_adam[k])
        else:
            pred, cache = nn.forward(self.critics[0], inp.reshape(B * T, -1))
            tgt = targets.transpose(1, 2, 0).reshape(pred.shape)
            err = pred - tgt
            loss = float(np.mean(err ** 2))
            g = nn.backward(self.critics[0], cache, 2.0 * err / err.size)
            nn.adam_step(self.critics[0], g, self.critic_adam[0])
        if not math.isfinite(loss):
            raise ArithmeticError(f"critic loss is not finite ({loss}); diverged at update {self.updates}")
        return loss

    def actor_update(self, batch: dict, entropy_coef: float | None = None) -> tuple[float, float, dict]:
        """One ascent step on the weighted policy objective plus entropy
        bonus.  Returns (loss, mean entropy, weight diagnostics)."""
        cfg = self.config
        if entropy_coef is None:
            entropy_coef = self.entropy_schedule.coefficient(min(self.env_steps / max(cfg.total_steps, 1), 1.0))
        res = self.compute_corrections(batch)
        B, T = batch["rewards"].shape
        n, A = self.spec.n_agents, self.n_actions
        count = B * T

        inputs = self.actor.assemble_inputs(batch["obs"])
        adv = res.pg_advantage  # (K, B, T)
        rho = res.rho_t
        loss = 0.0
        ent_sum = 0.0
        per_net_rows: list[tuple[int, np.ndarray, np.ndarray, object]] = []
        if self.actor.mode == "separate":
            for k in range(n):
                rows = inputs[:, :, k, :].reshape(count, -1)
                out, cache = nn.forward(self.actor.params[k], rows)
                per_net_rows.append((k, rows, out, cache))
        else:
            rows = inputs.reshape(count * n, -1)
            out, cache = nn.forward(self.actor.params[0], rows)
            per_net_rows.append((-1, rows, out, cache))

        for net_idx, _, out, cache in per_net_rows:
            if net_idx < 0:
                logits_raw = out.reshape(B, T, n, A)
                legal = batch["legal"]
                actions = batch["actions"]
                adv_k = np.moveaxis(np.broadcast_to(adv if adv.shape[0] == n else np.repeat(adv, n, axis=0),
                                                    (n, B, T)), 0, -1)  # (B, T, n)
                w = rho[..., None]
            else:
                k = net_idx
                logits_raw = out.reshape(B, T, 1, A)
                legal = batch["legal"][:, :, k:k + 1, :]
                actions = batch["actions"][:, :, k:k + 1]
                a_row = adv[k] if adv.shape[0] == n else adv[0]
                adv_k = a_row[..., None]
                w = rho[..., None]
            logits = nn.masked_logits(logits_raw, legal)
            logp = nn.log_softmax(logits)
            p = np.exp(logp)
            onehot = np.zeros_like(p)
            np.put_along_axis(onehot, actions[..., None], 1.0, axis=-1)
            chosen_logp = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]
            H = -(p * np.where(p > 0, logp, 0.0)).sum(axis=-1)
            scale = w * adv_k  # (B, T, n_k)
            loss += float(-(scale * chosen_logp).sum() / count - entropy_coef * H.sum() / count)
            ent_sum += float(H.sum())

            dlogits = (scale[..., None] * (p - onehot) + entropy_coef * p * (logp + H[..., None])) / count
            dlogits = np.where(legal, dlogits, 0.0)
            g = nn.backward(self.actor.params[0 if net_idx < 0 else net_idx], cache,
                            dlogits.reshape(out.shape))
            nn.adam_step(self.actor.params[0 if net_idx < 0 else net_idx], g,
                         self.actor_adam[0 if net_idx < 0 else net_idx])
        if not math.isfinite(loss):
            raise ArithmeticError(f"actor loss is not finite ({loss}); diverged at update {self.updates}")
        diag = {
            "mean_rho": float(res.rho_t.mean()),
            "clip_fraction": float(np.mean(res.rho_t >= cfg.rho_bar - 1e-12)) if cfg.importance_sampling else 0.0,
            "entropy": ent_sum / (count * n),
        }
        return loss, diag["entropy"], diag

    # -- the loop -----------------------------------------------------------------

    def train(self, source, log_debug_targets: bool = False) -> Iterator[TrainMetrics]:
        """Run epochs against an experience source until the step budget is
        spent, yielding one metrics row per epoch and checkpointing on the
        configured cadence."""
        cfg = self.config
        source.publish(self.actor.snapshot_arrays(), self.version, self.env_steps)
        epoch = 0
        while self.env_steps < cfg.total_steps:
            t0 = time.perf_counter()
            unrolls, stats = source.collect_round(cfg.round_size, cfg.unroll_length)
            if not unrolls:
                break
            batch_all = _stack(unrolls)
            if int(batch_all["version"].max()) > self.version:
                raise AssertionError("collected data is tagged with a future parameter version")
            round_steps = batch_all["rewards"].size
            self.env_steps += round_steps
            self.episodes += len(stats.get("returns", []))

            critic_losses, actor_losses = [], []
            ent = rho_mean = clipfrac = 0.0
            for _ in range(cfg.density):
                critic_losses.append(self.critic_update(self._sample(batch_all)))
                self.updates += 1
            for _ in range(cfg.density):
                aloss, ent, diag = self.actor_update(self._sample(batch_all))
                actor_losses.append(aloss)
                rho_mean, clipfrac = diag["mean_rho"], diag["clip_fraction"]
                self.updates += 1
            if log_debug_targets:
                self._record_debug(batch_all)

            self.version += 1
            source.publish(self.actor.snapshot_arrays(), self.version, self.env_steps)

            returns = stats.get("returns", [])
            success = stats.get("successes", [])
            dt = time.perf_counter() - t0
            yield TrainMetrics(
                epoch=epoch,
                env_steps=self.env_steps,
                episodes=self.episodes,
                mean_return=float(np.mean(returns)) if returns else float("nan"),
                median_return=float(np.median(returns)) if returns else float("nan"),
                success_rate=float(np.mean(success)) if success else float("nan"),
                critic_loss=float(np.mean(critic_losses)),
                actor_loss=float(np.mean(actor_losses)),
                entropy=ent,
                mean_rho=rho_mean,
                clip_fraction=clipfrac,
                param_version=self.version,
                steps_per_sec=None if source.synchronous else round_steps / max(dt, 1e-9),
            )
            if self.out_dir is not None and cfg.checkpoint_every and (epoch + 1) % cfg.checkpoint_every == 0:
                self.save_checkpoint(f"checkpoint_{epoch + 1:06d}.bin")
            epoch += 1
        if self.out_dir is not None:
            self.save_checkpoint("checkpoint_final.bin")

    def _sample(self, batch_all: dict) -> dict:
        B = batch_all["rewards"].shape[0]
        take = self.config.batch_size
        if take == B:
            idx = self.sample_rng.permutation(B)
        else:
            idx = self.sample_rng.choice(B, size=take, replace=take > B)
        return {k: (v[idx] if isinstance(v, np.ndarray) else v) for k, v in batch_all.items()}

    def _record_debug(self, batch_all: dict):
        one = {k: (v[:1] if isinstance(v, np.ndarray) else v) for k, v in batch_all.items()}
        res = self.compute_corrections(one)
        values, _ = self._values(one["obs"], one["state"])
        nxt, _ = self._values(one["next_obs"], one["next_state"])
        boot = self.config.gamma * (1.0 - one["terminal"].astype(float))
        delta = one["rewards"] + boot * nxt[0] - values[0]
        self.debug_rows = [(t, float(res.c_t[0, t]), float(res.rho_t[0, t]), float(delta[0, t]),
                            float(res.targets[0, 0, t]))
                           for t in range(one["rewards"].shape[1])]

    # -- persistence -----------------------------------------------------------

    def save_checkpoint(self, filename: str) -> None:
        arrays = {f"actor_{i}": p.flat for i, p in enumerate(self.actor.params)}
        arrays.update({f"critic_{i}": p.flat for i, p in enumerate(self.critics)})
        meta = {
            "env": {"name": self.spec.name, "params": self.spec.params},
            "config": self.config.to_dict(),
            "env_steps": self.env_steps,
            "episodes": self.episodes,
            "n_agents": self.spec.n_agents,
            "obs_dim": self.obs_dim,
            "n_actions": self.n_actions,
        }
        nn.save_checkpoint(os.path.join(self.out_dir, filename), step=self.env_steps,
                           version=self.version, arrays=arrays, meta=meta)


def actor_from_checkpoint(ck: "nn.Checkpoint") -> tuple[nn.Actor, TrainConfig]:
    """Rebuild the decentralized actor stored in a checkpoint."""
    cfg = TrainConfig.from_dict(ck.meta["config"])
    actor = nn.Actor(cfg.actor_mode, ck.meta["n_agents"], ck.meta["obs_dim"],
                     ck.meta["n_actions"], hidden=cfg.hidden, seed=0)
    arrays = [ck.arrays[f"actor_{i}"] for i in range(len(actor.params))]
    actor.load_arrays(arrays)
    return actor, cfg


@dataclass
class EvalSummary:
    episodes: int
    mean_return: float
    median_return: float
    success_rate: float


def evaluate(spec: DecPomdpSpec, actor: nn.Actor, episodes: int, seed: int,
             greedy: bool = False, framestack_k: int = 1) -> EvalSummary:
    """Decentralized rollout of a trained actor.

    Each agent's action depends only on its own (frame-stacked) observation
    stream; no privileged state is read.  The structural guard: the actor's
    input width must equal exactly one agent's stacked observation (plus
    its id slot when the sharing mode uses ids).
    """
    from .env import Episode

    expected = spec.obs_dims[0] * framestack_k + (spec.n_agents if actor.mode == "shared_with_id" else 0)
    if actor.mlp_spec.input_dim != expected:
        raise ValueError(f"actor input width {actor.mlp_spec.input_dim} does not match one agent's "
                         f"observation stream ({expected}); decentralized execution forbids extra inputs")
    if episodes <= 0:
        return EvalSummary(0, float("nan"), float("nan"), float("nan"))
    rng = np.random.default_rng(seed)
    ep = Episode(spec, seed)
    returns, successes = [], []
    for _ in range(episodes):
        _, obs = ep.reset()
        history: list[np.ndarray] = []
        done = False
        while not done:
            joint = np.stack(obs)
            stacked = nn.stack_frames(joint, history, framestack_k)
            legal = np.stack(ep.spec.legal_mask(ep.state))
            logits = actor.logits(stacked, legal)
            if greedy:
                actions = np.argmax(logits, axis=-1)
            else:
                actions = nn.sample_categorical(rng, nn.softmax(logits))
            if framestack_k > 1:
                history.append(joint)
                history = history[-(framestack_k - 1):]
            out = ep.step([int(a) for a in actions])
            obs = out.joint_obs
            done = out.done
        returns.append(ep.episode_return)
        if spec.optimal_return is not None:
            successes.append(float(ep.episode_return >= spec.optimal_return - 1e-9))
    return EvalSummary(
        episodes=episodes,
        mean_return=float(np.mean(returns)),
        median_return=float(np.median(returns)),
        success_rate=float(np.mean(successes)) if successes else float("nan"),
    )
