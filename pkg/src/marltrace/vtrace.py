"""Importance-corrected trajectory estimators.

Given a trajectory collected by a (possibly stale) behavior policy, these
functions compute the clipped likelihood ratios, the off-policy-corrected
value targets, and the weighted policy-gradient advantage.  All arrays are
treated as constants: nothing here participates in differentiation, the
learner regresses against the outputs.

Time is the last axis everywhere, so a leading batch axis (or a leading
critic-head axis) broadcasts through unchanged.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class CorrectionConfig:
    """Clipping thresholds for the likelihood-ratio corrections.

    ``c_bar`` caps the trace-cutting weights, ``rho_bar`` caps the
    fixed-point-shaping weights, ``lam`` scales the trace weights after
    clipping (1.0 leaves them untouched).  ``c_bar <= rho_bar`` is required
    for the convergence guarantee; pass ``allow_c_above_rho=True`` only for
    ablation studies that deliberately break it.
    """

    c_bar: float = 1.0
    rho_bar: float = 1.0
    lam: float = 1.0
    allow_c_above_rho: bool = False

    def __post_init__(self):
        if self.c_bar < 0 or self.rho_bar < 0:
            raise ValueError("clipping thresholds must be >= 0")
        if not (0.0 <= self.lam <= 1.0):
            raise ValueError("lam must lie in [0, 1]")
        if self.c_bar > self.rho_bar and not self.allow_c_above_rho:
            raise ValueError(f"c_bar {self.c_bar} > rho_bar {self.rho_bar} voids the contraction guarantee; "
                             "set allow_c_above_rho=True if this is a deliberate ablation")


def importance_weights(
    target_logp: np.ndarray,
    behavior_logp: np.ndarray,
    config: CorrectionConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Clipped likelihood ratios (c_t, rho_t) from joint-action log-probs.

    Both inputs are log-probabilities of the whole joint action (sum of the
    per-agent log-probs).  The ratio is clipped in log space before
    exponentiation, so extreme mismatches cannot overflow.
    """
    target_logp = np.asarray(target_logp, dtype=np.float64)
    behavior_logp = np.asarray(behavior_logp, dtype=np.float64)
    if not (np.all(np.isfinite(target_logp)) and np.all(np.isfinite(behavior_logp))):
        raise ValueError("log-probabilities must be finite")
    log_ratio = target_logp - behavior_logp
    c = config.lam * _clipped_exp(log_ratio, config.c_bar)
    rho = _clipped_exp(log_ratio, config.rho_bar)
    return c, rho


def _clipped_exp(log_ratio: np.ndarray, bound: float) -> np.ndarray:
    if bound == 0.0:
        return np.zeros_like(log_ratio)
    if np.isinf(bound):
        return np.exp(log_ratio)
    return np.exp(np.minimum(log_ratio, np.log(bound)))


def vtrace_targets(
    rewards: np.ndarray,
    values: np.ndarray,
    bootstrap_value,
    c_t: np.ndarray,
    rho_t: np.ndarray,
    gamma,
    terminals: np.ndarray | None = None,
    dones: np.ndarray | None = None,
    next_values: np.ndarray | None = None,
) -> np.ndarray:
    """Corrected value targets v_t via the backward recursion

        v_t = V(s_t) + rho_t * delta_t + gamma_t * c_t * (v_{t+1} - V(s_{t+1})),
        delta_t = r_t + gamma_t * V(s_{t+1}) - V(s_t),

    anchored at v_T = bootstrap_value.  This equals the truncated
    product-sum form of the corrected n-step return (tested for
    equivalence).

    Episode boundaries inside the unroll are handled by two masks:
    ``terminals`` kills the bootstrap at true episode ends, ``dones``
    (terminal or truncated) cuts the recursion so no weight leaks across a
    reset.  ``next_values`` supplies V of the per-step successor state; it
    defaults to the shifted ``values``/``bootstrap_value``, which is correct
    whenever the unroll does not cross an episode boundary.  At a truncation
    the caller must pass the truncated state's value there so the cut
    episode still bootstraps.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    c_t = np.asarray(c_t, dtype=np.float64)
    rho_t = np.asarray(rho_t, dtype=np.float64)
    T = rewards.shape[-1]
    if values.shape[-1] != T or c_t.shape[-1] != T or rho_t.shape[-1] != T:
        raise ValueError("rewards, values, c_t and rho_t must share the time axis length")
    values_ext = np.concatenate([values, _bootstrap_column(bootstrap_value, values)], axis=-1)
    if next_values is None:
        next_values = values_ext[..., 1:]
    else:
        next_values = np.asarray(next_values, dtype=np.float64)
        if next_values.shape[-1] != T:
            raise ValueError("next_values must share the time axis length")
    boot_disc, cont_disc = _discount_masks(gamma, T, terminals, dones)
    delta = rewards + boot_disc * next_values - values

    v = np.empty(np.broadcast_shapes(values.shape, delta.shape, c_t.shape), dtype=np.float64)
    acc = np.zeros(v.shape[:-1], dtype=np.float64)  # v_{t+1} - V(s_{t+1})
    for t in range(T - 1, -1, -1):
        acc = rho_t[..., t] * delta[..., t] + cont_disc[..., t] * c_t[..., t] * acc
        v[..., t] = values[..., t] + acc
    return v


def pg_advantage(
    rewards: np.ndarray,
    values: np.ndarray,
    v_targets: np.ndarray,
    rho_t: np.ndarray,
    gamma,
    mode: str = "eq7",
    bootstrap_value=0.0,
    terminals: np.ndarray | None = None,
    dones: np.ndarray | None = None,
    next_values: np.ndarray | None = None,
) -> np.ndarray:
    """Weighted advantage for the policy update.

    ``eq7`` (default) uses the one-step critic difference,
    rho_t * (r_t + gamma V(s_{t+1}) - V(s_t)).  ``vtrace_bootstrap``
    replaces V(s_{t+1}) with the corrected target v_{t+1}; it is kept as an
    ablation knob.  Both treat every input as a constant.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    rho_t = np.asarray(rho_t, dtype=np.float64)
    T = rewards.shape[-1]
    boot_disc, _ = _discount_masks(gamma, T, terminals, dones)
    if next_values is None:
        ext = np.concatenate([values, _bootstrap_column(bootstrap_value, values)], axis=-1)
        next_values = ext[..., 1:]
    else:
        next_values = np.asarray(next_values, dtype=np.float64)
    if mode == "eq7":
        tail = next_values
    elif mode == "vtrace_bootstrap":
        v_targets = np.asarray(v_targets, dtype=np.float64)
        shifted = np.concatenate([v_targets[..., 1:], _bootstrap_column(bootstrap_value, v_targets)], axis=-1)
        # At an episode cut the shifted target belongs to the next episode;
        # fall back to the successor's critic value, which the boot mask
        # zeroes at true terminals anyway.
        if dones is not None:
            shifted = np.where(np.asarray(dones, dtype=bool), next_values, shifted)
        tail = shifted
    else:
        raise ValueError(f"unknown advantage mode {mode!r}")
    return rho_t * (rewards + boot_disc * tail - values)


def _bootstrap_column(bootstrap_value, like: np.ndarray) -> np.ndarray:
    """Shape the anchor value as one extra time slot on ``like``'s time axis."""
    bv = np.asarray(bootstrap_value, dtype=np.float64)
    if bv.ndim == like.ndim - 1:
        bv = bv[..., None]
    return np.broadcast_to(bv, like.shape[:-1] + (1,))


def _discount_masks(gamma, T: int, terminals, dones):
    gamma = np.asarray(gamma, dtype=np.float64)
    if gamma.ndim == 0:
        gamma = np.broadcast_to(gamma, (T,))
    if terminals is None:
        boot = gamma
    else:
        boot = gamma * (1.0 - np.asarray(terminals, dtype=np.float64))
    if dones is None:
        cont = boot
    else:
        cont = gamma * (1.0 - np.asarray(dones, dtype=np.float64))
    return boot, cont


@dataclass
class TrajectoryBatch:
    """One fixed-length unroll from a single worker.

    Observations are stored exactly as the behavior policy consumed them
    (after any frame stacking), together with the per-step successor
    observation so truncated episodes can still bootstrap.  ``version``
    tags each step with the parameter snapshot that acted.
    """

    joint_obs: np.ndarray                # (T, n_agents, obs_dim)
    actions: np.ndarray                  # (T, n_agents) int
    rewards: np.ndarray                  # (T,)
    behavior_logp: np.ndarray            # (T,) joint-action log-prob
    behavior_logp_agents: np.ndarray     # (T, n_agents)
    terminal: np.ndarray                 # (T,) bool, true episode end
    truncated: np.ndarray                # (T,) bool, episode-limit cut
    version: np.ndarray                  # (T,) int snapshot tags
    next_joint_obs: np.ndarray           # (T, n_agents, obs_dim)
    legal: np.ndarray                    # (T, n_agents, n_actions) bool
    full_state: np.ndarray | None = None       # (T, state_dim)
    next_full_state: np.ndarray | None = None  # (T, state_dim)

    def __post_init__(self):
        T = self.rewards.shape[0]
        for name in ("joint_obs", "actions", "behavior_logp", "behavior_logp_agents",
                     "terminal", "truncated", "version", "next_joint_obs", "legal"):
            arr = getattr(self, name)
            if arr.shape[0] != T:
                raise ValueError(f"{name} has length {arr.shape[0]}, expected {T}")
        for name in ("full_state", "next_full_state"):
            arr = getattr(self, name)
            if arr is not None and arr.shape[0] != T:
                raise ValueError(f"{name} has length {arr.shape[0]}, expected {T}")
        if not np.all(np.isfinite(self.behavior_logp)):
            raise ValueError("behavior log-probs must be finite")
        if np.any(self.terminal & self.truncated):
            raise ValueError("a step cannot be both terminal and truncated")

    @property
    def T(self) -> int:
        return self.rewards.shape[0]

    @property
    def done(self) -> np.ndarray:
        return self.terminal | self.truncated


@dataclass
class VTraceResult:
    """Per-step outputs of the correction pipeline for one batch."""

    targets: np.ndarray       # (..., T) corrected value targets
    c_t: np.ndarray           # (T,) or (B, T)
    rho_t: np.ndarray
    pg_advantage: np.ndarray  # same layout as targets

    def __post_init__(self):
        if np.any(self.c_t < 0) or np.any(self.rho_t < 0):
            raise ValueError("importance weights must be nonnegative")
