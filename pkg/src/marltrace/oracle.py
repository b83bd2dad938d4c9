"""Exact tabular policy evaluation and operator verification.

Everything in this module is deterministic linear algebra over the dense
tables of a :class:`~marltrace.env.DecPomdpSpec`: no sampling, no function
approximation.  It evaluates joint policies exactly, applies the
importance-corrected policy-evaluation operator by dynamic programming with
a certified truncation horizon, computes the clipped-ratio quantities that
control its contraction (per-state expected ratio, its minimum beta, the
alpha table), constructs the normalized clipped policy whose value function
is the operator's fixed point, and bundles all of it into a randomized
verification battery.

Conventions
-----------
Policies are handled as row-stochastic matrices over (state, joint action).
A :class:`TabularPolicy` is either *factored* (one table per agent indexed
by observation id; the joint row is the product across agents) or *joint*
(one state-indexed table, needed because the clipped policy generally does
not factor per agent).  Value functions are arrays (S,) or (S, K); the K
columns ride through every computation unchanged, so the vector-valued,
per-agent form costs nothing extra.

The operator applied to V is

    (R V)(s) = V(s) + E[ sum_t gamma^t (c_0 ... c_{t-1}) rho_t
                         (r_t + gamma V(s_{t+1}) - V(s_t)) | s_0 = s ]

with the expectation over behavior-policy trajectories.  Conditioning on
the first transition turns the series into the linear recursion
G = b + gamma M G with

    b(s)     = sum_a mu(a|s) rho(s,a) dbar(s,a),
    M(s,s')  = sum_a mu(a|s) c(s,a) P(s'|s,a),
    dbar     = r + gamma P V - V,

which is what ``apply_R`` iterates, accumulating terms until the geometric
tail bound drops below the requested tolerance.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .env import DecPomdpSpec
from .vtrace import CorrectionConfig

logger = logging.getLogger(__name__)

ROW_TOL = 1e-12
_MAX_NEUMANN_ITERS = 2_000_000
_MAX_POWER_ITERS = 20_000


@dataclass(frozen=True)
class TabularPolicy:
    """Per-agent (factored) or state-indexed (joint) action distributions."""

    tables: tuple[np.ndarray, ...] | None = None
    joint: np.ndarray | None = None

    def __post_init__(self):
        if (self.tables is None) == (self.joint is None):
            raise ValueError("provide exactly one of per-agent tables or a joint table")
        if self.tables is not None:
            object.__setattr__(self, "tables", tuple(np.asarray(t, dtype=np.float64) for t in self.tables))
            for i, t in enumerate(self.tables):
                _check_rows_stochastic(t, f"agent {i} policy")
        else:
            object.__setattr__(self, "joint", np.asarray(self.joint, dtype=np.float64))
            _check_rows_stochastic(self.joint, "joint policy")

    @staticmethod
    def factored(tables: Sequence[np.ndarray]) -> "TabularPolicy":
        return TabularPolicy(tables=tuple(tables))

    @staticmethod
    def from_joint(matrix: np.ndarray) -> "TabularPolicy":
        return TabularPolicy(joint=matrix)

    def joint_matrix(self, spec: DecPomdpSpec) -> np.ndarray:
        """Row-stochastic (S, A_joint) matrix of joint-action probabilities."""
        if self.joint is not None:
            if self.joint.shape != (spec.n_states, spec.n_joint_actions):
                raise ValueError(f"joint table shape {self.joint.shape} does not match spec "
                                 f"{(spec.n_states, spec.n_joint_actions)}")
            return self.joint
        if len(self.tables) != spec.n_agents:
            raise ValueError(f"{len(self.tables)} agent tables for {spec.n_agents} agents")
        out = np.ones((spec.n_states, 1))
        for i, table in enumerate(self.tables):
            if table.shape[1] != spec.action_counts[i]:
                raise ValueError(f"agent {i} table has {table.shape[1]} actions, spec has {spec.action_counts[i]}")
            rows = table[spec.obs_ids[i]]  # (S, A_i)
            out = (out[:, :, None] * rows[:, None, :]).reshape(spec.n_states, -1)
        return out


def _check_rows_stochastic(table: np.ndarray, what: str) -> None:
    if np.any(table < -ROW_TOL):
        raise ValueError(f"{what} has negative probabilities")
    sums = table.sum(axis=1)
    worst = np.abs(sums - 1.0).max() if len(sums) else 0.0
    if worst > 1e-9:
        raise ValueError(f"{what} rows must sum to 1 (worst deviation {worst:.3e})")


@dataclass(frozen=True)
class ValueTable:
    """State-indexed values; optionally one column per agent."""

    values: np.ndarray

    def __post_init__(self):
        v = np.asarray(self.values, dtype=np.float64)
        if v.ndim not in (1, 2):
            raise ValueError("values must be (S,) or (S, K)")
        if not np.all(np.isfinite(v)):
            raise ValueError("values must be finite")
        object.__setattr__(self, "values", v)

    @property
    def n_columns(self) -> int:
        return 1 if self.values.ndim == 1 else self.values.shape[1]

    def __sub__(self, other):
        return self.values - _as_values(other)


def _as_values(v) -> np.ndarray:
    if isinstance(v, ValueTable):
        return v.values
    return np.asarray(v, dtype=np.float64)


def sup_norm(x) -> float:
    return float(np.max(np.abs(_as_values(x)))) if np.asarray(x).size else 0.0


def uniform_policy(spec: DecPomdpSpec) -> TabularPolicy:
    tables = [np.full((spec.obs_counts[i], spec.action_counts[i]), 1.0 / spec.action_counts[i])
              for i in range(spec.n_agents)]
    return TabularPolicy.factored(tables)


def random_policy(spec: DecPomdpSpec, rng: np.random.Generator, floor: float = 0.05) -> TabularPolicy:
    """Random factored policy with every probability bounded away from zero.

    The floor keeps likelihood ratios finite and moderate, which the
    randomized battery relies on (clipping thresholds then dominate the
    ratio, not stray near-zero denominators).
    """
    tables = []
    for i in range(spec.n_agents):
        raw = rng.dirichlet(np.ones(spec.action_counts[i]), size=spec.obs_counts[i])
        tables.append((1.0 - floor) * raw + floor / spec.action_counts[i])
    return TabularPolicy.factored(tables)


# -- clipped-ratio tables ----------------------------------------------------


def _ratio_table(pi_m: np.ndarray, mu_m: np.ndarray) -> np.ndarray:
    """pi/mu with the 0/0 convention 0; inf where mu=0 < pi."""
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(mu_m > 0, pi_m / np.where(mu_m > 0, mu_m, 1.0), np.where(pi_m > 0, np.inf, 0.0))
    return ratio


def _weight_tables(spec: DecPomdpSpec, pi, mu, config: CorrectionConfig,
                   unclipped_rho: bool = False) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(rho, c, mu_matrix) tables over (state, joint action)."""
    pi_m = _joint(spec, pi)
    mu_m = _joint(spec, mu)
    ratio = _ratio_table(pi_m, mu_m)
    if np.isinf(ratio).any() and (unclipped_rho or np.isinf(config.rho_bar)):
        s, a = np.argwhere(np.isinf(ratio))[0]
        raise ValueError(f"behavior policy gives zero probability to joint action {a} in state {s} "
                         "while the target does not; an unclipped ratio is undefined")
    rho = ratio if unclipped_rho else np.minimum(config.rho_bar, ratio)
    c = config.lam * np.minimum(config.c_bar, ratio)
    return rho, c, mu_m


def _joint(spec: DecPomdpSpec, policy) -> np.ndarray:
    if isinstance(policy, TabularPolicy):
        return policy.joint_matrix(spec)
    m = np.asarray(policy, dtype=np.float64)
    _check_rows_stochastic(m, "policy matrix")
    if m.shape != (spec.n_states, spec.n_joint_actions):
        raise ValueError(f"policy matrix shape {m.shape} does not match spec")
    return m


def expected_rho(spec: DecPomdpSpec, pi, mu, config: CorrectionConfig,
                 unclipped_rho: bool = False) -> tuple[np.ndarray, float]:
    """Per-state expected clipped ratio under the behavior policy, and its
    minimum over states (the contraction-rate constant beta).

    With ``c_bar <= rho_bar`` the expectation never exceeds 1.
    """
    rho, _, mu_m = _weight_tables(spec, pi, mu, config, unclipped_rho)
    table = (mu_m * rho).sum(axis=1)
    return table, float(table.min())


def alpha_table(spec: DecPomdpSpec, pi, mu, config: CorrectionConfig,
                unclipped_rho: bool = False) -> np.ndarray:
    """rho(s,a) - c(s,a) * E[expected_rho at the successor of (s,a)].

    For stochastic kernels the successor term is averaged over the
    transition row.  Nonnegative everywhere when 0 <= c_bar <= rho_bar.
    """
    rho, c, mu_m = _weight_tables(spec, pi, mu, config, unclipped_rho)
    erho = (mu_m * rho).sum(axis=1)
    succ = spec.transition @ erho  # (S, A)
    return rho - c * succ


def corrected_policy(spec: DecPomdpSpec, pi, mu, rho_bar: float) -> TabularPolicy:
    """The normalized clipped policy: rows proportional to min(rho_bar * mu, pi).

    Its exact value function is the operator's unique fixed point.  As
    rho_bar grows the clipping deactivates and the result approaches the
    target policy; as rho_bar shrinks it approaches the behavior policy.
    Underflowing rows fall back to the behavior row with a logged warning.
    """
    if rho_bar < 0:
        raise ValueError("rho_bar must be >= 0")
    pi_m = _joint(spec, pi)
    mu_m = _joint(spec, mu)
    numer = np.minimum(rho_bar * mu_m, pi_m)
    sums = numer.sum(axis=1)
    if np.any(sums == 0.0):
        rows = np.flatnonzero(sums == 0.0)
        raise ValueError(f"clipped policy has all-zero rows at states {rows.tolist()}; "
                         "rho_bar=0 or disjoint supports leave it undefined")
    tiny = np.flatnonzero(sums < 1e-300)
    if len(tiny):
        logger.warning("clipped-policy rows underflowed at states %s; falling back to behavior rows", tiny.tolist())
        numer[tiny] = mu_m[tiny]
        sums[tiny] = numer[tiny].sum(axis=1)
    out = numer / sums[:, None]
    # Exact renormalization so downstream row checks hold to 1e-12.
    out /= out.sum(axis=1, keepdims=True)
    return TabularPolicy.from_joint(out)


# -- exact policy evaluation -------------------------------------------------


def exact_value(spec: DecPomdpSpec, policy, tol: float = 1e-10) -> ValueTable:
    """Solve the policy-evaluation equations for the joint policy.

    Returns V with Bellman residual at most ``tol`` in sup norm (direct
    dense solve, then residual check; iterative refinement if the solve is
    not tight enough).
    """
    m = _joint(spec, policy)
    P_pi = np.einsum("sa,sat->st", m, spec.transition)
    r_pi = (m * spec.reward).sum(axis=1)
    S = spec.n_states
    V = np.linalg.solve(np.eye(S) - spec.gamma * P_pi, r_pi)
    for _ in range(100):
        residual = r_pi + spec.gamma * (P_pi @ V) - V
        if np.max(np.abs(residual)) <= tol:
            break
        V = V + residual
    else:
        raise ArithmeticError(f"policy evaluation did not reach residual {tol}")
    return ValueTable(V)


# -- the corrected policy-evaluation operator --------------------------------


@dataclass(frozen=True)
class _OperatorPieces:
    gamma: float
    erho: np.ndarray    # (S,)
    M: np.ndarray       # (S, S) c-weighted kernel
    P_rho: np.ndarray   # (S, S) rho-weighted kernel
    r_rho: np.ndarray   # (S,)
    chi: float          # gamma * max row sum of M, the tail decay rate


def _pieces(spec: DecPomdpSpec, pi, mu, config: CorrectionConfig,
            unclipped_rho: bool = False) -> _OperatorPieces:
    rho, c, mu_m = _weight_tables(spec, pi, mu, config, unclipped_rho)
    erho = (mu_m * rho).sum(axis=1)
    M = np.einsum("sa,sa,sat->st", mu_m, c, spec.transition)
    P_rho = np.einsum("sa,sa,sat->st", mu_m, rho, spec.transition)
    r_rho = (mu_m * rho * spec.reward).sum(axis=1)
    chi = spec.gamma * float(M.sum(axis=1).max(initial=0.0))
    return _OperatorPieces(spec.gamma, erho, M, P_rho, r_rho, chi)


def _correction_term(p: _OperatorPieces, V: np.ndarray, trunc_tol: float) -> tuple[np.ndarray, float]:
    """Truncated series G = sum_k (gamma M)^k b(V) and its tail certificate."""
    b = p.r_rho.reshape(-1, *([1] * (V.ndim - 1))) + p.gamma * (p.P_rho @ V) - p.erho.reshape(-1, *([1] * (V.ndim - 1))) * V
    term = b.copy()
    G = b.copy()
    tail = _tail_bound(p.chi, term)
    iters = 0
    while tail > trunc_tol:
        term = p.gamma * (p.M @ term)
        G += term
        tail = _tail_bound(p.chi, term)
        iters += 1
        if iters > _MAX_NEUMANN_ITERS:
            raise ArithmeticError(f"operator series did not certify below {trunc_tol} "
                                  f"(decay rate {p.chi:.6f}); is gamma * lam * c_bar >= 1?")
    return G, tail


def _tail_bound(chi: float, term: np.ndarray) -> float:
    nrm = float(np.max(np.abs(term))) if term.size else 0.0
    if nrm == 0.0:
        return 0.0
    if chi >= 1.0:
        return np.inf
    return chi * nrm / (1.0 - chi)


def apply_R(spec: DecPomdpSpec, V, pi, mu, config: CorrectionConfig,
            trunc_tol: float = 1e-10, unclipped_rho: bool = False) -> tuple[ValueTable, float]:
    """Apply the corrected policy-evaluation operator to V exactly, by
    dynamic programming over the state space.

    Returns (R V, certificate): the certificate bounds the sup-norm error
    introduced by truncating the series, and is at most ``trunc_tol``.
    """
    p = _pieces(spec, pi, mu, config, unclipped_rho)
    v = _as_values(V)
    G, cert = _correction_term(p, v, trunc_tol)
    return ValueTable(v + G), cert


def fixed_point(spec: DecPomdpSpec, pi, mu, config: CorrectionConfig,
                tol: float = 1e-9, unclipped_rho: bool = False) -> ValueTable:
    """The operator's unique fixed point, verified to ``tol``.

    Repeatedly applies the operator while the contraction-rate estimate
    predicts convergence in a reasonable number of sweeps; otherwise (tiny
    beta, e.g. rho_bar near 0) solves the equivalent strictly diagonally
    dominant linear system built from the same operator tables.  Either
    way the result is certified by one honest operator application:
    sup-norm residual at most ``tol``.
    """
    p = _pieces(spec, pi, mu, config, unclipped_rho)
    beta = float(p.erho.min())
    if beta <= 0.0:
        raise ValueError("expected clipped ratio hits 0 in some state; the contraction bound is vacuous")
    rate = 1.0 - (1.0 - spec.gamma) * beta
    S = spec.n_states
    V = np.zeros(S)
    solve_needed = rate >= 1.0 or np.log(max(tol, 1e-300)) / np.log(min(rate, 1.0 - 1e-15)) > _MAX_POWER_ITERS
    if not solve_needed:
        inner = min(trunc := tol / 10.0, 1e-12)
        for _ in range(_MAX_POWER_ITERS):
            G, _ = _correction_term(p, V, inner)
            V = V + G
            if np.max(np.abs(G)) <= 0.25 * tol:
                break
        else:
            solve_needed = True
    if solve_needed:
        # b(V) = 0  <=>  (diag(erho) - gamma P_rho) V = r_rho; strictly
        # diagonally dominant whenever beta > 0.
        V = np.linalg.solve(np.diag(p.erho) - spec.gamma * p.P_rho, p.r_rho)
    G, _ = _correction_term(p, V, min(tol / 10.0, 1e-12))
    residual = float(np.max(np.abs(G)))
    if residual > tol:
        V = np.linalg.solve(np.diag(p.erho) - spec.gamma * p.P_rho, p.r_rho)
        G, _ = _correction_term(p, V, min(tol / 10.0, 1e-12))
        residual = float(np.max(np.abs(G)))
        if residual > tol:
            raise ArithmeticError(f"fixed point residual {residual:.3e} exceeds tol {tol:.3e}")
    return ValueTable(V)


def contraction_ratio(spec: DecPomdpSpec, pi, mu, config: CorrectionConfig,
                      V1, V2, trunc_tol: float = 1e-12,
                      unclipped_rho: bool = False) -> float:
    """Measured sup-norm shrink factor ||R V1 - R V2|| / ||V1 - V2||.

    Both applications run as one two-column operator sweep.  When the alpha
    table is nonnegative the result stays below 1 - (1 - gamma) * beta up
    to the truncation slack.
    """
    v1, v2 = _as_values(V1), _as_values(V2)
    dist = float(np.max(np.abs(v1 - v2)))
    if dist == 0.0:
        raise ValueError("V1 and V2 are identical; the ratio is undefined")
    p = _pieces(spec, pi, mu, config, unclipped_rho)
    stacked = np.stack([v1, v2], axis=-1)
    G, _ = _correction_term(p, stacked, trunc_tol)
    out = stacked + G
    return float(np.max(np.abs(out[..., 0] - out[..., 1]))) / dist


@dataclass(frozen=True)
class TelescopeReport:
    """Per-state truncated value of the weighted-alpha series, with the
    theoretical ceiling it must stay under."""

    values: np.ndarray
    bound: float
    certificate: float

    @property
    def max_value(self) -> float:
        return float(self.values.max())


def telescoping_bound(spec: DecPomdpSpec, pi, mu, config: CorrectionConfig,
                      trunc_tol: float = 1e-10,
                      unclipped_rho: bool = False) -> TelescopeReport:
    """Exact truncated per-state value of the discounted weighted-alpha
    series whose supremum bounds the operator's contraction constant.

    The series telescopes to 1 + (gamma - 1) * E[sum_t gamma^t c~_{t-1}
    rho_t], which never exceeds 1 + (gamma - 1) * beta; the report carries
    that ceiling alongside the computed values.
    """
    p = _pieces(spec, pi, mu, config, unclipped_rho)
    beta = float(p.erho.min())
    # Expected alpha under the behavior policy, then the same Neumann
    # recursion as the operator, shifted one step.
    h = p.erho - p.M @ p.erho
    term = h.copy()
    H = h.copy()
    tail = _tail_bound(p.chi, term)
    while tail * spec.gamma > trunc_tol:
        term = spec.gamma * (p.M @ term)
        H += term
        tail = _tail_bound(p.chi, term)
    W = (1.0 - p.erho) + spec.gamma * H
    return TelescopeReport(values=W, bound=1.0 + (spec.gamma - 1.0) * beta, certificate=tail * spec.gamma)


# -- randomized verification battery ----------------------------------------


def random_spec(seed: int, max_states: int = 6, max_actions: int = 3, max_agents: int = 2,
                gamma_range: tuple[float, float] = (0.5, 0.95)) -> DecPomdpSpec:
    """Small random continuing process for the verification battery.

    Dense Dirichlet transition rows, rewards in [-1, 1], one-hot state
    observations (each agent fully observes the state, so factored tabular
    policies are state-indexed).
    """
    rng = np.random.default_rng(seed)
    S = int(rng.integers(2, max_states + 1))
    n_agents = int(rng.integers(1, max_agents + 1))
    counts = tuple(int(rng.integers(2, max_actions + 1)) for _ in range(n_agents))
    A = int(np.prod(counts))
    transition = rng.dirichlet(np.ones(S), size=(S, A))
    reward = rng.uniform(-1.0, 1.0, size=(S, A))
    gamma = float(rng.uniform(*gamma_range))
    obs = tuple(np.eye(S) for _ in range(n_agents))
    return DecPomdpSpec(
        n_agents=n_agents,
        action_counts=counts,
        transition=transition,
        reward=reward,
        observations=obs,
        gamma=gamma,
        initial_dist=np.full(S, 1.0 / S),
        episode_limit=10_000,
        terminal=np.zeros(S, dtype=bool),
        state_features=np.eye(S),
        legal_actions=tuple(np.ones((S, a), dtype=bool) for a in counts),
        name=f"random_{seed}",
        params={"seed": seed},
    )


BATTERY_COLUMNS = [
    "seed", "n_states", "n_joint_actions", "n_agents", "gamma", "beta", "min_alpha",
    "max_contraction", "contraction_bound", "fp_residual", "fp_identity_err",
    "rho_inf_err", "rho_zero_err", "cbar_spread", "telescope_max", "telescope_bound",
    "ok", "violations",
]


def verify_battery(n_specs: int = 200, seed: int = 0, pairs_per_spec: int = 100,
                   trunc_tol: float = 1e-10, inject_unclipped_rho: bool = False,
                   progress=None) -> tuple[list[dict], bool]:
    """Run the randomized verification battery; returns (rows, all_ok).

    Per random spec and random (target, behavior) policy pair it checks:
    the fixed point matches exact evaluation of the clipped policy (1e-6);
    measured contraction never exceeds 1 - (1 - gamma) * beta + 1e-9 over
    ``pairs_per_spec`` random value pairs; the large/small rho_bar limits
    recover the target/behavior values (1e-5 / 1e-4); the fixed point is
    invariant to c_bar in {0.25, 0.5, 1.0} (1e-6 pairwise); and the
    weighted-alpha series stays under its telescoped ceiling.

    ``inject_unclipped_rho`` is a deliberate negative control: the operator
    machinery runs with raw, unclipped ratios while every claimed quantity
    keeps the configured clipping, so the battery must flag violations.
    """
    rows: list[dict] = []
    all_ok = True
    base = CorrectionConfig(c_bar=1.0, rho_bar=1.0)
    for i in range(n_specs):
        spec_seed = seed * 1_000_003 + i
        spec = random_spec(spec_seed)
        rng = np.random.default_rng(spec_seed + 17)
        pi = random_policy(spec, rng)
        mu = random_policy(spec, rng)
        violations: list[str] = []

        erho, beta = expected_rho(spec, pi, mu, base)
        alpha = alpha_table(spec, pi, mu, base, unclipped_rho=inject_unclipped_rho)
        min_alpha = float(alpha.min())
        bound = 1.0 - (1.0 - spec.gamma) * beta

        fp = fixed_point(spec, pi, mu, base, tol=1e-9, unclipped_rho=inject_unclipped_rho)
        rv, _ = apply_R(spec, fp, pi, mu, base, trunc_tol=trunc_tol, unclipped_rho=inject_unclipped_rho)
        fp_residual = sup_norm(rv.values - fp.values)
        pe = exact_value(spec, corrected_policy(spec, pi, mu, base.rho_bar))
        fp_identity_err = sup_norm(fp.values - pe.values)
        if fp_identity_err > 1e-6:
            violations.append(f"fixed_point_identity={fp_identity_err:.3e}")

        max_ratio = 0.0
        for _ in range(pairs_per_spec):
            V1 = rng.uniform(-1.0, 1.0, size=spec.n_states)
            V2 = rng.uniform(-1.0, 1.0, size=spec.n_states)
            if np.max(np.abs(V1 - V2)) < 1e-3:
                V2 = V1 + 1.0
            max_ratio = max(max_ratio, contraction_ratio(spec, pi, mu, base, V1, V2,
                                                         trunc_tol=1e-12, unclipped_rho=inject_unclipped_rho))
        if min_alpha >= -1e-12 and max_ratio > bound + 1e-9:
            violations.append(f"contraction={max_ratio:.12f}>bound={bound:.12f}")

        cfg_inf = CorrectionConfig(c_bar=1.0, rho_bar=1e9)
        cfg_zero = CorrectionConfig(c_bar=1e-6, rho_bar=1e-6)
        v_target = exact_value(spec, pi)
        v_behavior = exact_value(spec, mu)
        rho_inf_err = sup_norm(fixed_point(spec, pi, mu, cfg_inf, tol=1e-9, unclipped_rho=inject_unclipped_rho).values - v_target.values)
        rho_zero_err = sup_norm(fixed_point(spec, pi, mu, cfg_zero, tol=1e-11, unclipped_rho=inject_unclipped_rho).values - v_behavior.values)
        if rho_inf_err > 1e-5:
            violations.append(f"rho_inf_limit={rho_inf_err:.3e}")
        if rho_zero_err > 1e-4:
            violations.append(f"rho_zero_limit={rho_zero_err:.3e}")

        fps = [fixed_point(spec, pi, mu, CorrectionConfig(c_bar=cb, rho_bar=1.0), tol=1e-9,
                           unclipped_rho=inject_unclipped_rho).values
               for cb in (0.25, 0.5, 1.0)]
        cbar_spread = max(sup_norm(a - b) for a in fps for b in fps)
        if cbar_spread > 1e-6:
            violations.append(f"cbar_invariance={cbar_spread:.3e}")

        tele = telescoping_bound(spec, pi, mu, base, trunc_tol=trunc_tol, unclipped_rho=inject_unclipped_rho)
        if tele.max_value > tele.bound + trunc_tol:
            violations.append(f"telescope={tele.max_value:.12f}>bound={tele.bound:.12f}")

        ok = not violations
        all_ok &= ok
        rows.append({
            "seed": spec_seed, "n_states": spec.n_states, "n_joint_actions": spec.n_joint_actions,
            "n_agents": spec.n_agents, "gamma": spec.gamma, "beta": beta, "min_alpha": min_alpha,
            "max_contraction": max_ratio, "contraction_bound": bound, "fp_residual": fp_residual,
            "fp_identity_err": fp_identity_err, "rho_inf_err": rho_inf_err, "rho_zero_err": rho_zero_err,
            "cbar_spread": cbar_spread, "telescope_max": tele.max_value, "telescope_bound": tele.bound,
            "ok": ok, "violations": ";".join(violations),
        })
        if progress is not None:
            progress(i + 1, n_specs, rows[-1])
    return rows, all_ok
