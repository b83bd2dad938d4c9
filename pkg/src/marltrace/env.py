"""Tabular cooperative multi-agent environments.

A :class:`DecPomdpSpec` is a dense, fully-enumerated description of a
cooperative partially observable multi-agent decision process: a finite
state set, per-agent finite action sets, a joint-action transition kernel,
a single shared reward table, and per-agent observation tables.  Everything
is plain numpy, immutable after construction, and cheap enough to share
across worker threads.

The dense representation is deliberate: it lets the tabular machinery in
:mod:`marltrace.oracle` evaluate policies and operators exactly, with no
sampling involved.

Built-in environments:

``make_matrix_game``
    single-shot repeated game over a payoff tensor (includes bandits as the
    one-agent case).
``make_coop_gridworld``
    agents navigate a grid and must occupy all goal cells simultaneously
    for a shared reward; observations are local windows, so the world is
    genuinely partially observable for small sight radii.
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

PROB_TOL = 1e-12

# Keep dense kernels from accidentally exploding: S * A * S entries.
MAX_KERNEL_ENTRIES = 200_000_000


def _freeze(a: np.ndarray) -> np.ndarray:
    a = np.ascontiguousarray(a)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class DecPomdpSpec:
    """Dense description of a cooperative multi-agent decision process.

    Attributes:
        n_agents: number of agents.
        action_counts: per-agent action-set sizes; the joint action space is
            their cartesian product, indexed in row-major (C) order.
        transition: array (S, A_joint, S); ``transition[s, a]`` is the
            probability vector of the successor state.
        reward: array (S, A_joint); the scalar reward shared by all agents.
            Cooperative play is enforced structurally: there is one table.
        observations: per-agent arrays (S, obs_dim_i) of observation vectors.
        gamma: discount factor in [0, 1).
        initial_dist: probability vector (S,) over initial states.
        episode_limit: maximum steps per episode before truncation.
        terminal: boolean mask (S,) of absorbing zero-reward states.
        state_features: array (S, state_dim) encoding the full state, used by
            centralized critics that consume privileged state input.
        legal_actions: per-agent boolean arrays (S, A_i).
        name: label used by the CLI registry and checkpoints.
        params: constructor parameters, kept so the spec can be rebuilt.
        optimal_return: known best undiscounted episode return, when the
            constructor can state it; used for success-rate metrics.
    """

    n_agents: int
    action_counts: tuple[int, ...]
    transition: np.ndarray
    reward: np.ndarray
    observations: tuple[np.ndarray, ...]
    gamma: float
    initial_dist: np.ndarray
    episode_limit: int
    terminal: np.ndarray
    state_features: np.ndarray
    legal_actions: tuple[np.ndarray, ...]
    name: str = "custom"
    params: dict = field(default_factory=dict)
    optimal_return: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "transition", _freeze(np.asarray(self.transition, dtype=np.float64)))
        object.__setattr__(self, "reward", _freeze(np.asarray(self.reward, dtype=np.float64)))
        object.__setattr__(self, "initial_dist", _freeze(np.asarray(self.initial_dist, dtype=np.float64)))
        object.__setattr__(self, "terminal", _freeze(np.asarray(self.terminal, dtype=bool)))
        object.__setattr__(self, "state_features", _freeze(np.asarray(self.state_features, dtype=np.float64)))
        object.__setattr__(self, "observations", tuple(_freeze(np.asarray(o, dtype=np.float64)) for o in self.observations))
        object.__setattr__(self, "legal_actions", tuple(_freeze(np.asarray(m, dtype=bool)) for m in self.legal_actions))
        object.__setattr__(self, "action_counts", tuple(int(a) for a in self.action_counts))
        # Derived lookups, computed once.
        det = bool(np.all(np.max(self.transition, axis=2) >= 1.0 - PROB_TOL))
        object.__setattr__(self, "_deterministic", det)
        nxt = np.argmax(self.transition, axis=2).astype(np.int64) if det else None
        object.__setattr__(self, "_next_state", nxt)
        obs_ids = []
        obs_counts = []
        for o in self.observations:
            _, inv = np.unique(np.round(o, 12), axis=0, return_inverse=True)
            obs_ids.append(_freeze(inv.astype(np.int64)))
            obs_counts.append(int(inv.max()) + 1 if len(inv) else 0)
        object.__setattr__(self, "_obs_ids", tuple(obs_ids))
        object.__setattr__(self, "_obs_counts", tuple(obs_counts))

    # -- shape helpers -----------------------------------------------------

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    @property
    def n_joint_actions(self) -> int:
        return self.transition.shape[1]

    @property
    def obs_dims(self) -> tuple[int, ...]:
        return tuple(o.shape[1] for o in self.observations)

    @property
    def state_dim(self) -> int:
        return self.state_features.shape[1]

    @property
    def is_deterministic(self) -> bool:
        return self._deterministic

    @property
    def obs_ids(self) -> tuple[np.ndarray, ...]:
        """Per-agent maps state -> observation id (states with identical
        observation vectors share an id)."""
        return self._obs_ids

    @property
    def obs_counts(self) -> tuple[int, ...]:
        return self._obs_counts

    def joint_action_index(self, actions: Sequence[int]) -> int:
        return int(np.ravel_multi_index(tuple(int(a) for a in actions), self.action_counts))

    def joint_action_tuple(self, index: int) -> tuple[int, ...]:
        return tuple(int(x) for x in np.unravel_index(int(index), self.action_counts))

    def joint_obs(self, state: int) -> list[np.ndarray]:
        return [o[state] for o in self.observations]

    def legal_mask(self, state: int) -> list[np.ndarray]:
        return [m[state] for m in self.legal_actions]

    # -- serialization -----------------------------------------------------

    def to_json(self) -> str:
        doc = {
            "n_agents": self.n_agents,
            "action_counts": list(self.action_counts),
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "observations": [o.tolist() for o in self.observations],
            "gamma": self.gamma,
            "initial_dist": self.initial_dist.tolist(),
            "episode_limit": self.episode_limit,
            "terminal": self.terminal.astype(int).tolist(),
            "state_features": self.state_features.tolist(),
            "legal_actions": [m.astype(int).tolist() for m in self.legal_actions],
            "name": self.name,
            "params": self.params,
            "optimal_return": self.optimal_return,
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "DecPomdpSpec":
        doc = json.loads(text)
        return DecPomdpSpec(
            n_agents=doc["n_agents"],
            action_counts=tuple(doc["action_counts"]),
            transition=np.array(doc["transition"], dtype=np.float64),
            reward=np.array(doc["reward"], dtype=np.float64),
            observations=tuple(np.array(o, dtype=np.float64) for o in doc["observations"]),
            gamma=doc["gamma"],
            initial_dist=np.array(doc["initial_dist"], dtype=np.float64),
            episode_limit=doc["episode_limit"],
            terminal=np.array(doc["terminal"], dtype=bool),
            state_features=np.array(doc["state_features"], dtype=np.float64),
            legal_actions=tuple(np.array(m, dtype=bool) for m in doc["legal_actions"]),
            name=doc.get("name", "custom"),
            params=doc.get("params", {}),
            optimal_return=doc.get("optimal_return"),
        )


@dataclass
class EpisodeStep:
    """One environment transition, as seen by a collector.

    ``state_index``, ``joint_obs`` and ``legal_actions`` describe the
    successor state; ``joint_action`` and ``reward`` describe the transition
    that produced it.  ``truncated`` is flagged separately from terminal so
    consumers can bootstrap through episode-limit cuts.
    """

    state_index: int
    joint_obs: list[np.ndarray]
    joint_action: list[int]
    reward: float
    done: bool
    legal_actions: list[np.ndarray]
    truncated: bool = False

    def __post_init__(self):
        if len(self.joint_obs) != len(self.joint_action):
            raise ValueError("joint_obs and joint_action must have one entry per agent")

    @property
    def terminal(self) -> bool:
        return self.done and not self.truncated


def validate_spec(spec: DecPomdpSpec) -> list[str]:
    """Check every structural invariant; return a list of violations.

    An empty list means the spec is well formed.  Diagnostic only: nothing
    is raised, and each message names the offending row or field.
    """
    problems: list[str] = []
    S, A = spec.n_states, spec.n_joint_actions
    if int(np.prod(spec.action_counts)) != A:
        problems.append(f"transition joint-action axis {A} != product of action_counts {spec.action_counts}")
    if spec.reward.shape != (S, A):
        problems.append(f"reward shape {spec.reward.shape} != {(S, A)}")
    row_sums = spec.transition.sum(axis=2)
    bad = np.argwhere(np.abs(row_sums - 1.0) > PROB_TOL)
    for s, a in bad[:20]:
        problems.append(f"transition row (state={s}, joint_action={a}) sums to {row_sums[s, a]:.12f}")
    neg = np.argwhere(spec.transition < 0)
    for s, a, t in neg[:20]:
        problems.append(f"transition entry (state={s}, joint_action={a}, next={t}) is negative")
    if abs(spec.initial_dist.sum() - 1.0) > PROB_TOL:
        problems.append(f"initial_dist sums to {spec.initial_dist.sum():.12f}")
    if np.any(spec.initial_dist < 0):
        problems.append("initial_dist has negative entries")
    if not (0.0 <= spec.gamma < 1.0):
        problems.append(f"gamma {spec.gamma} outside [0, 1)")
    if spec.episode_limit < 1:
        problems.append(f"episode_limit {spec.episode_limit} < 1")
    for s in np.flatnonzero(spec.terminal):
        if abs(spec.transition[s, :, s].min() - 1.0) > PROB_TOL:
            problems.append(f"terminal state {s} is not absorbing")
        if np.any(spec.reward[s] != 0.0):
            problems.append(f"terminal state {s} has nonzero reward")
    if len(spec.observations) != spec.n_agents:
        problems.append(f"{len(spec.observations)} observation tables for {spec.n_agents} agents")
    for i, o in enumerate(spec.observations):
        if o.shape[0] != S:
            problems.append(f"observation table for agent {i} has {o.shape[0]} rows, expected {S}")
    for i, m in enumerate(spec.legal_actions):
        if m.shape != (S, spec.action_counts[i]):
            problems.append(f"legal_actions for agent {i} has shape {m.shape}, expected {(S, spec.action_counts[i])}")
        if not m.any(axis=1).all():
            problems.append(f"agent {i} has states with no legal action")
    return problems


def _require_valid(spec: DecPomdpSpec) -> None:
    problems = validate_spec(spec)
    if problems:
        raise ValueError("invalid spec: " + "; ".join(problems[:5]))


def reset(spec: DecPomdpSpec, seed: int) -> tuple[int, list[np.ndarray]]:
    """Sample an initial state with a generator seeded by ``seed``.

    Deterministic given the seed: repeated calls with the same seed return
    the same state.
    """
    _require_valid(spec)
    rng = np.random.default_rng(seed)
    state = sample_initial(spec, rng)
    return state, spec.joint_obs(state)


def sample_initial(spec: DecPomdpSpec, rng: np.random.Generator) -> int:
    return int(rng.choice(spec.n_states, p=spec.initial_dist))


def step(
    spec: DecPomdpSpec,
    state_index: int,
    joint_action: Sequence[int],
    rng: np.random.Generator,
    elapsed: int = 0,
) -> EpisodeStep:
    """Advance one step: sample the successor, deliver the shared reward.

    ``elapsed`` is the number of steps already taken in the episode; the step
    is flagged truncated when it reaches ``episode_limit`` without entering a
    terminal state.  Illegal actions raise, naming the agent and action.
    """
    actions = [int(a) for a in joint_action]
    if len(actions) != spec.n_agents:
        raise ValueError(f"expected {spec.n_agents} actions, got {len(actions)}")
    for i, a in enumerate(actions):
        if not (0 <= a < spec.action_counts[i]) or not spec.legal_actions[i][state_index, a]:
            raise ValueError(f"illegal action {a} for agent {i} in state {state_index}")
    j = spec.joint_action_index(actions)
    if spec.is_deterministic:
        nxt = int(spec._next_state[state_index, j])
    else:
        row = spec.transition[state_index, j]
        nxt = int(np.searchsorted(np.cumsum(row), rng.random(), side="right"))
        nxt = min(nxt, spec.n_states - 1)
    r = float(spec.reward[state_index, j])
    terminal = bool(spec.terminal[nxt])
    truncated = (not terminal) and (elapsed + 1 >= spec.episode_limit)
    return EpisodeStep(
        state_index=nxt,
        joint_obs=spec.joint_obs(nxt),
        joint_action=actions,
        reward=r,
        done=terminal or truncated,
        legal_actions=spec.legal_mask(nxt),
        truncated=truncated,
    )


class Episode:
    """Stateful wrapper driving reset/step loops for one environment copy."""

    def __init__(self, spec: DecPomdpSpec, seed: int):
        _require_valid(spec)
        self.spec = spec
        self.rng = np.random.default_rng(seed)
        self.state = -1
        self.t = 0
        self.episode_return = 0.0

    def reset(self) -> tuple[int, list[np.ndarray]]:
        self.state = sample_initial(self.spec, self.rng)
        self.t = 0
        self.episode_return = 0.0
        return self.state, self.spec.joint_obs(self.state)

    def step(self, joint_action: Sequence[int]) -> EpisodeStep:
        out = step(self.spec, self.state, joint_action, self.rng, elapsed=self.t)
        self.state = out.state_index
        self.t += 1
        self.episode_return += out.reward
        return out


# -- built-in environments -------------------------------------------------


def make_matrix_game(payoff: np.ndarray, n_agents: int = 2, gamma: float = 0.99) -> DecPomdpSpec:
    """Single-shot repeated game: one play state plus an absorbing end state.

    ``payoff`` must have one axis per agent; the shared reward for joint
    action (a_1, ..., a_n) is ``payoff[a_1, ..., a_n]``.  Every agent
    observes the constant vector [1.0].  With ``n_agents=1`` this is a
    bandit.
    """
    payoff = np.asarray(payoff, dtype=np.float64)
    if payoff.ndim != n_agents:
        raise ValueError(f"payoff has {payoff.ndim} axes, expected one per agent ({n_agents})")
    action_counts = tuple(payoff.shape)
    A = int(np.prod(action_counts))
    S = 2  # 0 = play, 1 = done
    transition = np.zeros((S, A, S))
    transition[0, :, 1] = 1.0
    transition[1, :, 1] = 1.0
    reward = np.zeros((S, A))
    reward[0] = payoff.reshape(-1)
    obs = tuple(np.array([[1.0], [0.0]]) for _ in range(n_agents))
    legal = tuple(np.ones((S, a), dtype=bool) for a in action_counts)
    return DecPomdpSpec(
        n_agents=n_agents,
        action_counts=action_counts,
        transition=transition,
        reward=reward,
        observations=obs,
        gamma=gamma,
        initial_dist=np.array([1.0, 0.0]),
        episode_limit=1,
        terminal=np.array([False, True]),
        state_features=np.array([[1.0], [0.0]]),
        legal_actions=legal,
        name="matrix_game",
        params={"payoff": payoff.tolist(), "n_agents": n_agents, "gamma": gamma},
        optimal_return=float(payoff.max()),
    )


# stay, up, down, left, right
_MOVES = np.array([(0, 0), (0, -1), (0, 1), (-1, 0), (1, 0)])


def _grid_window_obs(width: int, height: int, cells: np.ndarray, agent: int, goals: set[int], radius: int) -> np.ndarray:
    """Local-window observation: per window cell, [other-agent count,
    is-goal, out-of-bounds].  Own absolute position is intentionally not
    included; far-apart agents in the grid interior are indistinguishable."""
    w = 2 * radius + 1
    obs = np.zeros(3 * w * w)
    x0, y0 = cells[agent] % width, cells[agent] // width
    others = np.delete(cells, agent)
    k = 0
    for dy in range(-radius, radius + 1):
        for dx in range(-radius, radius + 1):
            x, y = x0 + dx, y0 + dy
            if 0 <= x < width and 0 <= y < height:
                c = y * width + x
                obs[k] = float(np.sum(others == c))
                obs[k + 1] = 1.0 if c in goals else 0.0
            else:
                obs[k + 2] = 1.0
            k += 3
    return obs


def make_coop_gridworld(
    width: int,
    height: int,
    n_agents: int,
    sight_radius: int,
    episode_limit: int,
    gamma: float = 0.99,
) -> DecPomdpSpec:
    """Grid navigation: all goal cells must be occupied at the same time.

    Agents start in fixed corners with goal cells in the opposite corners.
    Moves are deterministic (stay/up/down/left/right, clamped at walls) and
    agents may overlap.  Reaching the goal configuration pays the shared +1
    and ends the episode.  Observations are local windows of radius
    ``sight_radius``: with a window covering the whole grid the joint
    observation pins down the state exactly; with a small radius it does
    not, because a far-away agent is invisible and interior cells look
    alike.
    """
    n_cells = width * height
    if n_cells < 2:
        raise ValueError("grid must have at least 2 cells")
    if n_agents < 1 or n_agents > 4:
        raise ValueError("supported agent counts are 1..4")
    if n_agents > n_cells - 1:
        raise ValueError(f"{n_agents} agents do not fit a {width}x{height} grid with distinct goals")
    if sight_radius < 0:
        raise ValueError("sight_radius must be >= 0")
    corners = [(0, 0), (width - 1, height - 1), (width - 1, 0), (0, height - 1)]
    starts = [corners[i][1] * width + corners[i][0] for i in range(n_agents)]
    goal_corners = [(width - 1, 0), (0, height - 1), (width - 1, height - 1), (0, 0)]
    goals = [goal_corners[i][1] * width + goal_corners[i][0] for i in range(n_agents)]
    if len(set(starts)) != n_agents or len(set(goals)) != n_agents:
        raise ValueError(f"degenerate geometry: {width}x{height} grid cannot place {n_agents} distinct starts and goals")
    goal_set = set(goals)

    S0 = n_cells**n_agents
    S = S0 + 1  # + absorbing end state
    A = 5**n_agents
    if S * A * S > MAX_KERNEL_ENTRIES:
        raise ValueError(f"dense kernel would need {S * A * S} entries; shrink the grid")

    # Per-cell deterministic move table, clamped at walls.
    xs, ys = np.arange(n_cells) % width, np.arange(n_cells) // width
    move_table = np.empty((n_cells, 5), dtype=np.int64)
    for a, (dx, dy) in enumerate(_MOVES):
        nx = np.clip(xs + dx, 0, width - 1)
        ny = np.clip(ys + dy, 0, height - 1)
        move_table[:, a] = ny * width + nx

    cell_tuples = np.array(list(itertools.product(range(n_cells), repeat=n_agents)), dtype=np.int64)  # (S0, n)
    act_tuples = np.array(list(itertools.product(range(5), repeat=n_agents)), dtype=np.int64)  # (A, n)
    next_cells = move_table[cell_tuples[:, None, :], act_tuples[None, :, :]]  # (S0, A, n)
    covered = np.ones((S0, A), dtype=bool)
    for g in goals:
        covered &= (next_cells == g).any(axis=2)
    strides = n_cells ** np.arange(n_agents - 1, -1, -1)
    next_ids = (next_cells * strides).sum(axis=2)
    next_ids = np.where(covered, S0, next_ids)

    transition = np.zeros((S, A, S))
    transition[np.arange(S0)[:, None], np.arange(A)[None, :], next_ids] = 1.0
    transition[S0, :, S0] = 1.0
    reward = np.zeros((S, A))
    reward[:S0] = covered.astype(np.float64)

    obs_dim = 3 * (2 * sight_radius + 1) ** 2
    observations = []
    for i in range(n_agents):
        table = np.zeros((S, obs_dim))
        for s in range(S0):
            table[s] = _grid_window_obs(width, height, cell_tuples[s], i, goal_set, sight_radius)
        observations.append(table)

    state_dim = n_agents * (width + height)
    state_features = np.zeros((S, state_dim))
    for i in range(n_agents):
        cx, cy = cell_tuples[:, i] % width, cell_tuples[:, i] // width
        base = i * (width + height)
        state_features[np.arange(S0), base + cx] = 1.0
        state_features[np.arange(S0), base + width + cy] = 1.0

    start_id = int((np.array(starts) * strides).sum())
    initial = np.zeros(S)
    initial[start_id] = 1.0
    terminal = np.zeros(S, dtype=bool)
    terminal[S0] = True
    legal = tuple(np.ones((S, 5), dtype=bool) for _ in range(n_agents))
    return DecPomdpSpec(
        n_agents=n_agents,
        action_counts=tuple([5] * n_agents),
        transition=transition,
        reward=reward,
        observations=tuple(observations),
        gamma=gamma,
        initial_dist=initial,
        episode_limit=episode_limit,
        terminal=terminal,
        state_features=state_features,
        legal_actions=legal,
        name="coop_gridworld",
        params={
            "width": width, "height": height, "n_agents": n_agents,
            "sight_radius": sight_radius, "episode_limit": episode_limit, "gamma": gamma,
        },
        optimal_return=1.0,
    )


CLIMBING_PAYOFF = np.array([[11.0, -30.0, 0.0], [-30.0, 7.0, 6.0], [0.0, 0.0, 5.0]])


def make_env(name: str, **params) -> DecPomdpSpec:
    """Build a registered environment by name.

    Names: ``bandit`` (arms, rewards), ``coordination`` (n_actions identity
    payoff), ``climbing``, ``matrix`` (explicit payoff), ``gridworld``.
    """
    name = name.lower()
    if name == "bandit":
        rewards = params.get("rewards", [1.0, 0.0])
        gamma = params.get("gamma", 0.99)
        spec = make_matrix_game(np.asarray(rewards, dtype=np.float64), n_agents=1, gamma=gamma)
        return _renamed(spec, "bandit", {"rewards": list(map(float, rewards)), "gamma": gamma})
    if name == "coordination":
        k = int(params.get("n_actions", 3))
        gamma = params.get("gamma", 0.99)
        spec = make_matrix_game(np.eye(k), n_agents=2, gamma=gamma)
        return _renamed(spec, "coordination", {"n_actions": k, "gamma": gamma})
    if name == "climbing":
        gamma = params.get("gamma", 0.99)
        spec = make_matrix_game(CLIMBING_PAYOFF, n_agents=2, gamma=gamma)
        return _renamed(spec, "climbing", {"gamma": gamma})
    if name == "matrix":
        payoff = np.asarray(params["payoff"], dtype=np.float64)
        return make_matrix_game(payoff, n_agents=int(params.get("n_agents", payoff.ndim)), gamma=params.get("gamma", 0.99))
    if name == "gridworld":
        return make_coop_gridworld(
            width=int(params.get("width", 5)),
            height=int(params.get("height", 5)),
            n_agents=int(params.get("n_agents", 2)),
            sight_radius=int(params.get("sight_radius", 1)),
            episode_limit=int(params.get("episode_limit", 20)),
            gamma=params.get("gamma", 0.99),
        )
    raise ValueError(f"unknown environment name: {name!r}")


def _renamed(spec: DecPomdpSpec, name: str, params: dict) -> DecPomdpSpec:
    return DecPomdpSpec(
        n_agents=spec.n_agents,
        action_counts=spec.action_counts,
        transition=spec.transition,
        reward=spec.reward,
        observations=spec.observations,
        gamma=spec.gamma,
        initial_dist=spec.initial_dist,
        episode_limit=spec.episode_limit,
        terminal=spec.terminal,
        state_features=spec.state_features,
        legal_actions=spec.legal_actions,
        name=name,
        params=params,
        optimal_return=spec.optimal_return,
    )
