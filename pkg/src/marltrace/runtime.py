"""Actor-learner execution.

Three experience sources implement the same small interface the trainer
drives (``publish`` a parameter snapshot, ``collect_round`` of fixed-length
unrolls, ``close``):

``SyncVectorCollector``
    one logical worker stepping a vector of environment lanes in lockstep,
    inference inlined on the freshest snapshot.  Fully deterministic given
    the seed; behavior always equals target at collection time.

``ThreadedRuntime``
    N worker threads around private environment copies.  Workers ship
    observations to the learner-owned inference service and receive actions
    plus behavior log-probs; unrolls flow back through a bounded queue with
    blocking backpressure (never dropped).  A staleness policy controls
    which archived snapshot serves each worker, which is the experimental
    knob behind the off-policy ablations.

``MultiprocRuntime`` pieces (``InferenceServer`` / ``worker_process_main``)
    the same observation-shipping contract over local sockets with a
    documented binary frame format, used by the scaling benchmark.

Wire format (little-endian): every frame is ``u32 length | u8 type | payload``
where length counts the bytes after itself.  Types: 1 HELLO {u32 worker_id},
2 OBS {u32 worker_id, f64 obs[n_agents * obs_dim]}, 3 ACT {u32 version,
i32 action[n_agents], f64 logp[n_agents]}, 4 BYE {}.
"""

from __future__ import annotations

import collections
import logging
import multiprocessing as mp
import queue
import selectors
import socket
import struct
import threading
import time
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .env import DecPomdpSpec, Episode
from .vtrace import TrajectoryBatch

logger = logging.getLogger(__name__)


# -- parameter snapshots -----------------------------------------------------


@dataclass(frozen=True)
class ParamSnapshot:
    """Immutable, versioned copy of the actor parameters."""

    version: int
    arrays: tuple[np.ndarray, ...]
    created_step: int

    def __post_init__(self):
        frozen = []
        for a in self.arrays:
            a = np.array(a, dtype=np.float64, copy=True)
            a.flags.writeable = False
            frozen.append(a)
        object.__setattr__(self, "arrays", tuple(frozen))


class SnapshotStore:
    """Thread-safe published-snapshot history (bounded depth)."""

    def __init__(self, history: int = 64):
        self._lock = threading.Lock()
        self._by_version: dict[int, ParamSnapshot] = {}
        self._order: collections.deque[int] = collections.deque()
        self.history = history

    def publish(self, arrays, version: int, step: int) -> ParamSnapshot:
        snap = ParamSnapshot(version=version, arrays=tuple(arrays), created_step=step)
        with self._lock:
            if self._order and version <= self._order[-1]:
                raise ValueError(f"snapshot versions must increase (got {version} after {self._order[-1]})")
            self._by_version[version] = snap
            self._order.append(version)
            while len(self._order) > self.history:
                self._by_version.pop(self._order.popleft(), None)
        return snap

    def get(self, version: int) -> ParamSnapshot:
        with self._lock:
            snap = self._by_version.get(version)
        if snap is None:
            raise KeyError(f"snapshot version {version} is not retained")
        return snap

    def latest_version(self) -> int:
        with self._lock:
            if not self._order:
                raise LookupError("no snapshot has been published yet")
            return self._order[-1]

    def oldest_version(self) -> int:
        with self._lock:
            if not self._order:
                raise LookupError("no snapshot has been published yet")
            return self._order[0]


@dataclass(frozen=True)
class StalenessPolicy:
    """Which archived snapshot serves a worker's next inference.

    ``fresh`` always picks the newest; ``fixed_lag(k)`` pins version
    newest-k (clamped to the oldest retained, with a warning); ``natural``
    keeps whatever the worker pinned at its last unroll boundary.
    """

    kind: str
    lag: int = 0

    def pick(self, store: SnapshotStore, pinned: int | None) -> int:
        latest = store.latest_version()
        if self.kind == "fresh":
            return latest
        if self.kind == "fixed_lag":
            want = latest - self.lag
            oldest = store.oldest_version()
            if want < oldest:
                # Early in training the lag simply has not accumulated yet;
                # warn only when retained history was actually evicted.
                if oldest > 0 and self.lag not in _WARNED_LAGS:
                    _WARNED_LAGS.add(self.lag)
                    logger.warning("fixed_lag(%d) exceeds retained history; serving oldest version %d",
                                   self.lag, oldest)
                return oldest
            return want
        if self.kind == "natural":
            return pinned if pinned is not None else latest
        raise ValueError(f"unknown staleness kind {self.kind!r}")


_WARNED_LAGS: set[int] = set()


def staleness_policy(mode: str) -> StalenessPolicy:
    """Parse ``fresh``, ``natural`` or ``fixed_lag(k)`` (colon also works)."""
    mode = mode.strip().lower()
    if mode == "fresh":
        return StalenessPolicy("fresh")
    if mode == "natural":
        return StalenessPolicy("natural")
    for sep in ("(", ":"):
        if mode.startswith("fixed_lag" + sep):
            arg = mode[len("fixed_lag" + sep):].rstrip(")")
            lag = int(arg)
            if lag < 0:
                raise ValueError("fixed_lag needs a nonnegative lag")
            return StalenessPolicy("fixed_lag", lag=lag)
    raise ValueError(f"unknown staleness mode {mode!r}")


# -- inference ----------------------------------------------------------------


def policy_step(actor: nn.Actor, stacked_obs: np.ndarray, legal: np.ndarray,
                rng: np.random.Generator, greedy: bool = False):
    """Sample one joint action; returns (actions, per-agent logp).

    This exact code path is shared by live inference and by replay, so a
    recorded log-prob reproduces bit-for-bit from the archived snapshot.
    """
    logits = actor.logits(stacked_obs, legal)
    logp = nn.log_softmax(logits)
    if greedy:
        actions = np.argmax(logits, axis=-1)
    else:
        actions = nn.sample_categorical(rng, np.exp(logp))
    chosen = np.take_along_axis(logp, actions[..., None], axis=-1)[..., 0]
    return actions, chosen


def replay_logp(actor_factory, snapshot: ParamSnapshot, stacked_obs: np.ndarray,
                legal: np.ndarray, actions: np.ndarray) -> np.ndarray:
    """Recompute the per-agent behavior log-probs a snapshot produced."""
    actor = actor_factory()
    actor.load_arrays(list(snapshot.arrays))
    logits = actor.logits(stacked_obs, legal)
    logp = nn.log_softmax(logits)
    return np.take_along_axis(logp, np.asarray(actions)[..., None], axis=-1)[..., 0]


class InferenceService:
    """Learner-owned action service: evaluates archived snapshots on worker
    observations, recording the snapshot version that acted."""

    def __init__(self, store: SnapshotStore, actor_factory, policy: StalenessPolicy,
                 n_workers: int, seed_base: int):
        self.store = store
        self.actor_factory = actor_factory
        self.policy = policy
        self._rngs = [np.random.default_rng(seed_base + 7919 * (w + 1)) for w in range(n_workers)]
        self._actors: dict[int, nn.Actor] = {}
        self._lock = threading.Lock()

    def _actor_for(self, version: int) -> nn.Actor:
        with self._lock:
            actor = self._actors.get(version)
            if actor is None:
                actor = self.actor_factory()
                actor.load_arrays(list(self.store.get(version).arrays))
                self._actors[version] = actor
                stale = [v for v in self._actors if v < version - self.store.history]
                for v in stale:
                    del self._actors[v]
        return actor

    def act(self, worker_id: int, stacked_obs: np.ndarray, legal: np.ndarray,
            pinned: int | None):
        """(actions, per-agent logp, version) for one step of one worker."""
        version = self.policy.pick(self.store, pinned)
        actor = self._actor_for(version)
        actions, logp = policy_step(actor, stacked_obs, legal, self._rngs[worker_id])
        return actions, logp, version


# -- synchronous vectorized collection ----------------------------------------


class SyncVectorCollector:
    """Deterministic single-worker collection over a vector of env lanes.

    Behavior equals the latest published snapshot at every step.  One rng
    drives resets, transitions and action sampling in a fixed order, so two
    runs with the same seed produce identical batches.
    """

    synchronous = True

    def __init__(self, spec: DecPomdpSpec, n_lanes: int, seed: int,
                 actor_factory, framestack_k: int = 1, record_state: bool = True):
        self.spec = spec
        self.n_lanes = n_lanes
        self.k = framestack_k
        self.record_state = record_state
        self.rng = np.random.default_rng(seed)
        self.actor = actor_factory()
        self.version = -1
        self._steps = 0

        n, S = spec.n_agents, spec.n_states
        d = spec.obs_dims[0]
        self.obs_table = np.stack(spec.observations)          # (n, S, d)
        self.legal_table = np.stack(spec.legal_actions)       # (n, S, A)
        self.cum_init = np.cumsum(spec.initial_dist)
        self.counts = spec.action_counts
        self.states = np.empty(n_lanes, dtype=np.int64)
        self.t = np.zeros(n_lanes, dtype=np.int64)
        self.ep_return = np.zeros(n_lanes)
        self.hist = np.zeros((n_lanes, self.k - 1, n, d)) if self.k > 1 else None
        for i in range(n_lanes):
            self.states[i] = self._draw_initial()
        self._finished_returns: list[float] = []
        self._finished_success: list[float] = []

    def _draw_initial(self) -> int:
        return int(np.searchsorted(self.cum_init, self.rng.random(), side="right").clip(0, self.spec.n_states - 1))

    def publish(self, arrays, version: int, step: int) -> None:
        self.actor.load_arrays([np.array(a, copy=True) for a in arrays])
        self.version = version

    def _stacked(self, raw: np.ndarray) -> np.ndarray:
        # raw: (B, n, d) -> (B, n, k*d), oldest frame first
        if self.k == 1:
            return raw
        frames = [self.hist[:, i] for i in range(self.k - 1)] + [raw]
        return np.concatenate(frames, axis=-1)

    def collect_round(self, n_unrolls: int, unroll_length: int):
        if n_unrolls != self.n_lanes:
            raise ValueError(f"collector has {self.n_lanes} lanes; asked for {n_unrolls} unrolls")
        spec, B, T = self.spec, self.n_lanes, unroll_length
        n, d = spec.n_agents, spec.obs_dims[0]
        A = self.counts[0]
        buf = {
            "obs": np.empty((B, T, n, d * self.k)),
            "next_obs": np.empty((B, T, n, d * self.k)),
            "state": np.empty((B, T, spec.state_dim)) if self.record_state else None,
            "next_state": np.empty((B, T, spec.state_dim)) if self.record_state else None,
            "actions": np.empty((B, T, n), dtype=np.int64),
            "rewards": np.empty((B, T)),
            "logp": np.empty((B, T, n)),
            "terminal": np.zeros((B, T), dtype=bool),
            "truncated": np.zeros((B, T), dtype=bool),
            "legal": np.empty((B, T, n, A), dtype=bool),
        }
        for tau in range(T):
            raw = self.obs_table[:, self.states, :].transpose(1, 0, 2)  # (B, n, d)
            stacked = self._stacked(raw)
            legal = self.legal_table[:, self.states, :].transpose(1, 0, 2)
            actions, logp = policy_step(self.actor, stacked, legal, self.rng)
            joint = np.ravel_multi_index(tuple(actions[:, i] for i in range(n)), self.counts)
            if spec.is_deterministic:
                nxt = spec._next_state[self.states, joint]
            else:
                rows = spec.transition[self.states, joint]
                u = self.rng.random((B, 1))
                nxt = np.minimum((np.cumsum(rows, axis=1) < u).sum(axis=1), spec.n_states - 1)
            rewards = spec.reward[self.states, joint]
            terminal = spec.terminal[nxt]
            truncated = (~terminal) & (self.t + 1 >= spec.episode_limit)
            done = terminal | truncated

            raw_next = self.obs_table[:, nxt, :].transpose(1, 0, 2)
            if self.k > 1:
                next_hist = np.concatenate([self.hist[:, 1:], raw[:, None]], axis=1) if self.k > 2 \
                    else raw[:, None]
                frames = [next_hist[:, i] for i in range(self.k - 1)] + [raw_next]
                stacked_next = np.concatenate(frames, axis=-1)
            else:
                next_hist = None
                stacked_next = raw_next

            buf["obs"][:, tau] = stacked
            buf["next_obs"][:, tau] = stacked_next
            if self.record_state:
                buf["state"][:, tau] = spec.state_features[self.states]
                buf["next_state"][:, tau] = spec.state_features[nxt]
            buf["actions"][:, tau] = actions
            buf["rewards"][:, tau] = rewards
            buf["logp"][:, tau] = logp
            buf["terminal"][:, tau] = terminal
            buf["truncated"][:, tau] = truncated
            buf["legal"][:, tau] = legal

            self.ep_return += rewards
            self.t += 1
            self.states = nxt.copy() if isinstance(nxt, np.ndarray) else nxt
            if self.k > 1:
                self.hist = next_hist
            done_idx = np.flatnonzero(done)
            for i in done_idx:
                self._finished_returns.append(float(self.ep_return[i]))
                if spec.optimal_return is not None:
                    self._finished_success.append(float(self.ep_return[i] >= spec.optimal_return - 1e-9))
                self.states[i] = self._draw_initial()
                self.t[i] = 0
                self.ep_return[i] = 0.0
                if self.k > 1:
                    self.hist[i] = 0.0
        self._steps += B * T

        unrolls = []
        for b in range(B):
            unrolls.append(TrajectoryBatch(
                joint_obs=buf["obs"][b], actions=buf["actions"][b], rewards=buf["rewards"][b],
                behavior_logp=buf["logp"][b].sum(axis=-1), behavior_logp_agents=buf["logp"][b],
                terminal=buf["terminal"][b], truncated=buf["truncated"][b],
                version=np.full(T, self.version, dtype=np.int64),
                next_joint_obs=buf["next_obs"][b], legal=buf["legal"][b],
                full_state=buf["state"][b] if self.record_state else None,
                next_full_state=buf["next_state"][b] if self.record_state else None,
            ))
        stats = {"returns": self._finished_returns, "successes": self._finished_success}
        self._finished_returns, self._finished_success = [], []
        return unrolls, stats

    @property
    def steps_collected(self) -> int:
        return self._steps

    def close(self) -> None:
        pass


# -- threaded actor-learner runtime ---------------------------------------------


@dataclass
class WorkerReport:
    worker_id: int
    env_steps: int = 0
    unrolls: int = 0
    incidents: int = 0
    inference_seconds: float = 0.0
    inference_calls: int = 0
    version_histogram: dict = field(default_factory=dict)

    @property
    def mean_inference_seconds(self) -> float:
        return self.inference_seconds / self.inference_calls if self.inference_calls else 0.0


class ThreadedRuntime:
    """N worker threads streaming fixed-length unrolls to the learner
    through a bounded queue.  Workers block on backpressure rather than
    dropping data; a crashed worker is restarted in place and logged."""

    synchronous = False

    def __init__(self, env_factory, n_workers: int, seed_base: int, actor_factory,
                 staleness: StalenessPolicy | str = "fresh", framestack_k: int = 1,
                 record_state: bool = True, queue_capacity: int = 64,
                 snapshot_history: int = 64, unroll_length: int = 32):
        if n_workers < 1:
            raise ValueError("need at least one worker")
        self.env_factory = env_factory
        self.n_workers = n_workers
        self.seed_base = seed_base
        self.k = framestack_k
        self.record_state = record_state
        self.unroll_length = unroll_length
        self.store = SnapshotStore(history=snapshot_history)
        self.policy = staleness_policy(staleness) if isinstance(staleness, str) else staleness
        self.service = InferenceService(self.store, actor_factory, self.policy,
                                        n_workers, seed_base)
        self.queue: queue.Queue = queue.Queue(maxsize=queue_capacity)
        self.reports = [WorkerReport(worker_id=w) for w in range(n_workers)]
        self._stop = threading.Event()
        self._started = False
        self._threads: list[threading.Thread] = []
        self._stats_lock = threading.Lock()
        self._finished: list[tuple[float, float | None]] = []
        self._steps_enqueued = 0
        self._steps_dequeued = 0
        self._timeline: collections.deque = collections.deque(maxlen=4096)

    # lifecycle ---------------------------------------------------------------

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for w in range(self.n_workers):
            th = threading.Thread(target=self._worker_loop, args=(w,), daemon=True,
                                  name=f"actor-worker-{w}")
            th.start()
            self._threads.append(th)

    def publish(self, arrays, version: int, step: int) -> None:
        self.store.publish(arrays, version, step)
        if not self._started:
            self.start()

    def collect_round(self, n_unrolls: int, unroll_length: int):
        if unroll_length != self.unroll_length:
            raise ValueError(f"runtime assembles unrolls of length {self.unroll_length}, asked for {unroll_length}")
        out = []
        while len(out) < n_unrolls:
            if self._stop.is_set() and self.queue.empty():
                break
            try:
                batch = self.queue.get(timeout=1.0)
            except queue.Empty:
                if not any(t.is_alive() for t in self._threads):
                    raise RuntimeError("all workers exited while the learner still expected data")
                continue
            out.append(batch)
            self._steps_dequeued += batch.T
        with self._stats_lock:
            finished = self._finished
            self._finished = []
        stats = {
            "returns": [r for r, _ in finished],
            "successes": [s for _, s in finished if s is not None],
        }
        return out, stats

    def close(self) -> tuple[int, int]:
        """Stop workers, drain the queue, and return the conservation
        counters (steps enqueued by workers, steps consumed by learner)."""
        self._stop.set()
        deadline = time.time() + 30.0
        while any(t.is_alive() for t in self._threads) and time.time() < deadline:
            try:
                batch = self.queue.get(timeout=0.05)
                self._steps_dequeued += batch.T
            except queue.Empty:
                pass
        for t in self._threads:
            t.join(timeout=5.0)
        while True:
            try:
                batch = self.queue.get_nowait()
                self._steps_dequeued += batch.T
            except queue.Empty:
                break
        return self._steps_enqueued, self._steps_dequeued

    def throughput(self, window: float = 5.0) -> float:
        """Environment steps per second enqueued over the trailing window."""
        now = time.monotonic()
        pts = [(t, s) for t, s in self._timeline if t >= now - window]
        if len(pts) < 2:
            return 0.0
        dt = pts[-1][0] - pts[0][0]
        return (pts[-1][1] - pts[0][1]) / dt if dt > 0 else 0.0

    # worker internals ----------------------------------------------------------

    def _worker_loop(self, wid: int) -> None:
        report = self.reports[wid]
        while not self._stop.is_set():
            try:
                self._worker_session(wid, report)
                return
            except Exception:
                if self._stop.is_set():
                    return
                report.incidents += 1
                logger.exception("worker %d crashed; restarting", wid)
                time.sleep(0.01)

    def _worker_session(self, wid: int, report: WorkerReport) -> None:
        spec_env = self.env_factory()
        ep = Episode(spec_env, self.seed_base + wid)
        spec = ep.spec
        n, d = spec.n_agents, spec.obs_dims[0]
        A = spec.action_counts[0]
        _, obs = ep.reset()
        history: list[np.ndarray] = []
        pinned: int | None = None
        while not self._stop.is_set():
            pinned = self.store.latest_version()  # natural mode refresh point
            T = self.unroll_length
            buf_obs = np.empty((T, n, d * self.k))
            buf_next = np.empty((T, n, d * self.k))
            buf_state = np.empty((T, spec.state_dim)) if self.record_state else None
            buf_nstate = np.empty((T, spec.state_dim)) if self.record_state else None
            buf_act = np.empty((T, n), dtype=np.int64)
            buf_rew = np.empty(T)
            buf_logp = np.empty((T, n))
            buf_term = np.zeros(T, dtype=bool)
            buf_trunc = np.zeros(T, dtype=bool)
            buf_ver = np.empty(T, dtype=np.int64)
            buf_legal = np.empty((T, n, A), dtype=bool)
            for tau in range(T):
                if self._stop.is_set():
                    return
                raw = np.stack(obs)
                stacked = nn.stack_frames(raw, history, self.k)
                legal = np.stack(spec.legal_mask(ep.state))
                state_feat = spec.state_features[ep.state] if self.record_state else None
                t0 = time.perf_counter()
                actions, logp, version = self.service.act(wid, stacked, legal, pinned)
                report.inference_seconds += time.perf_counter() - t0
                report.inference_calls += 1
                report.version_histogram[version] = report.version_histogram.get(version, 0) + 1
                ep_return_before = ep.episode_return
                out = ep.step([int(a) for a in actions])
                report.env_steps += 1
                raw_next = np.stack(out.joint_obs)
                if self.k > 1:
                    stacked_next = nn.stack_frames(raw_next, history + [raw], self.k)
                else:
                    stacked_next = raw_next
                buf_obs[tau] = stacked
                buf_next[tau] = stacked_next
                if self.record_state:
                    buf_state[tau] = state_feat
                    buf_nstate[tau] = spec.state_features[ep.state]
                buf_act[tau] = actions
                buf_rew[tau] = out.reward
                buf_logp[tau] = logp
                buf_term[tau] = out.terminal
                buf_trunc[tau] = out.truncated
                buf_ver[tau] = version
                buf_legal[tau] = legal
                if out.done:
                    ret = ep_return_before + out.reward
                    success = None
                    if spec.optimal_return is not None:
                        success = float(ret >= spec.optimal_return - 1e-9)
                    with self._stats_lock:
                        self._finished.append((ret, success))
                    _, obs = ep.reset()
                    history = []
                else:
                    obs = out.joint_obs
                    if self.k > 1:
                        history.append(raw)
                        history = history[-(self.k - 1):]
            batch = TrajectoryBatch(
                joint_obs=buf_obs, actions=buf_act, rewards=buf_rew,
                behavior_logp=buf_logp.sum(axis=-1), behavior_logp_agents=buf_logp,
                terminal=buf_term, truncated=buf_trunc, version=buf_ver,
                next_joint_obs=buf_next, legal=buf_legal,
                full_state=buf_state, next_full_state=buf_nstate,
            )
            while not self._stop.is_set():
                try:
                    self.queue.put(batch, timeout=0.1)
                    with self._stats_lock:
                        self._steps_enqueued += T
                        self._timeline.append((time.monotonic(), self._steps_enqueued))
                    report.unrolls += 1
                    break
                except queue.Full:
                    continue


def spawn_workers(env_factory, n_workers: int, seed_base: int, actor_factory, **kwargs) -> ThreadedRuntime:
    """Build and start a threaded runtime; returns the handle owning the
    worker threads."""
    rt = ThreadedRuntime(env_factory, n_workers, seed_base, actor_factory, **kwargs)
    return rt


def make_source(spec: DecPomdpSpec, config, collector_seed: int):
    """Pick the experience source a config asks for.

    One worker with ``fresh`` staleness gets the deterministic vectorized
    collector; anything else gets the threaded runtime.
    """
    def actor_factory():
        counts = set(spec.action_counts)
        dims = set(spec.obs_dims)
        return nn.Actor(config.actor_mode, spec.n_agents, dims.pop() * config.framestack_k,
                        counts.pop(), hidden=config.hidden, seed=0)

    record_state = config.critic_mode in ("full", "obs_full")
    if config.n_workers == 1 and config.staleness == "fresh":
        return SyncVectorCollector(spec, n_lanes=config.round_size, seed=collector_seed,
                                   actor_factory=actor_factory, framestack_k=config.framestack_k,
                                   record_state=record_state)
    return ThreadedRuntime(lambda: spec, config.n_workers, collector_seed, actor_factory,
                           staleness=config.staleness, framestack_k=config.framestack_k,
                           record_state=record_state, unroll_length=config.unroll_length)


# -- multiprocess socket mode (scaling benchmark) --------------------------------

FRAME_HELLO, FRAME_OBS, FRAME_ACT, FRAME_BYE = 1, 2, 3, 4


def _send_frame(sock: socket.socket, ftype: int, payload: bytes) -> None:
    sock.sendall(struct.pack("<IB", len(payload) + 1, ftype) + payload)


def _recv_exact(sock: socket.socket, size: int) -> bytes | None:
    buf = b""
    while len(buf) < size:
        chunk = sock.recv(size - len(buf))
        if not chunk:
            return None
        buf += chunk
    return buf


def _recv_frame(sock: socket.socket) -> tuple[int, bytes] | None:
    head = _recv_exact(sock, 4)
    if head is None:
        return None
    (length,) = struct.unpack("<I", head)
    body = _recv_exact(sock, length)
    if body is None:
        return None
    return body[0], body[1:]


class InferenceServer:
    """Socket front end of the learner's inference service (one thread,
    event-driven).  Counts every OBS frame as one environment step."""

    def __init__(self, spec: DecPomdpSpec, actor_factory, seed: int = 0):
        self.spec = spec
        self.actor = actor_factory()
        self.version = 0
        self.n = spec.n_agents
        self.d = spec.obs_dims[0]
        self.rng = np.random.default_rng(seed)
        self.steps = 0
        self._sel = selectors.DefaultSelector()
        self._listen = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
        self._listen.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        self._listen.bind(("127.0.0.1", 0))
        self._listen.listen(64)
        self._listen.setblocking(False)
        self.address = self._listen.getsockname()
        self._sel.register(self._listen, selectors.EVENT_READ, "listen")
        self._stop = threading.Event()
        self._thread = threading.Thread(target=self._serve, daemon=True, name="inference-server")
        self._legal = np.ones((self.n, spec.action_counts[0]), dtype=bool)

    def start(self) -> None:
        self._thread.start()

    def _serve(self) -> None:
        while not self._stop.is_set():
            for key, _ in self._sel.select(timeout=0.2):
                if key.data == "listen":
                    conn, _ = self._listen.accept()
                    conn.setblocking(True)
                    conn.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
                    self._sel.register(conn, selectors.EVENT_READ, "conn")
                    continue
                conn = key.fileobj
                frame = _recv_frame(conn)
                if frame is None:
                    self._sel.unregister(conn)
                    conn.close()
                    continue
                ftype, payload = frame
                if ftype == FRAME_OBS:
                    obs = np.frombuffer(payload[4:], dtype="<f8").reshape(self.n, self.d)
                    actions, logp = policy_step(self.actor, obs, self._legal, self.rng)
                    reply = struct.pack("<I", self.version)
                    reply += np.asarray(actions, dtype="<i4").tobytes()
                    reply += np.asarray(logp, dtype="<f8").tobytes()
                    _send_frame(conn, FRAME_ACT, reply)
                    self.steps += 1
                elif ftype == FRAME_BYE:
                    self._sel.unregister(conn)
                    conn.close()

    def stop(self) -> None:
        self._stop.set()
        self._thread.join(timeout=5.0)
        for key in list(self._sel.get_map().values()):
            try:
                self._sel.unregister(key.fileobj)
                key.fileobj.close()
            except Exception:
                pass


def worker_process_main(address, env_name: str, env_params: dict, worker_id: int, seed: int) -> None:
    """Env-stepping loop of one remote worker: ship observations, receive
    actions, repeat until the server hangs up."""
    from .env import make_env

    spec = make_env(env_name, **env_params)
    ep = Episode(spec, seed)
    sock = socket.socket(socket.AF_INET, socket.SOCK_STREAM)
    sock.connect(tuple(address))
    sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
    try:
        _send_frame(sock, FRAME_HELLO, struct.pack("<I", worker_id))
        _, obs = ep.reset()
        while True:
            payload = struct.pack("<I", worker_id) + np.stack(obs).astype("<f8").tobytes()
            _send_frame(sock, FRAME_OBS, payload)
            frame = _recv_frame(sock)
            if frame is None:
                return
            ftype, body = frame
            if ftype != FRAME_ACT:
                return
            n = spec.n_agents
            actions = np.frombuffer(body[4:4 + 4 * n], dtype="<i4")
            out = ep.step([int(a) for a in actions])
            if out.done:
                _, obs = ep.reset()
            else:
                obs = out.joint_obs
    except (BrokenPipeError, ConnectionResetError, OSError):
        return
    finally:
        sock.close()


def bench_scaling(env_name: str, env_params: dict, worker_counts: list[int],
                  duration: float = 3.0, repetitions: int = 3, warmup: float = 1.0,
                  seed: int = 0, actor_hidden: tuple[int, ...] = (64, 64)) -> list[dict]:
    """Steps-per-second of the multiprocess mode at each worker count.

    Returns one row per count: {workers, steps_per_sec_mean, steps_per_sec_std,
    repetitions}.
    """
    from .env import make_env

    spec = make_env(env_name, **env_params)

    def actor_factory():
        return nn.Actor("shared", spec.n_agents, spec.obs_dims[0], spec.action_counts[0],
                        hidden=actor_hidden, seed=seed)

    rows = []
    ctx = mp.get_context("fork")
    for count in worker_counts:
        server = InferenceServer(spec, actor_factory, seed=seed)
        server.start()
        procs = [ctx.Process(target=worker_process_main,
                             args=(server.address, env_name, env_params, w, seed + 101 * w),
                             daemon=True)
                 for w in range(count)]
        for p in procs:
            p.start()
        time.sleep(warmup)
        rates = []
        for _ in range(repetitions):
            before = server.steps
            time.sleep(duration)
            rates.append((server.steps - before) / duration)
        server.stop()
        for p in procs:
            p.terminate()
        for p in procs:
            p.join(timeout=5.0)
        rows.append({
            "workers": count,
            "steps_per_sec_mean": float(np.mean(rates)),
            "steps_per_sec_std": float(np.std(rates)),
            "repetitions": repetitions,
        })
    return rows
