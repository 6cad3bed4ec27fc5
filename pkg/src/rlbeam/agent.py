"""Wolpertinger-style DDPG agent that learns one beam from average-gain feedback."""

from __future__ import annotations

import csv
import heapq
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .beams import BeamVector, PhaseSet, average_gain, circular_distance, quantize_phases, realize
from .channel import ChannelSet
from .neural import (
    Adam,
    TargetPair,
    actor_step,
    critic_step,
    make_actor,
    make_critic,
    pack_checkpoint,
    unpack_checkpoint,
)


def wrap_phase(x):
    """Map angles onto (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(x, dtype=np.float64), 2 * np.pi)


@dataclass
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: int
    next_state: np.ndarray


class ReplayBuffer:
    """Fixed-capacity ring buffer of transitions, stored column-wise."""

    def __init__(self, capacity: int, M: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self.states = np.zeros((capacity, M))
        self.actions = np.zeros((capacity, M))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, M))
        self.size = 0
        self.pos = 0

    def __len__(self):
        return self.size

    def add(self, t: Transition) -> None:
        i = self.pos
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.pos = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def __getitem__(self, j: int) -> Transition:
        """j-th oldest stored transition."""
        if not 0 <= j < self.size:
            raise IndexError(j)
        i = (self.pos - self.size + j) % self.capacity
        return Transition(
            self.states[i].copy(), self.actions[i].copy(), int(self.rewards[i]), self.next_states[i].copy()
        )

    def sample(self, batch_size: int, rng: np.random.Generator):
        """Uniform batch without replacement; shrinks to the buffer size if needed."""
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.choice(self.size, size=min(batch_size, self.size), replace=False)
        return self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx]

    def _ordered(self):
        order = (self.pos - self.size + np.arange(self.size)) % self.capacity
        return order


class OuProcess:
    """Ornstein-Uhlenbeck noise x <- x - theta*x + sigma(t)*N(0, I).

    ``sigma(t)`` decays geometrically from ``sigma0`` to ``sigma_min`` over
    ``horizon`` samples and stays at ``sigma_min`` afterwards.
    """

    def __init__(self, M, theta=0.15, sigma0=np.pi / 4, sigma_min=None, horizon=10000, rng=None):
        self.M = M
        self.theta = theta
        self.sigma0 = sigma0
        self.sigma_min = sigma0 if sigma_min is None else sigma_min
        if self.sigma_min > self.sigma0:
            raise ValueError("sigma_min must not exceed sigma0")
        self.horizon = horizon
        self.rng = rng if rng is not None else np.random.default_rng(0)
        self.x = np.zeros(M)
        self.t = 0

    def sigma(self, t: Optional[int] = None) -> float:
        t = self.t if t is None else t
        if self.sigma0 == 0:
            return 0.0
        if self.horizon <= 0:
            return self.sigma_min
        frac = min(t / self.horizon, 1.0)
        return float(self.sigma0 * (self.sigma_min / self.sigma0) ** frac) if self.sigma_min > 0 else (
            float(self.sigma0 * (1 - frac))
        )

    def sample(self) -> np.ndarray:
        s = self.sigma()
        self.x = self.x - self.theta * self.x + s * self.rng.standard_normal(self.M)
        self.t += 1
        return self.x.copy()

    def reset(self) -> None:
        self.x = np.zeros(self.M)


def k_nearest_beams(proto, ps: PhaseSet, k: int = 1) -> list[BeamVector]:
    """The k lattice beams closest to ``proto``, nearest first.

    Distance is Euclidean over per-element circular phase distances. The
    search is best-first over per-element rank tuples: every tuple's parent
    lowers its last nonzero rank, so each tuple is generated exactly once and
    costs never decrease along the expansion.
    """
    if k < 1:
        raise ValueError("k must be >= 1")
    proto = np.asarray(proto, dtype=np.float64).reshape(-1)
    if not np.all(np.isfinite(proto)):
        raise ValueError("proto-action contains non-finite entries")
    M, L = proto.size, ps.size
    d2 = circular_distance(proto[:, None], ps.values[None, :]) ** 2
    order = np.argsort(d2, axis=1, kind="stable")
    sorted_d2 = np.take_along_axis(d2, order, axis=1)
    k = min(k, L**M)

    def entry(ranks):
        idx = tuple(int(order[m, r]) for m, r in enumerate(ranks))
        cost = float(sum(sorted_d2[m, r] for m, r in enumerate(ranks)))
        return (cost, idx, ranks)

    start = (0,) * M
    heap = [entry(start)]
    out = []
    while heap and len(out) < k:
        cost, idx, ranks = heapq.heappop(heap)
        out.append(BeamVector(idx))
        nz = [m for m in range(M) if ranks[m] > 0]
        first = nz[-1] if nz else 0
        for m in range(first, M):
            if ranks[m] + 1 < L:
                child = ranks[:m] + (ranks[m] + 1,) + ranks[m + 1 :]
                heapq.heappush(heap, entry(child))
    return out


def ternary_reward(g: float, threshold: float, prev: float) -> int:
    if g > threshold:
        return 1
    if g > prev:
        return 0
    return -1


@dataclass
class AgentConfig:
    M: int
    r: int
    k: int = 1
    gamma: float = 0.0
    tau: float = 0.05
    target_every: int = 1
    batch_size: int = 1024
    buffer_capacity: int = 8192
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    actor_weight_decay: float = 1e-2
    critic_weight_decay: float = 1e-3
    ou_theta: float = 0.15
    ou_sigma0: float = np.pi / 4
    ou_sigma_min: Optional[float] = None
    ou_horizon: int = 10000
    learn_start: Optional[int] = None
    feedback_noise: float = 0.0
    dtype: str = "float32"

    def __post_init__(self):
        if self.M < 1 or self.r < 1:
            raise ValueError("M and r must be >= 1")
        if not 0 < self.tau <= 1:
            raise ValueError("tau must lie in (0, 1]")
        if self.batch_size < 1 or self.buffer_capacity < 1 or self.target_every < 1:
            raise ValueError("batch size, capacity and target cadence must be >= 1")

    @property
    def sigma_min(self) -> float:
        if self.ou_sigma_min is None:
            return min(np.pi / 2**self.r, self.ou_sigma0)
        return self.ou_sigma_min

    @property
    def start(self) -> int:
        return self.batch_size if self.learn_start is None else self.learn_start

    def resolved(self) -> dict:
        d = asdict(self)
        d["ou_sigma_min"] = self.sigma_min
        d["learn_start"] = self.start
        return d


@dataclass
class Curve:
    gain: list = field(default_factory=list)
    threshold: list = field(default_factory=list)
    reward: list = field(default_factory=list)

    def __len__(self):
        return len(self.gain)

    def write_csv(self, path, offset: int = 0) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["iter", "gain", "threshold", "reward"])
            for i, (g, b, r) in enumerate(zip(self.gain, self.threshold, self.reward)):
                w.writerow([offset + i + 1, repr(g), repr(b), r])


class Agent:
    """One beam-learning agent: networks, replay memory, noise and threshold state."""

    def __init__(self, config: AgentConfig, channels: ChannelSet, seed: int = 0, initial_beam=None):
        self.config = config
        self.phases = PhaseSet(config.r)
        ss = np.random.SeedSequence(seed)
        init_ss, noise_ss, batch_ss, env_ss = ss.spawn(4)
        init_rng = np.random.default_rng(init_ss)
        dtype = np.dtype(config.dtype)
        M = config.M
        self.actor = TargetPair.of(make_actor(M, init_rng, dtype))
        self.critic = TargetPair.of(make_critic(M, init_rng, dtype))
        self.actor_opt = Adam(self.actor.source.params, config.actor_lr, config.actor_weight_decay)
        self.critic_opt = Adam(self.critic.source.params, config.critic_lr, config.critic_weight_decay)
        self.buffer = ReplayBuffer(config.buffer_capacity, M)
        self.ou = OuProcess(
            M, config.ou_theta, config.ou_sigma0, config.sigma_min, config.ou_horizon,
            np.random.default_rng(noise_ss),
        )
        self.batch_rng = np.random.default_rng(batch_ss)
        self.env_rng = np.random.default_rng(env_ss)
        self.threshold = 0.0
        self.prev_gain = 0.0
        beam = initial_beam if initial_beam is not None else BeamVector.random(M, self.phases, init_rng)
        if beam.M != M:
            raise ValueError("initial beam has the wrong length")
        self.state_beam = beam
        self.best_beam = beam
        self.t = 0
        self.curve = Curve()
        self.last_losses = (np.nan, np.nan)
        self.set_channels(channels, reset_threshold=False)

    @property
    def best_gain(self) -> float:
        return self.threshold

    def set_channels(self, channels: ChannelSet, reset_threshold: bool = True) -> None:
        """Point the agent at a (new) user set.

        When switching sets, the threshold restarts at the recorded best beam's
        gain on the new users, so it remains the best gain observed there.
        """
        if channels.K == 0:
            raise ValueError("empty channel set")
        if channels.M != self.config.M:
            raise ValueError("channel dimension does not match agent M")
        self.channels = channels
        if reset_threshold:
            self.threshold = self.evaluate(self.best_beam)
            self.prev_gain = self.evaluate(self.state_beam)

    def evaluate(self, beam: BeamVector) -> float:
        return average_gain(realize(beam, self.phases), self.channels)

    def observe(self, beam: BeamVector) -> float:
        g = self.evaluate(beam)
        if self.config.feedback_noise > 0:
            g = max(0.0, g + self.config.feedback_noise * float(self.env_rng.standard_normal()))
        return g

    def propose_action(self, state: Optional[np.ndarray] = None):
        s = self.state_beam.phases(self.phases) if state is None else state
        mu = self.actor.source.forward(s).astype(np.float64)
        proto = wrap_phase(mu + self.ou.sample())
        return proto, k_nearest_beams(proto, self.phases, self.config.k)

    def select_action(self, state: np.ndarray, candidates) -> BeamVector:
        if len(candidates) == 0:
            raise ValueError("no candidate actions")
        if len(candidates) == 1:
            return candidates[0]
        acts = np.array([c.phases(self.phases) for c in candidates])
        x = np.concatenate([np.broadcast_to(state, acts.shape), acts], axis=1)
        q = self.critic.source.forward(x)[:, 0]
        return candidates[int(np.argmax(q))]

    def compute_reward(self, g: float, beam: Optional[BeamVector] = None) -> int:
        if g < 0:
            raise ValueError("gain must be nonnegative")
        r = ternary_reward(g, self.threshold, self.prev_gain)
        if r == 1:
            self.threshold = g
            if beam is not None:
                self.best_beam = beam
        self.prev_gain = g
        return r

    def step(self) -> int:
        s = self.state_beam.phases(self.phases)
        _, candidates = self.propose_action(s)
        beam = self.select_action(s, candidates)
        g = self.observe(beam)
        r = self.compute_reward(g, beam)
        a = beam.phases(self.phases)
        self.buffer.add(Transition(s, a, r, a))
        self.state_beam = beam
        self.t += 1
        self.curve.gain.append(g)
        self.curve.threshold.append(self.threshold)
        self.curve.reward.append(r)
        if len(self.buffer) >= self.config.start:
            self.learn()
        return r

    def learn(self) -> None:
        cfg = self.config
        s, a, r, s2 = self.buffer.sample(cfg.batch_size, self.batch_rng)
        dt = self.actor.source.dtype
        s, a, s2 = s.astype(dt), a.astype(dt), s2.astype(dt)
        y = r.astype(dt)
        if cfg.gamma != 0:
            # with gamma = 0 the bootstrap term vanishes, skip the target pass
            a2 = self.actor.target.forward(s2)
            q2 = self.critic.target.forward(np.concatenate([s2, a2], axis=1))[:, 0]
            y = y + dt.type(cfg.gamma) * q2
        closs = critic_step(self.critic.source, self.critic_opt, s, a, y)
        j = actor_step(self.actor.source, self.critic.source, self.actor_opt, s)
        self.last_losses = (closs, j)
        if self.t % cfg.target_every == 0:
            self.actor.soft_update(cfg.tau)
            self.critic.soft_update(cfg.tau)

    def run(self, T: int, stop=None) -> None:
        """Advance ``T`` iterations; ``stop(agent)`` may end the run early."""
        if T < 1:
            raise ValueError("T must be >= 1")
        for _ in range(T):
            self.step()
            if stop is not None and stop(self):
                break

    def checkpoint(self) -> bytes:
        buf = self.buffer
        order = buf._ordered()
        extra = {
            "threshold": self.threshold,
            "prev_gain": self.prev_gain,
            "best_beam": self.best_beam.indices,
            "state_beam": self.state_beam.indices,
            "t": self.t,
            "ou_x": self.ou.x,
            "ou_t": self.ou.t,
            "buf_states": buf.states[order],
            "buf_actions": buf.actions[order],
            "buf_rewards": buf.rewards[order],
            "buf_next": buf.next_states[order],
            "curve": np.array([self.curve.gain, self.curve.threshold, self.curve.reward], dtype=np.float64).reshape(3, -1),
        }
        return pack_checkpoint(
            {"actor": self.actor.source, "actor_target": self.actor.target,
             "critic": self.critic.source, "critic_target": self.critic.target},
            {"actor": (self.actor_opt, "actor"), "critic": (self.critic_opt, "critic")},
            {"ou": self.ou.rng, "batch": self.batch_rng, "env": self.env_rng},
            extra,
            {"config": self.config.resolved()},
        )

    @classmethod
    def restore(cls, blob: bytes, channels: ChannelSet) -> "Agent":
        nets, opts, rngs, extra, meta = unpack_checkpoint(blob)
        cfgd = dict(meta["config"])
        cfg = AgentConfig(**cfgd)
        agent = cls.__new__(cls)
        agent.config = cfg
        agent.phases = PhaseSet(cfg.r)
        agent.actor = TargetPair(nets["actor"], nets["actor_target"])
        agent.critic = TargetPair(nets["critic"], nets["critic_target"])
        agent.actor_opt, agent.critic_opt = opts["actor"], opts["critic"]
        agent.buffer = ReplayBuffer(cfg.buffer_capacity, cfg.M)
        n = extra["buf_rewards"].shape[0]
        agent.buffer.states[:n] = extra["buf_states"]
        agent.buffer.actions[:n] = extra["buf_actions"]
        agent.buffer.rewards[:n] = extra["buf_rewards"]
        agent.buffer.next_states[:n] = extra["buf_next"]
        agent.buffer.size = n
        agent.buffer.pos = n % cfg.buffer_capacity
        agent.ou = OuProcess(cfg.M, cfg.ou_theta, cfg.ou_sigma0, cfg.sigma_min, cfg.ou_horizon, rngs["ou"])
        agent.ou.x = extra["ou_x"].copy()
        agent.ou.t = int(extra["ou_t"])
        agent.batch_rng, agent.env_rng = rngs["batch"], rngs["env"]
        agent.threshold = float(extra["threshold"])
        agent.prev_gain = float(extra["prev_gain"])
        agent.best_beam = BeamVector(extra["best_beam"])
        agent.state_beam = BeamVector(extra["state_beam"])
        agent.t = int(extra["t"])
        c = extra["curve"]
        agent.curve = Curve(c[0].tolist(), c[1].tolist(), [int(v) for v in c[2]])
        agent.last_losses = (np.nan, np.nan)
        agent.channels = channels
        return agent


def saturated(agent: Agent, window: int = 2000, rel_tol: float = 1e-3) -> bool:
    """True when the best gain grew by less than ``rel_tol`` over the last ``window`` steps."""
    th = agent.curve.threshold
    if len(th) <= window:
        return False
    old = th[-window - 1]
    return th[-1] - old <= rel_tol * max(old, 1e-300)


@dataclass
class TrainResult:
    best_beam: BeamVector
    best_gain: float
    curve: Curve
    agent: Agent


def train_beam_pattern(
    config: AgentConfig, channels: ChannelSet, T: int, seed: int = 0, initial_beam=None
) -> TrainResult:
    """Run the beam-pattern learning loop for ``T`` iterations."""
    if channels.K == 0:
        raise ValueError("empty channel set")
    if T < 1:
        raise ValueError("T must be >= 1")
    agent = Agent(config, channels, seed, initial_beam)
    agent.run(T)
    return TrainResult(agent.best_beam, agent.best_gain, agent.curve, agent)
