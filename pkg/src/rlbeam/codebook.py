"""Codebook learning: sensing-based user clustering, cluster-to-agent assignment,
per-cluster beam learning and perturb-and-quantize fine-tuning."""

from __future__ import annotations

import csv
import itertools
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .agent import Agent, AgentConfig, saturated
from .beams import (
    BeamVector,
    Codebook,
    PhaseSet,
    average_gain,
    codebook_objective,
    gains_matrix,
    quantize_phases,
    realize,
    realize_indices,
)
from .channel import ChannelSet
from .seeding import named_seed


@dataclass(frozen=True)
class SensingSet:
    beams: tuple
    phases: PhaseSet
    seed: Optional[int] = None

    def __post_init__(self):
        if len(self.beams) < 2:
            raise ValueError("need at least S=2 sensing beams for pair-wise features")
        Ms = {b.M for b in self.beams}
        if len(Ms) != 1:
            raise ValueError("sensing beams must share M")

    @property
    def S(self) -> int:
        return len(self.beams)

    @property
    def M(self) -> int:
        return self.beams[0].M

    @classmethod
    def sample(cls, S: int, M: int, phases: PhaseSet, seed: int) -> "SensingSet":
        rng = np.random.default_rng(seed)
        return cls(tuple(BeamVector.random(M, phases, rng) for _ in range(S)), phases, seed)

    def weights(self) -> np.ndarray:
        return realize_indices(np.array([b.indices for b in self.beams]), self.phases)


def build_sensing_matrix(F: SensingSet, users: ChannelSet) -> np.ndarray:
    """P[s, k] = |f_s^H h_k|^2, shape (S, K')."""
    if users.K == 0:
        raise ValueError("no users to sense")
    if users.M != F.M:
        raise ValueError(f"dimension mismatch: sensing beams M={F.M}, channels M={users.M}")
    return gains_matrix(F.weights(), users.channels)


def pair_indices(S: int) -> tuple[np.ndarray, np.ndarray]:
    """Row pairs (i, j), i < j, in lexicographic order."""
    i, j = np.triu_indices(S, k=1)
    return i, j


def feature_vectors(P: np.ndarray) -> np.ndarray:
    """Pair-wise gain differences of each column scaled by the column mean.

    Returns U with shape (S(S-1)/2, K'); row order is (1,2), (1,3), ..., (S-1,S).
    """
    P = np.asarray(P, dtype=np.float64)
    if P.ndim != 2 or P.shape[0] < 2:
        raise ValueError("sensing matrix needs at least two rows")
    mean = P.mean(axis=0)
    dead = np.flatnonzero(~(mean > 0))
    if dead.size:
        raise ValueError(f"user {int(dead[0])} has zero receive power on every sensing beam")
    i, j = pair_indices(P.shape[0])
    return (P[i] - P[j]) / mean


@dataclass
class ClusterModel:
    centroids: np.ndarray  # (N, D)
    labels: np.ndarray
    inertia: float
    n_iter: int
    sensing: Optional[SensingSet] = None

    @property
    def N(self) -> int:
        return self.centroids.shape[0]

    def to_dict(self) -> dict:
        d = {"N": self.N, "centroids": self.centroids.tolist()}
        if self.sensing is not None:
            d["S"] = self.sensing.S
            d["r"] = self.sensing.phases.r
            d["sensing_beams"] = [b.indices.tolist() for b in self.sensing.beams]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ClusterModel":
        sensing = None
        if "sensing_beams" in d:
            sensing = SensingSet(tuple(BeamVector(b) for b in d["sensing_beams"]), PhaseSet(int(d["r"])))
        return cls(np.array(d["centroids"], dtype=np.float64), np.array([], dtype=np.int64), np.nan, 0, sensing)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=1) + "\n")

    @classmethod
    def load(cls, path) -> "ClusterModel":
        return cls.from_dict(json.loads(Path(path).read_text()))


def _sq_dists(X: np.ndarray, C: np.ndarray) -> np.ndarray:
    return ((X[:, None, :] - C[None, :, :]) ** 2).sum(axis=2)


def _kmeanspp(X: np.ndarray, N: int, rng: np.random.Generator) -> np.ndarray:
    K = X.shape[0]
    centers = [X[rng.integers(K)]]
    d2 = ((X - centers[0]) ** 2).sum(axis=1)
    for _ in range(1, N):
        total = d2.sum()
        idx = rng.choice(K, p=d2 / total) if total > 0 else rng.integers(K)
        centers.append(X[idx])
        d2 = np.minimum(d2, ((X - X[idx]) ** 2).sum(axis=1))
    return np.array(centers)


def _repair_empty(X, labels, centroids, N):
    """Give each empty cluster the point farthest from its own centroid."""
    for n in range(N):
        counts = np.bincount(labels, minlength=N)
        if counts[n] > 0:
            continue
        dist = ((X - centroids[labels]) ** 2).sum(axis=1)
        dist[counts[labels] <= 1] = -np.inf
        victim = int(np.argmax(dist))
        labels[victim] = n
        centroids[n] = X[victim]
    return labels


def _lloyd(X: np.ndarray, C: np.ndarray, max_iter: int) -> ClusterModel:
    N = C.shape[0]
    labels = None
    n_iter = 0
    for n_iter in range(1, max_iter + 1):
        new = np.argmin(_sq_dists(X, C), axis=1)
        new = _repair_empty(X, new, C, N)
        if labels is not None and np.array_equal(new, labels):
            break
        labels = new
        for n in range(N):
            C[n] = X[labels == n].mean(axis=0)
    inertia = float(((X - C[labels]) ** 2).sum())
    return ClusterModel(C, labels, inertia, n_iter)


def kmeans_fit(
    U: np.ndarray, N: int, seed: int = 0, max_iter: int = 300, init=None, n_init: int = 10,
) -> ClusterModel:
    """Lloyd's algorithm on the columns of ``U`` with k-means++ seeding.

    Runs ``n_init`` seedings and keeps the lowest-inertia fit (first on ties).
    Each run stops when assignments no longer change or after ``max_iter``
    rounds. ``init`` (N, D) overrides the seeding and implies a single run.
    """
    X = np.asarray(U, dtype=np.float64).T
    K = X.shape[0]
    if N < 1 or n_init < 1:
        raise ValueError("N and n_init must be >= 1")
    if K < N:
        raise ValueError(f"cannot form {N} clusters from {K} users")
    if init is not None:
        C = np.array(init, dtype=np.float64).copy()
        if C.shape != (N, X.shape[1]):
            raise ValueError("init centroids have the wrong shape")
        return _lloyd(X, C, max_iter)
    rng = np.random.default_rng(seed)
    best = None
    for _ in range(n_init):
        fit = _lloyd(X, _kmeanspp(X, N, rng), max_iter)
        if best is None or fit.inertia < best.inertia:
            best = fit
    return best


def kmeans_classify(model: ClusterModel, features: np.ndarray) -> np.ndarray:
    """Nearest-centroid label of each feature column (or of one feature vector)."""
    if model is None or model.centroids is None or model.centroids.size == 0:
        raise ValueError("cluster model is not fitted")
    F = np.asarray(features, dtype=np.float64)
    single = F.ndim == 1
    X = F[None, :] if single else F.T
    labels = np.argmin(_sq_dists(X, model.centroids), axis=1)
    return int(labels[0]) if single else labels


def classify_users(model: ClusterModel, users: ChannelSet) -> np.ndarray:
    """Label users through their sensing-beam receive gains only."""
    if model.sensing is None:
        raise ValueError("cluster model has no sensing beams")
    return kmeans_classify(model, feature_vectors(build_sensing_matrix(model.sensing, users)))


def cost_matrix(best_beams, clusters, phases: PhaseSet) -> np.ndarray:
    """Z[n, n'] = average gain of beam n over the users of cluster n'."""
    if len(best_beams) != len(clusters):
        raise ValueError("need as many clusters as beams")
    for c, cl in enumerate(clusters):
        if cl.K == 0:
            raise ValueError(f"cluster {c} is empty")
    W = np.array([realize(b, phases) for b in best_beams])
    return np.column_stack([gains_matrix(W, cl.channels).mean(axis=1) for cl in clusters])


@dataclass
class AssignmentResult:
    permutation: np.ndarray  # permutation[network] = cluster
    cost: np.ndarray
    total: float


def _hungarian_min(C: np.ndarray) -> np.ndarray:
    """Shortest augmenting path assignment with row/column potentials, O(n^3)."""
    n = C.shape[0]
    INF = np.inf
    u = np.zeros(n + 1)
    v = np.zeros(n + 1)
    p = np.zeros(n + 1, dtype=np.int64)  # p[col] = row matched to col (1-based)
    way = np.zeros(n + 1, dtype=np.int64)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = np.full(n + 1, INF)
        used = np.zeros(n + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = INF
            j1 = 0
            for j in range(1, n + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(n + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    perm = np.empty(n, dtype=np.int64)
    for j in range(1, n + 1):
        perm[p[j] - 1] = j - 1
    return perm


def hungarian_assign(Z) -> AssignmentResult:
    """Permutation maximizing sum_n Z[n, perm[n]]."""
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[0] != Z.shape[1] or Z.shape[0] == 0:
        raise ValueError("Z must be a nonempty square matrix")
    if not np.all(np.isfinite(Z)):
        raise ValueError("Z has non-finite entries")
    perm = _hungarian_min(-Z)
    total = float(sum(Z[n, perm[n]] for n in range(Z.shape[0])))
    return AssignmentResult(perm, Z, total)


def brute_force_assign(Z) -> tuple[tuple, float]:
    Z = np.asarray(Z, dtype=np.float64)
    n = Z.shape[0]
    best, best_perm = -np.inf, None
    for perm in itertools.permutations(range(n)):
        tot = float(sum(Z[i, perm[i]] for i in range(n)))
        if tot > best:
            best, best_perm = tot, perm
    return best_perm, best


def fine_tune(
    beam: BeamVector,
    cluster: ChannelSet,
    phases: PhaseSet,
    iterations: int = 2000,
    noise_scale: Optional[float] = None,
    rng=None,
    patience: Optional[int] = None,
) -> BeamVector:
    """Perturb-and-quantize local search keeping the best beam seen.

    Each step adds Gaussian noise (std ``noise_scale``, default half a phase
    step) to the best beam's phases, quantizes, and keeps the result if it
    raises the average gain. Stops after ``iterations`` steps, or after
    ``patience`` consecutive steps without improvement.
    """
    if noise_scale is None:
        noise_scale = phases.step / 2
    if noise_scale == 0 or iterations <= 0:
        return beam
    rng = rng if rng is not None else np.random.default_rng(0)
    best = beam
    best_gain = average_gain(realize(beam, phases), cluster)
    since = 0
    for _ in range(iterations):
        proto = best.phases(phases) + noise_scale * rng.standard_normal(beam.M)
        cand = quantize_phases(proto, phases)
        g = average_gain(realize(cand, phases), cluster)
        if g > best_gain:
            best, best_gain, since = cand, g, 0
        else:
            since += 1
            if patience is not None and since >= patience:
                break
    return best


@dataclass
class CodebookConfig:
    N: int
    S: int = 16
    rounds: int = 1
    iters_per_round: int = 10000
    subsample: float = 1.0
    saturation_window: int = 2000
    saturation_tol: float = 1e-3
    fine_tune_iters: int = 2000
    fine_tune_noise: Optional[float] = None
    workers: int = 1

    def __post_init__(self):
        if self.N < 1:
            raise ValueError("N must be >= 1")
        if self.S < 2:
            raise ValueError("S must be >= 2")
        if not 0 < self.subsample <= 1:
            raise ValueError("subsample must lie in (0, 1]")


@dataclass
class CodebookResult:
    codebook: Codebook
    objectives: list
    assignments: list = field(default_factory=list)  # (round, network, cluster, avg_gain)
    cluster_model: Optional[ClusterModel] = None
    agents: list = field(default_factory=list)

    def write_assignments(self, path) -> None:
        with open(path, "w", newline="") as f:
            w = csv.writer(f, lineterminator="\n")
            w.writerow(["round", "network", "cluster", "avg_gain"])
            for rnd, net, cl, g in self.assignments:
                w.writerow([rnd, net, cl, repr(float(g))])


def _train_member(job):
    agent, cluster, cfg, ft_seed = job
    if cluster is None:
        return agent, False
    agent.run(
        cfg.iters_per_round,
        stop=lambda a: saturated(a, cfg.saturation_window, cfg.saturation_tol),
    )
    done = saturated(agent, cfg.saturation_window, cfg.saturation_tol)
    if done:
        tuned = fine_tune(
            agent.best_beam, cluster, agent.phases, cfg.fine_tune_iters, cfg.fine_tune_noise,
            np.random.default_rng(ft_seed),
        )
        g = agent.evaluate(tuned)
        if g > agent.threshold:
            agent.best_beam, agent.threshold = tuned, g
    return agent, done


def learn_codebook(
    config: CodebookConfig,
    agent_config: AgentConfig,
    users: ChannelSet,
    seed: int = 0,
    eval_users: Optional[ChannelSet] = None,
    sensing_seed: Optional[int] = None,
    kmeans_seed: Optional[int] = None,
) -> CodebookResult:
    """Cluster users from sensing gains, then learn one beam per cluster.

    The k-means model is fitted once on all ``users``. Each round samples a
    user subset, labels it through the sensing beams, matches clusters to
    agents by maximum total gain of the agents' current best beams, and trains
    every agent on its cluster (fine-tuning once training saturates). The
    returned codebook is the best one seen on ``eval_users`` (default: all
    users) across rounds.
    """
    N, M = config.N, agent_config.M
    if users.K < N:
        raise ValueError(f"need at least N={N} users, got {users.K}")
    if users.M != M:
        raise ValueError("channel dimension does not match agent M")
    phases = PhaseSet(agent_config.r)
    eval_users = users if eval_users is None else eval_users

    if sensing_seed is None:
        sensing_seed = named_seed(seed, "sensing")
    if kmeans_seed is None:
        kmeans_seed = named_seed(seed, "kmeans")
    sensing = SensingSet.sample(config.S, M, phases, sensing_seed)
    init_rng = np.random.default_rng(named_seed(seed, "codebook-init"))
    best_beams = [BeamVector.random(M, phases, init_rng) for _ in range(N)]
    U = feature_vectors(build_sensing_matrix(sensing, users))
    model = kmeans_fit(U, N, kmeans_seed)
    model.sensing = sensing

    subsample_rng = np.random.default_rng(named_seed(seed, "subsample"))
    agents: list = [None] * N
    objectives, log = [], []
    best_cb, best_obj = None, -np.inf
    for rnd in range(1, config.rounds + 1):
        if config.subsample < 1:
            n_pick = max(N, int(round(config.subsample * users.K)))
            pick = np.sort(subsample_rng.choice(users.K, n_pick, replace=False))
            round_users = users.subset(pick)
        else:
            round_users = users
        labels = classify_users(model, round_users)
        clusters = [round_users.subset(np.flatnonzero(labels == n)) for n in range(N)]
        Z = np.zeros((N, N))
        W = np.array([realize(b, phases) for b in best_beams])
        for c, cl in enumerate(clusters):
            if cl.K:
                Z[:, c] = gains_matrix(W, cl.channels).mean(axis=1)
        perm = hungarian_assign(Z).permutation

        jobs = []
        for n in range(N):
            cl = clusters[perm[n]]
            if cl.K == 0:
                jobs.append((agents[n], None, config, 0))
                continue
            if agents[n] is None:
                agents[n] = Agent(agent_config, cl, named_seed(seed, f"agent[{n}]"), best_beams[n])
            else:
                agents[n].set_channels(cl)
            jobs.append((agents[n], cl, config, named_seed(seed, f"finetune[{n}][{rnd}]")))
        if config.workers > 1:
            with ProcessPoolExecutor(config.workers) as ex:
                results = list(ex.map(_train_member, jobs))
        else:
            results = [_train_member(j) for j in jobs]
        for n, (agent, _) in enumerate(results):
            agents[n] = agent
            if agent is not None and clusters[perm[n]].K:
                best_beams[n] = agent.best_beam
                log.append((rnd, n, int(perm[n]), agent.threshold))

        cb = Codebook(list(best_beams), phases)
        obj = codebook_objective(cb, eval_users)
        if obj > best_obj:
            best_cb, best_obj = cb, obj
        objectives.append(best_obj)
    return CodebookResult(best_cb, objectives, log, model, agents)
