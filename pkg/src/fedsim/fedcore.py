"""Federated training engine: client selection, local training, aggregation.

Algorithms: ``fedavg`` (sample-weighted mean of hot parameters), ``fedprox``
(FedAvg plus a proximal pull toward the dispatched model during local
training), ``clusamp`` (clustered client selection, FedAvg aggregation),
``fedcross`` (a pool of intermediate models cross-aggregated with their least
similar peer; the pool mean is used for evaluation only), ``moon``
(model-contrastive penalty on the representation during local training) and
``fedmut`` (sign-mutated variants of the global model dispatched to clients).

Determinism: every random decision draws from a named stream derived from
``(config.seed, purpose, round, client)`` via ``numpy.random.SeedSequence``
spawn keys, so a configuration pins the whole trajectory bit for bit.  Client
updates are always consumed in ascending client id order, which keeps
aggregation independent of scheduling (and of the worker pool).

Only hot parameter segments ever leave a client or the server: a
:class:`RoundUpdate` carries the flat hot vector, the shard size and the mean
final-epoch training loss, nothing else.
"""

from __future__ import annotations

import math
import struct
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import metrics, numkit, peft, refmodel
from .errors import ConfigError, DimensionError, InputError, StateError

ALGORITHMS = ("fedavg", "fedprox", "clusamp", "fedcross", "moon", "fedmut")

DEFAULT_ALGORITHM_PARAMS = {
    "mu": 0.01,                  # fedprox proximal strength
    "tau": 0.5,                  # moon temperature
    "contrastive_weight": 1.0,   # moon term weight
    "n_clusters": None,          # clusamp; None -> min(5, selection count)
    "cluster_mode": "similarity",  # clusamp: "similarity" | "size"
    "cross_alpha": 0.9,          # fedcross primary-model weight
    "mutate_beta": 1.0,          # fedmut mutation strength
    "mutate_granularity": "block",  # fedmut sign masks: "block" | "param"
}

# SeedSequence spawn-key tags, one per purpose
_SEL, _LOCAL, _CLUSTER, _MUTATE, _ISOLATED = 1, 2, 3, 4, 5

UPDATE_MAGIC = b"FSRU"
UPDATE_VERSION = 1
UPDATE_HEADER_BYTES = 34  # 4s + u16 + u32 + u64 + f64 + u64


@dataclass(frozen=True)
class FederationConfig:
    n_clients: int = 10
    rounds: int = 50
    select_fraction: float = 0.5
    local_epochs: int = 1
    batch_size: int = 32
    learning_rate: float = 0.05
    algorithm: str = "fedavg"
    algorithm_params: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 2:
            raise ConfigError(f"n_clients must be >= 2, got {self.n_clients}")
        if self.rounds < 0:
            raise ConfigError(f"rounds must be >= 0, got {self.rounds}")
        if not 0.0 < self.select_fraction <= 1.0:
            raise ConfigError(
                f"select_fraction must be in (0, 1], got {self.select_fraction}"
            )
        if self.local_epochs < 1:
            raise ConfigError(f"local_epochs must be >= 1, got {self.local_epochs}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.learning_rate < 0:
            raise ConfigError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        unknown = set(self.algorithm_params) - set(DEFAULT_ALGORITHM_PARAMS)
        if unknown:
            raise ConfigError(f"unknown algorithm_params keys: {sorted(unknown)}")
        p = self.params()
        if p["mu"] < 0:
            raise ConfigError(f"mu must be >= 0, got {p['mu']}")
        if not p["tau"] > 0:
            raise ConfigError(f"tau must be > 0, got {p['tau']}")
        if p["contrastive_weight"] < 0:
            raise ConfigError(
                f"contrastive_weight must be >= 0, got {p['contrastive_weight']}"
            )
        if not 0.0 <= p["cross_alpha"] <= 1.0:
            raise ConfigError(f"cross_alpha must be in [0, 1], got {p['cross_alpha']}")
        if p["mutate_beta"] < 0:
            raise ConfigError(f"mutate_beta must be >= 0, got {p['mutate_beta']}")
        if p["cluster_mode"] not in ("similarity", "size"):
            raise ConfigError(f"unknown cluster_mode {p['cluster_mode']!r}")
        if p["mutate_granularity"] not in ("block", "param"):
            raise ConfigError(
                f"unknown mutate_granularity {p['mutate_granularity']!r}"
            )
        if p["n_clusters"] is not None and p["n_clusters"] < 1:
            raise ConfigError(f"n_clusters must be >= 1, got {p['n_clusters']}")

    def params(self) -> dict:
        merged = dict(DEFAULT_ALGORITHM_PARAMS)
        merged.update(self.algorithm_params)
        return merged

    @property
    def selection_count(self) -> int:
        return math.ceil(self.n_clients * self.select_fraction)

    def n_clusters(self) -> int:
        requested = self.params()["n_clusters"]
        if requested is None:
            return min(5, self.selection_count)
        return int(requested)

    def to_dict(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "rounds": self.rounds,
            "select_fraction": self.select_fraction,
            "local_epochs": self.local_epochs,
            "batch_size": self.batch_size,
            "learning_rate": self.learning_rate,
            "algorithm": self.algorithm,
            "algorithm_params": dict(self.algorithm_params),
            "seed": self.seed,
        }


@dataclass
class ClientData:
    client_id: int
    token_ids: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.labels.shape[0])


@dataclass
class TestData:
    token_ids: np.ndarray
    labels: np.ndarray
    categories: list[str]


@dataclass
class RoundUpdate:
    client_id: int
    hot_params: np.ndarray
    n_samples: int
    train_loss: float


def serialize_update(update: RoundUpdate) -> bytes:
    """Fixed 34-byte header plus the little-endian float64 hot vector."""
    vec = numkit.as_vector(update.hot_params)
    header = struct.pack(
        "<4sHIQdQ",
        UPDATE_MAGIC,
        UPDATE_VERSION,
        update.client_id,
        update.n_samples,
        update.train_loss,
        vec.shape[0],
    )
    return header + vec.astype("<f8").tobytes()


def deserialize_update(buf: bytes) -> RoundUpdate:
    if len(buf) < UPDATE_HEADER_BYTES or buf[:4] != UPDATE_MAGIC:
        raise StateError("not a serialized round update")
    _, version, client_id, n_samples, loss, count = struct.unpack(
        "<4sHIQdQ", buf[:UPDATE_HEADER_BYTES]
    )
    if version != UPDATE_VERSION:
        raise StateError(f"unsupported update version {version}")
    vec = np.frombuffer(buf[UPDATE_HEADER_BYTES:], dtype="<f8")
    if vec.shape[0] != count:
        raise StateError("truncated round update")
    return RoundUpdate(
        client_id=client_id,
        hot_params=vec.astype(np.float64),
        n_samples=n_samples,
        train_loss=loss,
    )


# --- selection ------------------------------------------------------------


def _stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(key)))


def select_clients(round_index: int, config: FederationConfig, rng=None) -> list[int]:
    """Uniformly sample the round's client subset, seeded by (seed, round)."""
    if round_index < 0:
        raise InputError(f"round_index must be >= 0, got {round_index}")
    if rng is None:
        rng = _stream(config.seed, _SEL, round_index)
    chosen = rng.choice(config.n_clients, size=config.selection_count, replace=False)
    return sorted(int(c) for c in chosen)


def _kmeans_assign(points: np.ndarray, k: int, rng, n_iter: int = 25) -> np.ndarray:
    """Plain Lloyd's k-means; returns the cluster index per point.

    Deterministic given the generator: seeded center init, ties to the
    lowest cluster index, fixed iteration cap.
    """
    n = points.shape[0]
    k = min(k, n)
    centers = points[rng.choice(n, size=k, replace=False)].copy()
    assign = None
    for _ in range(n_iter):
        d2 = ((points[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        new_assign = d2.argmin(axis=1)
        if assign is not None and np.array_equal(new_assign, assign):
            break
        assign = new_assign
        for j in range(k):
            members = assign == j
            if members.any():
                centers[j] = points[members].mean(axis=0)
    return assign


def clusamp_select(
    features: np.ndarray,
    n_clusters: int,
    quota: int,
    rng,
    mode: str = "similarity",
) -> list[int]:
    """Cluster clients and fill the quota proportionally to cluster mass.

    ``features`` is one row per client: last hot updates in similarity mode
    (cosine metric, via row normalization), scalar sample counts in size
    mode.  Slots are allocated to clusters by largest remainder on the
    cluster masses (member counts); when the quota allows, every nonempty
    cluster keeps at least one slot.  Members are then drawn uniformly
    without replacement inside each cluster.
    """
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim == 1:
        feats = feats[:, None]
    n = feats.shape[0]
    if not 1 <= quota <= n:
        raise InputError(f"quota {quota} out of range [1, {n}]")
    if n_clusters < 1:
        raise ConfigError(f"n_clusters must be >= 1, got {n_clusters}")
    if n_clusters > quota:
        raise ConfigError(
            f"n_clusters {n_clusters} exceeds selection quota {quota}"
        )
    if mode == "similarity":
        norms = np.linalg.norm(feats, axis=1, keepdims=True)
        safe = np.where(norms > 0, norms, 1.0)
        points = feats / safe
    elif mode == "size":
        points = feats
    else:
        raise ConfigError(f"unknown cluster mode {mode!r}")

    assign = _kmeans_assign(points, n_clusters, rng)
    k = int(assign.max()) + 1
    masses = np.array([(assign == j).sum() for j in range(k)], dtype=np.int64)

    alloc = _proportional_allocation(masses, quota)
    selected: list[int] = []
    for j in range(k):
        if alloc[j] == 0:
            continue
        members = np.flatnonzero(assign == j)
        chosen = rng.choice(members, size=alloc[j], replace=False)
        selected.extend(int(c) for c in chosen)
    return sorted(selected)


def _proportional_allocation(masses: np.ndarray, quota: int) -> np.ndarray:
    """Largest-remainder slots per cluster, capped by cluster size, with a
    guaranteed slot for every nonempty cluster when the quota permits."""
    total = int(masses.sum())
    quotas = masses * (quota / total)
    alloc = np.floor(quotas).astype(np.int64)
    remainders = quotas - alloc
    short = quota - int(alloc.sum())
    order = np.lexsort((np.arange(len(masses)), -remainders))
    for j in order[:short]:
        alloc[j] += 1
    nonempty = np.flatnonzero(masses > 0)
    if quota >= len(nonempty):
        for j in nonempty:
            while alloc[j] == 0:
                donor = int(np.argmax(alloc))
                if alloc[donor] <= 1:
                    break
                alloc[donor] -= 1
                alloc[j] += 1
    # never ask a cluster for more members than it has
    for j in range(len(masses)):
        while alloc[j] > masses[j]:
            alloc[j] -= 1
            spare = np.flatnonzero((alloc < masses) & (masses > 0))
            alloc[spare[0]] += 1
    return alloc


# --- local objective hooks ---------------------------------------------------


def fedprox_term(w, w_global, mu: float):
    """Proximal penalty ``(mu/2) * ||w - w_global||^2`` and its gradient."""
    w = numkit.as_vector(w)
    wg = numkit.as_vector(w_global)
    if w.shape[0] != wg.shape[0]:
        raise DimensionError(
            f"vector length mismatch: {w.shape[0]} != {wg.shape[0]}"
        )
    if mu < 0:
        raise ConfigError(f"mu must be >= 0, got {mu}")
    diff = w - wg
    return 0.5 * mu * float(np.dot(diff, diff)), mu * diff


def moon_term(z, z_global, z_prev, tau: float, weight: float):
    """Model-contrastive penalty on representations.

    Per sample, with cosine similarities ``cg = cos(z, z_global)`` and
    ``cp = cos(z, z_prev)``, the term is
    ``-log(exp(cg/tau) / (exp(cg/tau) + exp(cp/tau)))`` averaged over the
    batch and scaled by ``weight``.  Returns ``(loss, d_loss/d_z)``;
    ``z_global`` and ``z_prev`` are treated as constants.
    """
    if not tau > 0:
        raise ConfigError(f"tau must be > 0, got {tau}")
    z = np.atleast_2d(np.asarray(z, dtype=np.float64))
    zg = np.atleast_2d(np.asarray(z_global, dtype=np.float64))
    zp = np.atleast_2d(np.asarray(z_prev, dtype=np.float64))
    if z.shape != zg.shape or z.shape != zp.shape:
        raise DimensionError("representation shapes do not match")
    n = z.shape[0]

    def _cos_and_grad(a, b):
        # d cos(a, b) / d a, with b constant; degenerate rows contribute 0
        na = np.linalg.norm(a, axis=1)
        nb = np.linalg.norm(b, axis=1)
        ok = (na > 0) & (nb > 0)
        na_s = np.where(ok, na, 1.0)
        nb_s = np.where(ok, nb, 1.0)
        cos = np.where(ok, (a * b).sum(axis=1) / (na_s * nb_s), 0.0)
        grad = np.where(
            ok[:, None],
            b / (na_s * nb_s)[:, None] - a * (cos / na_s**2)[:, None],
            0.0,
        )
        return cos, grad

    cg, dcg = _cos_and_grad(z, zg)
    cp, dcp = _cos_and_grad(z, zp)
    x = (cp - cg) / tau
    loss = weight * float(np.mean(np.logaddexp(0.0, x)))
    sig = 1.0 / (1.0 + np.exp(-x))
    coeff = weight * sig / (tau * n)
    dz = coeff[:, None] * (dcp - dcg)
    return loss, dz


class ProxHook:
    """Adds the fedprox proximal term against the dispatched hot vector."""

    kind = "param"

    def __init__(self, mu: float, anchor):
        self.mu = float(mu)
        self.anchor = numkit.as_vector(anchor).copy()

    def param_term(self, hot_vector):
        return fedprox_term(hot_vector, self.anchor, self.mu)


class MoonHook:
    """Adds the model-contrastive term; needs the dispatched global model and
    the client's previous local model (None on a client's first round)."""

    kind = "repr"

    def __init__(self, tau: float, weight: float, global_params, prev_params):
        self.tau = float(tau)
        self.weight = float(weight)
        self.global_params = global_params
        self.prev_params = prev_params

    def repr_term(self, batch, rep):
        if self.prev_params is None or self.weight == 0.0:
            return 0.0, np.zeros_like(rep)
        _, z_global = refmodel.forward(self.global_params, batch)
        _, z_prev = refmodel.forward(self.prev_params, batch)
        return moon_term(rep, z_global, z_prev, self.tau, self.weight)


# --- aggregation ------------------------------------------------------------


def aggregate_fedavg(updates: list[RoundUpdate]) -> np.ndarray:
    """Sample-count weighted mean of the hot vectors, in client-id order."""
    if not updates:
        raise InputError("no updates to aggregate")
    ordered = sorted(updates, key=lambda u: u.client_id)
    return numkit.weighted_sum(
        (u.hot_params, float(u.n_samples)) for u in ordered
    )


def _safe_cos(a: np.ndarray, b: np.ndarray) -> float:
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.clip(np.dot(a, b) / (na * nb), -1.0, 1.0))


def fedcross_round(pool: list[np.ndarray], updates: list[np.ndarray],
                   cross_alpha: float):
    """Cross-aggregate trained pool members with their least similar peer.

    ``updates[i]`` is the trained continuation of ``pool[i]``.  Each new
    member is ``alpha * w_i + (1 - alpha) * w_j`` where ``j`` minimizes
    cosine similarity to ``i`` (ties to the lowest index).  Returns the new
    pool and the unweighted pool mean, which exists for evaluation only and
    is never trained on.
    """
    if len(updates) != len(pool):
        raise StateError(
            f"pool size {len(pool)} != trained update count {len(updates)}"
        )
    if not 0.0 <= cross_alpha <= 1.0:
        raise ConfigError(f"cross_alpha must be in [0, 1], got {cross_alpha}")
    k = len(updates)
    if k == 0:
        raise StateError("empty fedcross pool")
    vecs = [numkit.as_vector(u) for u in updates]
    if k == 1:
        new_pool = [vecs[0].copy()]
        return new_pool, vecs[0].copy()
    new_pool = []
    for i in range(k):
        best_j, best_sim = None, None
        for j in range(k):
            if j == i:
                continue
            sim = _safe_cos(vecs[i], vecs[j])
            if best_sim is None or sim < best_sim:
                best_j, best_sim = j, sim
        new_pool.append(cross_alpha * vecs[i] + (1.0 - cross_alpha) * vecs[best_j])
    global_vec = numkit.weighted_sum((v, 1.0) for v in new_pool)
    return new_pool, global_vec


def fedmut_mutate(
    w_global,
    delta,
    n_variants: int,
    beta: float,
    rng,
    segment_sizes=None,
    granularity: str = "block",
) -> list[np.ndarray]:
    """Sign-mutated copies of the global model, in +/- pairs.

    Each pair draws one sign mask (one sign per parameter block, or per
    entry with ``granularity="param"``) and contributes
    ``w +/- beta * (mask * delta)``.  An odd quota gets one unmutated copy,
    so the exact mean of the variants is the global model.
    """
    w = numkit.as_vector(w_global)
    d = numkit.as_vector(delta)
    if w.shape[0] != d.shape[0]:
        raise DimensionError(
            f"vector length mismatch: {w.shape[0]} != {d.shape[0]}"
        )
    if n_variants < 0:
        raise InputError(f"n_variants must be >= 0, got {n_variants}")
    if beta < 0:
        raise ConfigError(f"beta must be >= 0, got {beta}")
    if granularity not in ("block", "param"):
        raise ConfigError(f"unknown mutate granularity {granularity!r}")
    if segment_sizes is None:
        segment_sizes = [w.shape[0]]
    if sum(segment_sizes) != w.shape[0]:
        raise DimensionError("segment sizes do not cover the vector")

    variants: list[np.ndarray] = []
    for _ in range(n_variants // 2):
        if granularity == "block":
            signs = rng.choice((-1.0, 1.0), size=len(segment_sizes))
            mask = np.repeat(signs, segment_sizes)
        else:
            mask = rng.choice((-1.0, 1.0), size=w.shape[0])
        e = beta * (mask * d)
        variants.append(w + e)
        variants.append(w - e)
    if n_variants % 2 == 1:
        variants.append(w.copy())
    return variants


# --- local training -----------------------------------------------------------


def local_train(
    params: refmodel.ParamSet,
    data: ClientData,
    config: FederationConfig,
    *,
    client_id: int,
    round_index: int,
    hooks=(),
) -> RoundUpdate:
    """Run the client's local epochs of minibatch gradient descent.

    Only hot segments move.  The returned update carries the trained hot
    vector, the shard size, and the sample-weighted mean loss over the final
    epoch.  Batch order is seeded by (seed, round, client).
    """
    n = len(data)
    if n == 0:
        raise InputError(f"client {client_id} has an empty shard")
    p = params.clone()
    rng = _stream(config.seed, _LOCAL, round_index, client_id)
    final_epoch: list[tuple[float, int]] = []
    for _ in range(config.local_epochs):
        order = rng.permutation(n)
        final_epoch = []
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = refmodel.Batch(data.token_ids[idx], data.labels[idx])
            loss, grads = refmodel.loss_and_grad(p, batch, hooks)
            hot = p.hot_vector()
            g = refmodel.hot_grad_vector(p, grads)
            p.set_hot_vector(hot - config.learning_rate * g)
            final_epoch.append((loss, len(idx)))
    mean_loss = sum(l * k for l, k in final_epoch) / n
    return RoundUpdate(
        client_id=client_id,
        hot_params=p.hot_vector(),
        n_samples=n,
        train_loss=mean_loss,
    )


def _train_client_task(task):
    params, data, config, client_id, round_index, hooks = task
    return local_train(
        params, data, config,
        client_id=client_id, round_index=round_index, hooks=hooks,
    )


def train_isolated(
    data: ClientData,
    config: FederationConfig,
    init_params: refmodel.ParamSet,
    test: TestData,
) -> metrics.EvaluationReport:
    """Compute-matched solo baseline: ``rounds * local_epochs`` epochs of the
    same minibatch descent on one shard, then evaluation on the test set."""
    p = init_params.clone()
    n = len(data)
    if n == 0:
        raise InputError(f"client {data.client_id} has an empty shard")
    rng = _stream(config.seed, _ISOLATED, data.client_id)
    for _ in range(config.rounds * config.local_epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            batch = refmodel.Batch(data.token_ids[idx], data.labels[idx])
            _, grads = refmodel.loss_and_grad(p, batch)
            hot = p.hot_vector()
            g = refmodel.hot_grad_vector(p, grads)
            p.set_hot_vector(hot - config.learning_rate * g)
    return _evaluate_params(p, test)


def _evaluate_params(params: refmodel.ParamSet, test: TestData) -> metrics.EvaluationReport:
    eval_params = peft.effective_params(params)
    preds = refmodel.predict(eval_params, refmodel.Batch(test.token_ids))
    return metrics.evaluate(preds, test.labels, test.categories)


# --- the round loop ---------------------------------------------------------


@dataclass
class FederationResult:
    report: metrics.EvaluationReport
    trace: list[dict]
    final_params: refmodel.ParamSet
    pool: list[np.ndarray] | None = None


def _params_with_hot(template: refmodel.ParamSet, hot_vec: np.ndarray) -> refmodel.ParamSet:
    p = template.clone()
    p.set_hot_vector(hot_vec)
    return p


def run_federation(
    config: FederationConfig,
    init_params: refmodel.ParamSet,
    clients: list[ClientData],
    test: TestData,
    *,
    workers: int = 1,
    checkpoint_every: int = 0,
    checkpoint_dir=None,
) -> FederationResult:
    """Drive the full round loop and return the final report and trace.

    One trace record per round: round index, algorithm, selected ids, mean
    train loss, and test accuracy/precision/recall/F1 of the post-round
    global model.  ``rounds == 0`` returns the initial model's evaluation
    with an empty trace.
    """
    if len(clients) != config.n_clients:
        raise ConfigError(
            f"{len(clients)} client shards for n_clients={config.n_clients}"
        )
    for i, c in enumerate(clients):
        if c.client_id != i:
            raise ConfigError("client shards must be ordered by client_id")
        if len(c) == 0:
            raise ConfigError(f"client {i} has an empty shard")
    if test.labels.shape[0] == 0:
        raise ConfigError("empty test set")
    if checkpoint_every < 0:
        raise ConfigError(f"checkpoint_every must be >= 0, got {checkpoint_every}")
    if checkpoint_every > 0 and checkpoint_dir is None:
        raise ConfigError("checkpoint_every set but no checkpoint_dir")

    algo = config.algorithm
    ap = config.params()
    K = config.selection_count
    if algo == "clusamp" and config.n_clusters() > K:
        raise ConfigError(
            f"n_clusters {config.n_clusters()} exceeds selection count {K}"
        )

    global_params = init_params.clone()
    hot_size = global_params.hot_size
    shard_sizes = np.array([len(c) for c in clients], dtype=np.int64)

    pool: list[np.ndarray] | None = None
    if algo == "fedcross":
        pool = [global_params.hot_vector() for _ in range(K)]
    prev_local_hot: dict[int, np.ndarray] = {}
    last_update_hot: dict[int, np.ndarray] = {}
    prev_global_hot = global_params.hot_vector()
    pending_variants: list[np.ndarray] | None = None

    executor = None
    if workers and workers > 1:
        executor = ProcessPoolExecutor(max_workers=workers)

    trace: list[dict] = []
    try:
        for rnd in range(config.rounds):
            # ---- select
            if algo == "clusamp":
                rng = _stream(config.seed, _CLUSTER, rnd)
                mode = ap["cluster_mode"]
                if mode == "similarity" and rnd == 0:
                    mode = "size"  # no updates yet
                if mode == "size":
                    features = shard_sizes.astype(np.float64)
                else:
                    current = global_params.hot_vector()
                    features = np.stack(
                        [last_update_hot.get(i, current) for i in range(config.n_clients)]
                    )
                selected = clusamp_select(features, config.n_clusters(), K, rng, mode)
            else:
                selected = select_clients(rnd, config)

            # ---- dispatch
            dispatched: list[refmodel.ParamSet] = []
            for slot, cid in enumerate(selected):
                if algo == "fedcross":
                    dispatched.append(_params_with_hot(global_params, pool[slot]))
                elif algo == "fedmut" and pending_variants is not None:
                    dispatched.append(
                        _params_with_hot(global_params, pending_variants[slot])
                    )
                else:
                    dispatched.append(global_params.clone())

            # ---- local training
            tasks = []
            for slot, cid in enumerate(selected):
                hooks: list = []
                if algo == "fedprox" and ap["mu"] != 0.0:
                    hooks.append(ProxHook(ap["mu"], dispatched[slot].hot_vector()))
                if algo == "moon" and ap["contrastive_weight"] != 0.0:
                    prev = prev_local_hot.get(cid)
                    prev_params = (
                        None if prev is None else _params_with_hot(global_params, prev)
                    )
                    hooks.append(
                        MoonHook(
                            ap["tau"], ap["contrastive_weight"],
                            dispatched[slot].clone(), prev_params,
                        )
                    )
                tasks.append(
                    (dispatched[slot], clients[cid], config, cid, rnd, tuple(hooks))
                )
            if executor is not None:
                updates = list(executor.map(_train_client_task, tasks))
            else:
                updates = [_train_client_task(t) for t in tasks]
            updates.sort(key=lambda u: u.client_id)
            for u in updates:
                if u.hot_params.shape[0] != hot_size:
                    raise StateError(
                        f"update from client {u.client_id} has wrong hot size"
                    )
                last_update_hot[u.client_id] = u.hot_params
                if algo == "moon":
                    prev_local_hot[u.client_id] = u.hot_params

            # ---- aggregate
            if algo == "fedcross":
                # updates arrive sorted by client id; selected is sorted, so
                # the k-th trained vector continues the k-th pool member
                trained = [u.hot_params for u in updates]
                pool, global_hot = fedcross_round(pool, trained, ap["cross_alpha"])
                global_params.set_hot_vector(global_hot)
            elif algo == "fedmut":
                agg = aggregate_fedavg(updates)
                delta = agg - prev_global_hot
                rng = _stream(config.seed, _MUTATE, rnd)
                sizes = [global_params.tensors[n].size for n in global_params.hot_names()]
                pending_variants = fedmut_mutate(
                    agg, delta, K, ap["mutate_beta"], rng,
                    segment_sizes=sizes, granularity=ap["mutate_granularity"],
                )
                # the served global is the exact mean of the dispatched
                # variants (equal to agg up to rounding)
                global_hot = numkit.weighted_sum((v, 1.0) for v in pending_variants)
                global_params.set_hot_vector(global_hot)
                prev_global_hot = global_hot
            else:
                global_hot = aggregate_fedavg(updates)
                global_params.set_hot_vector(global_hot)

            # ---- evaluate
            report = _evaluate_params(global_params, test)
            trace.append(
                {
                    "round": rnd,
                    "algorithm": algo,
                    "selected": list(selected),
                    "mean_train_loss": float(
                        np.mean([u.train_loss for u in updates])
                    ),
                    "accuracy": report.accuracy,
                    "precision": report.precision,
                    "recall": report.recall,
                    "f1": report.f1,
                }
            )
            if checkpoint_every and (rnd + 1) % checkpoint_every == 0:
                refmodel.save_params(
                    global_params, Path(checkpoint_dir) / f"round_{rnd + 1:04d}.bin"
                )
    finally:
        if executor is not None:
            executor.shutdown()

    report = _evaluate_params(global_params, test)
    return FederationResult(
        report=report, trace=trace, final_params=global_params, pool=pool
    )
