"""Client shard construction: IID round-robin and Dirichlet label skew.

Both partitioners operate per category so that the secure/vulnerable mix is
controlled explicitly.  Shards are disjoint, cover the dataset exactly, and
are deterministic functions of (dataset, spec).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import Dataset
from .errors import ConfigError, PartitionError

MODES = ("iid", "dirichlet")


@dataclass(frozen=True)
class PartitionSpec:
    n_clients: int
    mode: str = "iid"
    alpha: float = 0.5
    seed: int = 0

    def __post_init__(self):
        if self.n_clients < 2:
            raise ConfigError(f"n_clients must be >= 2, got {self.n_clients}")
        if self.mode not in MODES:
            raise ConfigError(f"unknown partition mode {self.mode!r}")
        if self.mode == "dirichlet" and not self.alpha > 0:
            raise ConfigError(f"alpha must be > 0, got {self.alpha}")

    def to_dict(self) -> dict:
        return {
            "n_clients": self.n_clients,
            "mode": self.mode,
            "alpha": self.alpha,
            "seed": self.seed,
        }


@dataclass(frozen=True)
class ClientShard:
    client_id: int
    sample_ids: tuple[str, ...]
    label_histogram: dict

    def __len__(self) -> int:
        return len(self.sample_ids)


def _categories_in_order(dataset: Dataset) -> dict[str, list]:
    by_cat: dict[str, list] = {}
    for s in dataset.samples:
        by_cat.setdefault(s.category, []).append(s)
    return {c: by_cat[c] for c in sorted(by_cat)}


def _shards_from_assignment(dataset: Dataset, owner: dict[str, int], n_clients: int):
    per_client: list[list[str]] = [[] for _ in range(n_clients)]
    hists: list[dict] = [{} for _ in range(n_clients)]
    for s in dataset.samples:  # preserve dataset order inside each shard
        c = owner[s.sample_id]
        per_client[c].append(s.sample_id)
        hists[c][s.category] = hists[c].get(s.category, 0) + 1
    return [
        ClientShard(
            client_id=i,
            sample_ids=tuple(per_client[i]),
            label_histogram=dict(sorted(hists[i].items())),
        )
        for i in range(n_clients)
    ]


def partition_iid(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Deal every category round-robin after a seeded shuffle.

    The dealing cursor carries over between categories, so overall shard
    sizes differ by at most one while per-category counts stay within
    floor/ceil of the even share.
    """
    if spec.mode != "iid":
        raise ConfigError(f"partition_iid called with mode {spec.mode!r}")
    if len(dataset) < spec.n_clients:
        raise PartitionError(
            f"cannot split {len(dataset)} samples across {spec.n_clients} clients"
        )
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(21,)))
    owner: dict[str, int] = {}
    cursor = 0
    for _, samples in _categories_in_order(dataset).items():
        order = rng.permutation(len(samples))
        for j in order:
            owner[samples[j].sample_id] = cursor % spec.n_clients
            cursor += 1
    shards = _shards_from_assignment(dataset, owner, spec.n_clients)
    if any(len(sh) == 0 for sh in shards):
        raise PartitionError("internal error: empty shard after iid dealing")
    return shards


def _largest_remainder_counts(p: np.ndarray, total: int) -> np.ndarray:
    """Integer counts summing to ``total`` with quotas ``p * total``.

    Floors first, then distributes the remainder to the largest fractional
    parts (ties to the lower index).
    """
    quotas = p * total
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        remainders = quotas - counts
        order = np.lexsort((np.arange(len(p)), -remainders))
        for k in order[:short]:
            counts[k] += 1
    return counts


def partition_dirichlet(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    """Label-skewed shards: per category, client proportions are drawn from
    Dirichlet(alpha * 1) and realized exactly by largest-remainder rounding.

    Empty shards are repaired deterministically by moving the lowest
    sample_id out of the fullest shard.
    """
    if spec.mode != "dirichlet":
        raise ConfigError(f"partition_dirichlet called with mode {spec.mode!r}")
    if len(dataset) < spec.n_clients:
        raise PartitionError(
            f"cannot split {len(dataset)} samples across {spec.n_clients} clients"
        )
    rng = np.random.default_rng(np.random.SeedSequence(spec.seed, spawn_key=(22,)))
    n = spec.n_clients
    owner: dict[str, int] = {}
    for _, samples in _categories_in_order(dataset).items():
        p = rng.dirichlet(np.full(n, spec.alpha, dtype=np.float64))
        counts = _largest_remainder_counts(p, len(samples))
        order = rng.permutation(len(samples))
        pos = 0
        for client, c in enumerate(counts):
            for j in order[pos:pos + c]:
                owner[samples[j].sample_id] = client
            pos += c
    shards = _shards_from_assignment(dataset, owner, n)

    # empty-shard repair: move the lowest sample_id from the fullest shard
    sizes = [len(sh) for sh in shards]
    ids = [list(sh.sample_ids) for sh in shards]
    while min(sizes) == 0:
        empty = sizes.index(0)
        donor = int(np.argmax(sizes))  # ties -> lowest client id
        if sizes[donor] <= 1:
            raise PartitionError("cannot repair empty shards: donors exhausted")
        moved = min(ids[donor])
        ids[donor].remove(moved)
        ids[empty].append(moved)
        sizes[donor] -= 1
        sizes[empty] += 1
        owner[moved] = empty
    if any(len(v) == 0 for v in ids):
        raise PartitionError("internal error: empty shard after repair")
    return _shards_from_assignment(dataset, owner, n)


def make_partition(dataset: Dataset, spec: PartitionSpec) -> list[ClientShard]:
    if spec.mode == "iid":
        return partition_iid(dataset, spec)
    return partition_dirichlet(dataset, spec)


def chi_square_distance(shard: ClientShard, dataset: Dataset) -> float:
    """Chi-square distance between a shard's category distribution and the
    dataset-wide one (heterogeneity measure; 0 for a perfect IID shard)."""
    global_hist = dataset.label_histogram
    total = sum(global_hist.values())
    shard_total = len(shard)
    if shard_total == 0:
        raise PartitionError("chi-square distance of an empty shard")
    d = 0.0
    for cat, g in global_hist.items():
        q = g / total
        pc = shard.label_histogram.get(cat, 0) / shard_total
        d += (pc - q) ** 2 / q
    return d


def mean_chi_square(shards: list[ClientShard], dataset: Dataset) -> float:
    return float(np.mean([chi_square_distance(sh, dataset) for sh in shards]))


def export_shards_jsonl(shards: list[ClientShard], path) -> None:
    """Write one ``{"client_id", "sample_id"}`` line per assignment."""
    with Path(path).open("w", encoding="utf-8") as fh:
        for sh in shards:
            for sid in sh.sample_ids:
                fh.write(
                    json.dumps(
                        {"client_id": sh.client_id, "sample_id": sid},
                        sort_keys=True,
                    )
                    + "\n"
                )
