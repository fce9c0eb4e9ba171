"""Experiment configuration: one JSON document, strictly validated.

Unknown keys are rejected at every level, so typos fail fast instead of
silently falling back to defaults.  The documented schema:

.. code-block:: json

    {
      "dataset":    {"path": "corpus.jsonl", "form": "source-code"}
                    -- or -- {"synthetic": {...SyntheticSpec fields...}},
      "corpus":     {"max_len": 96, "vocab_max_size": 512, "min_count": 100,
                     "train_fraction": 0.8, "seed": 1},
      "partition":  {"n_clients": 10, "mode": "iid", "alpha": 0.5, "seed": 2},
      "model":      {"embed_dim": 16, "n_blocks": 2, "hidden_dim": 32,
                     "n_classes": 2, "seed": 3},
      "scheme":     {"kind": "full", "rank": 2, "n_prompt": 4,
                     "alpha_scale": null, "seed": 4},
      "federation": {"n_clients": 10, "rounds": 50, "select_fraction": 0.5,
                     "local_epochs": 1, "batch_size": 32,
                     "learning_rate": 0.05, "algorithm": "fedavg",
                     "algorithm_params": {}, "checkpoint_every": 0,
                     "seed": 5},
      "workers":    null,
      "output_dir": "runs/demo"
    }

``federation.n_clients`` may be omitted (it inherits the partition value);
when present it must agree.  ``workers: null`` means one process per
available core.  A seed override shifts every section seed by a fixed
offset from the override value.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

from .corpus import RAW_FORMS
from .errors import ConfigError, RecordError
from .fedcore import FederationConfig
from .partition import PartitionSpec
from .peft import SchemeSpec
from .synth import SyntheticSpec


def _take(doc: dict, context: str, fields: dict) -> dict:
    """Pull typed fields out of a mapping, rejecting unknown keys."""
    if not isinstance(doc, dict):
        raise ConfigError(f"{context}: expected an object")
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"{context}: unknown keys {sorted(unknown)}")
    out = {}
    for key, (required, default) in fields.items():
        if key in doc:
            out[key] = doc[key]
        elif required:
            raise ConfigError(f"{context}: missing required key {key!r}")
        else:
            out[key] = default
    return out


@dataclass(frozen=True)
class DatasetSection:
    path: str | None = None
    form: str = "source-code"
    synthetic: SyntheticSpec | None = None

    def __post_init__(self):
        if (self.path is None) == (self.synthetic is None):
            raise ConfigError(
                "dataset: exactly one of 'path' or 'synthetic' must be set"
            )
        if self.form not in RAW_FORMS:
            raise ConfigError(f"dataset: unknown form {self.form!r}")


@dataclass(frozen=True)
class CorpusSection:
    max_len: int = 96
    vocab_max_size: int = 512
    min_count: int = 100
    train_fraction: float = 0.8
    seed: int = 1

    def __post_init__(self):
        if self.max_len < 1:
            raise ConfigError(f"corpus: max_len must be >= 1, got {self.max_len}")
        if self.vocab_max_size < 2:
            raise ConfigError(
                f"corpus: vocab_max_size must be >= 2, got {self.vocab_max_size}"
            )
        if self.min_count < 0:
            raise ConfigError(f"corpus: min_count must be >= 0, got {self.min_count}")
        if not 0.0 < self.train_fraction < 1.0:
            raise ConfigError(
                f"corpus: train_fraction must be in (0, 1), got {self.train_fraction}"
            )


@dataclass(frozen=True)
class ModelSection:
    embed_dim: int = 16
    n_blocks: int = 2
    hidden_dim: int = 32
    n_classes: int = 2
    seed: int = 3


@dataclass
class ExperimentConfig:
    dataset: DatasetSection
    corpus: CorpusSection
    partition: PartitionSpec
    model: ModelSection
    scheme: SchemeSpec
    federation: FederationConfig
    checkpoint_every: int = 0
    workers: int | None = None
    output_dir: str = "runs/out"

    @classmethod
    def from_dict(cls, doc: dict) -> "ExperimentConfig":
        top = _take(
            doc,
            "config",
            {
                "dataset": (True, None),
                "corpus": (False, {}),
                "partition": (True, None),
                "model": (False, {}),
                "scheme": (False, {}),
                "federation": (False, {}),
                "workers": (False, None),
                "output_dir": (False, "runs/out"),
            },
        )

        ds = _take(
            top["dataset"],
            "dataset",
            {
                "path": (False, None),
                "form": (False, "source-code"),
                "synthetic": (False, None),
            },
        )
        synthetic = None
        if ds["synthetic"] is not None:
            syn = _take(
                ds["synthetic"],
                "dataset.synthetic",
                {
                    "n_samples": (False, 2000),
                    "vulnerable_fraction": (False, 0.5),
                    "n_categories": (False, 8),
                    "variants_per_category": (False, 16),
                    "min_statements": (False, 10),
                    "max_statements": (False, 20),
                    "seed": (False, 0),
                },
            )
            synthetic = SyntheticSpec(**syn)
        dataset = DatasetSection(path=ds["path"], form=ds["form"], synthetic=synthetic)

        corpus = CorpusSection(
            **_take(
                top["corpus"],
                "corpus",
                {
                    "max_len": (False, 96),
                    "vocab_max_size": (False, 512),
                    "min_count": (False, 100),
                    "train_fraction": (False, 0.8),
                    "seed": (False, 1),
                },
            )
        )

        part = _take(
            top["partition"],
            "partition",
            {
                "n_clients": (True, None),
                "mode": (False, "iid"),
                "alpha": (False, 0.5),
                "seed": (False, 2),
            },
        )
        partition = PartitionSpec(**part)

        model = ModelSection(
            **_take(
                top["model"],
                "model",
                {
                    "embed_dim": (False, 16),
                    "n_blocks": (False, 2),
                    "hidden_dim": (False, 32),
                    "n_classes": (False, 2),
                    "seed": (False, 3),
                },
            )
        )

        scheme = SchemeSpec(
            **_take(
                top["scheme"],
                "scheme",
                {
                    "kind": (False, "full"),
                    "rank": (False, 2),
                    "n_prompt": (False, 4),
                    "alpha_scale": (False, None),
                    "seed": (False, 4),
                },
            )
        )

        fed = _take(
            top["federation"],
            "federation",
            {
                "n_clients": (False, None),
                "rounds": (False, 50),
                "select_fraction": (False, 0.5),
                "local_epochs": (False, 1),
                "batch_size": (False, 32),
                "learning_rate": (False, 0.05),
                "algorithm": (False, "fedavg"),
                "algorithm_params": (False, {}),
                "checkpoint_every": (False, 0),
                "seed": (False, 5),
            },
        )
        checkpoint_every = fed.pop("checkpoint_every")
        if not isinstance(checkpoint_every, int) or checkpoint_every < 0:
            raise ConfigError(
                f"federation: checkpoint_every must be an int >= 0, got {checkpoint_every!r}"
            )
        if fed["n_clients"] is None:
            fed["n_clients"] = partition.n_clients
        elif fed["n_clients"] != partition.n_clients:
            raise ConfigError(
                f"federation.n_clients {fed['n_clients']} != "
                f"partition.n_clients {partition.n_clients}"
            )
        federation = FederationConfig(**fed)

        workers = top["workers"]
        if workers is not None and (not isinstance(workers, int) or workers < 1):
            raise ConfigError(f"workers must be a positive int, got {workers!r}")

        return cls(
            dataset=dataset,
            corpus=corpus,
            partition=partition,
            model=model,
            scheme=scheme,
            federation=federation,
            checkpoint_every=checkpoint_every,
            workers=workers,
            output_dir=str(top["output_dir"]),
        )

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as exc:
            raise RecordError(f"invalid config JSON ({exc.msg})", path) from exc
        return cls.from_dict(doc)

    def with_seed_override(self, seed: int) -> "ExperimentConfig":
        """Re-seed every section from one override value (fixed offsets)."""
        dataset = self.dataset
        if dataset.synthetic is not None:
            dataset = replace(
                dataset, synthetic=replace(dataset.synthetic, seed=seed + 5)
            )
        return ExperimentConfig(
            dataset=dataset,
            corpus=replace(self.corpus, seed=seed),
            partition=replace(self.partition, seed=seed + 1),
            model=replace(self.model, seed=seed + 2),
            scheme=replace(self.scheme, seed=seed + 3),
            federation=replace(self.federation, seed=seed + 4),
            checkpoint_every=self.checkpoint_every,
            workers=self.workers,
            output_dir=self.output_dir,
        )

    def to_dict(self) -> dict:
        ds: dict = {"form": self.dataset.form}
        if self.dataset.path is not None:
            ds["path"] = self.dataset.path
        if self.dataset.synthetic is not None:
            ds["synthetic"] = self.dataset.synthetic.to_dict()
        fed = self.federation.to_dict()
        fed["checkpoint_every"] = self.checkpoint_every
        return {
            "dataset": ds,
            "corpus": {
                "max_len": self.corpus.max_len,
                "vocab_max_size": self.corpus.vocab_max_size,
                "min_count": self.corpus.min_count,
                "train_fraction": self.corpus.train_fraction,
                "seed": self.corpus.seed,
            },
            "partition": self.partition.to_dict(),
            "model": {
                "embed_dim": self.model.embed_dim,
                "n_blocks": self.model.n_blocks,
                "hidden_dim": self.model.hidden_dim,
                "n_classes": self.model.n_classes,
                "seed": self.model.seed,
            },
            "scheme": self.scheme.to_dict(),
            "federation": fed,
            "workers": self.workers,
            "output_dir": self.output_dir,
        }
