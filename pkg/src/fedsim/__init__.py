"""Deterministic federated-learning simulator for code vulnerability triage.

Subpackages are plain modules: :mod:`fedsim.corpus` (JSONL ingestion,
lexing, vocabulary, splits), :mod:`fedsim.partition` (IID / Dirichlet
client shards), :mod:`fedsim.refmodel` (the numpy reference classifier
with exact gradients), :mod:`fedsim.peft` (parameter-efficient tuning
schemes), :mod:`fedsim.fedcore` (aggregation algorithms and the round
loop), :mod:`fedsim.metrics` (evaluation and comparison tables),
:mod:`fedsim.synth` (synthetic corpus generator) and :mod:`fedsim.config`
(experiment configuration).
"""

from .errors import (
    ConfigError,
    DegenerateInputError,
    DimensionError,
    FedsimError,
    InputError,
    PartitionError,
    RecordError,
    SchemaError,
    StateError,
)

__all__ = [
    "ConfigError",
    "DegenerateInputError",
    "DimensionError",
    "FedsimError",
    "InputError",
    "PartitionError",
    "RecordError",
    "SchemaError",
    "StateError",
    "__version__",
]

__version__ = "0.1.0"
