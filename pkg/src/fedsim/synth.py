"""Seeded synthetic corpus generator for desk-scale experiments.

Emits C-like functions as JSONL records.  Vulnerable samples embed one call
to a category-specific "risky" API drawn from a per-category pool of variant
spellings; secure samples use the matching "checked" API family instead.
Each variant token is rare by construction, so a single client sees only a
slice of the trigger vocabulary while the pooled corpus covers it -- the
texture that makes collaboration pay off.  Random throwaway identifiers add
out-of-vocabulary noise.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError

# pseudo CWE tags for the synthetic categories (labels only; the generator
# fabricates the code)
_CWE_TAGS = [
    "CWE-120", "CWE-401", "CWE-125", "CWE-787",
    "CWE-287", "CWE-78", "CWE-20", "CWE-416",
    "CWE-190", "CWE-476", "CWE-22", "CWE-119",
]

_FAMILIES = [
    "copy", "alloc", "read", "write",
    "auth", "exec", "parse", "release",
    "add", "deref", "path", "move",
]

_OPS = ["+", "-", "*"]


def _ident(rng: np.random.Generator) -> str:
    """Throwaway local name; effectively unique across the corpus, so these
    land outside any frequency-capped vocabulary and decode as UNK."""
    return f"v{int(rng.integers(0, 10 ** 6))}"


@dataclass(frozen=True)
class SyntheticSpec:
    n_samples: int = 2000
    vulnerable_fraction: float = 0.5
    n_categories: int = 8
    variants_per_category: int = 16
    min_statements: int = 10
    max_statements: int = 20
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 2:
            raise ConfigError(f"n_samples must be >= 2, got {self.n_samples}")
        if not 0.0 < self.vulnerable_fraction < 1.0:
            raise ConfigError(
                f"vulnerable_fraction must be in (0, 1), got {self.vulnerable_fraction}"
            )
        if not 1 <= self.n_categories <= len(_CWE_TAGS):
            raise ConfigError(
                f"n_categories must be in [1, {len(_CWE_TAGS)}], got {self.n_categories}"
            )
        if self.variants_per_category < 1:
            raise ConfigError(
                f"variants_per_category must be >= 1, got {self.variants_per_category}"
            )
        if not 1 <= self.min_statements <= self.max_statements:
            raise ConfigError("need 1 <= min_statements <= max_statements")

    def to_dict(self) -> dict:
        return {
            "n_samples": self.n_samples,
            "vulnerable_fraction": self.vulnerable_fraction,
            "n_categories": self.n_categories,
            "variants_per_category": self.variants_per_category,
            "min_statements": self.min_statements,
            "max_statements": self.max_statements,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticSpec":
        return cls(**d)


def _statement(rng: np.random.Generator) -> str:
    """Six-token filler assignment; length kept uniform so sequence length
    (and hence the pooled-mean scale) does not vary with the filler mix."""
    a, b, c = _ident(rng), _ident(rng), _ident(rng)
    op = rng.choice(_OPS)
    return f"{a} = {b} {op} {c} ;"


def _call(family: str, variant: int, risky: bool, rng: np.random.Generator) -> str:
    suffix = "impl" if risky else "chk"
    fn = f"{family}_{suffix}_{variant}"
    a, b = _ident(rng), _ident(rng)
    return f"{a} = {fn} ( {fn} ( {b} ) , {a} ) ;"


def generate_records(spec: SyntheticSpec) -> list[dict]:
    """Deterministic list of {code,label,cwe,project} records."""
    rng = np.random.default_rng(
        np.random.SeedSequence(spec.seed, spawn_key=(51,))
    )
    records = []
    n_vuln = int(round(spec.n_samples * spec.vulnerable_fraction))
    labels = np.zeros(spec.n_samples, dtype=np.int64)
    labels[:n_vuln] = 1
    rng.shuffle(labels)
    for k in range(spec.n_samples):
        label = int(labels[k])
        cat = int(rng.integers(0, spec.n_categories))
        variant = int(rng.integers(0, spec.variants_per_category))
        family = _FAMILIES[cat]
        n_stmts = int(rng.integers(spec.min_statements, spec.max_statements + 1))
        stmts = [_statement(rng) for _ in range(n_stmts)]
        call_pos = int(rng.integers(0, n_stmts + 1))
        stmts.insert(call_pos, _call(family, variant, risky=label == 1, rng=rng))
        body = " ".join(stmts)
        code = f"void fn_{k} ( ) {{ {body} }}"
        rec = {
            "code": code,
            "label": label,
            "project": f"proj{k % 5}",
        }
        if label == 1:
            rec["cwe"] = _CWE_TAGS[cat]
        records.append(rec)
    return records


def write_corpus_jsonl(spec: SyntheticSpec, path) -> None:
    """Write the generated corpus; byte-identical for identical specs."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        for rec in generate_records(spec):
            fh.write(json.dumps(rec, sort_keys=True) + "\n")
