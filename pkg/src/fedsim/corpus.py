"""Corpus ingestion: JSONL loading, lexical tokenization, vocabulary,
category cleaning and the stratified train/test split.

A sample is one code record with a binary label (1 = vulnerable, 0 = secure).
Vulnerable samples carry a CWE category tag; vulnerable records without one
are filed under the distinct category ``CWE-None``.  Secure samples form the
single category ``secure``.
"""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, InputError, RecordError, SchemaError

PAD_ID = 0
UNK_ID = 1
PAD_TOKEN = "<pad>"
UNK_TOKEN = "<unk>"

SECURE_CATEGORY = "secure"
CWE_NONE = "CWE-None"

RAW_FORMS = ("source-code", "code-gadget", "sevc")

MANIFEST_VERSION = 1

# Lexical grammar, ordered so that alternation implements longest-match:
# comments first (dropped later), then string/char literals as single tokens,
# identifiers, numeric literals, multi-character operators before their
# prefixes, finally single punctuation.  Unmatched bytes are dropped like
# whitespace.
_TOKEN_RE = re.compile(
    r"""
      (?P<comment>//[^\n]*|/\*.*?\*/)
    | "(?:\\.|[^"\\])*"
    | '(?:\\.|[^'\\])*'
    | [A-Za-z_][A-Za-z0-9_]*
    | 0[xX][0-9a-fA-F]+[uUlL]*
    | (?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?[fFuUlL]*
    | <<=|>>=|\.\.\.
    | ->|\+\+|--|<<|>>|<=|>=|==|!=|&&|\|\||\+=|-=|\*=|/=|%=|&=|\|=|\^=|::
    | [{}()\[\];,.:?~!%^&*+=<>|/\\#-]
    """,
    re.VERBOSE | re.DOTALL,
)


def tokenize(code: str) -> list[str]:
    """Split C-like source into lexical tokens.

    Whitespace and comments are dropped; string and character literals stay
    single tokens; multi-character operators bind longest-match.
    """
    out = []
    for m in _TOKEN_RE.finditer(code):
        if m.lastgroup == "comment":
            continue
        out.append(m.group(0))
    return out


@dataclass(frozen=True)
class DatasetSample:
    sample_id: str
    tokens: tuple[str, ...]
    raw_form: str
    label: int
    cwe: str | None = None
    project: str | None = None

    @property
    def category(self) -> str:
        if self.label == 0:
            return SECURE_CATEGORY
        return self.cwe if self.cwe is not None else CWE_NONE


@dataclass
class Vocab:
    """Frequency-ranked token vocabulary with reserved PAD=0 and UNK=1."""

    id_to_token: list[str]
    max_size: int
    token_to_id: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.token_to_id = {t: i for i, t in enumerate(self.id_to_token)}

    def __len__(self) -> int:
        return len(self.id_to_token)

    def encode(self, tokens, max_len: int | None = None) -> list[int]:
        """Map tokens to ids (unknown -> UNK), truncating to the first
        ``max_len`` tokens when given."""
        ids = [self.token_to_id.get(t, UNK_ID) for t in tokens]
        if max_len is not None:
            ids = ids[:max_len]
        return ids

    def decode(self, ids) -> list[str]:
        return [self.id_to_token[i] for i in ids]

    def to_dict(self) -> dict:
        return {"max_size": self.max_size, "tokens": list(self.id_to_token)}

    @classmethod
    def from_dict(cls, d: dict) -> "Vocab":
        return cls(id_to_token=list(d["tokens"]), max_size=int(d["max_size"]))


@dataclass
class Dataset:
    samples: list[DatasetSample]
    vocab: Vocab | None = None

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def label_histogram(self) -> dict[str, int]:
        """Per-category sample counts (key ``secure`` plus one per CWE)."""
        hist: Counter = Counter(s.category for s in self.samples)
        return dict(sorted(hist.items()))

    def categories(self) -> list[str]:
        return sorted(self.label_histogram)


def _parse_label(value, path, line) -> int:
    if isinstance(value, bool):
        raise SchemaError(f"unknown label value {value!r}", path, line)
    if isinstance(value, int) and value in (0, 1):
        return value
    if isinstance(value, str) and value in ("0", "1"):
        return int(value)
    raise SchemaError(f"unknown label value {value!r}", path, line)


def load_jsonl(path, form: str = "source-code") -> Dataset:
    """Load a JSONL corpus file into a Dataset.

    Each line is an object with fields ``code`` (string), ``label`` (0/1)
    and optional ``cwe`` / ``project`` strings.  Lines are kept in file
    order and every line must parse; malformed lines raise
    :class:`RecordError` with the offending line number, unknown label
    values raise :class:`SchemaError`.
    """
    if form not in RAW_FORMS:
        raise ConfigError(f"unknown raw form {form!r}, expected one of {RAW_FORMS}")
    path = Path(path)
    samples = []
    with path.open("r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                raise RecordError("blank line", path, lineno)
            try:
                rec = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise RecordError(f"invalid JSON ({exc.msg})", path, lineno) from exc
            if not isinstance(rec, dict):
                raise RecordError("record is not an object", path, lineno)
            if "code" not in rec or "label" not in rec:
                raise RecordError("missing required field 'code' or 'label'", path, lineno)
            code = rec["code"]
            if not isinstance(code, str):
                raise RecordError("field 'code' is not a string", path, lineno)
            label = _parse_label(rec["label"], path, lineno)
            tokens = tuple(tokenize(code))
            if not tokens:
                raise RecordError("code has no tokens", path, lineno)
            cwe = rec.get("cwe")
            if cwe in ("", SECURE_CATEGORY):
                cwe = None
            if cwe is not None and not isinstance(cwe, str):
                raise SchemaError(f"invalid cwe value {cwe!r}", path, lineno)
            if label == 0:
                if cwe is not None:
                    raise SchemaError(
                        f"secure sample carries cwe tag {cwe!r}", path, lineno
                    )
            else:
                cwe = cwe if cwe is not None else CWE_NONE
            project = rec.get("project")
            if project is not None and not isinstance(project, str):
                raise RecordError("field 'project' is not a string", path, lineno)
            samples.append(
                DatasetSample(
                    sample_id=f"s{lineno:06d}",
                    tokens=tokens,
                    raw_form=form,
                    label=label,
                    cwe=cwe,
                    project=project,
                )
            )
    return Dataset(samples=samples)


def build_vocab(dataset: Dataset, max_size: int) -> Vocab:
    """Frequency-ranked vocabulary over all dataset tokens.

    Ids start at 2 after PAD/UNK; ties in frequency break lexicographically.
    """
    if max_size < 2:
        raise ConfigError(f"vocab max_size must be >= 2, got {max_size}")
    counts: Counter = Counter()
    for s in dataset.samples:
        counts.update(s.tokens)
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    kept = [t for t, _ in ranked[: max_size - 2]]
    return Vocab(id_to_token=[PAD_TOKEN, UNK_TOKEN] + kept, max_size=max_size)


def clean_min_count(dataset: Dataset, min_count: int = 100) -> Dataset:
    """Drop vulnerable categories with fewer than ``min_count`` samples.

    Secure samples are always retained; a category with exactly
    ``min_count`` samples stays.
    """
    if min_count < 0:
        raise ConfigError(f"min_count must be >= 0, got {min_count}")
    if min_count == 0:
        return Dataset(samples=list(dataset.samples), vocab=dataset.vocab)
    counts: Counter = Counter(
        s.category for s in dataset.samples if s.label == 1
    )
    kept = [
        s
        for s in dataset.samples
        if s.label == 0 or counts[s.category] >= min_count
    ]
    return Dataset(samples=kept, vocab=dataset.vocab)


def split_train_test(
    dataset: Dataset, train_fraction: float = 0.8, seed: int = 0
) -> tuple[Dataset, Dataset]:
    """Stratified split by category.

    Every category contributes floor(count * train_fraction) samples to the
    train side, chosen by a seeded shuffle within the category; the rest go
    to test.  Sample order within each side follows the original dataset
    order.
    """
    if not 0.0 < train_fraction < 1.0:
        raise ConfigError(
            f"train_fraction must be in (0, 1), got {train_fraction}"
        )
    by_cat: dict[str, list[int]] = {}
    for idx, s in enumerate(dataset.samples):
        by_cat.setdefault(s.category, []).append(idx)
    rng = np.random.default_rng(np.random.SeedSequence(seed, spawn_key=(11,)))
    train_idx: set[int] = set()
    for cat in sorted(by_cat):
        idxs = by_cat[cat]
        # epsilon guards against float dust on exact integer products
        n_train = int(math.floor(len(idxs) * train_fraction + 1e-9))
        order = rng.permutation(len(idxs))
        train_idx.update(idxs[i] for i in order[:n_train])
    train = [s for i, s in enumerate(dataset.samples) if i in train_idx]
    test = [s for i, s in enumerate(dataset.samples) if i not in train_idx]
    return (
        Dataset(samples=train, vocab=dataset.vocab),
        Dataset(samples=test, vocab=dataset.vocab),
    )


# --- prepared-dataset manifest -------------------------------------------
#
# The manifest is a single JSON document (version 1) with the vocabulary,
# the encoded train/test samples and the client shard assignment.  Writing
# is canonical (sorted keys, fixed separators, no timestamps) so a rerun on
# unchanged inputs is byte-identical.


def _encode_samples(samples, vocab: Vocab, max_len: int) -> list[dict]:
    out = []
    for s in samples:
        out.append(
            {
                "id": s.sample_id,
                "ids": vocab.encode(s.tokens, max_len),
                "label": s.label,
                "cwe": s.cwe,
                "form": s.raw_form,
                "project": s.project,
            }
        )
    return out


def write_manifest(
    path,
    *,
    form: str,
    vocab: Vocab,
    train: Dataset,
    test: Dataset,
    max_len: int,
    shards: list[dict],
    settings: dict,
) -> None:
    """Write the prepared-dataset manifest (JSON, canonical encoding)."""
    doc = {
        "version": MANIFEST_VERSION,
        "form": form,
        "max_len": max_len,
        "vocab": vocab.to_dict(),
        "train": _encode_samples(train.samples, vocab, max_len),
        "test": _encode_samples(test.samples, vocab, max_len),
        "shards": shards,
        "histograms": {
            "train": train.label_histogram,
            "test": test.label_histogram,
        },
        "settings": settings,
    }
    text = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    Path(path).write_text(text + "\n", encoding="utf-8")


@dataclass
class PreparedData:
    """In-memory view of a prepared-dataset manifest."""

    form: str
    max_len: int
    vocab: Vocab
    train: list[dict]
    test: list[dict]
    shards: list[dict]
    histograms: dict
    settings: dict


def load_manifest(path) -> PreparedData:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RecordError(f"invalid manifest JSON ({exc.msg})", path) from exc
    if doc.get("version") != MANIFEST_VERSION:
        raise SchemaError(
            f"unsupported manifest version {doc.get('version')!r}", path
        )
    return PreparedData(
        form=doc["form"],
        max_len=int(doc["max_len"]),
        vocab=Vocab.from_dict(doc["vocab"]),
        train=doc["train"],
        test=doc["test"],
        shards=doc["shards"],
        histograms=doc["histograms"],
        settings=doc["settings"],
    )


def sample_arrays(records: list[dict], max_len: int):
    """Stack encoded manifest records into (ids, labels, categories) arrays."""
    n = len(records)
    ids = np.zeros((n, max_len), dtype=np.int64)
    labels = np.zeros(n, dtype=np.int64)
    cats = []
    for i, rec in enumerate(records):
        row = rec["ids"]
        if len(row) > max_len:
            raise InputError(
                f"encoded sample {rec['id']} longer than max_len {max_len}"
            )
        ids[i, : len(row)] = row
        labels[i] = rec["label"]
        cats.append(
            SECURE_CATEGORY
            if rec["label"] == 0
            else (rec["cwe"] if rec["cwe"] is not None else CWE_NONE)
        )
    return ids, labels, cats
