"""Evaluation reports, per-category detection rates and comparison tables.

Binary convention throughout: label 1 (vulnerable) is the positive class.
Detection rate for a vulnerable category is the fraction of its samples
predicted vulnerable; for the ``secure`` category it is the fraction
predicted secure.  Precision is defined as 0 when nothing is predicted
positive, and F1 as 0 when precision + recall is 0.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .corpus import SECURE_CATEGORY
from .errors import InputError


@dataclass(frozen=True)
class CategoryStat:
    n_samples: int
    detection_rate: float


@dataclass
class EvaluationReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_category: dict[str, CategoryStat]
    confusion: dict[str, int]

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "confusion": dict(self.confusion),
            "per_category": {
                c: {"n_samples": st.n_samples, "detection_rate": st.detection_rate}
                for c, st in self.per_category.items()
            },
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvaluationReport":
        return cls(
            accuracy=float(d["accuracy"]),
            precision=float(d["precision"]),
            recall=float(d["recall"]),
            f1=float(d["f1"]),
            confusion={k: int(v) for k, v in d["confusion"].items()},
            per_category={
                c: CategoryStat(int(st["n_samples"]), float(st["detection_rate"]))
                for c, st in d["per_category"].items()
            },
        )


def evaluate(predictions, labels, categories) -> EvaluationReport:
    """Score binary predictions against labels with per-category rates."""
    preds = np.asarray(predictions, dtype=np.int64)
    labs = np.asarray(labels, dtype=np.int64)
    cats = list(categories)
    if preds.shape != labs.shape or preds.ndim != 1 or len(cats) != preds.shape[0]:
        raise InputError("predictions, labels and categories must align")
    if preds.size == 0:
        raise InputError("cannot evaluate an empty set")
    if not np.isin(preds, (0, 1)).all() or not np.isin(labs, (0, 1)).all():
        raise InputError("predictions and labels must be binary")

    tp = int(((preds == 1) & (labs == 1)).sum())
    fp = int(((preds == 1) & (labs == 0)).sum())
    tn = int(((preds == 0) & (labs == 0)).sum())
    fn = int(((preds == 0) & (labs == 1)).sum())

    accuracy = (tp + tn) / preds.size
    precision = tp / (tp + fp) if (tp + fp) > 0 else 0.0
    recall = tp / (tp + fn) if (tp + fn) > 0 else 0.0
    f1 = (
        2.0 * precision * recall / (precision + recall)
        if (precision + recall) > 0
        else 0.0
    )

    per_cat: dict[str, CategoryStat] = {}
    for cat in sorted(set(cats)):
        idx = np.array([c == cat for c in cats])
        n = int(idx.sum())
        if cat == SECURE_CATEGORY:
            rate = float((preds[idx] == 0).mean())
        else:
            rate = float((preds[idx] == 1).mean())
        per_cat[cat] = CategoryStat(n_samples=n, detection_rate=rate)

    return EvaluationReport(
        accuracy=accuracy,
        precision=precision,
        recall=recall,
        f1=f1,
        per_category=per_cat,
        confusion={"tp": tp, "fp": fp, "tn": tn, "fn": fn},
    )


@dataclass(frozen=True)
class ComparisonRow:
    category: str
    independent_rate: float
    federated_rate: float

    @property
    def improvement(self) -> float:
        return self.federated_rate - self.independent_rate


@dataclass
class ComparisonTable:
    """Per-category detection rates side by side, ascending by improvement."""

    rows: list[ComparisonRow]

    def __iter__(self):
        return iter(self.rows)

    def row(self, category: str) -> ComparisonRow:
        for r in self.rows:
            if r.category == category:
                return r
        raise InputError(f"category {category!r} not in comparison table")


def compare(independent: EvaluationReport, federated: EvaluationReport) -> ComparisonTable:
    """Build the improvement table ``federated - independent`` per category."""
    left = set(independent.per_category)
    right = set(federated.per_category)
    if left != right:
        raise InputError(
            f"category universes differ: {sorted(left ^ right)}"
        )
    rows = [
        ComparisonRow(
            category=c,
            independent_rate=independent.per_category[c].detection_rate,
            federated_rate=federated.per_category[c].detection_rate,
        )
        for c in sorted(left)
    ]
    rows.sort(key=lambda r: (r.improvement, r.category))
    return ComparisonTable(rows=rows)


def independent_baseline(client_data, config, init_params, test_data) -> EvaluationReport:
    """Train a fresh model on one client's shard alone and evaluate it.

    Matched compute: ``rounds * local_epochs`` epochs of the same seeded
    minibatch gradient descent used for federated local training, then an
    evaluation on the shared test set.
    """
    from . import fedcore  # local import; fedcore depends on this module

    return fedcore.train_isolated(client_data, config, init_params, test_data)


# --- file output ------------------------------------------------------------
#
# CSV column orders are fixed: per-category report rows are
# (category, n_samples, detection_rate) sorted by category; comparison rows
# are (category, independent_rate, federated_rate, improvement) in table
# order (ascending improvement).


def write_report_json(report: EvaluationReport, path) -> None:
    Path(path).write_text(
        json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n",
        encoding="utf-8",
    )


def load_report_json(path) -> EvaluationReport:
    return EvaluationReport.from_dict(
        json.loads(Path(path).read_text(encoding="utf-8"))
    )


def write_report_csv(report: EvaluationReport, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "n_samples", "detection_rate"])
        for cat in sorted(report.per_category):
            st = report.per_category[cat]
            w.writerow([cat, st.n_samples, f"{st.detection_rate:.6f}"])


def write_comparison_csv(table: ComparisonTable, path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["category", "independent_rate", "federated_rate", "improvement"])
        for r in table.rows:
            w.writerow(
                [
                    r.category,
                    f"{r.independent_rate:.6f}",
                    f"{r.federated_rate:.6f}",
                    f"{r.improvement:+.6f}",
                ]
            )


def format_comparison_text(table: ComparisonTable, width: int = 4) -> str:
    """Render the comparison as blocks of three labeled rows per category
    group (independent / federated / improvement), a few categories wide."""
    lines = []
    rows = table.rows
    for start in range(0, len(rows), width):
        chunk = rows[start:start + width]
        header = ["category   "] + [r.category[:14].rjust(14) for r in chunk]
        ind = ["independent"] + [f"{r.independent_rate:14.2%}" for r in chunk]
        fed = ["federated  "] + [f"{r.federated_rate:14.2%}" for r in chunk]
        imp = ["improvement"] + [f"{r.improvement:+14.2%}" for r in chunk]
        for parts in (header, ind, fed, imp):
            lines.append("  ".join(parts))
        lines.append("")
    return "\n".join(lines)
