"""Multiclass cell-classification metrics."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.stats import rankdata

from .core import CellClassTree, SchemaError, default_taxonomy


@dataclass(frozen=True)
class ScoreTable:
    """Per-sample class scores; column order follows ``classes``."""

    scores: np.ndarray
    truth: np.ndarray
    classes: tuple[str, ...]
    ids: tuple[str, ...] | None = None

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=float).reshape(-1, len(self.classes))
        t = np.asarray(self.truth, dtype=int).reshape(-1)
        if s.shape[0] != t.shape[0]:
            raise ValueError("scores and truth must have the same number of rows")
        if not np.all(np.isfinite(s)):
            raise ValueError("scores must be finite")
        if t.size and (t.min() < 0 or t.max() >= len(self.classes)):
            raise ValueError("truth index out of range")
        object.__setattr__(self, "scores", s)
        object.__setattr__(self, "truth", t)

    def __len__(self) -> int:
        return self.truth.size

    @property
    def n_classes(self) -> int:
        return len(self.classes)

    def subset(self, rows: np.ndarray) -> "ScoreTable":
        ids = None if self.ids is None else tuple(self.ids[i] for i in rows)
        return ScoreTable(self.scores[rows], self.truth[rows], self.classes, ids)


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = truth, columns = prediction
    classes: tuple[str, ...]

    def reorder(self, order: Sequence[str]) -> "ConfusionMatrix":
        """Same matrix under a different class display order."""
        idx = [self.classes.index(c) for c in order]
        if sorted(idx) != list(range(len(self.classes))):
            raise ValueError("display order must be a permutation of the classes")
        return ConfusionMatrix(self.counts[np.ix_(idx, idx)], tuple(order))

    @property
    def total(self) -> int:
        return int(self.counts.sum())


def predicted_labels(scores: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index, i.e. ties go to the lowest class index
    return np.argmax(scores, axis=1) if len(scores) else np.zeros(0, dtype=int)


def confusion_from_labels(truth: np.ndarray, pred: np.ndarray, n_classes: int) -> np.ndarray:
    flat = np.asarray(truth, dtype=int) * n_classes + np.asarray(pred, dtype=int)
    return np.bincount(flat, minlength=n_classes * n_classes).reshape(n_classes, n_classes)


def confusion(table: ScoreTable) -> ConfusionMatrix:
    pred = predicted_labels(table.scores)
    return ConfusionMatrix(confusion_from_labels(table.truth, pred, table.n_classes), table.classes)


def prf_from_counts(counts: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """One-vs-rest precision, recall, F1 per class; every 0/0 is taken as 0."""
    counts = np.asarray(counts, dtype=float)
    tp = np.diag(counts)
    predicted = counts.sum(axis=0)
    support = counts.sum(axis=1)
    with np.errstate(divide="ignore", invalid="ignore"):
        precision = np.where(predicted > 0, tp / predicted, 0.0)
        recall = np.where(support > 0, tp / support, 0.0)
        denom = precision + recall
        f1 = np.where(denom > 0, 2 * precision * recall / denom, 0.0)
    return precision, recall, f1


def per_class_prf(cm: ConfusionMatrix) -> dict[str, tuple[float, float, float]]:
    p, r, f = prf_from_counts(cm.counts)
    return {c: (float(p[i]), float(r[i]), float(f[i])) for i, c in enumerate(cm.classes)}


def f1_aggregates(f1s: Sequence[float]) -> tuple[float, float]:
    """(median, mean) of per-class F1 scores."""
    arr = np.asarray(f1s, dtype=float)
    if arr.size == 0:
        raise ValueError("f1_aggregates needs at least one value")
    return float(np.median(arr)), float(arr.mean())


def topk_accuracy(table: ScoreTable, k: int) -> float:
    """Micro-averaged top-k accuracy.

    Class j outranks the true class t when its score is higher, or equal with
    j < t; the truth counts as a hit when fewer than k classes outrank it.
    """
    if not 1 <= k <= table.n_classes:
        raise ValueError(f"k must be in [1, {table.n_classes}], got {k}")
    if len(table) == 0:
        return float("nan")
    s = table.scores
    true_score = s[np.arange(len(table)), table.truth][:, None]
    lower_index = np.arange(table.n_classes)[None, :] < table.truth[:, None]
    outrank = (s > true_score) | ((s == true_score) & lower_index)
    return float(np.mean(outrank.sum(axis=1) < k))


def binary_auroc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Rank-based (Mann-Whitney) AUROC with ties counted one half."""
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def per_class_auroc(table: ScoreTable) -> np.ndarray:
    return np.array([binary_auroc(table.scores[:, k], table.truth == k) for k in range(table.n_classes)])


def macro_ovr_auroc(table: ScoreTable) -> float:
    """Unweighted mean of one-vs-rest AUROCs over classes with both outcomes present."""
    aucs = per_class_auroc(table)
    ok = np.isfinite(aucs)
    if not ok.any():
        raise ValueError("no class has both positive and negative samples")
    return float(aucs[ok].mean())


def classification_report(table: ScoreTable) -> dict:
    cm = confusion(table)
    p, r, f = prf_from_counts(cm.counts)
    median_f1, mean_f1 = f1_aggregates(f)
    try:
        auroc = macro_ovr_auroc(table)
    except ValueError:
        auroc = None
    return {
        "n": len(table),
        "median_f1": median_f1,
        "mean_f1": mean_f1,
        "top1": topk_accuracy(table, 1),
        "top2": topk_accuracy(table, min(2, table.n_classes)),
        "auroc_macro_ovr": auroc,
        "per_class": [
            {"class": c, "precision": float(p[i]), "recall": float(r[i]), "f1": float(f[i]),
             "support": int(cm.counts[i].sum())}
            for i, c in enumerate(cm.classes)
        ],
        "confusion": cm.counts.tolist(),
        "classes": list(cm.classes),
    }


# ------------------------------------------------------------------ file I/O

def read_predictions_csv(fh, taxonomy: CellClassTree | None = None) -> ScoreTable:
    """predictions.csv: cell_id,truth,<one score column per model class in taxonomy order>."""
    taxonomy = taxonomy or default_taxonomy()
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("predictions.csv is empty") from None
    if header[:2] != ["cell_id", "truth"]:
        raise SchemaError("predictions.csv header must start with cell_id,truth")
    classes = tuple(taxonomy.model_class(c) for c in header[2:])
    if classes != taxonomy.model_classes:
        raise SchemaError("predictions.csv score columns must follow the taxonomy order")
    ids, truth, rows = [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"predictions.csv line {lineno}: expected {len(header)} fields")
        try:
            ids.append(row[0])
            truth.append(taxonomy.index(taxonomy.to_model_class(row[1])))
            rows.append([float(v) for v in row[2:]])
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"predictions.csv line {lineno}: {exc}") from exc
    scores = np.array(rows, dtype=float).reshape(-1, len(classes))
    return ScoreTable(scores, np.array(truth, dtype=int), classes, tuple(ids))


def write_predictions_csv(table: ScoreTable, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["cell_id", "truth", *table.classes])
    ids = table.ids or tuple(str(i) for i in range(len(table)))
    for i in range(len(table)):
        w.writerow([ids[i], table.classes[table.truth[i]], *(repr(float(v)) for v in table.scores[i])])


def write_confusion_csv(cm: ConfusionMatrix, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["truth\\predicted", *cm.classes])
    for c, row in zip(cm.classes, cm.counts.tolist()):
        w.writerow([c, *row])
