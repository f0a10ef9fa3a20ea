"""Built-in statistics for hierarchical bootstrap intervals.

Each statistic is a pair: an encoder turning JSON records into an item array,
and a function of the pooled item array. Names:

``mean:<field>``
    Pooled mean of a numeric record field.
``classify:{median_f1,mean_f1,top1,top2,auroc}`` and ``classify:{precision,recall,f1}:<class>``
    Records carry ``truth`` (class name) and either ``scores`` (one per model
    class, taxonomy order) or ``pred`` (class name).
``detect:{precision,recall,f1,ap}``
    One record per ROI with ``tp``, ``fp``, ``fn`` and, for AP, ``scored``
    as a list of ``[score, is_true_positive]`` pairs.
``diag:mean_f1`` and ``diag:{precision,recall,f1}:<class>``
    One record per patient with ``truth`` and ``pred`` among ALL, AML, CML.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Sequence

import numpy as np

from .bootstrap import ClusteredSample
from .classification import (ScoreTable, binary_auroc, confusion_from_labels, predicted_labels,
                             prf_from_counts, topk_accuracy)
from .core import CellClassTree, SchemaError, default_taxonomy
from .detection import MatchResult, ap_from_flags, detection_prf
from .diagnosis import DIAGNOSES

CLASSIFY_SUMMARIES = ("median_f1", "mean_f1", "top1", "top2", "auroc")
DETECT_METRICS = ("precision", "recall", "f1", "ap")


@dataclass(frozen=True)
class BuiltinStatistic:
    name: str
    encode: Callable[[Sequence[Mapping]], np.ndarray]
    func: Callable[[np.ndarray], float]

    def sample(self, records: Sequence[Mapping], group_by: str) -> ClusteredSample:
        """Group records by ``group_by`` (sorted keys) into a ClusteredSample."""
        groups: dict[str, list[Mapping]] = {}
        for i, rec in enumerate(records):
            if group_by not in rec:
                raise SchemaError(f"record {i + 1} has no {group_by!r} field")
            groups.setdefault(str(rec[group_by]), []).append(rec)
        parts = [(g, self.encode(groups[g])) for g in sorted(groups)]
        items = np.concatenate([p for _, p in parts]) if parts else np.zeros(0)
        sizes = np.array([len(p) for _, p in parts], dtype=np.int64)
        func = self.func
        return ClusteredSample(items, sizes, np.array([g for g, _ in parts], dtype=object),
                               lambda s: func(s.items))


# ------------------------------------------------------------ classification

def classify_items(records: Sequence[Mapping], taxonomy: CellClassTree | None = None) -> np.ndarray:
    """Rows ``[truth index, score_0, ..., score_{K-1}]``."""
    taxonomy = taxonomy or default_taxonomy()
    K = len(taxonomy.model_classes)
    out = np.zeros((len(records), K + 1))
    for i, rec in enumerate(records):
        try:
            out[i, 0] = taxonomy.index(taxonomy.to_model_class(rec["truth"]))
            if "scores" in rec:
                s = np.asarray(rec["scores"], dtype=float)
                if s.shape != (K,):
                    raise ValueError(f"expected {K} scores, got {s.size}")
                out[i, 1:] = s
            else:
                out[i, 1 + taxonomy.index(taxonomy.to_model_class(rec["pred"]))] = 1.0
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"classification record {i + 1}: {exc}") from exc
    return out


def table_items(table: ScoreTable) -> np.ndarray:
    return np.column_stack([table.truth.astype(float), table.scores])


def _table(items: np.ndarray, classes: tuple[str, ...]) -> ScoreTable:
    return ScoreTable(items[:, 1:], items[:, 0].astype(int), classes)


def classify_vector(items: np.ndarray, classes: tuple[str, ...]) -> np.ndarray:
    """Summary metrics then per-class precision, recall, F1 (see ``classify_names``)."""
    table = _table(items, classes)
    K = len(classes)
    cm = confusion_from_labels(table.truth, predicted_labels(table.scores), K)
    p, r, f1 = prf_from_counts(cm)
    aucs = [binary_auroc(table.scores[:, k], table.truth == k) for k in range(K)]
    finite = [a for a in aucs if np.isfinite(a)]
    summary = [float(np.median(f1)), float(f1.mean()), topk_accuracy(table, 1),
               topk_accuracy(table, min(2, K)), float(np.mean(finite)) if finite else float("nan")]
    return np.concatenate([summary, np.column_stack([p, r, f1]).ravel()])


def classify_names(classes: Sequence[str]) -> list[str]:
    return [*CLASSIFY_SUMMARIES, *(f"{m}:{c}" for c in classes for m in ("precision", "recall", "f1"))]


def _classify_stat(metric: str, taxonomy: CellClassTree) -> Callable[[np.ndarray], float]:
    classes = taxonomy.model_classes
    names = classify_names(classes)
    if ":" in metric:
        kind, cls = metric.split(":", 1)
        metric = f"{kind}:{taxonomy.model_class(cls)}"
    if metric not in names:
        raise KeyError(metric)
    j = names.index(metric)
    if j < len(CLASSIFY_SUMMARIES):
        return lambda items: float(classify_vector(items, classes)[j])
    k, m = divmod(j - len(CLASSIFY_SUMMARIES), 3)

    def per_class(items: np.ndarray) -> float:
        truth = items[:, 0].astype(int)
        cm = confusion_from_labels(truth, predicted_labels(items[:, 1:]), len(classes))
        return float(prf_from_counts(cm)[m][k])

    return per_class


# ------------------------------------------------------------------ detection

def detect_items(records: Sequence[Mapping]) -> np.ndarray:
    """Object array of ``(tp, fp, fn, scores, flags)`` per ROI record."""
    out = np.empty(len(records), dtype=object)
    for i, rec in enumerate(records):
        try:
            scored = rec.get("scored", [])
            scores = np.array([float(s) for s, _ in scored])
            flags = np.array([bool(t) for _, t in scored], dtype=bool)
            out[i] = (int(rec["tp"]), int(rec["fp"]), int(rec["fn"]), scores, flags)
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"detection record {i + 1}: {exc}") from exc
    return out


def detect_vector(items: np.ndarray) -> np.ndarray:
    tp = sum(it[0] for it in items)
    fp = sum(it[1] for it in items)
    fn = sum(it[2] for it in items)
    p, r, f1 = detection_prf(MatchResult(tp, fp, fn))
    if tp + fn == 0:
        ap = float("nan")
    else:
        scores = np.concatenate([it[3] for it in items]) if len(items) else np.zeros(0)
        flags = np.concatenate([it[4] for it in items]) if len(items) else np.zeros(0, dtype=bool)
        ap = ap_from_flags(scores, flags, tp + fn)
    return np.array([p, r, f1, ap])


# ------------------------------------------------------------------ diagnosis

def diag_items(records: Sequence[Mapping]) -> np.ndarray:
    out = np.zeros((len(records), 2))
    for i, rec in enumerate(records):
        try:
            out[i] = (DIAGNOSES.index(rec["truth"]), DIAGNOSES.index(rec["pred"]))
        except (KeyError, ValueError) as exc:
            raise SchemaError(f"diagnosis record {i + 1}: truth and pred must be one of ALL, AML, CML") from exc
    return out


def diag_names() -> list[str]:
    return ["mean_f1", *(f"{m}:{c}" for c in DIAGNOSES for m in ("precision", "recall", "f1"))]


def diag_vector(items: np.ndarray) -> np.ndarray:
    """Mean F1, then per-class precision, recall, F1 (see ``diag_names``)."""
    cm = confusion_from_labels(items[:, 0].astype(int), items[:, 1].astype(int), len(DIAGNOSES))
    p, r, f1 = prf_from_counts(cm)
    return np.concatenate([[f1.mean()], np.column_stack([p, r, f1]).ravel()])


# ------------------------------------------------------------------- registry

def _mean_encoder(fld: str) -> Callable[[Sequence[Mapping]], np.ndarray]:
    def encode(records: Sequence[Mapping]) -> np.ndarray:
        try:
            return np.array([float(r[fld]) for r in records])
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"field {fld!r} missing or not numeric: {exc}") from exc
    return encode


def resolve_statistic(name: str, taxonomy: CellClassTree | None = None) -> BuiltinStatistic:
    """Look up a built-in statistic by name; unknown names raise KeyError."""
    taxonomy = taxonomy or default_taxonomy()
    family, _, rest = name.partition(":")
    if family == "mean" and rest:
        return BuiltinStatistic(name, _mean_encoder(rest), lambda items: float(np.mean(items)))
    if family == "classify" and rest:
        try:
            func = _classify_stat(rest, taxonomy)
        except KeyError:
            raise KeyError(f"unknown classification statistic {name!r}") from None
        return BuiltinStatistic(name, lambda recs: classify_items(recs, taxonomy), func)
    if family == "detect" and rest in DETECT_METRICS:
        j = DETECT_METRICS.index(rest)
        return BuiltinStatistic(name, detect_items, lambda items: float(detect_vector(items)[j]))
    if family == "diag" and rest in diag_names():
        j = diag_names().index(rest)
        return BuiltinStatistic(name, diag_items, lambda items: float(diag_vector(items)[j]))
    raise KeyError(f"unknown statistic {name!r}; see `marrowbench bootstrap-ci --help`")


STATISTIC_HELP = ("mean:<field>, classify:{median_f1,mean_f1,top1,top2,auroc}, "
                  "classify:{precision,recall,f1}:<class>, detect:{precision,recall,f1,ap}, "
                  "diag:mean_f1, diag:{precision,recall,f1}:{ALL,AML,CML}")
