"""ALL/AML/CML diagnosis from lab values and differential cell counts (DCCs).

Feature construction, repeated subtype-stratified holdout grid search over
GBDT hyperparameters, and per-class F1 evaluation.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Mapping, Sequence

import numpy as np

from .classification import confusion_from_labels, prf_from_counts
from .core import LAB_CODES, CellClassTree, PatientRecord, SchemaError, default_taxonomy, nucleated_classes
from .gbdt import GBDTModel, HyperParams, train_gbdt

DIAGNOSES = ("ALL", "AML", "CML")
PREDICTED_PREFIX = "dcc_predicted:"
CLINICAL_PREFIX = "dcc_clinical:"
FEATURE_SETS = ("lab", "dcc-clinical", "dcc-predicted", "lab+dcc", "lab+dcc-clinical")
DCC_SUM_TOL = 1e-9


@dataclass(frozen=True)
class FeatureMatrix:
    """Patients by named features; NaN marks a missing value."""

    values: np.ndarray
    columns: tuple[str, ...]
    patient_ids: tuple[str, ...]
    labels: tuple[str, ...]
    subtypes: tuple[str | None, ...]

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float).reshape(len(self.patient_ids), len(self.columns))
        object.__setattr__(self, "values", v)
        if len(set(self.columns)) != len(self.columns):
            dup = [c for c, n in Counter(self.columns).items() if n > 1]
            raise ValueError(f"duplicate feature column(s): {', '.join(dup)}")
        if not (len(self.labels) == len(self.subtypes) == len(self.patient_ids)):
            raise ValueError("labels, subtypes and patient ids must have one entry per row")
        bad = sorted(set(self.labels) - set(DIAGNOSES))
        if bad:
            raise ValueError(f"unknown diagnosis label(s): {', '.join(bad)}")
        if np.isinf(v).any():
            raise ValueError("feature values must be finite or missing")

    def __len__(self) -> int:
        return len(self.patient_ids)

    @property
    def y(self) -> np.ndarray:
        return np.array([DIAGNOSES.index(lab) for lab in self.labels], dtype=np.int64)

    @property
    def strata(self) -> tuple[str, ...]:
        return tuple(s or lab for s, lab in zip(self.subtypes, self.labels))

    def subset(self, rows: Sequence[int]) -> "FeatureMatrix":
        rows = list(rows)
        return FeatureMatrix(self.values[rows], self.columns, tuple(self.patient_ids[i] for i in rows),
                             tuple(self.labels[i] for i in rows), tuple(self.subtypes[i] for i in rows))

    def select(self, columns: Sequence[str]) -> "FeatureMatrix":
        missing = [c for c in columns if c not in self.columns]
        if missing:
            raise SchemaError(f"feature column {missing[0]!r} not present")
        idx = [self.columns.index(c) for c in columns]
        return FeatureMatrix(self.values[:, idx], tuple(columns), self.patient_ids, self.labels, self.subtypes)

    def hstack(self, other: "FeatureMatrix") -> "FeatureMatrix":
        if other.patient_ids != self.patient_ids:
            raise ValueError("feature blocks must share the patient order")
        return FeatureMatrix(np.hstack([self.values, other.values]), self.columns + other.columns,
                             self.patient_ids, self.labels, self.subtypes)

    def dcc_problems(self, prefix: str) -> list[str]:
        """Rows whose non-missing DCC block (columns with ``prefix``) does not sum to 1."""
        idx = [j for j, c in enumerate(self.columns) if c.startswith(prefix)]
        if not idx:
            return []
        block = self.values[:, idx]
        out = []
        for i, row in enumerate(block):
            if np.isnan(row).all():
                continue
            if abs(np.nansum(row) - 1.0) > DCC_SUM_TOL:
                out.append(f"{self.patient_ids[i]}: {prefix} fractions sum to {np.nansum(row):.12g}")
        return out


# ------------------------------------------------------------------- features

def eligible_classes(nucleated_only: bool = False, taxonomy: CellClassTree | None = None) -> tuple[str, ...]:
    if nucleated_only:
        return nucleated_classes()
    return (taxonomy or default_taxonomy()).model_classes


def build_dcc_features(cell_classes: Iterable[str], eligible: Sequence[str]) -> np.ndarray:
    """Fractions of each eligible class among a patient's eligible cells.

    Cells of other classes are ignored entirely. Without any eligible cell the
    row is all-missing (NaN) rather than zeros.
    """
    pos = {c: i for i, c in enumerate(eligible)}
    counts = np.zeros(len(eligible))
    for c in cell_classes:
        i = pos.get(c)
        if i is not None:
            counts[i] += 1
    total = counts.sum()
    if total == 0:
        return np.full(len(eligible), np.nan)
    return counts / total


def clinical_dcc_row(dcc: Mapping[str, float] | None, eligible: Sequence[str],
                     taxonomy: CellClassTree | None = None) -> np.ndarray:
    """Clinical DCC percentages mapped to model classes and renormalised over ``eligible``."""
    taxonomy = taxonomy or default_taxonomy()
    if not dcc:
        return np.full(len(eligible), np.nan)
    pos = {c: i for i, c in enumerate(eligible)}
    mass = np.zeros(len(eligible))
    for name, pct in dcc.items():
        i = pos.get(taxonomy.to_model_class(name))
        if i is not None:
            mass[i] += pct
    total = mass.sum()
    if total <= 0:
        return np.full(len(eligible), np.nan)
    return mass / total


def build_feature_matrix(patients: Sequence[PatientRecord], feature_set: str = "lab+dcc",
                         predicted: Mapping[str, Sequence[str]] | None = None,
                         eligible: Sequence[str] | None = None,
                         taxonomy: CellClassTree | None = None) -> FeatureMatrix:
    """Assemble one of the named feature sets for ``patients``.

    ``predicted`` maps patient id to the model classes of that patient's cells;
    patients absent from it get an all-missing predicted-DCC row.
    """
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}; choose from {', '.join(FEATURE_SETS)}")
    taxonomy = taxonomy or default_taxonomy()
    eligible = tuple(eligible) if eligible is not None else taxonomy.model_classes
    ids = tuple(p.id for p in patients)
    labels = tuple(p.leukemia_type.value for p in patients)
    subtypes = tuple(p.leukemia_subtype for p in patients)
    blocks: list[tuple[list[str], np.ndarray]] = []
    if feature_set.startswith("lab"):
        lab = np.array([[p.lab_values.get(c, np.nan) for c in LAB_CODES] for p in patients], dtype=float)
        blocks.append((list(LAB_CODES), lab.reshape(len(patients), len(LAB_CODES))))
    if feature_set in ("dcc-clinical", "lab+dcc-clinical"):
        rows = [clinical_dcc_row(p.clinical_dcc, eligible, taxonomy) for p in patients]
        blocks.append(([CLINICAL_PREFIX + c for c in eligible], np.array(rows).reshape(len(patients), -1)))
    if feature_set in ("dcc-predicted", "lab+dcc"):
        predicted = predicted or {}
        rows = [build_dcc_features(predicted.get(p.id, ()), eligible) for p in patients]
        blocks.append(([PREDICTED_PREFIX + c for c in eligible], np.array(rows).reshape(len(patients), -1)))
    columns = tuple(c for names, _ in blocks for c in names)
    values = np.hstack([b for _, b in blocks])
    return FeatureMatrix(values, columns, ids, labels, subtypes)


def feature_set_columns(columns: Sequence[str], feature_set: str) -> list[str]:
    """Columns of an existing table that make up ``feature_set``."""
    if feature_set not in FEATURE_SETS:
        raise ValueError(f"unknown feature set {feature_set!r}; choose from {', '.join(FEATURE_SETS)}")
    lab = [c for c in columns if c in LAB_CODES]
    clinical = [c for c in columns if c.startswith(CLINICAL_PREFIX)]
    pred = [c for c in columns if c.startswith(PREDICTED_PREFIX)]
    parts = {"lab": [lab], "dcc-clinical": [clinical], "dcc-predicted": [pred],
             "lab+dcc": [lab, pred], "lab+dcc-clinical": [lab, clinical]}[feature_set]
    for block, name in zip(parts, feature_set.split("+")):
        if not block:
            raise SchemaError(f"features table has no columns for the {name!r} block")
    return [c for block in parts for c in block]


# -------------------------------------------------------------- features.csv

def _cell(v: float) -> str:
    return "" if math.isnan(v) else repr(float(v))


def write_features_csv(fm: FeatureMatrix, fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(["patient_id", "label", "subtype", *fm.columns])
    for i, pid in enumerate(fm.patient_ids):
        w.writerow([pid, fm.labels[i], fm.subtypes[i] or "", *(_cell(v) for v in fm.values[i])])


def read_features_csv(fh) -> FeatureMatrix:
    reader = csv.reader(fh)
    try:
        header = next(reader)
    except StopIteration:
        raise SchemaError("features.csv is empty") from None
    if header[:3] != ["patient_id", "label", "subtype"]:
        raise SchemaError("features.csv header must start with patient_id,label,subtype")
    cols = tuple(header[3:])
    ids, labels, subs, rows = [], [], [], []
    for lineno, row in enumerate(reader, start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"features.csv line {lineno}: expected {len(header)} fields, got {len(row)}")
        if row[1] not in DIAGNOSES:
            raise SchemaError(f"features.csv line {lineno}: unknown label {row[1]!r}")
        try:
            rows.append([float(v) if v.strip() else np.nan for v in row[3:]])
        except ValueError as exc:
            raise SchemaError(f"features.csv line {lineno}: {exc}") from exc
        ids.append(row[0])
        labels.append(row[1])
        subs.append(row[2] or None)
    try:
        return FeatureMatrix(np.array(rows, dtype=float).reshape(len(ids), len(cols)), cols,
                             tuple(ids), tuple(labels), tuple(subs))
    except ValueError as exc:
        raise SchemaError(f"features.csv: {exc}") from exc


# ----------------------------------------------------------------- grid search

@dataclass(frozen=True)
class HyperGrid:
    learning_rate: tuple[float, ...] = (0.05, 0.1, 0.3)
    max_leaf_nodes: tuple[int, ...] = (7, 15, 31)
    n_iterations: tuple[int, ...] = (50, 100, 200)
    l2: tuple[float, ...] = (0.0, 1.0)
    min_samples_leaf: tuple[int, ...] = (2, 5)

    def __post_init__(self) -> None:
        for name in ("learning_rate", "max_leaf_nodes", "n_iterations", "l2", "min_samples_leaf"):
            vals = tuple(getattr(self, name))
            if not vals:
                raise ValueError(f"grid list {name!r} is empty")
            object.__setattr__(self, name, vals)
        if min(self.learning_rate) < 0 or min(self.l2) < 0:
            raise ValueError("learning_rate and l2 must be non-negative")
        if min(self.max_leaf_nodes) < 2 or min(self.min_samples_leaf) < 1 or min(self.n_iterations) < 0:
            raise ValueError("max_leaf_nodes >= 2, min_samples_leaf >= 1 and n_iterations >= 0 required")

    def points(self) -> list[HyperParams]:
        return [HyperParams(lr, leaves, it, l2, msl) for lr, leaves, it, l2, msl in itertools.product(
            self.learning_rate, self.max_leaf_nodes, self.n_iterations, self.l2, self.min_samples_leaf)]

    def __len__(self) -> int:
        return len(self.points())

    def to_json(self) -> dict:
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_json(cls, obj: Mapping) -> "HyperGrid":
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(obj) - known)
        if extra:
            raise ValueError(f"unknown grid key(s): {', '.join(extra)}")
        return cls(**{k: tuple(v) for k, v in obj.items()})

    @classmethod
    def load(cls, path) -> "HyperGrid":
        with open(path, encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


def holdout_strata(fm: FeatureMatrix) -> tuple[str, ...]:
    """Subtype strata, with members of singleton subtypes falling back to their leukemia type."""
    sizes = Counter(fm.strata)
    return tuple(s if sizes[s] >= 2 else f"type:{lab}" for s, lab in zip(fm.strata, fm.labels))


def stratified_holdout(ids: Sequence[str], strata: Sequence[str], frac: float,
                       rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    """(train rows, holdout rows) with ``round(frac * m)`` rows held out per stratum.

    Every stratum with at least two members keeps one row on each side;
    singleton strata always train. Rows are visited in (stratum, id) order so
    the split depends only on the generator state.
    """
    if not 0.0 < frac < 1.0:
        raise ValueError(f"holdout fraction must lie in (0, 1), got {frac}")
    groups: dict[str, list[int]] = {}
    for i in sorted(range(len(ids)), key=lambda i: (strata[i], ids[i])):
        groups.setdefault(strata[i], []).append(i)
    test: list[int] = []
    for key in sorted(groups):
        members = np.array(groups[key])
        m = members.size
        if m < 2:
            continue
        k = min(max(int(math.floor(frac * m + 0.5)), 1), m - 1)
        test.extend(members[rng.permutation(m)[:k]].tolist())
    mask = np.zeros(len(ids), dtype=bool)
    mask[test] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def macro_f1(truth: np.ndarray, pred: np.ndarray, n_classes: int = 3) -> float:
    _, _, f1 = prf_from_counts(confusion_from_labels(truth, pred, n_classes))
    return float(f1.mean())


@dataclass
class GridSearchResult:
    best: HyperParams
    best_score: float
    table: list[dict] = field(default_factory=list)

    def to_json(self) -> dict:
        return {"best": asdict(self.best), "best_score": self.best_score, "table": self.table}


def staged_predictions(model: GBDTModel, X: np.ndarray, stages: Sequence[int]) -> dict[int, np.ndarray]:
    """Class predictions after each requested number of boosting iterations."""
    raw = np.tile(model.init_raw, (X.shape[0], 1))
    out = {}
    wanted = set(stages)
    if 0 in wanted:
        out[0] = np.argmax(raw, axis=1)
    for it, per_class in enumerate(model.trees, start=1):
        for k, tree in enumerate(per_class):
            raw[:, k] += tree.predict(X)
        if it in wanted:
            out[it] = np.argmax(raw, axis=1)
    return out


def grid_search(fm: FeatureMatrix, grid: HyperGrid, holdout_frac: float = 0.2, repeats: int = 20,
                seed: int = 0, n_jobs: int = 1) -> GridSearchResult:
    """Mean holdout macro F1 for every grid point; the best point wins.

    Splits depend only on (seed, repeat), so all points see the same splits.
    Points that differ only in ``n_iterations`` share one fit whose staged
    predictions are exactly those of the shorter fits. Ties go to the
    lexicographically smallest hyperparameter tuple.
    """
    points = grid.points()
    if not points:
        raise ValueError("empty hyperparameter grid")
    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    X, y = fm.values, fm.y
    strata = holdout_strata(fm)
    splits = [stratified_holdout(fm.patient_ids, strata, holdout_frac, np.random.default_rng([seed, r]))
              for r in range(repeats)]
    for r, (tr, te) in enumerate(splits):
        if te.size == 0 or np.unique(y[tr]).size < 2:
            raise ValueError("holdout split leaves the training part with fewer than two classes "
                             "or an empty holdout part")
    families: dict[tuple, list[int]] = {}
    for i, p in enumerate(points):
        families.setdefault((p.learning_rate, p.max_leaf_nodes, p.l2, p.min_samples_leaf), []).append(i)
    tasks = [(fam, r) for fam in families for r in range(repeats)]

    def run(task) -> dict[int, float]:
        fam, r = task
        members = families[fam]
        longest = max(points[i].n_iterations for i in members)
        base = points[members[0]]
        params = HyperParams(base.learning_rate, base.max_leaf_nodes, longest, base.l2, base.min_samples_leaf)
        tr, te = splits[r]
        ids = [fm.patient_ids[i] for i in tr]
        model = train_gbdt(X[tr], y[tr], params, seed=seed, feature_names=fm.columns, row_ids=ids)
        staged = staged_predictions(model, X[te], [points[i].n_iterations for i in members])
        return {i: macro_f1(y[te], staged[points[i].n_iterations]) for i in members}

    if n_jobs > 1:
        with ThreadPoolExecutor(max_workers=n_jobs) as pool:
            results = list(pool.map(run, tasks))
    else:
        results = [run(t) for t in tasks]
    scores = np.zeros((len(points), repeats))
    for (fam, r), res in zip(tasks, results):
        for i, v in res.items():
            scores[i, r] = v
    means = scores.mean(axis=1)
    best = min(range(len(points)), key=lambda i: (-means[i], points[i].key()))
    table = [{**asdict(p), "mean_f1": float(means[i]), "scores": scores[i].tolist()}
             for i, p in enumerate(points)]
    return GridSearchResult(points[best], float(means[best]), table)


# ------------------------------------------------------------------ evaluation

def train_diagnosis(fm: FeatureMatrix, params: HyperParams, seed: int = 0) -> GBDTModel:
    return train_gbdt(fm.values, fm.y, params, seed=seed, classes=DIAGNOSES,
                      feature_names=fm.columns, row_ids=fm.patient_ids)


def align_features(model: GBDTModel, fm: FeatureMatrix) -> np.ndarray:
    """Feature values in the model's column order; a missing column is a schema error naming it."""
    for c in model.feature_names:
        if c not in fm.columns:
            raise SchemaError(f"feature column {c!r} required by the model is missing")
    return fm.select(model.feature_names).values


def unusable_features(model: GBDTModel) -> list[str]:
    return [n for n, e in zip(model.feature_names, model.bin_edges) if e is None]


def evaluate_diagnosis(model: GBDTModel, fm: FeatureMatrix) -> dict:
    """Per-class and mean F1, 3x3 confusion matrix, and per-patient predictions."""
    if len(fm) == 0:
        raise ValueError("cannot evaluate on an empty feature matrix")
    proba = model.predict_proba(align_features(model, fm))
    pred = np.argmax(proba, axis=1)
    truth = fm.y
    counts = confusion_from_labels(truth, pred, len(DIAGNOSES))
    p, r, f1 = prf_from_counts(counts)
    return {
        "n": len(fm),
        "classes": list(DIAGNOSES),
        "per_class": [{"class": c, "precision": float(p[i]), "recall": float(r[i]), "f1": float(f1[i]),
                       "support": int(counts[i].sum())} for i, c in enumerate(DIAGNOSES)],
        "mean_f1": float(f1.mean()),
        "confusion": counts.tolist(),
        "unusable_features": unusable_features(model),
        "predictions": [{"patient_id": pid, "truth": DIAGNOSES[t], "pred": DIAGNOSES[q],
                         "proba": [float(v) for v in proba[i]]}
                        for i, (pid, t, q) in enumerate(zip(fm.patient_ids, truth, pred))],
    }
