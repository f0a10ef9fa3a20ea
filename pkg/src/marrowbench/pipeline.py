"""End-to-end composition: consensus, split, evaluation, DCC features, diagnosis, intervals."""
from __future__ import annotations

from collections import defaultdict
from dataclasses import asdict, dataclass
from typing import Mapping, Sequence

import numpy as np

from .bootstrap import BootstrapError, ClusteredSample, bootstrap_ci_multi
from .classification import ScoreTable, predicted_labels
from .consensus import Observation, State, annotation_stats, median_label_time, resolve_stream
from .core import CellClassTree, CellRecord, PatientRecord, Split, UnknownClassError, default_taxonomy
from .detection import Detection, evaluate_rois
from .diagnosis import (DIAGNOSES, FEATURE_SETS, HyperGrid, build_feature_matrix,
                        eligible_classes, evaluate_diagnosis, grid_search, train_diagnosis)
from .metrics import (CLASSIFY_SUMMARIES, DETECT_METRICS, classify_names, classify_vector, detect_vector,
                      diag_names, diag_vector, table_items)
from .reporting import metric_entry
from .split import DEFAULT_RATIOS, SETS, SplitAssignment, initial_assign, split_objective, swap_refine

# A compact grid keeps end-to-end runs in the minute range; pass HyperGrid() for the full default grid.
PIPELINE_GRID = HyperGrid(learning_rate=(0.1,), max_leaf_nodes=(7,), n_iterations=(50,), l2=(0.0, 1.0),
                          min_samples_leaf=(2,))


class StageError(RuntimeError):
    """A pipeline stage rejected its input; nothing downstream ran."""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage {stage}: {message}")
        self.stage = stage


@dataclass(frozen=True)
class PipelineConfig:
    seed: int = 0
    feature_set: str = "dcc-predicted"
    nucleated_only: bool = False
    grid: HyperGrid = PIPELINE_GRID
    holdout_frac: float = 0.2
    repeats: int = 20
    B: int = 1000
    alpha: float = 0.05
    bootstrap_mode: str = "two-level"
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    max_observers: int = 5
    iou: float = 0.5

    def __post_init__(self) -> None:
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"unknown feature set {self.feature_set!r}")

    def to_json(self) -> dict:
        out = asdict(self)
        out["grid"] = self.grid.to_json()
        out["ratios"] = list(self.ratios)
        return out

    @classmethod
    def from_json(cls, obj: Mapping) -> "PipelineConfig":
        obj = dict(obj)
        extra = sorted(set(obj) - set(cls.__dataclass_fields__))
        if extra:
            raise ValueError(f"unknown config key(s): {', '.join(extra)}")
        if "grid" in obj:
            obj["grid"] = HyperGrid.from_json(obj["grid"])
        if "ratios" in obj:
            obj["ratios"] = tuple(obj["ratios"])
        return cls(**obj)


def stage_seed(seed: int, stage: str) -> int:
    """Independent, reproducible sub-seed for one named stage."""
    return int(np.random.SeedSequence([seed, *stage.encode("utf-8")]).generate_state(1)[0])


def _ci_block(sample: ClusteredSample, names: Sequence[str], cfg: PipelineConfig, stage: str,
              n_jobs: int) -> dict[str, dict]:
    estimates = np.atleast_1d(sample.statistic(sample))
    try:
        cis = bootstrap_ci_multi(sample, names, cfg.B, cfg.alpha, stage_seed(cfg.seed, stage),
                                 cfg.bootstrap_mode, n_jobs)
    except BootstrapError as exc:
        raise StageError(stage, str(exc)) from exc
    return {n: metric_entry(float(estimates[j]), cis[n]) for j, n in enumerate(names)}


def _per_class(block: Mapping[str, dict], classes: Sequence[str], support: Sequence[int]) -> list[dict]:
    return [{"class": c, "precision": block[f"precision:{c}"], "recall": block[f"recall:{c}"],
             "f1": block[f"f1:{c}"], "support": int(s)} for c, s in zip(classes, support)]


def consensus_labels(observations: Sequence[Observation], cells: Sequence[CellRecord], max_observers: int,
                     taxonomy: CellClassTree) -> tuple[dict[str, str], dict]:
    """Model-class consensus label per cell, plus the annotation statistics section."""
    statuses = resolve_stream(observations, max_observers)
    labels: dict[str, str] = {}
    for c in cells:
        if c.consensus_label:
            labels[c.cell_id] = taxonomy.to_model_class(c.consensus_label)
    for cid, st in statuses.items():
        if st.state is State.CONSENSUS:
            labels[cid] = taxonomy.to_model_class(st.label)
    stats = annotation_stats(observations, statuses)
    t_lab, t_val = median_label_time(observations)
    section = {"n_cells": len(statuses), "n_labeled": len(labels),
               "stats": stats.to_json(), "median_time_labeling": t_lab, "median_time_validation": t_val}
    return labels, section


def resolve_split(patients: Sequence[PatientRecord], counts: Mapping[str, np.ndarray],
                  cfg: PipelineConfig) -> tuple[dict[str, Split], dict]:
    assigned = [p.split for p in patients]
    if all(s is not Split.UNASSIGNED for s in assigned):
        sets = {p.id: p.split for p in patients}
        source = "input"
    elif any(s is not Split.UNASSIGNED for s in assigned):
        raise StageError("split", "patients are partly assigned; assign all or none")
    else:
        if len(patients) < 2:
            raise StageError("split", "cannot stratify a cohort of fewer than two patients")
        init = initial_assign(patients, cfg.ratios, stage_seed(cfg.seed, "split"))
        sets = dict(swap_refine(init, patients, counts).sets)
        source = "computed"
    sizes = {s.value: sum(1 for v in sets.values() if v is s) for s in SETS}
    for name in (Split.TRAIN.value, Split.TEST.value):
        if sizes[name] == 0:
            raise StageError("split", f"the {name} set is empty")
    obj = split_objective(SplitAssignment(sets, cfg.ratios), patients, counts)
    return sets, {"source": source, "sizes": sizes, "objective": asdict(obj)}


def end_to_end(observations: Sequence[Observation], cells: Sequence[CellRecord],
               patients: Sequence[PatientRecord], detections: Mapping[str, Sequence[Detection]] | None,
               predictions: ScoreTable | None, config: PipelineConfig = PipelineConfig(),
               n_jobs: int = 1, taxonomy: CellClassTree | None = None) -> dict:
    """Run every stage in order and return the combined report sections.

    ``n_jobs`` changes only the speed; every number in the result depends on
    the inputs and ``config`` alone.
    """
    taxonomy = taxonomy or default_taxonomy()
    cfg = config
    K = len(taxonomy.model_classes)
    patient_ids = {p.id for p in patients}
    cell_patient = {c.cell_id: c.patient_id for c in cells}
    out: dict = {}

    # consensus
    try:
        labels, out["consensus"] = consensus_labels(observations, cells, cfg.max_observers, taxonomy)
    except (ValueError, UnknownClassError) as exc:
        raise StageError("consensus", str(exc)) from exc

    # split
    counts: dict[str, np.ndarray] = defaultdict(lambda: np.zeros(K))
    for cid, lab in sorted(labels.items()):
        pid = cell_patient.get(cid)
        if pid is None or pid not in patient_ids:
            raise StageError("split", f"labeled cell {cid!r} has no patient in the cohort")
        counts[pid][taxonomy.index(lab)] += 1
    sets, out["split"] = resolve_split(patients, dict(counts), cfg)
    test_patients = sorted(p for p, s in sets.items() if s is Split.TEST)

    # detection
    if detections is not None:
        gts: dict[str, list] = defaultdict(list)
        roi_patient: dict[str, str] = {}
        for c in cells:
            gts[c.roi_id].append(c.bbox)
            roi_patient[c.roi_id] = c.patient_id
        for roi in detections:
            if roi not in roi_patient:
                raise StageError("detection", f"detections for ROI {roi!r} which has no annotated cells")
        rep = evaluate_rois({k: list(v) for k, v in detections.items()}, dict(gts), cfg.iou)
        by_patient: dict[str, list] = defaultdict(list)
        for r in rep.per_roi:
            by_patient[roi_patient[r["roi_id"]]].append(
                (r["tp"], r["fp"], r["fn"], np.array([s for s, _ in r["scored"]], dtype=float),
                 np.array([t for _, t in r["scored"]], dtype=bool)))
        sample = _object_sample(by_patient, lambda items: detect_vector(items))
        out["detection"] = {"metrics": _ci_block(sample, list(DETECT_METRICS), cfg, "detection", n_jobs),
                            "tp": rep.tp, "fp": rep.fp, "fn": rep.fn, "n_rois": rep.n_rois, "iou": cfg.iou}

    # classification on test-set cells
    if predictions is not None:
        if predictions.ids is None:
            raise StageError("classification", "predictions need cell ids")
        missing = [cid for cid in predictions.ids if cid not in cell_patient]
        if missing:
            raise StageError("classification", f"prediction for unknown cell {missing[0]!r}")
        rows = [i for i, cid in enumerate(predictions.ids) if sets.get(cell_patient[cid]) is Split.TEST]
        if rows:
            test_table = predictions.subset(np.array(rows))
            groups: dict[str, list[int]] = defaultdict(list)
            for i, cid in enumerate(test_table.ids):
                groups[cell_patient[cid]].append(i)
            items = table_items(test_table)
            classes = taxonomy.model_classes
            sample = _array_sample(groups, items, lambda it: classify_vector(it, classes))
            block = _ci_block(sample, classify_names(classes), cfg, "classification", n_jobs)
            support = np.bincount(test_table.truth, minlength=K)
            out["classification"] = {"n": len(test_table),
                                     "metrics": {m: block[m] for m in CLASSIFY_SUMMARIES},
                                     "per_class": _per_class(block, classes, support)}

    # features
    try:
        predicted: dict[str, list[str]] = defaultdict(list)
        if predictions is not None:
            pred_idx = predicted_labels(predictions.scores)
            for cid, k in zip(predictions.ids, pred_idx):
                predicted[cell_patient[cid]].append(predictions.classes[k])
        elif "dcc" in cfg.feature_set and "clinical" not in cfg.feature_set:
            raise StageError("features", f"feature set {cfg.feature_set!r} needs cell predictions")
        fm = build_feature_matrix(patients, cfg.feature_set, predicted,
                                  eligible_classes(cfg.nucleated_only, taxonomy), taxonomy)
    except ValueError as exc:
        raise StageError("features", str(exc)) from exc
    order = {pid: i for i, pid in enumerate(fm.patient_ids)}
    dev_rows = sorted(order[p] for p, s in sets.items() if s is not Split.TEST)
    test_rows = sorted(order[p] for p in test_patients)
    dev, test = fm.subset(dev_rows), fm.subset(test_rows)
    all_missing = [fm.patient_ids[i] for i in range(len(fm)) if np.isnan(fm.values[i]).all()]

    # diagnosis
    try:
        search = grid_search(dev, cfg.grid, cfg.holdout_frac, cfg.repeats, stage_seed(cfg.seed, "grid"), n_jobs)
        model = train_diagnosis(dev, search.best, seed=stage_seed(cfg.seed, "train"))
        ev = evaluate_diagnosis(model, test)
    except ValueError as exc:
        raise StageError("diagnosis", str(exc)) from exc
    items = np.array([[DIAGNOSES.index(p["truth"]), DIAGNOSES.index(p["pred"])] for p in ev["predictions"]],
                     dtype=float)
    groups = {p["patient_id"]: [i] for i, p in enumerate(ev["predictions"])}
    block = _ci_block(_array_sample(groups, items, diag_vector), diag_names(), cfg, "diagnosis", n_jobs)
    out["diagnosis"] = {
        "feature_set": cfg.feature_set,
        "n_features": len(fm.columns),
        "n_dev": len(dev), "n_test": len(test),
        "all_missing_rows": all_missing,
        "best_params": asdict(search.best), "grid_best_score": search.best_score,
        "grid": [{k: v for k, v in row.items() if k != "scores"} for row in search.table],
        "metrics": {"mean_f1": block["mean_f1"]},
        "per_class": _per_class(block, DIAGNOSES, [pc["support"] for pc in ev["per_class"]]),
        "confusion": ev["confusion"],
        "unusable_features": ev["unusable_features"],
        "predictions": ev["predictions"],
    }
    return out


def _array_sample(groups: Mapping[str, Sequence[int]], items: np.ndarray, vector_fn) -> ClusteredSample:
    keys = sorted(groups)
    index = np.concatenate([np.asarray(groups[k], dtype=np.int64) for k in keys])
    return ClusteredSample(items[index], np.array([len(groups[k]) for k in keys], dtype=np.int64),
                           np.array(keys, dtype=object), lambda s: vector_fn(s.items))


def _object_sample(groups: Mapping[str, list], vector_fn) -> ClusteredSample:
    keys = sorted(groups)
    flat = [it for k in keys for it in groups[k]]
    arr = np.empty(len(flat), dtype=object)
    for i, it in enumerate(flat):
        arr[i] = it
    return ClusteredSample(arr, np.array([len(groups[k]) for k in keys], dtype=np.int64),
                           np.array(keys, dtype=object), lambda s: vector_fn(s.items))
