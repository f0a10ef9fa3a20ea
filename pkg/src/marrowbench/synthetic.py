"""Synthetic cohorts with three diagnosis-specific cell-mixture profiles.

ALL-like patients are dominated by lymphocytic blasts, AML-like patients by
myelocytic blasts and promyelocytes, CML-like patients by the maturing
granulocytic series. Every artefact a real run consumes is generated:
patients (with lab values and clinical DCCs), cells with boxes, a replayable
annotation stream, classifier score vectors, and scored detections.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .classification import ScoreTable
from .consensus import Observation, View, consensus_status
from .core import LAB_CODES, AgeInterval, BoundingBox, CellRecord, LeukemiaType, PatientRecord, Sex, model_classes

PROFILES: dict[str, dict[str, float]] = {
    "ALL": {"Lymphocytic Blast": 60, "Lymphocyte": 12, "Segmented Neutrophil": 5,
            "Polychromatic Erythroblast": 4, "Orthochromatic Erythroblast": 3, "Monocyte": 2},
    "AML": {"Myelocytic Blast": 45, "Promyelocyte": 12, "Monocytic Blast": 6, "Segmented Neutrophil": 6,
            "Lymphocyte": 6, "Polychromatic Erythroblast": 4, "Neutrophilic Myelocyte": 3},
    "CML": {"Segmented Neutrophil": 22, "Neutrophilic Myelocyte": 16, "Neutrophilic Band": 14,
            "Neutrophilic Metamyelocyte": 12, "Segmented Basophil": 5, "Segmented Eosinophil": 5,
            "Eosinophilic Myelocyte": 3, "Promyelocyte": 3, "Myelocytic Blast": 3, "Lymphocyte": 4},
}
SUBTYPES = {"ALL": ("B-ALL", "T-ALL"), "AML": ("AML-M1", "AML-M2", "AML-M4"), "CML": ("CML-CP",)}
BACKGROUND = 0.2
ROIS_PER_PATIENT = 4
ROI_EDGE = 1024.0


@dataclass
class SyntheticCohort:
    patients: list[PatientRecord]
    cells: list[CellRecord]
    observations: list[Observation]
    predictions: ScoreTable
    detections: dict[str, list[dict]] = field(default_factory=dict)
    true_classes: dict[str, str] = field(default_factory=dict)


def _profile_vector(diagnosis: str, classes: tuple[str, ...]) -> np.ndarray:
    alpha = np.full(len(classes), BACKGROUND)
    for name, w in PROFILES[diagnosis].items():
        alpha[classes.index(name)] += w
    return alpha


def _confuse(k: int, n_classes: int, rng: np.random.Generator) -> int:
    """A plausible mistake: usually a neighbouring class in the taxonomy order."""
    options = [k + s for s in (-2, -1, 1, 2) if 0 <= k + s < n_classes]
    return int(options[int(rng.integers(len(options)))])


def make_cohort(n_patients: int = 120, seed: int = 0, cells_per_patient: tuple[int, int] = (60, 120),
                annotator_accuracy: float = 0.85, classifier_accuracy: float = 0.8,
                n_observers: int = 8, max_observers: int = 5, empty_patients: int = 0,
                lab_missing_rate: float = 0.15) -> SyntheticCohort:
    """Generate a balanced ALL/AML/CML cohort; everything is a function of ``seed``.

    The first ``empty_patients`` patients get no cells at all.
    """
    rng = np.random.default_rng(seed)
    classes = model_classes()
    K = len(classes)
    observers = [f"obs{i}" for i in range(n_observers)]
    patients: list[PatientRecord] = []
    cells: list[CellRecord] = []
    observations: list[Observation] = []
    truth_idx: list[int] = []
    score_rows: list[np.ndarray] = []
    cell_ids: list[str] = []
    detections: dict[str, list[dict]] = {}
    true_classes: dict[str, str] = {}
    diagnoses = ("ALL", "AML", "CML")
    lab_shift = rng.normal(size=(3, len(LAB_CODES)))
    for p in range(n_patients):
        dx = diagnoses[p % 3]
        pid = f"P{p:04d}"
        subtype = SUBTYPES[dx][int(rng.integers(len(SUBTYPES[dx])))]
        lo = float(rng.integers(0, 18))
        labs = {}
        for j, code in enumerate(LAB_CODES):
            if rng.random() >= lab_missing_rate:
                labs[code] = round(float(10.0 + 0.6 * lab_shift[diagnoses.index(dx), j] + rng.normal()), 6)
        mix = rng.dirichlet(_profile_vector(dx, classes))
        clinical = {classes[k]: round(100.0 * float(v), 4) for k, v in enumerate(mix) if v >= 1e-4}
        patients.append(PatientRecord(pid, AgeInterval(lo, lo + 1.0), Sex(rng.choice(["male", "female"])),
                                      LeukemiaType(dx), subtype, lab_values=labs, clinical_dcc=clinical))
        n_cells = 0 if p < empty_patients else int(rng.integers(cells_per_patient[0], cells_per_patient[1] + 1))
        true = rng.choice(K, size=n_cells, p=mix)
        for c in range(n_cells):
            cid = f"{pid}-C{c:04d}"
            roi = f"{pid}-R{c % ROIS_PER_PATIENT}"
            k = int(true[c])
            x, y = rng.uniform(0, ROI_EDGE - 100, size=2)
            w, h = rng.uniform(60, 100, size=2)
            box = BoundingBox(round(float(x), 3), round(float(y), 3), round(float(w), 3), round(float(h), 3))
            cells.append(CellRecord(cid, pid, roi, box))
            true_classes[cid] = classes[k]
            # annotation stream: distinct observers until the rule decides
            order = rng.permutation(n_observers)[:max_observers]
            obs: list[Observation] = []
            for seq, o in enumerate(order, start=1):
                lab = k if rng.random() < annotator_accuracy else _confuse(k, K, rng)
                obs.append(Observation(cid, observers[o], classes[lab], seq, View.LABELING,
                                       round(float(rng.lognormal(1.1, 0.4)), 3)))
                if consensus_status(obs, max_observers).terminal:
                    break
            observations.extend(obs)
            # classifier scores: a peaked softmax around the predicted class
            guess = k if rng.random() < classifier_accuracy else _confuse(k, K, rng)
            logits = rng.normal(scale=0.5, size=K)
            logits[guess] += 4.0
            e = np.exp(logits - logits.max())
            score_rows.append(np.round(e / e.sum(), 9))
            truth_idx.append(k)
            cell_ids.append(cid)
            # detection: a jittered box for most cells
            if rng.random() < 0.93:
                jx, jy = rng.normal(scale=4.0, size=2)
                detections.setdefault(roi, []).append(
                    {"roi_id": roi, "bbox": [box.x + float(jx), box.y + float(jy), box.w, box.h],
                     "score": round(float(rng.uniform(0.5, 1.0)), 6)})
        for r in range(ROIS_PER_PATIENT if n_cells else 0):
            roi = f"{pid}-R{r}"
            if rng.random() < 0.5:
                x, y = rng.uniform(0, ROI_EDGE - 100, size=2)
                detections.setdefault(roi, []).append(
                    {"roi_id": roi, "bbox": [float(x), float(y), 80.0, 80.0],
                     "score": round(float(rng.uniform(0.0, 0.6)), 6)})
    scores = np.array(score_rows).reshape(len(score_rows), K)
    table = ScoreTable(scores, np.array(truth_idx, dtype=int), classes, tuple(cell_ids))
    return SyntheticCohort(patients, cells, observations, table, detections, true_classes)
