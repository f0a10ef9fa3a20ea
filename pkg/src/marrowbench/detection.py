"""Detection post-processing (peak decoding, NMS) and detection evaluation."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np
from scipy.ndimage import maximum_filter

from .core import BoundingBox

DEFAULT_NMS_IOU = 0.3
DEFAULT_MAX_DETECTIONS = 544
DEFAULT_PEAK_RADIUS = 10
DEFAULT_PEAK_THRESHOLD = 0.3
# Typical leukocyte extent at 0.11 um/px; used only when no size regression is given.
DEFAULT_BOX_EDGE = 96.0


@dataclass(frozen=True)
class Detection:
    bbox: BoundingBox
    score: float

    def __post_init__(self) -> None:
        if not (math.isfinite(self.score) and 0.0 <= self.score <= 1.0):
            raise ValueError(f"detection score must lie in [0, 1], got {self.score}")


@dataclass(frozen=True)
class ScoreMap:
    """Dense center heatmap, indexed ``scores[row, col]``.

    ``sizes`` optionally holds per-pixel (w, h) regressions with shape (2, H, W).
    """

    scores: np.ndarray
    sizes: np.ndarray | None = None

    def __post_init__(self) -> None:
        s = np.asarray(self.scores, dtype=float)
        if s.ndim != 2 or s.size == 0:
            raise ValueError("score map must be a non-empty 2-D array")
        if not np.all(np.isfinite(s)):
            raise ValueError("score map contains non-finite values")
        object.__setattr__(self, "scores", s)
        if self.sizes is not None:
            z = np.asarray(self.sizes, dtype=float)
            if z.shape != (2, *s.shape):
                raise ValueError(f"sizes must have shape (2, {s.shape[0]}, {s.shape[1]})")
            object.__setattr__(self, "sizes", z)

    @property
    def height(self) -> int:
        return self.scores.shape[0]

    @property
    def width(self) -> int:
        return self.scores.shape[1]


@dataclass
class MatchResult:
    tp: int
    fp: int
    fn: int
    pairs: list[tuple[int, int, float]] = field(default_factory=list)

    def __add__(self, other: "MatchResult") -> "MatchResult":
        return MatchResult(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x + a.w, b.x + b.w) - max(a.x, b.x)
    ih = min(a.y + a.h, b.y + b.h) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    # rounding in the corner arithmetic can push identical boxes just above 1
    return min(1.0, inter / (a.w * a.h + b.w * b.h - inter))


def _as_xywh(boxes: Sequence[BoundingBox]) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 4))
    return np.array([(b.x, b.y, b.w, b.h) for b in boxes], dtype=float)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between two (n, 4) arrays of x, y, w, h rows."""
    ax2, ay2 = a[:, 0] + a[:, 2], a[:, 1] + a[:, 3]
    bx2, by2 = b[:, 0] + b[:, 2], b[:, 1] + b[:, 3]
    iw = np.minimum(ax2[:, None], bx2[None, :]) - np.maximum(a[:, 0][:, None], b[:, 0][None, :])
    ih = np.minimum(ay2[:, None], by2[None, :]) - np.maximum(a[:, 1][:, None], b[:, 1][None, :])
    overlap = (iw > 0) & (ih > 0)
    inter = np.where(overlap, iw * ih, 0.0)
    area_a = a[:, 2] * a[:, 3]
    area_b = b[:, 2] * b[:, 3]
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(overlap, np.minimum(inter / union, 1.0), 0.0)


def score_order(scores: Sequence[float]) -> np.ndarray:
    """Indices by descending score; equal scores keep input order."""
    return np.argsort(-np.asarray(scores, dtype=float), kind="stable")


def nms(dets: Sequence[Detection], iou_thresh: float = DEFAULT_NMS_IOU,
        max_out: int = DEFAULT_MAX_DETECTIONS) -> list[Detection]:
    """Greedy non-maximum suppression.

    A detection is dropped when its IoU with an already kept, higher-ranked
    detection exceeds ``iou_thresh``. Output is sorted by descending score and
    truncated to ``max_out``.
    """
    if not dets or max_out <= 0:
        return []
    order = score_order([d.score for d in dets])
    boxes = _as_xywh([dets[i].bbox for i in order])
    ious = iou_matrix(boxes, boxes)
    suppressed = np.zeros(len(order), dtype=bool)
    kept: list[int] = []
    for rank in range(len(order)):
        if suppressed[rank]:
            continue
        kept.append(rank)
        if len(kept) == max_out:
            break
        suppressed |= ious[rank] > iou_thresh
    return [dets[order[r]] for r in kept]


def decode_peaks(smap: ScoreMap, radius: int = DEFAULT_PEAK_RADIUS,
                 score_thresh: float = DEFAULT_PEAK_THRESHOLD,
                 default_edge: float = DEFAULT_BOX_EDGE) -> list[Detection]:
    """Extract local maxima of a center heatmap as detections.

    A pixel is a peak when its score reaches ``score_thresh`` and no pixel in
    its (2*radius+1)^2 window scores higher; among equal scores inside one
    window only the lexicographically smallest (row, col) survives.
    """
    if radius <= 0:
        raise ValueError(f"radius must be >= 1, got {radius}")
    s = smap.scores
    H, W = s.shape
    window_max = maximum_filter(s, size=2 * radius + 1, mode="constant", cval=-np.inf)
    rows, cols = np.nonzero((s >= window_max) & (s >= score_thresh))
    if rows.size:
        vals = s[rows, cols]
        beaten = np.zeros(rows.size, dtype=bool)
        # offsets that precede (0, 0) in row-major order
        for dr in range(-radius, 1):
            for dc in range(-radius, radius + 1):
                if dr == 0 and dc >= 0:
                    break
                r2, c2 = rows + dr, cols + dc
                inside = (r2 >= 0) & (c2 >= 0) & (c2 < W)
                hit = np.zeros(rows.size, dtype=bool)
                hit[inside] = s[r2[inside], c2[inside]] == vals[inside]
                beaten |= hit
        rows, cols = rows[~beaten], cols[~beaten]
    out = []
    for r, c in zip(rows.tolist(), cols.tolist()):  # nonzero yields row-major order
        if smap.sizes is not None:
            w, h = float(smap.sizes[0, r, c]), float(smap.sizes[1, r, c])
        else:
            w = h = float(default_edge)
        out.append(Detection(BoundingBox(c - w / 2, r - h / 2, w, h), float(s[r, c])))
    return out


def match_detections(preds: Sequence[Detection], gts: Sequence[BoundingBox],
                     iou_thresh: float = 0.5) -> MatchResult:
    """Greedy score-ordered matching of predictions to ground truth boxes."""
    if not preds or not gts:
        return MatchResult(0, len(preds), len(gts))
    order = score_order([p.score for p in preds])
    ious = iou_matrix(_as_xywh([p.bbox for p in preds]), _as_xywh(list(gts)))
    free = np.ones(len(gts), dtype=bool)
    pairs = []
    for i in order.tolist():
        cand = np.where(free, ious[i], -1.0)
        j = int(np.argmax(cand))
        if free[j] and cand[j] >= iou_thresh:
            free[j] = False
            pairs.append((i, j, float(ious[i, j])))
    tp = len(pairs)
    return MatchResult(tp, len(preds) - tp, len(gts) - tp, pairs)


def _safe_ratio(num: int, den: int) -> float:
    return num / den if den else 0.0


def harmonic_f1(precision: float, recall: float) -> float:
    """Harmonic mean of precision and recall; 0 when both are 0."""
    return 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0


def detection_prf(m: MatchResult) -> tuple[float, float, float]:
    """Precision, recall and F1.

    An empty ROI predicted empty (tp = fp = fn = 0) scores (1, 1, 1); any
    other zero denominator yields 0.
    """
    if m.tp == m.fp == m.fn == 0:
        return 1.0, 1.0, 1.0
    p = _safe_ratio(m.tp, m.tp + m.fp)
    r = _safe_ratio(m.tp, m.tp + m.fn)
    return p, r, harmonic_f1(p, r)


def match_flags(preds: Sequence[Detection], gts: Sequence[BoundingBox], iou_thresh: float = 0.5) -> np.ndarray:
    """Boolean true-positive flag per prediction, in input order."""
    flags = np.zeros(len(preds), dtype=bool)
    for i, _, _ in match_detections(preds, gts, iou_thresh).pairs:
        flags[i] = True
    return flags


def ap_from_flags(scores: Sequence[float], is_tp: Sequence[bool], n_gt: int) -> float:
    """All-points interpolated AP from scored true/false-positive flags.

    The result is the correctly rounded value of the exact rational area, so it
    does not depend on summation order.
    """
    if n_gt <= 0:
        raise ValueError("average precision is undefined without ground truth")
    order = score_order(scores)
    tp = np.asarray(is_tp, dtype=bool)[order]
    if not tp.any():
        return 0.0
    ctp = np.cumsum(tp)
    ranks = np.arange(1, tp.size + 1)
    precision = ctp / ranks
    # index of the envelope maximum at or after each rank; equal rationals give
    # equal floats, so the float argmax picks an exact maximiser
    best = np.empty(tp.size, dtype=np.int64)
    best[-1] = tp.size - 1
    for k in range(tp.size - 2, -1, -1):
        nxt = best[k + 1]
        best[k] = k if precision[k] >= precision[nxt] else nxt
    # each true positive raises recall by exactly 1 / n_gt
    steps, counts = np.unique(best[tp], return_counts=True)
    area = sum(Fraction(int(c) * int(ctp[j]), int(ranks[j])) for j, c in zip(steps, counts))
    return float(area / n_gt)


def average_precision(preds: Sequence[Detection], gts: Sequence[BoundingBox], iou_thresh: float = 0.5) -> float:
    if not gts:
        raise ValueError("average precision is undefined without ground truth")
    return ap_from_flags([p.score for p in preds], match_flags(preds, gts, iou_thresh), len(gts))


@dataclass
class DetectionReport:
    precision: float
    recall: float
    f1: float
    ap: float | None
    tp: int
    fp: int
    fn: int
    n_rois: int
    iou_thresh: float
    per_roi: list[dict] = field(default_factory=list)


def evaluate_rois(preds: dict[str, list[Detection]], gts: dict[str, list[BoundingBox]],
                  iou_thresh: float = 0.5) -> DetectionReport:
    """Match per ROI, then pool counts and scored flags across ROIs."""
    total = MatchResult(0, 0, 0)
    scores: list[float] = []
    flags: list[bool] = []
    per_roi = []
    for roi in sorted(set(preds) | set(gts)):
        p, g = preds.get(roi, []), gts.get(roi, [])
        m = match_detections(p, g, iou_thresh)
        f = match_flags(p, g, iou_thresh)
        total = total + m
        scores.extend(d.score for d in p)
        flags.extend(f.tolist())
        per_roi.append({"roi_id": roi, "tp": m.tp, "fp": m.fp, "fn": m.fn, "n_gt": len(g),
                        "scored": [[d.score, bool(t)] for d, t in zip(p, f)]})
    prec, rec, f1 = detection_prf(total)
    n_gt = total.tp + total.fn
    ap = ap_from_flags(scores, flags, n_gt) if n_gt else None
    return DetectionReport(prec, rec, f1, ap, total.tp, total.fp, total.fn, len(per_roi), iou_thresh, per_roi)


def group_boxes(records: Iterable[dict]) -> tuple[dict[str, list], bool]:
    """Group detection/ground-truth JSONL records by roi_id; returns (groups, scored)."""
    groups: dict[str, list] = {}
    scored = False
    for rec in records:
        box = BoundingBox.from_list(rec["bbox"])
        roi = str(rec["roi_id"])
        if "score" in rec:
            scored = True
            groups.setdefault(roi, []).append(Detection(box, float(rec["score"])))
        else:
            groups.setdefault(roi, []).append(box)
    return groups, scored
