#!/usr/bin/env python3
"""Build the bundled per-class classification fixture.

For every one of the 33 model classes we search small integer counts
(tp, fn, fp) whose precision, recall and F1 round to the published
three-decimal values. The false negatives of all classes must then be spread
over the false positives of other classes: a zero-diagonal transport with row
sums fn and column sums fp. The per-class count choice is tuned with a
subset-sum search so that the two totals agree. The result is written as a
predictions.csv with one row per synthetic cell and a score vector whose
argmax is the assigned prediction.

Usage: python3 scripts/build_class_metrics_fixture.py [--out PATH] [--seed N]
"""
from __future__ import annotations

import argparse
import csv
from pathlib import Path

import numpy as np
from scipy.sparse import csr_matrix
from scipy.sparse.csgraph import maximum_flow

from marrowbench.classification import confusion_from_labels, prf_from_counts
from marrowbench.core import model_classes

# class -> (F1, recall, precision), three decimals
PUBLISHED = {
    "Myeloid Precursor Cell": (0.409, 0.409, 0.409),
    "Myelocytic Blast": (0.490, 0.489, 0.492),
    "Promyelocyte": (0.799, 0.850, 0.754),
    "Neutrophilic Myelocyte": (0.543, 0.543, 0.543),
    "Neutrophilic Metamyelocyte": (0.588, 0.589, 0.586),
    "Neutrophilic Band": (0.724, 0.745, 0.704),
    "Segmented Neutrophil": (0.907, 0.882, 0.933),
    "Eosinophilic Myelocyte": (0.731, 0.850, 0.642),
    "Eosinophilic Metamyelocyte": (0.194, 0.158, 0.250),
    "Eosinophilic Band": (0.286, 0.267, 0.308),
    "Segmented Eosinophil": (0.720, 0.726, 0.714),
    "Immature Basophil": (0.250, 0.176, 0.429),
    "Segmented Basophil": (0.615, 0.600, 0.632),
    "Immature Monocyte": (0.261, 0.176, 0.500),
    "Monocytic Blast": (0.358, 0.370, 0.347),
    "Monocyte": (0.241, 0.189, 0.333),
    "Immature Lymphocyte": (0.000, 0.000, 0.000),
    "Lymphocytic Blast": (0.886, 0.924, 0.851),
    "Lymphocyte": (0.450, 0.417, 0.490),
    "Proerythroblast or Basophilic Erythroblast": (0.439, 0.643, 0.333),
    "Polychromatic Erythroblast": (0.648, 0.719, 0.590),
    "Orthochromatic Erythroblast": (0.764, 0.714, 0.821),
    "Megakaryocyte": (0.945, 0.992, 0.903),
    "Thrombocyte": (0.931, 0.899, 0.965),
    "Giant Platelet": (0.129, 0.143, 0.118),
    "Neutrophil Extracellular Trap": (0.876, 0.878, 0.874),
    "Pseudo Gaucher Cell": (0.667, 0.800, 0.571),
    "Mitosis": (0.692, 0.692, 0.692),
    "Spicule": (0.938, 0.953, 0.924),
    "Other Cell": (0.794, 0.718, 0.889),
    "Smudge Cell": (0.676, 0.722, 0.635),
    "Artifact": (0.557, 0.582, 0.534),
    "Not Identifiable": (0.531, 0.474, 0.602),
}
MAX_SUPPORT = 400
MAX_CANDIDATES = 40


def _r3(x: float) -> float:
    return round(x + 1e-12, 3)


def candidates(f1: float, rec: float, prec: float) -> list[tuple[int, int, int]]:
    """(tp, fn, fp) triples, smallest totals first, matching the rounded values."""
    out = []
    if f1 == rec == prec == 0.0:
        return [(0, s, p) for s in range(1, 6) for p in range(1, 6)]
    for support in range(1, MAX_SUPPORT + 1):
        for tp in range(1, support + 1):
            if _r3(tp / support) != rec:
                continue
            lo = max(tp, int(tp / (prec + 0.0006)))
            for predicted in range(lo, int(tp / max(prec - 0.0006, 1e-9)) + 2):
                if predicted < tp or _r3(tp / predicted) != prec:
                    continue
                p, r = tp / predicted, tp / support
                if _r3(2 * p * r / (p + r)) == f1:
                    out.append((tp, support - tp, predicted - tp))
        if len(out) >= MAX_CANDIDATES:
            break
    if not out:
        raise RuntimeError(f"no integer counts reproduce {(f1, rec, prec)}")
    return out


def balance(options: list[list[tuple[int, int, int]]]) -> list[tuple[int, int, int]]:
    """Pick one triple per class with sum(fn) == sum(fp), preferring small cohorts."""
    reach: dict[int, tuple[int, list[int]]] = {0: (0, [])}
    for opts in options:
        nxt: dict[int, tuple[int, list[int]]] = {}
        for d, (cost, picks) in reach.items():
            for i, (tp, fn, fp) in enumerate(opts):
                key = d + fn - fp
                c = cost + tp + fn + fp
                if key not in nxt or c < nxt[key][0]:
                    nxt[key] = (c, picks + [i])
        reach = nxt
    if 0 not in reach:
        raise RuntimeError("no balanced choice of counts")
    return [opts[i] for opts, i in zip(options, reach[0][1])]


def transport(fn: np.ndarray, fp: np.ndarray) -> np.ndarray:
    """Zero-diagonal non-negative integer matrix with row sums fn and column sums fp (max-flow)."""
    K = fn.size
    src, sink = 2 * K, 2 * K + 1
    cap = np.zeros((2 * K + 2, 2 * K + 2), dtype=np.int32)
    cap[src, :K] = fn
    cap[K:2 * K, sink] = fp
    big = int(fn.sum()) + 1
    for i in range(K):
        for j in range(K):
            if i != j:
                cap[i, K + j] = big
    flow = maximum_flow(csr_matrix(cap), src, sink)
    if flow.flow_value != fn.sum():
        raise RuntimeError("counts admit no zero-diagonal transport")
    F = flow.flow.toarray()
    return np.maximum(F[:K, K:2 * K], 0).astype(int)


def build(seed: int) -> tuple[list[str], np.ndarray, np.ndarray]:
    classes = model_classes()
    options = [candidates(*PUBLISHED[c]) for c in classes]
    chosen = balance(options)
    tp = np.array([t for t, _, _ in chosen])
    fn = np.array([f for _, f, _ in chosen])
    fp = np.array([f for _, _, f in chosen])
    cm = transport(fn, fp) + np.diag(tp)
    truth, pred = [], []
    for i in range(len(classes)):
        for j in range(len(classes)):
            truth += [i] * int(cm[i, j])
            pred += [j] * int(cm[i, j])
    rng = np.random.default_rng(seed)
    perm = rng.permutation(len(truth))
    return list(classes), np.array(truth)[perm], np.array(pred)[perm]


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1]
                                         / "src/marrowbench/resources/published_class_metrics.csv"))
    ap.add_argument("--seed", type=int, default=4)
    args = ap.parse_args()
    classes, truth, pred = build(args.seed)
    K = len(classes)
    _, _, f1 = prf_from_counts(confusion_from_labels(truth, pred, K))
    rng = np.random.default_rng(args.seed + 1)
    with open(args.out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["cell_id", "truth", *classes])
        for n, (t, p) in enumerate(zip(truth, pred)):
            s = rng.random(K) * 0.5
            s[p] = 1.0 + rng.random()
            s = s / s.sum()
            w.writerow([f"PCM-{n:05d}", classes[t], *(f"{v:.6f}" for v in s)])
    print(f"wrote {len(truth)} rows to {args.out}; median F1 {np.median(f1):.4f}, mean F1 {f1.mean():.4f}")


if __name__ == "__main__":
    main()
