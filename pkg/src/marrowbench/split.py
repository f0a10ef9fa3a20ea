"""Patient-level train/validation/test split.

Step one deals each diagnosis stratum across the sets with largest-remainder
quotas. Step two swaps same-stratum patients between sets while that brings
the per-set diagnosis and cell-class distributions closer to the cohort's.
"""
from __future__ import annotations

import itertools
import math
from collections import defaultdict
from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping, Sequence

import numpy as np

from .core import PatientRecord, Split

SETS = (Split.TRAIN, Split.VALIDATION, Split.TEST)
DEFAULT_RATIOS = (0.6, 0.2, 0.2)


class SplitError(ValueError):
    pass


def _check_ratios(ratios: Sequence[float]) -> list[Fraction]:
    if len(ratios) != len(SETS):
        raise SplitError(f"need {len(SETS)} ratios, got {len(ratios)}")
    fr = [Fraction(str(r)) if isinstance(r, float) else Fraction(r) for r in ratios]
    if any(r < 0 for r in fr) or sum(fr) != 1:
        raise SplitError(f"ratios must be non-negative and sum to 1, got {tuple(ratios)}")
    return fr


def largest_remainder(n: int, ratios: Sequence[float]) -> list[int]:
    """Integer quotas summing to n; remainder ties go to the earlier position."""
    fr = _check_ratios(ratios) if len(ratios) == len(SETS) else [Fraction(str(r)) for r in ratios]
    exact = [n * r for r in fr]
    quotas = [math.floor(q) for q in exact]
    order = sorted(range(len(fr)), key=lambda i: (-(exact[i] - quotas[i]), i))
    for i in order[: n - sum(quotas)]:
        quotas[i] += 1
    return quotas


def _controlled_rounding(strata_sizes: list[int], ratios: list[Fraction], targets: list[int]) -> list[list[int]]:
    """Per-stratum quotas whose row sums are the stratum sizes and column sums the global targets.

    Starts from floors and hands out the leftover seats by descending fractional
    remainder, repairing with augmenting paths when greedy gets stuck.
    """
    S, K = len(strata_sizes), len(ratios)
    exact = [[n * r for r in ratios] for n in strata_sizes]
    quota = [[math.floor(q) for q in row] for row in exact]
    need = [strata_sizes[s] - sum(quota[s]) for s in range(S)]
    seats = [targets[k] - sum(quota[s][k] for s in range(S)) for k in range(K)]
    extra = [[0] * K for _ in range(S)]
    cells = sorted(((-(exact[s][k] - quota[s][k]), k, s) for s in range(S) for k in range(K)))
    for _, k, s in cells:
        if need[s] > 0 and seats[k] > 0:
            extra[s][k] = 1
            need[s] -= 1
            seats[k] -= 1
    for s in range(S):
        while need[s] > 0:
            if not _augment(s, extra, seats, K):
                raise SplitError("cannot reconcile per-stratum quotas with global set sizes")
            need[s] -= 1
    return [[quota[s][k] + extra[s][k] for k in range(K)] for s in range(S)]


def _augment(start: int, extra: list[list[int]], seats: list[int], K: int) -> bool:
    """Move one leftover unit of stratum ``start`` to a set with a free seat.

    Alternating path: start -> unused set k1 -> stratum s1 currently holding k1
    -> unused set k2 -> ... -> set with a free seat. Flips along the path.
    """
    S = len(extra)
    parent_of_set: dict[int, int] = {}
    parent_of_stratum: dict[int, int] = {start: -1}
    queue = [start]
    while queue:
        s = queue.pop(0)
        for k in range(K):
            if extra[s][k] or k in parent_of_set:
                continue
            parent_of_set[k] = s
            if seats[k] > 0:
                seats[k] -= 1
                while True:
                    holder = parent_of_set[k]
                    extra[holder][k] = 1
                    k_prev = parent_of_stratum[holder]
                    if k_prev < 0:
                        return True
                    extra[holder][k_prev] = 0
                    k = k_prev
            for s2 in range(S):
                if s2 not in parent_of_stratum and extra[s2][k]:
                    parent_of_stratum[s2] = k
                    queue.append(s2)
    return False


@dataclass(frozen=True)
class SplitAssignment:
    sets: Mapping[str, Split]
    ratios: tuple[float, float, float] = DEFAULT_RATIOS

    def members(self, which: Split) -> list[str]:
        return sorted(p for p, s in self.sets.items() if s is which)

    def sizes(self) -> tuple[int, ...]:
        return tuple(len(self.members(s)) for s in SETS)

    def swapped(self, a: str, b: str) -> "SplitAssignment":
        new = dict(self.sets)
        new[a], new[b] = self.sets[b], self.sets[a]
        return SplitAssignment(new, self.ratios)


def _shuffled(ids: list[str], seed: int, key: tuple[str, str]) -> list[str]:
    ids = sorted(ids)
    tag = [ord(ch) for ch in "\x1f".join(key)]
    rng = np.random.default_rng([seed, len(tag), *tag])
    return [ids[i] for i in rng.permutation(len(ids))]


def initial_assign(patients: Sequence[PatientRecord], ratios: Sequence[float] = DEFAULT_RATIOS,
                   seed: int = 0) -> SplitAssignment:
    """Stratified by (type, subtype): each stratum is shuffled and dealt by quota."""
    fr = _check_ratios(ratios)
    if not patients:
        raise SplitError("no patients to split")
    strata: dict[tuple[str, str], list[str]] = defaultdict(list)
    for p in patients:
        strata[p.stratum].append(p.id)
    keys = sorted(strata)
    targets = largest_remainder(len(patients), ratios)
    quotas = _controlled_rounding([len(strata[k]) for k in keys], fr, targets)
    sets: dict[str, Split] = {}
    for key, q in zip(keys, quotas):
        members = _shuffled(strata[key], seed, key)
        pos = 0
        for which, count in zip(SETS, q):
            for pid in members[pos:pos + count]:
                sets[pid] = which
            pos += count
    return SplitAssignment(sets, tuple(float(r) for r in ratios))


@dataclass(frozen=True)
class SplitObjective:
    diagnosis_divergence: float
    class_divergence: float
    total: float


def _histogram_l1(set_hist: np.ndarray, cohort_hist: np.ndarray) -> float:
    tot = set_hist.sum()
    ref_tot = cohort_hist.sum()
    ref = cohort_hist / ref_tot if ref_tot > 0 else cohort_hist
    own = set_hist / tot if tot > 0 else np.zeros_like(set_hist, dtype=float)
    return float(np.abs(own - ref).sum())


class SplitScorer:
    """Precomputed per-patient vectors for fast objective evaluation."""

    def __init__(self, patients: Sequence[PatientRecord], counts: Mapping[str, Sequence[float]],
                 weights: tuple[float, float] = (1.0, 1.0)):
        self.ids = sorted(p.id for p in patients)
        by_id = {p.id: p for p in patients}
        strata = sorted({p.stratum for p in patients})
        width = max((len(v) for v in counts.values()), default=0)
        self.diag = np.zeros((len(self.ids), len(strata)))
        self.cls = np.zeros((len(self.ids), width))
        for i, pid in enumerate(self.ids):
            self.diag[i, strata.index(by_id[pid].stratum)] = 1.0
            c = counts.get(pid)
            if c is not None and len(c):
                self.cls[i, : len(c)] = np.asarray(c, dtype=float)
        self.stratum_of = {pid: by_id[pid].stratum for pid in self.ids}
        self.row = {pid: i for i, pid in enumerate(self.ids)}
        self.weights = weights
        self.diag_total = self.diag.sum(axis=0)
        self.cls_total = self.cls.sum(axis=0)

    def set_sums(self, assignment: SplitAssignment) -> tuple[np.ndarray, np.ndarray]:
        lab = np.array([SETS.index(assignment.sets[pid]) for pid in self.ids])
        onehot = np.eye(len(SETS))[lab].T
        return onehot @ self.diag, onehot @ self.cls

    def from_sums(self, dsum: np.ndarray, csum: np.ndarray) -> SplitObjective:
        dd = sum(_histogram_l1(dsum[k], self.diag_total) for k in range(len(SETS)))
        cd = sum(_histogram_l1(csum[k], self.cls_total) for k in range(len(SETS))) if self.cls.shape[1] else 0.0
        return SplitObjective(dd, cd, self.weights[0] * dd + self.weights[1] * cd)

    def objective(self, assignment: SplitAssignment) -> SplitObjective:
        return self.from_sums(*self.set_sums(assignment))


def split_objective(assignment: SplitAssignment, patients: Sequence[PatientRecord],
                    counts: Mapping[str, Sequence[float]], weights: tuple[float, float] = (1.0, 1.0)) -> SplitObjective:
    """Summed L1 distance of each set's normalized histograms from the cohort's.

    ``counts`` maps patient id -> per-class cell counts; patients without
    annotated cells may be omitted and contribute zero vectors. A set with no
    patients (or no cells) has an all-zero histogram.
    """
    return SplitScorer(patients, counts, weights).objective(assignment)


def swap_refine(assignment: SplitAssignment, patients: Sequence[PatientRecord],
                counts: Mapping[str, Sequence[float]], max_passes: int = 1000,
                weights: tuple[float, float] = (1.0, 1.0), tol: float = 1e-12,
                escape_depth: int = 3, escape_limit: int = 5000) -> SplitAssignment:
    """Best-improvement search over swaps of same-stratum patients in different sets.

    Each pass scores every admissible swap and applies the one with the largest
    strict decrease (ties: lexicographically smallest id pair). When no single
    swap improves, assignments reachable by up to ``escape_depth`` successive
    swaps are searched breadth-first (at most ``escape_limit`` states) and the
    best strictly improving one is taken. Per-set diagnosis counts are
    invariant under every move.
    """
    scorer = SplitScorer(patients, counts, weights)
    ids = scorer.ids
    labels = np.array([SETS.index(assignment.sets[pid]) for pid in ids])
    stratum = [scorer.stratum_of[pid] for pid in ids]
    candidates = [(i, j) for i, j in itertools.combinations(range(len(ids)), 2) if stratum[i] == stratum[j]]
    onehot = np.eye(len(SETS))

    def total(lab: np.ndarray) -> float:
        m = onehot[lab].T
        return scorer.from_sums(m @ scorer.diag, m @ scorer.cls).total

    def swapped(lab: np.ndarray, i: int, j: int) -> np.ndarray:
        out = lab.copy()
        out[i], out[j] = lab[j], lab[i]
        return out

    current = total(labels)
    for _ in range(max_passes):
        best = None
        for i, j in candidates:
            if labels[i] == labels[j]:
                continue
            lab = swapped(labels, i, j)
            val = total(lab)
            if val < current - tol and (best is None or val < best[0] - tol):
                best = (val, lab)
        if best is None and escape_depth > 1:
            best = _deep_escape(labels, candidates, total, swapped, current, tol, escape_depth, escape_limit)
        if best is None:
            break
        current, labels = best
    return SplitAssignment({pid: SETS[k] for pid, k in zip(ids, labels)}, assignment.ratios)


def _deep_escape(labels, candidates, total, swapped, current, tol, depth, limit):
    seen = {labels.tobytes()}
    frontier = [labels]
    best = None
    for _ in range(depth):
        nxt = []
        for lab in frontier:
            for i, j in candidates:
                if lab[i] == lab[j]:
                    continue
                new = swapped(lab, i, j)
                key = new.tobytes()
                if key in seen:
                    continue
                seen.add(key)
                if len(seen) > limit:
                    return best
                val = total(new)
                if val < current - tol and (best is None or val < best[0] - tol):
                    best = (val, new)
                nxt.append(new)
        if best is not None:
            return best
        frontier = nxt
    return best


def exhaustive_optimum(assignment: SplitAssignment, patients: Sequence[PatientRecord],
                       counts: Mapping[str, Sequence[float]], weights: tuple[float, float] = (1.0, 1.0)) -> float:
    """Minimum objective over all assignments with the same per-set stratum counts (small cohorts only)."""
    scorer = SplitScorer(patients, counts, weights)
    by_stratum: dict[tuple[str, str], list[str]] = defaultdict(list)
    for pid in scorer.ids:
        by_stratum[scorer.stratum_of[pid]].append(pid)
    options = []
    for ids in by_stratum.values():
        labels = [assignment.sets[p] for p in ids]
        perms = sorted(set(itertools.permutations(labels)), key=lambda t: [s.value for s in t])
        options.append([dict(zip(ids, perm)) for perm in perms])
    best = math.inf
    for combo in itertools.product(*options):
        merged: dict[str, Split] = {}
        for part in combo:
            merged.update(part)
        best = min(best, scorer.objective(SplitAssignment(merged)).total)
    return best
