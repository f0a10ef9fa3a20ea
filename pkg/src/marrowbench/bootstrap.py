"""Hierarchical bias-corrected and accelerated (BCa) bootstrap intervals.

Data are clustered (patient -> cells). Replicates resample clusters with
replacement and, in the default ``"two-level"`` mode, items within each drawn
cluster as well. Every replicate draws from its own generator seeded by
``(seed, replicate_index)`` so results do not depend on the thread schedule.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import ndtr, ndtri

MODES = ("two-level", "cluster")
MAX_DROP_FRACTION = 0.10


class BootstrapError(ValueError):
    pass


def normal_quantile(p: float) -> float:
    """Inverse standard normal CDF."""
    if not 0.0 < p < 1.0:
        raise ValueError(f"normal_quantile needs 0 < p < 1, got {p}")
    return float(ndtri(p))


def normal_cdf(z: float) -> float:
    return float(ndtr(z))


@dataclass(frozen=True)
class ClusteredSample:
    """Items pooled along axis 0, grouped contiguously by cluster.

    ``statistic`` maps a ClusteredSample to a real number; it usually only
    looks at ``items`` but may use ``cluster_index`` for per-cluster summaries.
    """

    items: np.ndarray
    sizes: np.ndarray
    cluster_ids: np.ndarray
    statistic: Callable[["ClusteredSample"], float] = field(compare=False)

    def __post_init__(self) -> None:
        sizes = np.asarray(self.sizes, dtype=np.int64)
        if sizes.size and sizes.min() < 1:
            raise ValueError("every cluster must hold at least one item")
        if int(sizes.sum()) != len(self.items):
            raise ValueError("cluster sizes do not add up to the item count")
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "cluster_ids", np.asarray(self.cluster_ids, dtype=object))

    @classmethod
    def from_groups(cls, groups: Sequence[tuple[str, Sequence]], statistic) -> "ClusteredSample":
        ids = [g for g, _ in groups]
        parts = [np.asarray(items) if not _is_object_list(items) else _object_array(items) for _, items in groups]
        items = np.concatenate(parts) if parts else np.zeros(0)
        return cls(items, np.array([len(p) for p in parts], dtype=np.int64), np.array(ids, dtype=object), statistic)

    @property
    def n_clusters(self) -> int:
        return int(self.sizes.size)

    @property
    def offsets(self) -> np.ndarray:
        return np.concatenate(([0], np.cumsum(self.sizes)[:-1])).astype(np.int64)

    @property
    def cluster_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_clusters), self.sizes)

    def groups(self) -> list[tuple[str, np.ndarray]]:
        return [(self.cluster_ids[i], self.items[o:o + n]) for i, (o, n) in enumerate(zip(self.offsets, self.sizes))]

    def evaluate(self) -> float:
        return float(self.statistic(self))

    def take(self, item_index: np.ndarray, sizes: np.ndarray, cluster_ids: np.ndarray) -> "ClusteredSample":
        return ClusteredSample(self.items[item_index], sizes, cluster_ids, self.statistic)

    def with_statistic(self, statistic) -> "ClusteredSample":
        return ClusteredSample(self.items, self.sizes, self.cluster_ids, statistic)


def _is_object_list(items) -> bool:
    return isinstance(items, (list, tuple)) and bool(items) and isinstance(items[0], dict)


def _object_array(items) -> np.ndarray:
    arr = np.empty(len(items), dtype=object)
    arr[:] = list(items)
    return arr


def hierarchical_resample(sample: ClusteredSample, rng: np.random.Generator,
                          mode: str = "two-level") -> ClusteredSample:
    """Draw clusters with replacement, then (two-level) items within each drawn cluster."""
    k = sample.n_clusters
    if k == 0:
        raise BootstrapError("cannot resample an empty sample")
    if mode not in MODES:
        raise ValueError(f"unknown resampling mode {mode!r}")
    drawn = rng.integers(0, k, size=k)
    sizes = sample.sizes[drawn]
    starts = np.repeat(sample.offsets[drawn], sizes)
    if mode == "two-level":
        within = rng.integers(0, np.repeat(sizes, sizes))
    else:
        within = np.arange(int(sizes.sum())) - np.repeat(np.cumsum(sizes) - sizes, sizes)
    return sample.take(starts + within, sizes, sample.cluster_ids[drawn])


def leave_one_out_values(sample: ClusteredSample) -> np.ndarray:
    """Statistic with each cluster left out in turn; shape (k,) or (k, m) for vector statistics."""
    k = sample.n_clusters
    offsets, sizes = sample.offsets, sample.sizes
    all_items = np.arange(len(sample.items))
    keep_cluster = np.ones(k, dtype=bool)
    values = []
    for i in range(k):
        mask = np.ones(len(sample.items), dtype=bool)
        mask[offsets[i]:offsets[i] + sizes[i]] = False
        keep_cluster[i] = False
        sub = sample.take(all_items[mask], sizes[keep_cluster], sample.cluster_ids[keep_cluster])
        values.append(np.asarray(sub.statistic(sub), dtype=float))
        keep_cluster[i] = True
    return np.array(values, dtype=float)


def acceleration_from_jackknife(values: np.ndarray) -> float:
    values = np.asarray(values, dtype=float)
    values = values[np.isfinite(values)]
    if values.size < 2:
        return 0.0
    d = values.mean() - values
    den = 6.0 * (d @ d) ** 1.5
    return float((d ** 3).sum() / den) if den > 0 else 0.0


def jackknife_acceleration(sample: ClusteredSample) -> float:
    """Acceleration constant from leave-one-cluster-out statistic values."""
    if sample.n_clusters < 3:
        raise BootstrapError(f"jackknife acceleration needs >= 3 clusters, got {sample.n_clusters}")
    return acceleration_from_jackknife(leave_one_out_values(sample))


def nearest_rank(sorted_values: np.ndarray, q: float) -> float:
    """Smallest value with at least a fraction q of the sample at or below it."""
    n = sorted_values.size
    # round away the last-bit noise of cdf(quantile(q)) before taking the ceiling
    rank = math.ceil(round(q * n, 9))
    return float(sorted_values[min(max(rank, 1), n) - 1])


def _adjusted_level(z0: float, a: float, z: float) -> float:
    w = z0 + z
    denom = 1.0 - a * w
    if denom <= 0.0:
        return 1.0 if w > 0 else 0.0
    return normal_cdf(z0 + w / denom)


def bca_levels(z0: float, a: float, alpha: float) -> tuple[float, float]:
    if not 0.0 < alpha < 1.0:
        raise ValueError(f"alpha must lie in (0, 1), got {alpha}")
    return (_adjusted_level(z0, a, normal_quantile(alpha / 2)),
            _adjusted_level(z0, a, normal_quantile(1 - alpha / 2)))


def bca_interval(replicates: Sequence[float], theta_hat: float, z0: float, a: float,
                 alpha: float) -> tuple[float, float]:
    """BCa endpoints as nearest-rank order statistics of the replicates.

    ``theta_hat`` is accepted for symmetry with the other BCa inputs; the bias
    correction it informs is already folded into ``z0``.
    """
    reps = np.sort(np.asarray(replicates, dtype=float))
    if reps.size == 0:
        raise ValueError("no replicates")
    lo, hi = bca_levels(z0, a, alpha)
    return nearest_rank(reps, lo), nearest_rank(reps, hi)


def bias_correction(replicates: np.ndarray, theta_hat: float) -> float:
    B = replicates.size
    frac = np.count_nonzero(replicates < theta_hat) / B
    eps = 1.0 / (2 * B)
    return normal_quantile(min(max(frac, eps), 1.0 - eps))


@dataclass(frozen=True)
class BootstrapResult:
    point_estimate: float
    lower: float
    upper: float
    B: int
    alpha: float
    z0: float
    a: float
    dropped: int = 0
    mode: str = "two-level"
    seed: int = 0
    replicates: np.ndarray | None = field(default=None, compare=False, repr=False)

    def to_json(self) -> dict:
        return {"estimate": self.point_estimate, "lower": self.lower, "upper": self.upper,
                "b": self.B, "alpha": self.alpha, "z0": self.z0, "a": self.a,
                "dropped": self.dropped, "mode": self.mode, "seed": self.seed}


def replicate_rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _vector(sample: ClusteredSample) -> np.ndarray:
    return np.atleast_1d(np.asarray(sample.statistic(sample), dtype=float))


def bootstrap_replicates(sample: ClusteredSample, B: int, seed: int, mode: str = "two-level",
                         n_jobs: int = 1) -> np.ndarray:
    """Statistic on B hierarchical resamples; shape (B,) or (B, m) for vector statistics.

    Replicate b always uses the generator ``replicate_rng(seed, b)``, so the
    output does not depend on ``n_jobs``.
    """
    def run(indices: range) -> list[np.ndarray]:
        return [_evaluate_replicate(sample, seed, b, mode) for b in indices]

    if n_jobs <= 1:
        return np.array(run(range(B)), dtype=float)
    chunk = math.ceil(B / n_jobs)
    spans = [range(s, min(s + chunk, B)) for s in range(0, B, chunk)]
    with ThreadPoolExecutor(max_workers=n_jobs) as pool:
        parts = list(pool.map(run, spans))
    return np.array([v for part in parts for v in part], dtype=float)


def _evaluate_replicate(sample: ClusteredSample, seed: int, b: int, mode: str) -> np.ndarray:
    rs = hierarchical_resample(sample, replicate_rng(seed, b), mode)
    return np.asarray(rs.statistic(rs), dtype=float)


def _interval_from(reps_all: np.ndarray, theta_hat: float, a: float, B: int, alpha: float,
                   mode: str, seed: int, keep: bool) -> BootstrapResult:
    finite = np.isfinite(reps_all)
    dropped = int(B - finite.sum())
    if dropped > MAX_DROP_FRACTION * B:
        raise BootstrapError(f"{dropped} of {B} replicates produced a non-finite statistic")
    reps = reps_all[finite]
    z0 = bias_correction(reps, theta_hat)
    lower, upper = bca_interval(reps, theta_hat, z0, a, alpha)
    return BootstrapResult(theta_hat, lower, upper, B, alpha, z0, a, dropped, mode, seed, reps if keep else None)


def _check(B: int, sample: ClusteredSample) -> None:
    if B < 2:
        raise ValueError("B must be at least 2")
    if sample.n_clusters < 3:
        raise BootstrapError(f"jackknife acceleration needs >= 3 clusters, got {sample.n_clusters}")


def bootstrap_ci(sample: ClusteredSample, B: int = 1000, alpha: float = 0.05, seed: int = 0,
                 mode: str = "two-level", n_jobs: int = 1, keep_replicates: bool = False) -> BootstrapResult:
    """Hierarchical BCa confidence interval for ``sample.statistic``.

    Replicates on which the statistic is not finite are dropped; more than
    10% dropped replicates is an error.
    """
    _check(B, sample)
    theta_hat = sample.evaluate()
    if not math.isfinite(theta_hat):
        raise BootstrapError("statistic is not finite on the original sample")
    raw = bootstrap_replicates(sample, B, seed, mode, n_jobs)
    a = jackknife_acceleration(sample)
    return _interval_from(raw, theta_hat, a, B, alpha, mode, seed, keep_replicates)


def bootstrap_ci_multi(sample: ClusteredSample, names: Sequence[str], B: int = 1000, alpha: float = 0.05,
                       seed: int = 0, mode: str = "two-level", n_jobs: int = 1) -> dict[str, BootstrapResult]:
    """BCa intervals for a vector-valued statistic, one per named component.

    All components share the same replicates. Component j gets exactly the
    interval ``bootstrap_ci`` would give for the scalar statistic that returns
    component j.
    """
    _check(B, sample)
    theta = _vector(sample)
    if theta.size != len(names):
        raise ValueError(f"statistic returned {theta.size} values for {len(names)} names")
    bad = [n for n, t in zip(names, theta) if not math.isfinite(t)]
    if bad:
        raise BootstrapError(f"statistic is not finite on the original sample: {', '.join(bad)}")
    raw = bootstrap_replicates(sample, B, seed, mode, n_jobs).reshape(B, -1)
    loo = leave_one_out_values(sample).reshape(sample.n_clusters, -1)
    return {name: _interval_from(raw[:, j], float(theta[j]), acceleration_from_jackknife(loo[:, j]),
                                 B, alpha, mode, seed, False)
            for j, name in enumerate(names)}
