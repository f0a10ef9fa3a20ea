"""Histogram gradient-boosted trees for multiclass classification.

Features are quantile-binned once; every boosting iteration fits one
regression tree per class on the softmax gradients ``p - onehot`` and
hessians ``p (1 - p)``. Missing values live in a reserved bin and are routed
to whichever child gives the larger gain at each split.
"""
from __future__ import annotations

import hashlib
import heapq
import json
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy.special import logsumexp, softmax

FORMAT = "marrowbench-gbdt"
FORMAT_VERSION = 1
PRIOR_FLOOR = 1e-15
MIN_CHILD_HESSIAN = 1e-3


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float = 0.1
    max_leaf_nodes: int = 31
    n_iterations: int = 100
    l2: float = 0.0
    min_samples_leaf: int = 5
    max_bins: int = 256

    def key(self) -> tuple:
        return (self.learning_rate, self.max_leaf_nodes, self.n_iterations, self.l2, self.min_samples_leaf)


# ------------------------------------------------------------------- binning

def fit_bins(X: np.ndarray, max_bins: int = 256) -> list[np.ndarray | None]:
    """Per-feature inner bin edges at empirical quantiles.

    A value x falls in bin ``searchsorted(edges, x, side="left")``, so bin
    i <= t exactly when x <= edges[t]. Features without any observed value get
    ``None`` and are never split on.
    """
    if max_bins < 2:
        raise ValueError("max_bins must be at least 2")
    X = np.asarray(X, dtype=float)
    edges: list[np.ndarray | None] = []
    for j in range(X.shape[1]):
        col = X[:, j]
        col = col[~np.isnan(col)]
        if col.size == 0:
            edges.append(None)
            continue
        uniq = np.unique(col)
        if uniq.size <= max_bins:
            e = (uniq[:-1] + uniq[1:]) / 2.0
        else:
            qs = np.quantile(col, np.linspace(0.0, 1.0, max_bins + 1)[1:-1])
            e = np.unique(qs)
        edges.append(e)
    return edges


def bin_data(X: np.ndarray, edges: Sequence[np.ndarray | None], missing_bin: int) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    out = np.full(X.shape, missing_bin, dtype=np.int32)
    for j, e in enumerate(edges):
        if e is None:
            continue
        col = X[:, j]
        ok = ~np.isnan(col)
        out[ok, j] = np.searchsorted(e, col[ok], side="left")
    return out


# --------------------------------------------------------------------- trees

@dataclass
class Tree:
    feature: np.ndarray
    threshold: np.ndarray
    missing_left: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray

    @property
    def n_leaves(self) -> int:
        return int(np.sum(self.left < 0))

    def apply(self, X: np.ndarray) -> np.ndarray:
        """Leaf index reached by every row of raw (unbinned) X."""
        node = np.zeros(X.shape[0], dtype=np.int64)
        active = np.flatnonzero(self.left[node] >= 0)
        while active.size:
            nd = node[active]
            x = X[active, self.feature[nd]]
            miss = np.isnan(x)
            go_left = np.where(miss, self.missing_left[nd], x <= self.threshold[nd])
            node[active] = np.where(go_left, self.left[nd], self.right[nd])
            active = active[self.left[node[active]] >= 0]
        return node

    def predict(self, X: np.ndarray) -> np.ndarray:
        return self.value[self.apply(X)]

    def to_json(self) -> dict:
        return {"feature": self.feature.tolist(), "threshold": self.threshold.tolist(),
                "missing_left": self.missing_left.tolist(), "left": self.left.tolist(),
                "right": self.right.tolist(), "value": self.value.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "Tree":
        return cls(np.array(obj["feature"], dtype=np.int64), np.array(obj["threshold"], dtype=float),
                   np.array(obj["missing_left"], dtype=bool), np.array(obj["left"], dtype=np.int64),
                   np.array(obj["right"], dtype=np.int64), np.array(obj["value"], dtype=float))


@dataclass
class _Split:
    gain: float
    feature: int
    bin: int
    missing_left: bool


class _Grower:
    """Best-first (leaf-wise) growth of one regression tree over binned data."""

    def __init__(self, Xb: np.ndarray, n_bins: np.ndarray, usable: np.ndarray, width: int,
                 params: HyperParams):
        self.Xb = Xb
        self.n, self.F = Xb.shape
        self.W = width
        self.missing = width - 1
        self.flat = Xb + (np.arange(self.F) * width)[None, :]
        self.n_bins = n_bins
        self.usable = usable
        self.params = params
        # thresholds t valid for feature f: 0 <= t <= n_bins[f] - 2
        self.valid = (np.arange(width - 1)[None, :] <= (n_bins - 2)[:, None]) & usable[:, None]

    def _histograms(self, idx: np.ndarray, g: np.ndarray, h: np.ndarray):
        cells = self.flat[idx].ravel()
        size = self.F * self.W
        hg = np.bincount(cells, weights=np.repeat(g[idx], self.F), minlength=size).reshape(self.F, self.W)
        hh = np.bincount(cells, weights=np.repeat(h[idx], self.F), minlength=size).reshape(self.F, self.W)
        hc = np.bincount(cells, minlength=size).reshape(self.F, self.W)
        return hg, hh, hc

    def best_split(self, idx: np.ndarray, g: np.ndarray, h: np.ndarray) -> _Split | None:
        p = self.params
        if idx.size < 2 * p.min_samples_leaf:
            return None
        hg, hh, hc = self._histograms(idx, g, h)
        G, H, C = g[idx].sum(), h[idx].sum(), idx.size
        lam = p.l2
        parent = G * G / (H + lam) if H + lam > 0 else 0.0
        cg = np.cumsum(hg[:, :-1], axis=1)
        ch = np.cumsum(hh[:, :-1], axis=1)
        cc = np.cumsum(hc[:, :-1], axis=1)
        mg, mh, mc = hg[:, -1:], hh[:, -1:], hc[:, -1:]
        gains = np.full((self.F, self.W - 1, 2), -np.inf)
        for d, (lg, lh, lc) in enumerate(((cg, ch, cc), (cg + mg, ch + mh, cc + mc))):
            rg, rh, rc = G - lg, H - lh, C - lc
            ok = (self.valid & (lc >= p.min_samples_leaf) & (rc >= p.min_samples_leaf)
                  & (lh >= MIN_CHILD_HESSIAN) & (rh >= MIN_CHILD_HESSIAN))
            with np.errstate(divide="ignore", invalid="ignore"):
                gain = lg * lg / (lh + lam) + rg * rg / (rh + lam) - parent
            gains[:, :, d] = np.where(ok, gain, -np.inf)
        # without missing values both routings score the same; keep "missing right"
        flat = int(np.argmax(gains))
        best = gains.flat[flat]
        if not np.isfinite(best) or best <= 0.0:
            return None
        f, t, d = np.unravel_index(flat, gains.shape)
        return _Split(float(best), int(f), int(t), bool(d))

    def grow(self, g: np.ndarray, h: np.ndarray, edges: Sequence[np.ndarray | None]) -> tuple[Tree, np.ndarray]:
        p = self.params
        feature, threshold, miss_left, left, right, value = [], [], [], [], [], []
        members: list[np.ndarray] = []

        def new_node(idx: np.ndarray) -> int:
            G, H = g[idx].sum(), h[idx].sum()
            v = -G / (H + p.l2) if H + p.l2 > 0 else 0.0
            for lst, x in ((feature, -1), (threshold, 0.0), (miss_left, False), (left, -1), (right, -1)):
                lst.append(x)
            value.append(p.learning_rate * v)
            members.append(idx)
            return len(value) - 1

        root = new_node(np.arange(self.n))
        heap: list[tuple[float, int, _Split]] = []
        s = self.best_split(members[root], g, h)
        if s is not None:
            heapq.heappush(heap, (-s.gain, root, s))
        n_leaves = 1
        while heap and n_leaves < p.max_leaf_nodes:
            _, nid, s = heapq.heappop(heap)
            idx = members[nid]
            b = self.Xb[idx, s.feature]
            go_left = np.where(b == self.missing, s.missing_left, b <= s.bin)
            l_id, r_id = new_node(idx[go_left]), new_node(idx[~go_left])
            feature[nid], threshold[nid], miss_left[nid] = s.feature, float(edges[s.feature][s.bin]), s.missing_left
            left[nid], right[nid] = l_id, r_id
            n_leaves += 1
            for child in (l_id, r_id):
                cs = self.best_split(members[child], g, h)
                if cs is not None:
                    heapq.heappush(heap, (-cs.gain, child, cs))
        leaf_of = np.empty(self.n, dtype=np.int64)
        for nid, idx in enumerate(members):
            if left[nid] < 0:
                leaf_of[idx] = nid
        tree = Tree(np.array(feature, dtype=np.int64), np.array(threshold, dtype=float),
                    np.array(miss_left, dtype=bool), np.array(left, dtype=np.int64),
                    np.array(right, dtype=np.int64), np.array(value, dtype=float))
        return tree, leaf_of


# --------------------------------------------------------------------- model

def schema_hash(feature_names: Sequence[str]) -> str:
    return hashlib.sha256("\n".join(feature_names).encode("utf-8")).hexdigest()[:16]


@dataclass
class GBDTModel:
    classes: tuple[str, ...]
    feature_names: tuple[str, ...]
    params: HyperParams
    bin_edges: list[np.ndarray | None]
    init_raw: np.ndarray
    trees: list[list[Tree]] = field(default_factory=list)  # [iteration][class]
    seed: int = 0

    @property
    def class_priors(self) -> np.ndarray:
        return softmax(self.init_raw)

    @property
    def n_iterations(self) -> int:
        return len(self.trees)

    def raw_scores(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim != 2 or X.shape[1] != len(self.feature_names):
            raise ValueError(f"expected {len(self.feature_names)} feature columns, got shape {X.shape}")
        raw = np.tile(self.init_raw, (X.shape[0], 1))
        for per_class in self.trees:
            for k, tree in enumerate(per_class):
                raw[:, k] += tree.predict(X)
        return raw

    def predict_proba(self, X: np.ndarray) -> np.ndarray:
        return softmax(self.raw_scores(X), axis=1)

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.argmax(self.predict_proba(X), axis=1)

    def to_json(self) -> dict:
        return {
            "format": FORMAT, "version": FORMAT_VERSION,
            "classes": list(self.classes), "feature_names": list(self.feature_names),
            "schema_hash": schema_hash(self.feature_names),
            "params": asdict(self.params), "seed": self.seed,
            "init_raw": self.init_raw.tolist(),
            "bin_edges": [None if e is None else e.tolist() for e in self.bin_edges],
            "trees": [[t.to_json() for t in per_class] for per_class in self.trees],
        }

    @classmethod
    def from_json(cls, obj: dict) -> "GBDTModel":
        if obj.get("format") != FORMAT or obj.get("version") != FORMAT_VERSION:
            raise ValueError("not a marrowbench GBDT model file (format/version mismatch)")
        names = tuple(obj["feature_names"])
        if obj.get("schema_hash") != schema_hash(names):
            raise ValueError("model file schema hash does not match its feature names")
        return cls(
            classes=tuple(obj["classes"]), feature_names=names, params=HyperParams(**obj["params"]),
            bin_edges=[None if e is None else np.array(e, dtype=float) for e in obj["bin_edges"]],
            init_raw=np.array(obj["init_raw"], dtype=float),
            trees=[[Tree.from_json(t) for t in per_class] for per_class in obj["trees"]],
            seed=int(obj.get("seed", 0)),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_json(), sort_keys=True)


def softmax_grad_hess(raw: np.ndarray, y: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Gradient and diagonal hessian of the multiclass log-loss w.r.t. raw scores."""
    p = softmax(raw, axis=1)
    onehot = np.zeros_like(p)
    onehot[np.arange(len(y)), y] = 1.0
    return p - onehot, p * (1.0 - p)


def log_loss(raw: np.ndarray, y: np.ndarray) -> float:
    """Mean negative log-likelihood of the true classes under softmax(raw)."""
    lse = logsumexp(raw, axis=1)
    return float(np.mean(lse - raw[np.arange(len(y)), y]))


def train_gbdt(X: np.ndarray, y: np.ndarray, params: HyperParams = HyperParams(), seed: int = 0,
               classes: Sequence[str] = ("ALL", "AML", "CML"), feature_names: Sequence[str] | None = None,
               row_ids: Sequence[str] | None = None) -> GBDTModel:
    """Fit a softmax gradient-boosted ensemble.

    ``y`` holds class indices into ``classes``. Rows are put into canonical
    ``row_ids`` order first, so the fitted model does not depend on the input
    row order. Training is deterministic; ``seed`` is recorded for provenance.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=np.int64)
    K = len(classes)
    if X.ndim != 2 or X.shape[0] != y.shape[0]:
        raise ValueError("X must be 2-D with one row per label")
    if y.size and (y.min() < 0 or y.max() >= K):
        raise ValueError("label index out of range")
    if np.unique(y).size < 2:
        raise ValueError("training labels must contain at least two classes")
    names = tuple(feature_names) if feature_names is not None else tuple(f"f{j}" for j in range(X.shape[1]))
    if len(names) != X.shape[1] or len(set(names)) != len(names):
        raise ValueError("feature names must be unique and match the column count")
    if row_ids is not None:
        order = np.argsort(np.asarray(row_ids, dtype=str), kind="stable")
        X, y = X[order], y[order]

    priors = np.bincount(y, minlength=K) / y.size
    init_raw = np.log(np.maximum(priors, PRIOR_FLOOR))
    edges = fit_bins(X, params.max_bins)
    n_bins = np.array([0 if e is None else e.size + 1 for e in edges], dtype=np.int64)
    # histogram width: the widest feature's bins plus the reserved missing bin
    width = int(n_bins.max(initial=1)) + 1
    Xb = bin_data(X, edges, missing_bin=width - 1)
    usable = np.array([e is not None and e.size > 0 for e in edges])
    grower = _Grower(Xb, n_bins, usable, width, params)

    model = GBDTModel(tuple(classes), names, params, edges, init_raw, [], seed)
    raw = np.tile(init_raw, (X.shape[0], 1))
    for _ in range(params.n_iterations):
        g, h = softmax_grad_hess(raw, y)
        per_class = []
        for k in range(K):
            tree, leaf_of = grower.grow(g[:, k], h[:, k], edges)
            raw[:, k] += tree.value[leaf_of]
            per_class.append(tree)
        model.trees.append(per_class)
    return model
