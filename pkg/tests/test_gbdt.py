from __future__ import annotations

import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import softmax

from marrowbench.gbdt import (GBDTModel, HyperParams, bin_data, fit_bins, log_loss, softmax_grad_hess, train_gbdt)


def per_sample_loss(raw_row: np.ndarray, label: int) -> float:
    m = raw_row.max()
    return float(m + np.log(np.exp(raw_row - m).sum()) - raw_row[label])


def separable(n: int = 150, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Three classes separated along the first feature, plus two noise features."""
    r = np.random.default_rng(seed)
    y = np.repeat(np.arange(3), n // 3)
    x0 = y * 10.0 + r.uniform(0, 5, y.size)
    X = np.column_stack([x0, r.normal(size=y.size), r.normal(size=y.size)])
    return X, y


def macro_f1(y, pred, K=3) -> float:
    f = []
    for k in range(K):
        tp = np.sum((pred == k) & (y == k))
        fp = np.sum((pred == k) & (y != k))
        fn = np.sum((pred != k) & (y == k))
        f.append(0.0 if tp == 0 else 2 * tp / (2 * tp + fp + fn))
    return float(np.mean(f))


class TestBinning:
    def test_constant_feature_single_bin(self):
        (e,) = fit_bins(np.full((20, 1), 3.0))
        assert e.size == 0
        assert np.all(bin_data(np.full((20, 1), 3.0), [e], missing_bin=9) == 0)

    def test_one_value_per_bin(self):
        x = np.arange(256.0)[:, None]
        (e,) = fit_bins(x, 256)
        b = bin_data(x, [e], missing_bin=300)[:, 0]
        assert np.array_equal(b, np.arange(256))

    def test_quartile_edges(self, rng):
        x = rng.uniform(0, 1, 1000)
        (e,) = fit_bins(x[:, None], 4)
        oracle = np.sort(x)[[249, 499, 749]]
        assert e == pytest.approx(oracle, abs=2e-3)
        assert e == pytest.approx([0.25, 0.5, 0.75], abs=0.05)

    def test_all_missing_is_unusable(self):
        edges = fit_bins(np.array([[np.nan, 1.0], [np.nan, 2.0]]))
        assert edges[0] is None and edges[1] is not None

    def test_missing_goes_to_reserved_bin(self):
        x = np.array([[1.0], [np.nan], [3.0]])
        b = bin_data(x, fit_bins(x), missing_bin=7)
        assert b[1, 0] == 7 and b[0, 0] != 7

    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=300), st.integers(2, 64))
    def test_edges_strictly_increasing_and_bounded(self, vals, max_bins):
        (e,) = fit_bins(np.array(vals)[:, None], max_bins)
        assert e.size + 1 <= max_bins
        assert np.all(np.diff(e) > 0)


class TestLossDerivatives:
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_and_hessian_match_finite_differences(self, seed):
        r = np.random.default_rng(seed)
        raw = r.normal(scale=2.0, size=(6, 3))
        y = r.integers(0, 3, 6)
        g, h = softmax_grad_hess(raw, y)
        eps = 1e-5
        for i in range(raw.shape[0]):
            for k in range(3):
                up, dn = raw[i].copy(), raw[i].copy()
                up[k] += eps
                dn[k] -= eps
                fd_g = (per_sample_loss(up, y[i]) - per_sample_loss(dn, y[i])) / (2 * eps)
                fd_h = (per_sample_loss(up, y[i]) - 2 * per_sample_loss(raw[i], y[i]) + per_sample_loss(dn, y[i])) / eps ** 2
                assert abs(g[i, k] - fd_g) <= 1e-6 * max(1.0, abs(fd_g))
                # the second difference loses ~eps^-2 * 1e-16 to cancellation; analytic oracle is exact
                assert abs(h[i, k] - fd_h) <= 1e-4 * max(1.0, abs(fd_h))
                p = softmax(raw[i])
                assert h[i, k] == pytest.approx(p[k] * (1 - p[k]), rel=1e-12)

    def test_hessian_by_differencing_gradient(self, rng):
        raw = rng.normal(size=(5, 3))
        y = rng.integers(0, 3, 5)
        _, h = softmax_grad_hess(raw, y)
        eps = 1e-6
        for k in range(3):
            up, dn = raw.copy(), raw.copy()
            up[:, k] += eps
            dn[:, k] -= eps
            fd = (softmax_grad_hess(up, y)[0][:, k] - softmax_grad_hess(dn, y)[0][:, k]) / (2 * eps)
            assert np.allclose(h[:, k], fd, rtol=1e-6, atol=1e-9)


class TestTraining:
    def test_zero_iterations_predict_priors(self, rng):
        X = rng.normal(size=(40, 2))
        y = np.array([0] * 10 + [1] * 20 + [2] * 10)
        m = train_gbdt(X, y, HyperParams(n_iterations=0))
        assert np.allclose(m.predict_proba(rng.normal(size=(7, 2))), [0.25, 0.5, 0.25], atol=1e-12)
        assert np.allclose(m.class_priors, [0.25, 0.5, 0.25])

    def test_initial_loss_is_prior_entropy(self, rng):
        y = np.array([0] * 7 + [1] * 2 + [2] * 11)
        m = train_gbdt(rng.normal(size=(20, 1)), y, HyperParams(n_iterations=0))
        pri = np.bincount(y) / y.size
        entropy = -np.sum(pri * np.log(pri))
        assert log_loss(m.raw_scores(np.zeros((20, 1))), y) == pytest.approx(entropy, abs=1e-9)

    def test_absent_class_prior_is_floored(self, rng):
        m = train_gbdt(rng.normal(size=(10, 1)), np.array([0] * 5 + [2] * 5), HyperParams(n_iterations=3))
        assert np.all(np.isfinite(m.predict_proba(rng.normal(size=(4, 1)))))

    def test_single_class_rejected(self):
        with pytest.raises(ValueError):
            train_gbdt(np.zeros((5, 1)), np.zeros(5, dtype=int))

    def test_two_class_threshold_in_twenty_iterations(self, rng):
        x = rng.uniform(-1, 1, 60)
        y = (x > 0.1).astype(int)
        m = train_gbdt(x[:, None], y, HyperParams(n_iterations=20, min_samples_leaf=2), classes=("neg", "pos"))
        assert np.array_equal(m.predict(x[:, None]), y)

    def test_separable_three_class(self):
        X, y = separable()
        m = train_gbdt(X, y, HyperParams(n_iterations=50, max_leaf_nodes=7, min_samples_leaf=2))
        assert macro_f1(y, m.predict(X)) == 1.0

    def test_loss_decreases(self):
        X, y = separable(seed=3)
        losses = [log_loss(train_gbdt(X, y, HyperParams(n_iterations=n, max_leaf_nodes=4)).raw_scores(X), y)
                  for n in (0, 1, 5, 20)]
        assert all(a > b for a, b in zip(losses, losses[1:]))

    def test_row_permutation_gives_identical_model(self, rng):
        X, y = separable(60, seed=1)
        X[rng.random(X.shape) < 0.1] = np.nan
        ids = [f"r{i:03d}" for i in range(len(y))]
        perm = rng.permutation(len(y))
        p = HyperParams(n_iterations=15, max_leaf_nodes=5, min_samples_leaf=2)
        a = train_gbdt(X, y, p, row_ids=ids)
        b = train_gbdt(X[perm], y[perm], p, row_ids=[ids[i] for i in perm])
        assert a.dumps() == b.dumps()

    def test_missing_bin_is_inert_without_missing_values(self):
        X, y = separable(90, seed=5)
        p = HyperParams(n_iterations=10, max_leaf_nodes=6, min_samples_leaf=3)
        plain = train_gbdt(X, y, p)
        # an extra all-missing column only ever populates the reserved bin
        padded = train_gbdt(np.column_stack([X, np.full(len(y), np.nan)]), y, p)
        Xq = np.random.default_rng(2).normal(scale=10, size=(30, 3))
        assert np.array_equal(plain.raw_scores(Xq), padded.raw_scores(np.column_stack([Xq, np.zeros(30)])))
        assert padded.bin_edges[3] is None

    def test_missing_values_route_by_gain(self):
        # class 1 is exactly the rows with a missing value
        x = np.concatenate([np.linspace(0, 1, 30), np.full(30, np.nan)])
        y = np.array([0] * 30 + [1] * 30)
        m = train_gbdt(x[:, None], y, HyperParams(n_iterations=10, min_samples_leaf=2), classes=("a", "b"))
        assert np.array_equal(m.predict(x[:, None]), y)

    def test_duplicate_row_keeps_its_class_on_pure_leaf_fit(self, rng):
        X, y = separable(30, seed=7)
        p = HyperParams(n_iterations=60, max_leaf_nodes=31, min_samples_leaf=1, learning_rate=0.3)
        base = train_gbdt(X, y, p).predict(X)
        for i in rng.choice(len(y), 5, replace=False):
            dup = train_gbdt(np.vstack([X, X[i]]), np.append(y, y[i]), p)
            assert dup.predict(X[i:i + 1])[0] == base[i] == y[i]

    def test_deterministic(self):
        X, y = separable(45)
        p = HyperParams(n_iterations=5)
        assert train_gbdt(X, y, p, seed=1).dumps() == train_gbdt(X, y, p, seed=1).dumps()

    @given(st.integers(0, 10_000))
    def test_probabilities_sum_to_one(self, seed):
        r = np.random.default_rng(seed)
        X = r.normal(size=(24, 2))
        X[r.random(X.shape) < 0.2] = np.nan
        y = np.arange(24) % 3
        m = train_gbdt(X, y, HyperParams(n_iterations=4, min_samples_leaf=2))
        P = m.predict_proba(r.normal(size=(10, 2)))
        assert np.allclose(P.sum(axis=1), 1.0, atol=1e-12)


class TestSerialisation:
    def test_round_trip_exact(self, rng):
        X, y = separable(60)
        X[rng.random(X.shape) < 0.1] = np.nan
        m = train_gbdt(X, y, HyperParams(n_iterations=8, max_leaf_nodes=5), feature_names=["a", "b", "c"])
        back = GBDTModel.from_json(json.loads(m.dumps()))
        assert back.dumps() == m.dumps()
        assert np.array_equal(back.raw_scores(X), m.raw_scores(X))

    def test_schema_hash_checked(self):
        X, y = separable(30)
        obj = train_gbdt(X, y, HyperParams(n_iterations=1)).to_json()
        obj["feature_names"] = ["x", "y", "z"]
        with pytest.raises(ValueError, match="schema hash"):
            GBDTModel.from_json(obj)

    def test_column_count_checked(self):
        X, y = separable(30)
        m = train_gbdt(X, y, HyperParams(n_iterations=1))
        with pytest.raises(ValueError):
            m.predict_proba(X[:, :2])

    def test_leaf_values_finite(self):
        X, y = separable(60)
        m = train_gbdt(X, y, HyperParams(n_iterations=10))
        assert all(np.all(np.isfinite(t.value)) for per in m.trees for t in per)
