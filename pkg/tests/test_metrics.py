from __future__ import annotations

import numpy as np
import pytest

from marrowbench.classification import ScoreTable, classification_report
from marrowbench.core import SchemaError, model_classes
from marrowbench.metrics import (CLASSIFY_SUMMARIES, classify_items, classify_names, classify_vector, detect_items,
                                 detect_vector, diag_items, diag_names, diag_vector, resolve_statistic,
                                 table_items)


def random_table(rng, n=200):
    classes = model_classes()
    K = len(classes)
    truth = rng.integers(0, K, n)
    scores = rng.dirichlet(np.ones(K), n)
    scores[np.arange(n), truth] += rng.random(n) * (rng.random(n) < 0.6)
    return ScoreTable(scores / scores.sum(1, keepdims=True), truth, classes)


class TestRegistry:
    def test_mean_field(self):
        stat = resolve_statistic("mean:x")
        recs = [{"g": "b", "x": 1.0}, {"g": "a", "x": 2.0}, {"g": "b", "x": 6.0}]
        s = stat.sample(recs, "g")
        assert list(s.cluster_ids) == ["a", "b"] and s.sizes.tolist() == [1, 2]
        assert s.evaluate() == 3.0

    @pytest.mark.parametrize("name", ["classify:nope", "detect:map", "diag:f1:XYZ", "median", "mean:"])
    def test_unknown(self, name):
        with pytest.raises(KeyError):
            resolve_statistic(name)

    def test_missing_group_field(self):
        with pytest.raises(SchemaError, match="patient"):
            resolve_statistic("mean:x").sample([{"x": 1}], "patient")

    def test_non_numeric_field(self):
        with pytest.raises(SchemaError):
            resolve_statistic("mean:x").sample([{"g": 1, "x": "abc"}], "g")


class TestClassify:
    def test_vector_agrees_with_report(self, rng):
        t = random_table(rng)
        v = classify_vector(table_items(t), t.classes)
        rep = classification_report(t)
        names = classify_names(t.classes)
        assert len(v) == len(names) == len(CLASSIFY_SUMMARIES) + 3 * len(t.classes)
        assert v[names.index("top1")] == pytest.approx(rep["top1"])
        assert v[names.index("top2")] == pytest.approx(rep["top2"])
        assert v[names.index("auroc")] == pytest.approx(rep["auroc_macro_ovr"])
        assert v[names.index("median_f1")] == pytest.approx(rep["median_f1"])
        assert v[names.index("mean_f1")] == pytest.approx(rep["mean_f1"])

    def test_per_class_statistic_matches_vector(self, rng):
        t = random_table(rng)
        items = table_items(t)
        v = classify_vector(items, t.classes)
        names = classify_names(t.classes)
        for name in ("f1:Lymphocyte", "precision:Monocyte", "recall:Megakaryocyte"):
            stat = resolve_statistic("classify:" + name)
            assert stat.func(items) == v[names.index(name)]

    def test_pred_records_become_one_hot(self):
        recs = [{"truth": "Lymphocyte", "pred": "Monocyte"}, {"truth": "monocyte", "pred": "Monocyte"}]
        items = classify_items(recs)
        classes = model_classes()
        assert items[:, 0].tolist() == [classes.index("Lymphocyte"), classes.index("Monocyte")]
        assert items[:, 1:].sum(axis=1).tolist() == [1.0, 1.0]
        assert resolve_statistic("classify:precision:Monocyte").func(items) == 0.5

    def test_bad_scores_length(self):
        with pytest.raises(SchemaError):
            classify_items([{"truth": "Lymphocyte", "scores": [0.5, 0.5]}])


class TestDetect:
    def test_pooled_counts_and_ap(self):
        recs = [{"tp": 2, "fp": 1, "fn": 0, "scored": [[0.9, 1], [0.8, 0], [0.7, 1]]},
                {"tp": 1, "fp": 0, "fn": 1, "scored": [[0.95, 1]]}]
        p, r, f1, ap = detect_vector(detect_items(recs))
        assert (p, r) == (0.75, 0.75) and f1 == 0.75
        # ranked flags 1,1,0,1 over 4 ground truths: 1/4 + 1/4 + 3/4 * 1/4
        assert ap == pytest.approx(0.6875, abs=1e-15)

    def test_no_ground_truth_gives_nan_ap(self):
        v = detect_vector(detect_items([{"tp": 0, "fp": 2, "fn": 0, "scored": [[0.5, 0], [0.4, 0]]}]))
        assert v[:3].tolist() == [0.0, 0.0, 0.0] and np.isnan(v[3])

    def test_schema(self):
        with pytest.raises(SchemaError):
            detect_items([{"tp": 1}])


class TestDiag:
    def test_hand_counts(self):
        recs = [{"truth": t, "pred": p} for t, p in
                [("ALL", "ALL"), ("ALL", "AML"), ("AML", "AML"), ("CML", "CML"), ("CML", "AML")]]
        v = diag_vector(diag_items(recs))
        names = diag_names()
        assert v[names.index("f1:ALL")] == pytest.approx(2 / 3)
        assert v[names.index("precision:AML")] == pytest.approx(1 / 3)
        assert v[names.index("f1:CML")] == pytest.approx(2 / 3)
        assert v[0] == pytest.approx((2 / 3 + 0.5 + 2 / 3) / 3)

    def test_unknown_label(self):
        with pytest.raises(SchemaError):
            diag_items([{"truth": "MDS", "pred": "ALL"}])
