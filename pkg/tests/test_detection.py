from __future__ import annotations

from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from marrowbench.core import BoundingBox
from marrowbench.detection import (Detection, MatchResult, ScoreMap, ap_from_flags, average_precision, decode_peaks,
                                   detection_prf, evaluate_rois, harmonic_f1, iou, match_detections, nms)
from oracles import ap_polyline_reference, greedy_match_reference, nms_reference

coord = st.floats(0, 200, allow_nan=False)
extent = st.floats(1, 80, allow_nan=False)
boxes = st.builds(BoundingBox, coord, coord, extent, extent)


def det(x, y, w, h, s):
    return Detection(BoundingBox(x, y, w, h), s)


class TestIoU:
    def test_examples(self):
        a = BoundingBox(0, 0, 10, 10)
        assert iou(a, a) == 1.0
        assert iou(a, BoundingBox(20, 20, 5, 5)) == 0.0
        assert iou(a, BoundingBox(5, 0, 10, 10)) == pytest.approx(1 / 3)

    @given(boxes, boxes)
    def test_symmetric_and_bounded(self, a, b):
        assert iou(a, b) == iou(b, a)
        assert 0.0 <= iou(a, b) <= 1.0

    @given(boxes)
    def test_self_overlap(self, a):
        assert iou(a, a) == pytest.approx(1.0)


class TestNMS:
    def test_single(self):
        d = det(0, 0, 5, 5, 0.5)
        assert nms([d]) == [d]

    def test_duplicate_keeps_higher(self):
        assert nms([det(0, 0, 5, 5, 0.8), det(0, 0, 5, 5, 0.9)]) == [det(0, 0, 5, 5, 0.9)]

    def test_cap_at_544(self, rng):
        scores = rng.random(600)
        dets = [det(20 * i, 0, 10, 10, float(s)) for i, s in enumerate(scores)]
        out = nms(dets)
        assert len(out) == 544
        assert sorted(d.score for d in out) == sorted(scores)[-544:]

    def test_threshold_is_strict(self):
        # IoU exactly 1/3: suppressed only when the threshold is below it
        a, b = det(0, 0, 10, 10, 0.9), det(5, 0, 10, 10, 0.8)
        assert len(nms([a, b], iou_thresh=0.5)) == 2
        assert len(nms([a, b], iou_thresh=0.3)) == 1

    @given(st.lists(st.tuples(boxes, st.floats(0, 1)), max_size=40), st.sampled_from([0.3, 0.5]))
    def test_matches_reference_and_is_idempotent(self, items, t):
        dets = [Detection(b, s) for b, s in items]
        out = nms(dets, t)
        ref = nms_reference([b.as_list() for b, _ in items], [s for _, s in items], t)
        assert out == [dets[i] for i in ref]
        assert nms(out, t) == out
        assert [d.score for d in out] == sorted((d.score for d in out), reverse=True)


class TestDecodePeaks:
    def test_zero_map(self):
        assert decode_peaks(ScoreMap(np.zeros((64, 64)))) == []

    def test_single_spike(self):
        m = np.zeros((100, 100))
        m[50, 50] = 0.9
        (d,) = decode_peaks(ScoreMap(m), default_edge=20)
        assert (d.bbox.x + d.bbox.w / 2, d.bbox.y + d.bbox.h / 2) == (50, 50)

    @pytest.mark.parametrize("gap, expected", [(8, 1), (10, 1), (11, 2)])
    def test_spike_separation(self, gap, expected):
        m = np.zeros((100, 100))
        m[40, 40] = m[40 + gap, 40 + 3] = 0.9
        assert len(decode_peaks(ScoreMap(m))) == expected

    def test_ties_keep_lexicographic_first(self):
        m = np.zeros((50, 50))
        m[20, 25] = m[22, 21] = 0.7
        (d,) = decode_peaks(ScoreMap(m), radius=5, default_edge=2)
        assert (d.bbox.y + 1, d.bbox.x + 1) == (20, 25)

    def test_size_channels_used(self):
        m = np.zeros((30, 30))
        m[10, 12] = 1.0
        sizes = np.zeros((2, 30, 30))
        sizes[:, 10, 12] = (8, 4)
        (d,) = decode_peaks(ScoreMap(m, sizes))
        assert (d.bbox.w, d.bbox.h, d.bbox.x, d.bbox.y) == (8, 4, 8, 8)

    def test_radius_must_be_positive(self):
        with pytest.raises(ValueError):
            decode_peaks(ScoreMap(np.zeros((4, 4))), radius=0)

    @given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
    def test_peaks_dominate_and_are_separated(self, seed, radius):
        r = np.random.default_rng(seed)
        m = np.round(r.random((24, 24)), 1)  # coarse values force ties
        peaks = decode_peaks(ScoreMap(m), radius=radius, score_thresh=0.0, default_edge=2)
        centers = [(int(d.bbox.y + 1), int(d.bbox.x + 1)) for d in peaks]
        for (pr, pc) in centers:
            win = m[max(pr - radius, 0):pr + radius + 1, max(pc - radius, 0):pc + radius + 1]
            assert m[pr, pc] >= win.max()
        for a in range(len(centers)):
            for b in range(a + 1, len(centers)):
                cheb = max(abs(centers[a][0] - centers[b][0]), abs(centers[a][1] - centers[b][1]))
                assert cheb > radius or m[centers[a]] != m[centers[b]]


class TestMatching:
    def test_one_to_one(self):
        gts = [BoundingBox(10 * i, 0, 5, 5) for i in range(4)]
        m = match_detections([Detection(g, 0.5) for g in gts], gts)
        assert (m.tp, m.fp, m.fn) == (4, 0, 0)

    def test_no_predictions(self):
        m = match_detections([], [BoundingBox(0, 0, 1, 1)] * 3)
        assert (m.tp, m.fp, m.fn) == (0, 0, 3)

    def test_two_predictions_one_truth(self):
        m = match_detections([det(0, 0, 10, 10, 0.9), det(1, 0, 10, 10, 0.8)], [BoundingBox(0, 0, 10, 10)])
        assert (m.tp, m.fp, m.fn) == (1, 1, 0)
        assert m.pairs[0][0] == 0

    @given(st.lists(st.tuples(boxes, st.floats(0, 1)), max_size=8), st.lists(boxes, max_size=6))
    def test_counts_and_reference(self, items, gts):
        preds = [Detection(b, s) for b, s in items]
        m = match_detections(preds, gts)
        assert m.tp + m.fn == len(gts) and m.tp + m.fp == len(preds)
        assert len({j for _, j, _ in m.pairs}) == len(m.pairs)
        assert all(v >= 0.5 for _, _, v in m.pairs)
        ref = greedy_match_reference([b.as_list() for b, _ in items], [s for _, s in items],
                                     [g.as_list() for g in gts])
        flags = [False] * len(preds)
        for i, _, _ in m.pairs:
            flags[i] = True
        assert flags == ref


class TestPRF:
    @pytest.mark.parametrize("counts, expected", [
        ((0, 0, 0), (1.0, 1.0, 1.0)),
        ((90, 10, 10), (0.9, 0.9, 0.9)),
        ((0, 3, 0), (0.0, 0.0, 0.0)),
        ((0, 0, 4), (0.0, 0.0, 0.0)),
    ])
    def test_conventions(self, counts, expected):
        assert detection_prf(MatchResult(*counts)) == pytest.approx(expected)


class TestAveragePrecision:
    def test_perfect(self):
        g = BoundingBox(0, 0, 10, 10)
        assert average_precision([Detection(g, 0.9)], [g]) == 1.0

    def test_one_hit_one_miss(self):
        gts = [BoundingBox(0, 0, 10, 10), BoundingBox(100, 100, 10, 10)]
        preds = [det(0, 0, 10, 10, 0.9), det(50, 50, 10, 10, 0.8)]
        assert average_precision(preds, gts) == 0.5

    def test_all_spurious(self):
        assert average_precision([det(50, 50, 5, 5, 0.4)], [BoundingBox(0, 0, 5, 5)]) == 0.0

    def test_needs_ground_truth(self):
        with pytest.raises(ValueError):
            average_precision([det(0, 0, 1, 1, 0.5)], [])

    @given(st.lists(st.tuples(st.sampled_from([0.1, 0.5, 0.9, 0.3]), st.booleans()), max_size=10),
           st.integers(1, 12))
    def test_matches_polyline_reference(self, scored, extra_gt):
        scores = [s for s, _ in scored]
        flags = [t for _, t in scored]
        n_gt = sum(flags) + extra_gt - 1 or 1
        ours = ap_from_flags(scores, flags, n_gt)
        assert ours == float(ap_polyline_reference(scores, flags, n_gt))


def test_evaluate_rois_pools_counts():
    g = BoundingBox(0, 0, 10, 10)
    rep = evaluate_rois({"a": [Detection(g, 0.9)], "b": [det(50, 50, 4, 4, 0.3)]}, {"a": [g], "c": [g]})
    assert (rep.tp, rep.fp, rep.fn, rep.n_rois) == (1, 1, 1, 3)
    assert rep.ap == float(ap_polyline_reference([0.9, 0.3], [True, False], 2))


def test_polyline_reference_hand_case():
    # ranks: TP, FP, TP over 2 truths -> 1/2 * 1 + 1/2 * 2/3
    assert ap_polyline_reference([0.9, 0.8, 0.7], [True, False, True], 2) == Fraction(5, 6)


@pytest.mark.parametrize("p, r, reported", [(0.967, 0.945, 0.956), (0.890, 0.904, 0.897)])
def test_published_detector_f1_consistency(p, r, reported):
    assert abs(harmonic_f1(p, r) - reported) <= 0.001
    assert harmonic_f1(p, r) == pytest.approx(1 / ((1 / p + 1 / r) / 2), rel=1e-14)


def test_harmonic_f1_zero():
    assert harmonic_f1(0.0, 0.0) == 0.0
