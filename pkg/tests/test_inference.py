import numpy as np
import pytest

from rgbdseg.imaging import SegmentMask
from rgbdseg.inference import (
    SceneLabeling,
    evaluate,
    load_labeling,
    load_legend,
    paint_by_area_oracle,
    pool_upper_bound,
    resolve_conflict,
    save_labeling,
    select_top_confident,
    sequential_paint,
)
from rgbdseg.recognition import LabeledSegment


def seg(h, w, y0, y1, x0, x1, class_id=1, confidence=0.5):
    bits = np.zeros((h, w), dtype=bool)
    bits[y0:y1, x0:x1] = True
    return LabeledSegment(mask=SegmentMask(bits), class_id=class_id,
                          confidence=confidence)


def random_segments(rng, n, h=64, w=64, classes=5):
    out = []
    for _ in range(n):
        y, x = rng.integers(0, h - 6, 2)
        hh, ww = rng.integers(4, min(h, 40), 2)
        out.append(seg(h, w, y, min(h, y + hh), x, min(w, x + ww),
                       class_id=int(rng.integers(1, classes + 1)),
                       confidence=float(rng.random())))
    return out


class TestSelectTopConfident:
    def test_short_list_returned_whole_sorted(self):
        segs = [seg(4, 4, 0, 2, 0, 2, confidence=c) for c in (0.2, 0.9)]
        out = select_top_confident(segs, 10)
        assert [s.confidence for s in out] == [0.9, 0.2]

    def test_top_two_of_three(self):
        segs = [seg(4, 4, 0, 2, 0, 2, confidence=c) for c in (0.9, 0.1, 0.5)]
        out = select_top_confident(segs, 2)
        assert [s.confidence for s in out] == [0.9, 0.5]

    def test_ties_keep_original_order(self):
        segs = [seg(4, 4, 0, 2, 0, 2, class_id=k, confidence=0.5)
                for k in (1, 2, 3)]
        out = select_top_confident(segs, 3)
        assert [s.class_id for s in out] == [1, 2, 3]

    def test_s_must_be_positive(self):
        with pytest.raises(ValueError):
            select_top_confident([], 0)


class TestResolveConflict:
    def test_overlap_smaller_wins(self):
        small = seg(64, 64, 0, 10, 0, 10, confidence=0.1)     # 100 px
        large = seg(64, 64, 0, 40, 0, 25, confidence=0.9)     # 1000 px
        assert resolve_conflict(small, large, "overlap") is small

    def test_overlap_confidence_similar_sizes_use_confidence(self):
        a = seg(64, 64, 0, 20, 0, 20, confidence=0.3)  # 400 px
        b = seg(64, 64, 0, 25, 0, 20, confidence=0.8)  # 500 px; 400 >= 250
        assert resolve_conflict(a, b, "overlap_confidence") is b

    def test_overlap_confidence_size_branch_fires(self):
        a = seg(64, 64, 0, 10, 0, 10, confidence=0.3)   # 100 px
        b = seg(64, 64, 0, 40, 0, 25, confidence=0.9)   # 1000 px; 100 < 500
        assert resolve_conflict(a, b, "overlap_confidence") is a

    def test_confidence_only(self):
        a = seg(64, 64, 0, 10, 0, 10, confidence=0.3)
        b = seg(64, 64, 0, 40, 0, 25, confidence=0.9)
        assert resolve_conflict(a, b, "confidence") is b

    def test_equal_everything_previous_wins(self):
        a = seg(8, 8, 0, 4, 0, 4, confidence=0.5)
        b = seg(8, 8, 2, 6, 2, 6, confidence=0.5)
        assert resolve_conflict(a, b, "overlap") is b

    def test_disjoint_inputs_rejected(self):
        a = seg(8, 8, 0, 2, 0, 2)
        b = seg(8, 8, 4, 8, 4, 8)
        with pytest.raises(ValueError):
            resolve_conflict(a, b, "overlap")


class TestSequentialPaint:
    def test_nested_inner_owns_core_outer_keeps_ring(self):
        outer = seg(16, 16, 2, 14, 2, 14, class_id=1, confidence=0.9)
        inner = seg(16, 16, 5, 11, 5, 11, class_id=2, confidence=0.1)
        lab = sequential_paint([outer, inner], "overlap")
        assert np.all(lab.class_map[5:11, 5:11] == 2)
        ring = outer.mask.bits & ~inner.mask.bits
        assert np.all(lab.class_map[ring] == 1)

    def test_single_segment(self):
        s = seg(8, 8, 1, 5, 2, 7, class_id=3)
        lab = sequential_paint([s], "overlap")
        np.testing.assert_array_equal(lab.class_map == 3, s.mask.bits)
        assert np.all(lab.owner_map[s.mask.bits] == 0)
        assert np.all(lab.owner_map[~s.mask.bits] == -1)

    def test_matches_area_sort_oracle(self):
        rng = np.random.default_rng(31)
        for _ in range(20):
            segs = random_segments(rng, 20)
            lab = sequential_paint(segs, "overlap")
            oracle = paint_by_area_oracle(segs)
            np.testing.assert_array_equal(lab.class_map, oracle)

    def test_owner_consistency_invariants(self):
        rng = np.random.default_rng(32)
        segs = random_segments(rng, 15)
        lab = sequential_paint(segs, "overlap_confidence")
        covered = np.zeros_like(lab.class_map, dtype=bool)
        for s in segs:
            covered |= s.mask.bits
        assert np.all((lab.owner_map >= 0) == covered)
        owned = lab.owner_map >= 0
        ys, xs = np.nonzero(owned)
        for y, x in zip(ys, xs):
            owner = segs[lab.owner_map[y, x]]
            assert owner.mask.bits[y, x]
            assert lab.class_map[y, x] == owner.class_id
        assert np.all(lab.class_map[~owned] == 0)

    def test_deterministic(self):
        rng = np.random.default_rng(33)
        segs = random_segments(rng, 12)
        a = sequential_paint(segs, "overlap_confidence")
        b = sequential_paint(segs, "overlap_confidence")
        np.testing.assert_array_equal(a.class_map, b.class_map)
        np.testing.assert_array_equal(a.owner_map, b.owner_map)


class TestEvaluate:
    def test_perfect_prediction(self):
        rng = np.random.default_rng(34)
        cmap = rng.integers(0, 4, (8, 8)).astype(np.int32)
        truth = SceneLabeling(cmap, np.where(cmap > 0, 0, -1).astype(np.int32))
        metrics = evaluate(truth, truth)
        assert metrics.mean_recall == 1.0
        assert all(v == 1.0 for v in metrics.per_class_recall.values())

    def test_all_unlabeled_prediction(self):
        cmap = np.ones((6, 6), dtype=np.int32)
        truth = SceneLabeling(cmap, np.zeros((6, 6), dtype=np.int32))
        empty = SceneLabeling(np.zeros((6, 6), dtype=np.int32),
                              np.full((6, 6), -1, dtype=np.int32))
        metrics = evaluate(empty, truth)
        assert metrics.mean_recall == 0.0

    def test_matches_counting_oracle(self):
        rng = np.random.default_rng(35)
        pred_map = rng.integers(0, 4, (8, 8)).astype(np.int32)
        true_map = rng.integers(0, 4, (8, 8)).astype(np.int32)
        pred = SceneLabeling(pred_map, np.where(pred_map > 0, 0, -1).astype(np.int32))
        truth = SceneLabeling(true_map, np.where(true_map > 0, 0, -1).astype(np.int32))
        metrics = evaluate(pred, truth)
        for c in (1, 2, 3):
            total = hit = 0
            for y in range(8):
                for x in range(8):
                    if true_map[y, x] == c:
                        total += 1
                        if pred_map[y, x] == c:
                            hit += 1
            if total:
                assert metrics.per_class_recall[c] == pytest.approx(hit / total)
        expected_mean = np.mean([metrics.per_class_recall[c]
                                 for c in metrics.per_class_recall])
        assert metrics.mean_recall == pytest.approx(expected_mean)


class TestPoolUpperBound:
    def test_best_iou_mean(self):
        gt = [seg(8, 8, 0, 4, 0, 4).mask, seg(8, 8, 4, 8, 4, 8).mask]
        pool = [seg(8, 8, 0, 4, 0, 4).mask, seg(8, 8, 4, 8, 4, 6).mask]
        ub = pool_upper_bound(gt, pool)
        assert ub == pytest.approx((1.0 + 0.5) / 2)

    def test_empty_gt(self):
        assert pool_upper_bound([], [seg(4, 4, 0, 2, 0, 2).mask]) == 0.0


class TestLabelingFiles:
    def test_roundtrip(self, tmp_path):
        rng = np.random.default_rng(36)
        cmap = rng.integers(0, 5, (6, 9)).astype(np.int32)
        lab = SceneLabeling(cmap, np.where(cmap > 0, 0, -1).astype(np.int32))
        names = {i: f"class{i}" for i in range(1, 5)}
        save_labeling(tmp_path / "l.pgm", tmp_path / "l.txt", lab, names)
        back = load_labeling(tmp_path / "l.pgm")
        np.testing.assert_array_equal(back.class_map, cmap)
        assert load_legend(tmp_path / "l.txt") == names
