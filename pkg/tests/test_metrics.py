import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rifcn.metrics import (
    ConfusionMatrix,
    Report,
    erode_boundary_gt,
    evaluate_tiles,
    f1_scores,
    iou,
    iou_scores,
    overall_accuracy,
)
from rifcn.model import IGNORE
from rifcn.selfcheck import brute_force_erosion, naive_confusion, naive_scores


def cm_from(counts):
    cm = ConfusionMatrix(len(counts))
    cm.counts[...] = counts
    return cm


class TestConfusion:
    def test_matches_naive(self, rng):
        truth = rng.integers(0, 4, (20, 20))
        truth[rng.random(truth.shape) < 0.1] = IGNORE
        pred = rng.integers(0, 4, (20, 20))
        cm = ConfusionMatrix(4).accumulate(truth, pred)
        assert np.array_equal(cm.counts, naive_confusion(truth, pred, 4))
        assert cm.total == int((truth != IGNORE).sum())

    def test_order_independent(self, rng):
        tiles = [(rng.integers(0, 3, (6, 6)), rng.integers(0, 3, (6, 6))) for _ in range(5)]
        a, b = ConfusionMatrix(3), ConfusionMatrix(3)
        for t, p in tiles:
            a.accumulate(t, p)
        for t, p in reversed(tiles):
            b.accumulate(t, p)
        assert np.array_equal(a.counts, b.counts)
        assert np.array_equal((ConfusionMatrix(3).accumulate(*tiles[0])
                               + ConfusionMatrix(3).accumulate(*tiles[1])).counts,
                              ConfusionMatrix(3).accumulate(*tiles[0]).accumulate(*tiles[1]).counts)

    def test_rejects(self):
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.zeros((2, 2)), np.zeros((2, 3)))
        with pytest.raises(ValueError):
            ConfusionMatrix(2).accumulate(np.array([2]), np.array([0]))


class TestScores:
    def test_f1_worked_example(self):
        # class 0: tp=8, fp=2, fn=2
        p, r, f1 = f1_scores(cm_from([[8, 2], [2, 0]]))
        assert p[0] == pytest.approx(0.8) and r[0] == pytest.approx(0.8)
        assert f1[0] == pytest.approx(0.8)
        assert f1[1] == 0.0

    def test_iou_example(self):
        truth = np.array([[1, 1, 0, 0]])
        pred = np.array([[0, 1, 1, 0]])
        assert iou(truth, pred, 1) == pytest.approx(1 / 3)

    def test_absent_class(self):
        cm = cm_from([[5, 0, 0], [0, 5, 0], [0, 0, 0]])
        p, r, f1 = f1_scores(cm)
        assert f1[2] == 0.0 and iou_scores(cm)[2] == 1.0

    def test_empty_matrix(self):
        with pytest.raises(ValueError):
            overall_accuracy(ConfusionMatrix(3))

    def test_against_naive(self, rng):
        for _ in range(20):
            counts = rng.integers(0, 30, (4, 4))
            cm = cm_from(counts)
            ref, oa = naive_scores(counts.tolist())
            p, r, f1 = f1_scores(cm)
            ious = iou_scores(cm)
            for c, (np_, nr, nf, ni) in enumerate(ref):
                assert abs(p[c] - np_) <= 1e-12 and abs(r[c] - nr) <= 1e-12
                assert abs(f1[c] - nf) <= 1e-12 and abs(ious[c] - ni) <= 1e-12
            assert abs(overall_accuracy(cm) - oa) <= 1e-12

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.integers(0, 50), min_size=9, max_size=9).filter(lambda v: sum(v) > 0))
    def test_bounds(self, values):
        cm = cm_from(np.array(values).reshape(3, 3))
        for arr in (*f1_scores(cm), iou_scores(cm)):
            assert np.all((arr >= 0) & (arr <= 1))
        assert 0 <= overall_accuracy(cm) <= 1

    def test_binary_task(self):
        truth = np.array([[0, 0, 1, 1]])
        pred = np.array([[0, 1, 1, 1]])
        rep = evaluate_tiles([(truth, pred)], 2)
        assert rep.oa == pytest.approx(0.75)
        assert rep.iou[1] == pytest.approx(2 / 3)


class TestErosion:
    @pytest.mark.parametrize("col", [3, 10, 17])
    def test_half_plane_band(self, col):
        truth = np.zeros((12, 24), dtype=np.uint8)
        truth[:, col:] = 1
        out = erode_boundary_gt(truth, 3)
        band = np.zeros(24, dtype=bool)
        band[max(0, col - 3):col + 3] = True
        assert np.array_equal(out == IGNORE, np.broadcast_to(band, truth.shape))

    def test_uniform_unchanged(self):
        truth = np.full((9, 9), 4, dtype=np.uint8)
        assert np.array_equal(erode_boundary_gt(truth), truth)

    def test_idempotent(self, rng):
        truth = rng.integers(0, 3, (6, 6)).repeat(5, 0).repeat(5, 1).astype(np.uint8)
        once = erode_boundary_gt(truth, 3)
        assert np.array_equal(erode_boundary_gt(once, 3), once)

    def test_monotone_in_radius(self, rng):
        truth = rng.integers(0, 3, (5, 5)).repeat(6, 0).repeat(6, 1).astype(np.uint8)
        prev = np.zeros(truth.shape, bool)
        for r in range(6):
            cur = erode_boundary_gt(truth, r) == IGNORE
            assert np.all(cur >= prev)
            prev = cur

    def test_transpose_symmetric(self, rng):
        truth = rng.integers(0, 4, (7, 5)).repeat(4, 0).repeat(3, 1).astype(np.uint8)
        assert np.array_equal(erode_boundary_gt(truth.T), erode_boundary_gt(truth).T)

    def test_against_brute_force(self, rng):
        truth = rng.integers(0, 3, (5, 5)).repeat(4, 0).repeat(4, 1).astype(np.uint8)
        truth[rng.random(truth.shape) < 0.05] = IGNORE
        assert np.array_equal(erode_boundary_gt(truth, 3), brute_force_erosion(truth, 3))

    def test_ignore_neighbours_do_not_erode(self):
        truth = np.zeros((7, 7), dtype=np.uint8)
        truth[3, 3] = IGNORE
        out = erode_boundary_gt(truth, 3)
        assert (out == IGNORE).sum() == 1


class TestEvaluateTiles:
    def test_perfect(self, rng):
        truth = rng.integers(0, 6, (16, 16))
        rep = evaluate_tiles([("a", truth, truth.copy())], 6)
        assert rep.mean_f1 == 1.0 and rep.oa == 1.0

    def test_all_wrong(self):
        truth = np.zeros((4, 4), dtype=int)
        rep = evaluate_tiles([(truth, truth + 1)], 2)
        assert rep.oa == 0.0 and rep.mean_f1 == 0.0

    def test_eroded_is_at_least_as_accurate_on_boundary_errors(self, rng):
        truth = np.zeros((32, 32), dtype=np.uint8)
        truth[:, 16:] = 1
        pred = truth.copy()
        pred[:, 15:17] = 1 - pred[:, 15:17]  # errors confined to the boundary
        plain = evaluate_tiles([(truth, pred)], 2)
        eroded = evaluate_tiles([(truth, pred)], 2, eroded=True)
        assert eroded.oa >= plain.oa and eroded.oa == 1.0
        assert eroded.cm.total == 32 * 26

    def test_class_subset_mean(self):
        truth = np.array([[0, 1, 2, 2]])
        pred = np.array([[0, 1, 0, 0]])
        rep = evaluate_tiles([(truth, pred)], 3, classes=[0, 1])
        assert rep.mean_f1 == pytest.approx((f1_scores(rep.cm)[2][0] + 1.0) / 2)

    def test_csv(self):
        truth = np.array([[0, 1]])
        rep = evaluate_tiles([("t", truth, truth)], 2, class_names=["bg", "fg"])
        lines = rep.to_csv().splitlines()
        assert lines[0] == "scope,class,precision,recall,f1,iou,value"
        assert "all,mean_f1,,,,,1.000000" in lines
        assert "t,fg,1.000000,1.000000,1.000000,1.000000," in lines
        assert lines[-1] == "all,eroded,,,,,0"
        assert "mean F1" in rep.to_table()

    def test_empty(self):
        with pytest.raises(ValueError):
            evaluate_tiles([], 3)

    def test_report_type(self):
        assert isinstance(evaluate_tiles([(np.zeros((2, 2), int),) * 2], 1), Report)
