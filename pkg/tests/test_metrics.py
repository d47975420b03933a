from collections import deque

import numpy as np
import pandas as pd
import pytest
from numpy.testing import assert_allclose
from scipy.optimize import linear_sum_assignment

from app.dataset import generate_synthetic
from app.errors import DimensionError, UndefinedMetricError
from app.metrics import (
    CSV_COLUMNS,
    MetricAccumulator,
    confusion,
    evaluate,
    extract_targets,
    f1_normalized,
    image_metrics,
    iou,
    match_targets,
    niou,
    pd_fa,
    precision_recall,
    write_report,
)
from app.models import ConfusionCounts, Target


def _flood_fill_components(mask):
    seen = np.zeros(mask.shape, dtype=bool)
    components = []
    for start in zip(*np.nonzero(mask)):
        if seen[start]:
            continue
        seen[start] = True
        queue, pixels = deque([start]), []
        while queue:
            r, c = queue.popleft()
            pixels.append((r, c))
            for dr in (-1, 0, 1):
                for dc in (-1, 0, 1):
                    nr, nc = r + dr, c + dc
                    if 0 <= nr < mask.shape[0] and 0 <= nc < mask.shape[1] and mask[nr, nc] and not seen[nr, nc]:
                        seen[nr, nc] = True
                        queue.append((nr, nc))
        components.append(np.array(pixels))
    return components


def _target(row, col):
    return Target(centroid=(float(row), float(col)), pixels=np.array([[int(row), int(col)]]))


def _block(mask, row, col, rows=1, cols=1):
    mask[row:row + rows, col:col + cols] = 1
    return mask


class TestPixelMetrics:
    @pytest.mark.parametrize("seed", range(200))
    def test_random_pairs_match_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        pred = (rng.random((16, 16)) > rng.uniform(0.5, 1.0)).astype(np.uint8)
        label = (rng.random((16, 16)) > rng.uniform(0.5, 1.0)).astype(np.uint8)
        t = p = tp = 0
        for r in range(16):
            for c in range(16):
                t += int(label[r, c])
                p += int(pred[r, c])
                tp += int(label[r, c] and pred[r, c])
        counts = confusion(pred, label)
        assert (counts.T, counts.P, counts.TP) == (t, p, tp)
        union = t + p - tp
        assert iou(counts) == pytest.approx(tp / union if union else 1.0)
        precision, recall = precision_recall(counts)
        if p:
            assert precision == pytest.approx(tp / p)
        if t:
            assert recall == pytest.approx(tp / t)

    def test_two_empty_masks_agree(self):
        counts = confusion(np.zeros((4, 4)), np.zeros((4, 4)))
        assert iou(counts) == 1.0
        assert precision_recall(counts) == (1.0, 1.0)

    def test_empty_prediction_on_a_target(self):
        counts = confusion(np.zeros((4, 4)), _block(np.zeros((4, 4)), 1, 1))
        assert iou(counts) == 0.0
        assert precision_recall(counts) == (0.0, 0.0)

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            confusion(np.zeros((4, 4)), np.zeros((4, 5)))

    def test_iou_as_printed_subtracts_false_positives(self):
        counts = ConfusionCounts(T=4, P=8, TP=3)
        assert iou(counts) == pytest.approx(3 / 9)
        assert iou(counts, as_printed=True) == pytest.approx(3 / 7)

    def test_niou_is_the_mean_of_per_image_iou(self):
        per_image = [ConfusionCounts(T=2, P=2, TP=2), ConfusionCounts(T=2, P=2, TP=0)]
        assert niou(per_image) == pytest.approx(0.5)
        assert iou(sum(per_image[1:], per_image[0])) == pytest.approx(2 / 6)

    def test_niou_of_nothing(self):
        with pytest.raises(UndefinedMetricError):
            niou([])

    def test_f1_modes(self):
        pairs = [(0.5, 1.0), (0.0, 0.0)]
        assert f1_normalized(pairs) == pytest.approx((2 * 0.5 / 1.5 + 0.0) / 2)
        assert f1_normalized(pairs, as_printed=True) == pytest.approx((0.5 / 1.5) / 2)


class TestTargets:
    @pytest.mark.parametrize("seed", range(50))
    def test_components_match_flood_fill(self, seed):
        rng = np.random.default_rng(seed)
        mask = (rng.random((16, 16)) > 0.8).astype(np.uint8)
        found = extract_targets(mask)
        expected = _flood_fill_components(mask)
        assert len(found) == len(expected)
        got = sorted((t.area, round(t.centroid[0], 9), round(t.centroid[1], 9)) for t in found)
        want = sorted((len(px), round(px[:, 0].mean(), 9), round(px[:, 1].mean(), 9)) for px in expected)
        assert got == want

    def test_diagonal_pixels_are_one_target(self):
        mask = np.zeros((4, 4), dtype=np.uint8)
        mask[0, 0] = mask[1, 1] = mask[2, 2] = 1
        assert len(extract_targets(mask)) == 1

    def test_distance_threshold_is_strict(self):
        assert match_targets([_target(0, 0)], [Target(centroid=(0.0, 2.9), pixels=np.zeros((1, 2)))]).T_correct == 1
        assert match_targets([_target(0, 0)], [_target(0, 3)]).T_correct == 0

    def test_each_prediction_matches_once(self):
        match = match_targets([_target(0, 0), _target(0, 2)], [_target(0, 1)])
        assert match.T_correct == 1
        assert match.matches[0][1] == 0

    def test_closest_pair_wins(self):
        match = match_targets([_target(0, 0), _target(0, 4)], [_target(0, 2.5)])
        assert match.matches == [(1, 0, 1.5)]

    @pytest.mark.parametrize("seed", range(30))
    def test_greedy_matches_the_optimal_assignment_on_separated_targets(self, seed):
        rng = np.random.default_rng(seed)
        grid = [(10.0 * r, 10.0 * c) for r in range(4) for c in range(4)]
        labels = [_target(r, c) for r, c in grid if rng.random() < 0.6]
        preds = []
        for r, c in grid:
            if rng.random() < 0.6:
                dr, dc = rng.uniform(-2.0, 2.0, size=2)
                preds.append(Target(centroid=(r + dr, c + dc), pixels=np.zeros((1, 2))))
        match = match_targets(labels, preds)
        if not labels or not preds:
            assert match.T_correct == 0
            return
        cost = np.array([[np.hypot(lt.centroid[0] - pt.centroid[0], lt.centroid[1] - pt.centroid[1])
                          for pt in preds] for lt in labels])
        rows, cols = linear_sum_assignment(np.where(cost < 3.0, cost, 1e6))
        assert match.T_correct == int(np.sum(cost[rows, cols] < 3.0))

    def test_unmatched_prediction_pixels_are_false_alarms(self):
        label = _block(np.zeros((32, 32), dtype=np.uint8), 4, 4, 2, 2)
        pred = _block(_block(np.zeros((32, 32), dtype=np.uint8), 4, 4, 2, 2), 20, 20, 1, 3)
        row, _, match = image_metrics("x", pred, label)
        assert (match.T_correct, match.T_All, match.P_false, match.P_All) == (1, 1, 3, 1024)
        assert (row.n_label_targets, row.n_pred_targets, row.false_pixels) == (1, 2, 3)


def _fa_fixture():
    size = (256, 256)
    pred1 = _block(_block(np.zeros(size, dtype=np.uint8), 10, 10, 3, 3), 100, 100, 1, 3)
    label1 = _block(np.zeros(size, dtype=np.uint8), 10, 10, 3, 3)
    pred2 = _block(np.zeros(size, dtype=np.uint8), 50, 50, 2, 2)
    label2 = np.zeros(size, dtype=np.uint8)
    pred3 = np.zeros(size, dtype=np.uint8)
    label3 = _block(np.zeros(size, dtype=np.uint8), 200, 200)
    return [pred1, pred2, pred3], [label1, label2, label3]


class TestDatasetReport:
    def test_pd_and_fa_fixture(self):
        preds, labels = _fa_fixture()
        report = evaluate(preds, labels, ids=["a", "b", "c"])
        assert (report.T_correct, report.T_All, report.P_false, report.P_All) == (1, 2, 7, 196608)
        assert report.pd == pytest.approx(0.5)
        assert report.fa == pytest.approx(7 / 196608)
        assert report.fa_e6 == pytest.approx(7e6 / 196608)

    def test_labels_as_predictions_are_perfect(self, small_scene):
        labels = [s.mask for s in generate_synthetic(small_scene, 6)]
        report = evaluate(labels, labels)
        assert (report.iou, report.niou, report.pd, report.fa, report.f1) == (1.0, 1.0, 1.0, 0.0, 1.0)

    def test_pd_without_targets_is_undefined(self):
        with pytest.raises(UndefinedMetricError):
            evaluate([np.zeros((4, 4))], [np.zeros((4, 4))])
        with pytest.raises(UndefinedMetricError):
            pd_fa([])

    def test_accumulator_can_report_undefined_pd_as_nan(self):
        acc = MetricAccumulator()
        acc.update("a", _block(np.zeros((8, 8)), 1, 1), np.zeros((8, 8)))
        report = acc.report(allow_undefined_pd=True)
        assert np.isnan(report.pd)
        assert report.fa == pytest.approx(1 / 64)

    def test_accumulator_reset(self):
        acc = MetricAccumulator()
        acc.update("a", np.zeros((4, 4)), np.zeros((4, 4)))
        acc.reset()
        assert len(acc) == 0
        with pytest.raises(UndefinedMetricError):
            acc.report()

    def test_prediction_count_must_match(self):
        with pytest.raises(DimensionError):
            evaluate([np.zeros((4, 4))], [])

    def test_reports_are_written_as_csv(self, tmp_path):
        preds, labels = _fa_fixture()
        rows_path, summary_path = write_report(evaluate(preds, labels), tmp_path / "metrics.csv")
        rows = pd.read_csv(rows_path)
        summary = pd.read_csv(summary_path)
        assert list(rows.columns) == CSV_COLUMNS
        assert len(rows) == 3
        assert summary_path.name == "metrics_summary.csv"
        assert summary.loc[0, "P_All"] == 196608
        assert summary.loc[0, "f1_mode"] == "harmonic"
        assert_allclose(summary.loc[0, "fa_e6"], 7e6 / 196608)
