import math

import numpy as np
import pytest

from dsaens.errors import ConfigurationError, InputError
from dsaens.metrics import (
    MetricsRecord,
    PckSpec,
    aggregate_runs,
    decode_heatmaps,
    error_rate,
    keypoint_mse,
    pck,
    pck_multi,
    read_metrics_jsonl,
    write_metrics_jsonl,
)


def mse_oracle(pred, gt):
    total = 0.0
    images, keypoints = pred.shape[:2]
    for i in range(images):
        for k in range(keypoints):
            dx = pred[i, k, 0] - gt[i, k, 0]
            dy = pred[i, k, 1] - gt[i, k, 1]
            total += math.sqrt(dx * dx + dy * dy)
    return total / (images * keypoints)


def pck_oracle(pred, gt, pair, threshold):
    hits = 0
    total = 0
    for i in range(pred.shape[0]):
        ax, ay = gt[i, pair[0]]
        bx, by = gt[i, pair[1]]
        ref = math.sqrt((ax - bx) ** 2 + (ay - by) ** 2)
        if ref == 0:
            continue
        for k in range(pred.shape[1]):
            d = math.sqrt(
                (pred[i, k, 0] - gt[i, k, 0]) ** 2 + (pred[i, k, 1] - gt[i, k, 1]) ** 2
            )
            hits += d / ref <= threshold
            total += 1
    return hits / total


class TestErrorRate:
    def test_all_correct(self):
        assert error_rate([1, 2, 3], [1, 2, 3]) == 0.0

    def test_all_wrong(self):
        assert error_rate([0, 0, 0], [1, 2, 3]) == 1.0

    def test_three_of_forty(self):
        labels = np.zeros(40, dtype=int)
        preds = labels.copy()
        preds[[4, 17, 33]] = 1
        assert error_rate(preds, labels) == pytest.approx(0.075, abs=1e-12)

    def test_order_invariance(self):
        rng = np.random.default_rng(0)
        preds = rng.integers(0, 5, 30)
        labels = rng.integers(0, 5, 30)
        perm = rng.permutation(30)
        assert error_rate(preds, labels) == error_rate(preds[perm], labels[perm])

    def test_empty_rejected(self):
        with pytest.raises(InputError):
            error_rate([], [])


class TestKeypointMse:
    def test_perfect_prediction(self):
        gt = np.random.default_rng(1).random((3, 4, 2))
        assert keypoint_mse(gt, gt) == 0.0

    def test_three_four_five(self):
        gt = np.zeros((1, 1, 2))
        pred = np.array([[[3.0, 4.0]]])
        assert keypoint_mse(pred, gt) == pytest.approx(5.0, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(2)
        pred = rng.random((2, 2, 2)) * 10
        gt = rng.random((2, 2, 2)) * 10
        assert keypoint_mse(pred, gt) == pytest.approx(mse_oracle(pred, gt), abs=1e-12)

    def test_translation_invariance(self):
        rng = np.random.default_rng(3)
        pred = rng.random((4, 3, 2)) * 10
        gt = rng.random((4, 3, 2)) * 10
        shift = np.array([7.5, -2.25])
        assert keypoint_mse(pred + shift, gt + shift) == pytest.approx(
            keypoint_mse(pred, gt), abs=1e-9
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(InputError):
            keypoint_mse(np.zeros((2, 2, 2)), np.zeros((2, 3, 2)))


class TestPck:
    def test_perfect_prediction_any_threshold(self):
        gt = np.random.default_rng(4).random((3, 4, 2)) * 20
        spec = PckSpec(threshold=0.1, norm_pair=(0, 1))
        assert pck(gt, gt, spec) == 1.0

    def test_boundary_is_inclusive(self):
        gt = np.array([[[0.0, 0.0], [10.0, 0.0]]])  # reference distance 10
        pred = gt.copy()
        pred[0, 0] = [2.0, 0.0]  # error exactly 2 = 0.2 * 10
        spec = PckSpec(threshold=0.2, norm_pair=(0, 1))
        assert pck(pred, gt, spec) == 1.0

    def test_hand_counted_example(self):
        # distances {1, 2, 3, 5} with reference 10 and T=0.2 -> {1, 2} pass
        gt = np.zeros((1, 4, 2))
        gt[0, 1] = [10.0, 0.0]
        pred = gt.copy()
        pred[0, 0, 0] += 1.0
        pred[0, 1, 0] += 2.0
        pred[0, 2, 0] += 3.0
        pred[0, 3, 0] += 5.0
        spec = PckSpec(threshold=0.2, norm_pair=(0, 1))
        assert pck(pred, gt, spec) == pytest.approx(0.5, abs=1e-12)

    def test_multi_threshold_single_pass(self):
        rng = np.random.default_rng(5)
        gt = rng.random((6, 4, 2)) * 30
        pred = gt + rng.normal(0, 2.0, size=gt.shape)
        values = pck_multi(pred, gt, (0, 1), [0.1, 0.2, 0.3, 0.5])
        for t, v in values.items():
            assert v == pytest.approx(pck_oracle(pred, gt, (0, 1), t), abs=1e-12)

    def test_monotone_in_threshold(self):
        rng = np.random.default_rng(6)
        gt = rng.random((8, 5, 2)) * 30
        pred = gt + rng.normal(0, 3.0, size=gt.shape)
        values = pck_multi(pred, gt, (0, 1), np.linspace(0.05, 1.0, 20))
        ordered = [values[t] for t in sorted(values)]
        assert all(a <= b for a, b in zip(ordered, ordered[1:]))

    def test_joint_scaling_invariance(self):
        rng = np.random.default_rng(7)
        gt = rng.random((5, 3, 2)) * 10
        pred = gt + rng.normal(0, 1.0, size=gt.shape)
        spec = PckSpec(threshold=0.3, norm_pair=(0, 2))
        assert pck(pred * 4.5, gt * 4.5, spec) == pytest.approx(pck(pred, gt, spec), abs=1e-12)

    def test_degenerate_reference_excluded_with_warning(self):
        gt = np.zeros((2, 2, 2))
        gt[0, 1] = [10.0, 0.0]  # image 1 has coincident pair
        pred = gt.copy()
        pred[0, 0, 0] += 1.0
        spec = PckSpec(threshold=0.2, norm_pair=(0, 1))
        value, warnings = pck(pred, gt, spec, return_warnings=True)
        assert warnings == 1
        assert value == 1.0  # only image 0's keypoints are counted

    def test_all_degenerate_rejected(self):
        gt = np.zeros((1, 2, 2))
        with pytest.raises(InputError):
            pck(gt, gt, PckSpec(threshold=0.2, norm_pair=(0, 1)))

    def test_spec_validation(self):
        with pytest.raises(ConfigurationError):
            PckSpec(threshold=0.0, norm_pair=(0, 1))
        with pytest.raises(ConfigurationError):
            PckSpec(threshold=0.2, norm_pair=(1, 1))


class TestDecodeHeatmaps:
    def test_quarter_pixel_refinement(self):
        from dsaens.data import make_heatmaps

        coords = np.array([[[10.6, 7.2], [3.0, 14.0]]])
        maps = make_heatmaps(coords, 24, sigma=2.0)
        decoded = decode_heatmaps(maps[0])
        assert np.abs(decoded - coords[0]).max() <= 0.5

    def test_peak_at_border_stays_in_bounds(self):
        maps = np.zeros((1, 5, 5))
        maps[0, 0, 0] = 1.0
        decoded = decode_heatmaps(maps)
        assert decoded[0].tolist() == [0.0, 0.0]


class TestAggregate:
    def test_identical_records_zero_std(self):
        records = [
            MetricsRecord(epoch=5, seed=s, error_rate=0.25, loss_total=1.0)
            for s in range(3)
        ]
        summary = aggregate_runs(records)
        assert summary["error_rate"] == (0.25, 0.0)

    def test_two_seed_hand_values(self):
        records = [
            MetricsRecord(epoch=1, seed=0, error_rate=0.10),
            MetricsRecord(epoch=1, seed=1, error_rate=0.20),
        ]
        mean, std = aggregate_runs(records)["error_rate"]
        assert mean == pytest.approx(0.15, abs=1e-12)
        assert std == pytest.approx(0.1 / math.sqrt(2), abs=1e-9)

    def test_single_seed_std_absent(self):
        summary = aggregate_runs([MetricsRecord(epoch=0, seed=0, error_rate=0.3)])
        mean, std = summary["error_rate"]
        assert mean == 0.3 and std is None

    def test_pck_flattened(self):
        records = [
            MetricsRecord(epoch=0, seed=s, pck={"0.2": 0.5 + 0.1 * s}) for s in range(2)
        ]
        summary = aggregate_runs(records)
        assert summary["pck@0.2"][0] == pytest.approx(0.55)

    def test_jsonl_roundtrip(self, tmp_path):
        records = [
            MetricsRecord(epoch=i, seed=0, loss_total=float(i), error_rate=0.1 * i,
                          pck={"0.2": 0.9}, head_error_rates=[0.1, 0.2])
            for i in range(3)
        ]
        path = tmp_path / "metrics.jsonl"
        write_metrics_jsonl(path, records)
        again = read_metrics_jsonl(path)
        assert again == records
