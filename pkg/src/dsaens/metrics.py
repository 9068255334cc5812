"""Evaluation metrics and per-epoch record keeping.

Keypoint distances are Euclidean, in pixels. PCK normalizes each image's
distances by the ground-truth distance between a dataset-specific keypoint
pair and counts hits over all image/keypoint combinations (the threshold is
inclusive). Images whose normalization pair coincides are excluded with a
warning count rather than failing the evaluation.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field, asdict
from pathlib import Path
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, InputError


def error_rate(predictions: Sequence[int], labels: Sequence[int]) -> float:
    """Fraction of mismatched class predictions."""
    pred = np.asarray(predictions)
    lab = np.asarray(labels)
    if pred.shape != lab.shape or pred.size == 0:
        raise InputError("predictions and labels must be equal-length and non-empty")
    return float(np.mean(pred != lab))


def keypoint_mse(pred: np.ndarray, gt: np.ndarray) -> float:
    """Mean Euclidean distance between predicted and true keypoint locations.

    Both arrays are shaped (images, keypoints, 2).
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise InputError(f"expected matching (I, K, 2) arrays, got {pred.shape} vs {gt.shape}")
    dist = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    return float(dist.mean())


@dataclass(frozen=True)
class PckSpec:
    """PCK threshold and the keypoint pair defining the normalization distance."""

    threshold: float
    norm_pair: tuple[int, int]

    def __post_init__(self):
        if not 0 < self.threshold <= 1:
            raise ConfigurationError("PCK threshold must be in (0, 1]")
        a, b = self.norm_pair
        if a == b:
            raise ConfigurationError("normalization pair must be two distinct keypoints")


def pck(
    pred: np.ndarray,
    gt: np.ndarray,
    spec: PckSpec,
    return_warnings: bool = False,
):
    """Fraction of keypoints whose normalized error is within the threshold."""
    result = pck_multi(pred, gt, spec.norm_pair, [spec.threshold], return_warnings=True)
    values, warnings = result
    value = values[spec.threshold]
    if return_warnings:
        return value, warnings
    return value


def pck_multi(
    pred: np.ndarray,
    gt: np.ndarray,
    norm_pair: tuple[int, int],
    thresholds: Sequence[float],
    return_warnings: bool = False,
):
    """Evaluate PCK at several thresholds in one pass over the distances."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 3 or pred.shape[-1] != 2:
        raise InputError(f"expected matching (I, K, 2) arrays, got {pred.shape} vs {gt.shape}")
    a, b = norm_pair
    if a == b or not (0 <= a < gt.shape[1]) or not (0 <= b < gt.shape[1]):
        raise ConfigurationError(f"invalid normalization pair {norm_pair} for K={gt.shape[1]}")
    for t in thresholds:
        if not 0 < t <= 1:
            raise ConfigurationError(f"PCK threshold must be in (0, 1], got {t}")

    ref = np.sqrt(((gt[:, a] - gt[:, b]) ** 2).sum(axis=-1))
    valid = ref > 0
    warnings = int((~valid).sum())
    dist = np.sqrt(((pred - gt) ** 2).sum(axis=-1))
    if not valid.any():
        raise InputError("every image has a degenerate normalization distance")
    normalized = dist[valid] / ref[valid, None]
    values = {float(t): float((normalized <= t).mean()) for t in thresholds}
    if return_warnings:
        return values, warnings
    return values


def decode_heatmaps(heatmaps: np.ndarray) -> np.ndarray:
    """Heatmaps (..., K, H, W) -> pixel coordinates (..., K, 2) as (x, y).

    Takes the argmax pixel and shifts a quarter pixel toward the larger
    neighbor along each axis, the usual sub-pixel refinement.
    """
    hm = np.asarray(heatmaps, dtype=np.float64)
    if hm.ndim < 3:
        raise InputError("heatmaps need shape (..., K, H, W)")
    lead = hm.shape[:-2]
    h, w = hm.shape[-2:]
    flat = hm.reshape(-1, h, w)
    coords = np.zeros((flat.shape[0], 2), dtype=np.float64)
    for n in range(flat.shape[0]):
        idx = int(flat[n].argmax())
        y, x = divmod(idx, w)
        fx, fy = float(x), float(y)
        if 0 < x < w - 1:
            fx += 0.25 * np.sign(flat[n, y, x + 1] - flat[n, y, x - 1])
        if 0 < y < h - 1:
            fy += 0.25 * np.sign(flat[n, y + 1, x] - flat[n, y - 1, x])
        coords[n] = (fx, fy)
    return coords.reshape(*lead, 2)


@dataclass
class MetricsRecord:
    """One epoch's measurements for one run."""

    epoch: int
    seed: int
    loss_supervised: Optional[float] = None
    loss_ensemble: Optional[float] = None
    loss_lb: Optional[float] = None
    loss_total: Optional[float] = None
    error_rate: Optional[float] = None
    head_error_rates: Optional[list[float]] = None
    mse: Optional[float] = None
    pck: Optional[dict[str, float]] = None
    mask_rate: Optional[float] = None
    head_correlation: Optional[float] = None
    agreement: Optional[float] = None
    cosine: Optional[float] = None

    def to_json_line(self) -> str:
        payload = {k: v for k, v in asdict(self).items() if v is not None}
        return json.dumps(payload, sort_keys=True)

    @classmethod
    def from_json_line(cls, line: str) -> "MetricsRecord":
        return cls(**json.loads(line))


def write_metrics_jsonl(path: Union[str, Path], records: Iterable[MetricsRecord]) -> None:
    with open(path, "w") as fh:
        for record in records:
            fh.write(record.to_json_line() + "\n")


def read_metrics_jsonl(path: Union[str, Path]) -> list[MetricsRecord]:
    records = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                records.append(MetricsRecord.from_json_line(line))
    return records


def aggregate_runs(records: Sequence[MetricsRecord]) -> dict[str, tuple[float, Optional[float]]]:
    """Mean and sample standard deviation per metric across seeds.

    With a single record the deviation is reported as None. Nested PCK values
    are flattened to ``pck@T`` keys.
    """
    if not records:
        raise InputError("need at least one record to aggregate")
    table: dict[str, list[float]] = {}
    for record in records:
        for key, value in asdict(record).items():
            if key in ("epoch", "seed") or value is None:
                continue
            if key == "pck":
                for t, v in value.items():
                    table.setdefault(f"pck@{t}", []).append(float(v))
            elif key == "head_error_rates":
                table.setdefault("mean_head_error_rate", []).append(
                    float(np.mean(value))
                )
            else:
                table.setdefault(key, []).append(float(value))
    summary = {}
    for key, values in table.items():
        mean = float(np.mean(values))
        std = float(np.std(values, ddof=1)) if len(values) >= 2 else None
        summary[key] = (mean, std)
    return summary


def write_summary_csv(
    path: Union[str, Path],
    summary: dict[str, tuple[float, Optional[float]]],
    num_seeds: int,
) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "mean", "std", "seeds"])
        for metric in sorted(summary):
            mean, std = summary[metric]
            writer.writerow([metric, f"{mean:.10g}", "" if std is None else f"{std:.10g}", num_seeds])
