"""Experiment lifecycle: data assembly, training loops, artifacts.

All randomness of a run flows from its root seed through named sub-streams
(:func:`dsaens.config.derive_seed`), so two variants trained with the same
seed consume bit-identical data streams: batch order and augmentation draws
never depend on the model. Pseudo-labels are produced on weakly augmented
views and the consistency loss is applied to strongly augmented views.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import data as data_mod
from . import decorrelation, engine, metrics
from .config import RunConfig, derive_seed, emit_config
from .data import DataBundle
from .errors import ConfigurationError, TrainingDiverged
from .heads import EnsembleConfig, build_model

PCK_THRESHOLDS = (0.1, 0.2, 0.3, 0.5)
PROBE_SIZE = 64
PROBE_CORRELATION_SAMPLES = 16

# Named ablation rows -> (variant, lambda_lb override). "DSA-noadapter" is the
# adapters-off structure: shared/private concatenation without any
# decorrelation loss.
ABLATION_ROWS = {
    "DSA": ("DSA", None),
    "SDoAs": ("SDoAs", None),
    "CBE": ("CBE", None),
    "MHE": ("MHE", None),
    "single": ("single", None),
    "DSA-noadapter": ("CBE", 0.0),
}


def build_data(cfg: RunConfig) -> DataBundle:
    """Materialize the dataset a config points at, with label noise applied."""
    d = cfg.data
    if d.source == "path":
        bundle = data_mod.load_dataset(d.path)
        if bundle.manifest.task != cfg.run.task:
            raise ConfigurationError(
                f"dataset at {d.path} is for task {bundle.manifest.task!r}, "
                f"config wants {cfg.run.task!r}"
            )
    elif cfg.run.task == "classification":
        bundle = data_mod.synth_classification(
            num_classes=d.num_classes,
            image_size=d.image_size,
            split_sizes={"train": d.labeled, "unlabeled": d.unlabeled, "test": d.test},
            separability=d.separability,
            seed=d.seed,
        )
    else:
        bundle = data_mod.synth_keypoints(
            num_keypoints=d.num_keypoints,
            image_size=d.image_size,
            split_sizes={"train": d.labeled, "unlabeled": d.unlabeled, "test": d.test},
            heatmap_sigma=d.heatmap_sigma,
            seed=d.seed,
        )
    if d.label_noise > 0:
        if bundle.manifest.task != "classification":
            raise ConfigurationError("label noise only applies to classification data")
        noisy, _ = data_mod.inject_label_noise(
            bundle.labels["train"], d.label_noise, seed=d.seed
        )
        bundle.labels = dict(bundle.labels)
        bundle.labels["train"] = noisy
    return bundle


def build_net(cfg: RunConfig, seed: int) -> tuple[torch.nn.Module, Optional[EnsembleConfig]]:
    torch.manual_seed(derive_seed(seed, "model"))
    m = cfg.model
    num_outputs = cfg.data.num_classes if cfg.run.task == "classification" else cfg.data.num_keypoints
    if m.variant == "single":
        net = build_model(None, cfg.run.task, num_outputs)
        return net, None
    ens = EnsembleConfig.create(
        m.variant, m.heads, m.backbone_channels,
        private_channels=m.private_channels or None,
    )
    return build_model(ens, cfg.run.task, num_outputs), ens


class _Sampler:
    """Cyclic shuffled index stream, reseeded per epoch."""

    def __init__(self, count: int, rng: np.random.Generator):
        self.count = count
        self.rng = rng
        self.order = rng.permutation(count)
        self.pos = 0

    def take(self, n: int) -> np.ndarray:
        out = []
        while n > 0:
            if self.pos >= self.count:
                self.order = self.rng.permutation(self.count)
                self.pos = 0
            grab = min(n, self.count - self.pos)
            out.append(self.order[self.pos:self.pos + grab])
            self.pos += grab
            n -= grab
        return np.concatenate(out)


def _heatmap_targets(coords, manifest):
    return data_mod.make_heatmaps(coords, manifest.image_size, manifest.heatmap_sigma)


def _transport_heatmap_pseudo(pseudo, weak_params, strong_params, manifest):
    """Re-render heatmap pseudo-targets from the weak view's geometry into the
    strong view's: decode peaks, map them through strong @ inverse(weak), and
    swap the paired landmark channels when exactly one view is mirrored."""
    weak_mats, weak_flips = weak_params
    strong_mats, strong_flips = strong_params
    coords = metrics.decode_heatmaps(pseudo.targets.numpy())
    transport = np.stack([
        strong_mats[i] @ np.linalg.inv(weak_mats[i]) for i in range(len(weak_mats))
    ])
    moved = data_mod.transform_coords(
        coords, transport, swap=weak_flips != strong_flips,
        flip_pairs=manifest.flip_pairs,
    )
    targets = torch.from_numpy(_heatmap_targets(moved, manifest))
    return engine.PseudoLabels(targets=targets, mask=pseudo.mask)


def evaluate(net, bundle: DataBundle, task: str, batch_size: int = 250) -> dict:
    """Ensemble and per-head test metrics on the test split."""
    images = bundle.images["test"]
    net.eval()
    preds = []
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            preds.append(net(torch.from_numpy(images[start:start + batch_size])))
    outputs = torch.cat(preds, dim=0)
    net.train()
    if task == "classification":
        labels = bundle.labels["test"]
        ensemble = engine.ensemble_infer(outputs).numpy()
        per_head = engine.per_head_infer(outputs).numpy()
        head_errors = [metrics.error_rate(per_head[:, m], labels) for m in range(per_head.shape[1])]
        return {
            "error_rate": metrics.error_rate(ensemble, labels),
            "head_error_rates": head_errors,
        }
    gt = bundle.coords["test"]
    coords = engine.ensemble_infer(outputs).numpy()
    pck_values = metrics.pck_multi(coords, gt, bundle.manifest.norm_pair, PCK_THRESHOLDS)
    return {
        "mse": metrics.keypoint_mse(coords, gt),
        "pck": {str(t): v for t, v in pck_values.items()},
    }


def _probe_diagnostics(net, probe: torch.Tensor) -> dict:
    """Head-input correlation and prediction similarity on a fixed batch."""
    if not hasattr(net, "features"):
        return {}
    net.eval()
    with torch.no_grad():
        inputs, _, _ = net.features(probe)
        outputs = torch.stack(
            [head(f) for head, f in zip(net.heads, inputs)], dim=1
        )
        stacked = [f[:PROBE_CORRELATION_SAMPLES] for f in inputs]
        corr = decorrelation.mean_head_correlation(stacked)
        agreement, cosine = decorrelation.prediction_similarity(outputs)
    net.train()
    return {
        "head_correlation": corr.mean_offdiagonal(),
        "agreement": agreement,
        "cosine": cosine,
    }


@dataclass
class RunResult:
    seed: int
    records: list[metrics.MetricsRecord]
    stream_checksum: str
    checkpoint_path: Optional[Path]
    status: str  # "ok" | "diverged"


def train_run(
    cfg: RunConfig,
    seed: int,
    out_dir: Optional[Path] = None,
    bundle: Optional[DataBundle] = None,
) -> RunResult:
    """Train one seed of one configuration; optionally write artifacts."""
    cfg.validate()
    task = cfg.run.task
    t = cfg.train
    bundle = bundle if bundle is not None else build_data(cfg)
    manifest = bundle.manifest
    net, ens_cfg = build_net(cfg, seed)
    optimizer = torch.optim.SGD(net.parameters(), lr=t.lr, momentum=t.momentum)

    weak = data_mod.weak_policy(task)
    strong = data_mod.strong_policy(task)
    data_mod.validate_policy_pair(weak, strong)

    ssl = t.mode == "ssl"
    train_images = bundle.images["train"]
    n_labeled = train_images.shape[0]
    if ssl:
        unlabeled_images = bundle.images["unlabeled"]
        default_steps = int(np.ceil(unlabeled_images.shape[0] / (t.mu * t.batch_size)))
    else:
        default_steps = int(np.ceil(n_labeled / t.batch_size))
    steps = t.steps_per_epoch or default_steps

    probe_split = "unlabeled" if ssl else "test"
    probe = torch.from_numpy(bundle.images[probe_split][:PROBE_SIZE])

    checksum = hashlib.sha256()
    records: list[metrics.MetricsRecord] = []
    status = "ok"
    checkpoint_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    try:
        for epoch in range(t.epochs):
            batch_rng = np.random.default_rng(derive_seed(seed, "batches", epoch))
            aug_rng = np.random.default_rng(derive_seed(seed, "augment", epoch))
            labeled_sampler = _Sampler(n_labeled, batch_rng)
            unlabeled_sampler = _Sampler(unlabeled_images.shape[0], batch_rng) if ssl else None

            sums = {"supervised": 0.0, "ensemble": 0.0, "lb": 0.0, "total": 0.0}
            mask_sum = 0.0
            for _ in range(steps):
                idx = labeled_sampler.take(t.batch_size)
                if task == "classification":
                    lx = data_mod.augment_batch(train_images[idx], weak, aug_rng)
                    ly = torch.from_numpy(bundle.labels["train"][idx])
                    labeled_targets = ly
                else:
                    lx, lc = data_mod.augment_batch(
                        train_images[idx], weak, aug_rng,
                        coords=bundle.coords["train"][idx],
                        flip_pairs=manifest.flip_pairs,
                    )
                    labeled_targets = torch.from_numpy(_heatmap_targets(lc, manifest))
                checksum.update(lx.tobytes())

                outputs = net(torch.from_numpy(lx))
                loss_l = engine.supervised_loss(outputs, labeled_targets)
                loss_e = torch.zeros(())
                loss_lb = torch.zeros(())
                mask_rate = None

                if ssl:
                    uidx = unlabeled_sampler.take(t.mu * t.batch_size)
                    raw = unlabeled_images[uidx]
                    wx, weak_params = data_mod.augment_batch(raw, weak, aug_rng,
                                                             return_params=True)
                    sx, strong_params = data_mod.augment_batch(raw, strong, aug_rng,
                                                               return_params=True)
                    checksum.update(wx.tobytes())
                    checksum.update(sx.tobytes())
                    with torch.no_grad():
                        weak_outputs = net(torch.from_numpy(wx))
                    pseudo = engine.ensemble_pseudo_label(
                        weak_outputs, t.tau, mode=t.pseudo_label_mode
                    )
                    if task == "keypoints":
                        pseudo = _transport_heatmap_pseudo(
                            pseudo, weak_params, strong_params, manifest
                        )
                    mask_rate = float(pseudo.mask.double().mean())
                    if hasattr(net, "features"):
                        inputs, _, privates = net.features(torch.from_numpy(sx))
                        strong_outputs = torch.stack(
                            [head(f) for head, f in zip(net.heads, inputs)], dim=1
                        )
                    else:
                        strong_outputs = net(torch.from_numpy(sx))
                        privates = None
                    loss_e = engine.ensemble_loss(strong_outputs, pseudo)
                    if ens_cfg is not None and ens_cfg.variant == "CBE" and t.lambda_lb > 0:
                        loss_lb = decorrelation.lb_loss(privates)

                total = loss_l + t.lambda_u * loss_e + t.lambda_lb * loss_lb
                if not torch.isfinite(total):
                    raise TrainingDiverged(
                        f"non-finite loss at epoch {epoch} (seed {seed})"
                    )
                optimizer.zero_grad()
                total.backward()
                optimizer.step()

                sums["supervised"] += loss_l.item()
                sums["ensemble"] += loss_e.item()
                sums["lb"] += loss_lb.item()
                sums["total"] += total.item()
                if mask_rate is not None:
                    mask_sum += mask_rate

            record = metrics.MetricsRecord(
                epoch=epoch,
                seed=seed,
                loss_supervised=sums["supervised"] / steps,
                loss_ensemble=sums["ensemble"] / steps if ssl else None,
                loss_lb=sums["lb"] / steps if ssl else None,
                loss_total=sums["total"] / steps,
                mask_rate=mask_sum / steps if ssl else None,
            )
            for key, value in evaluate(net, bundle, task).items():
                setattr(record, key, value)
            for key, value in _probe_diagnostics(net, probe).items():
                setattr(record, key, value)
            records.append(record)
    except TrainingDiverged:
        status = "diverged"
        if out_dir is not None:
            _write_run_artifacts(out_dir, cfg, seed, net, records, checksum, status,
                                 ens_cfg, task)
        raise

    if out_dir is not None:
        checkpoint_path = _write_run_artifacts(
            out_dir, cfg, seed, net, records, checksum, status, ens_cfg, task
        )
    return RunResult(
        seed=seed,
        records=records,
        stream_checksum=checksum.hexdigest(),
        checkpoint_path=checkpoint_path,
        status=status,
    )


def _write_run_artifacts(out_dir, cfg, seed, net, records, checksum, status, ens_cfg, task):
    metrics.write_metrics_jsonl(out_dir / "metrics.jsonl", records)
    num_outputs = cfg.data.num_classes if task == "classification" else cfg.data.num_keypoints
    checkpoint_path = out_dir / "checkpoint.pt"
    engine.save_checkpoint(
        checkpoint_path, net, task=task, num_outputs=num_outputs,
        epoch=len(records), seed=seed, ensemble_config=ens_cfg,
        extra={"config": emit_config(cfg)},
    )
    summary = {
        "seed": seed,
        "status": status,
        "epochs_completed": len(records),
        "stream_checksum": checksum.hexdigest(),
        "final": json.loads(records[-1].to_json_line()) if records else None,
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=2, sort_keys=True))
    return checkpoint_path


def prepare_output_dir(path: Path, force: bool) -> Path:
    """Refuse to reuse a non-empty output directory unless forced."""
    path = Path(path)
    if path.exists() and any(path.iterdir()) and not force:
        raise ConfigurationError(
            f"output directory {path} is not empty; pass --force to overwrite"
        )
    path.mkdir(parents=True, exist_ok=True)
    return path


def run_seeds(cfg: RunConfig, out_dir: Optional[Path] = None,
              bundle: Optional[DataBundle] = None) -> list[RunResult]:
    """Train every configured seed and write the cross-seed summary."""
    bundle = bundle if bundle is not None else build_data(cfg)
    results = []
    for seed in cfg.run.seeds:
        seed_dir = None if out_dir is None else Path(out_dir) / f"seed_{seed}"
        if seed_dir is not None:
            seed_dir.mkdir(parents=True, exist_ok=True)
        results.append(train_run(cfg, seed, out_dir=seed_dir, bundle=bundle))
    if out_dir is not None:
        out_dir = Path(out_dir)
        (out_dir / "config.ini").write_text(emit_config(cfg))
        finals = [r.records[-1] for r in results if r.records]
        if finals:
            summary = metrics.aggregate_runs(finals)
            metrics.write_summary_csv(out_dir / "summary.csv", summary, len(finals))
    return results


def run_ablation(cfg: RunConfig, rows: list[str],
                 out_dir: Optional[Path] = None) -> list[dict]:
    """Train each named variant row under identical seeds and data streams."""
    unknown = [r for r in rows if r not in ABLATION_ROWS]
    if unknown:
        raise ConfigurationError(
            f"unknown ablation rows {unknown}; known: {sorted(ABLATION_ROWS)}"
        )
    bundle = build_data(cfg)
    table = []
    for row in rows:
        variant, lb_override = ABLATION_ROWS[row]
        row_cfg = copy.deepcopy(cfg)
        row_cfg.model.variant = variant
        if lb_override is not None:
            row_cfg.train.lambda_lb = lb_override
        row_out = None if out_dir is None else Path(out_dir) / row.replace("/", "_")
        results = run_seeds(row_cfg, out_dir=row_out, bundle=bundle)
        finals = [r.records[-1] for r in results]
        summary = metrics.aggregate_runs(finals)
        entry = {
            "row": row,
            "variant": variant,
            "seeds": [r.seed for r in results],
            "stream_checksums": [r.stream_checksum for r in results],
        }
        for metric, (mean, std) in summary.items():
            entry[metric] = {"mean": mean, "std": std}
        table.append(entry)
    if out_dir is not None:
        _write_ablation_csv(Path(out_dir) / "ablation.csv", table)
    return table


def _write_ablation_csv(path: Path, table: list[dict]) -> None:
    metric_keys = sorted({
        k for entry in table for k in entry
        if k not in ("row", "variant", "seeds", "stream_checksums")
    })
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["row", "variant"] + [f"{k}_mean" for k in metric_keys]
                        + [f"{k}_std" for k in metric_keys] + ["stream_checksums"])
        for entry in table:
            means = [f"{entry[k]['mean']:.6g}" if k in entry else "" for k in metric_keys]
            stds = [
                "" if k not in entry or entry[k]["std"] is None else f"{entry[k]['std']:.6g}"
                for k in metric_keys
            ]
            writer.writerow([entry["row"], entry["variant"]] + means + stds
                            + ["|".join(entry["stream_checksums"])])
