"""Command-line entry points.

Subcommands: train, eval, lemma-check, diagnostics, ablation, make-data,
corrupt, noisify. Exit codes: 0 on success, 1 on validation problems
(bad flags, bad config, bad checkpoint), 2 on runtime failures such as a
diverged training run. Relative output paths are resolved under the
``DSAENS_OUTPUT_ROOT`` environment variable when it is set.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from . import data as data_mod
from . import decorrelation, engine, metrics, runner
from .config import OUTPUT_ROOT_ENV, RunConfig, load_config, parse_config
from .errors import CheckpointError, ConfigurationError, InputError, TrainingDiverged
from .heads import build_model


class _Parser(argparse.ArgumentParser):
    """argparse that exits with code 1 on bad arguments (validation errors)."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        sys.exit(1)


def _resolve_out(path: str) -> Path:
    out = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not out.is_absolute():
        return Path(root) / out
    return out


def cmd_train(args) -> int:
    cfg = load_config(args.config, overrides=args.set)
    out_dir = _resolve_out(args.out) if args.out else cfg.resolved_output_dir()
    runner.prepare_output_dir(out_dir, args.force)
    results = runner.run_seeds(cfg, out_dir=out_dir)
    for result in results:
        final = result.records[-1]
        print(f"seed {result.seed}: status={result.status} "
              f"final={final.to_json_line()}")
    print(f"artifacts written to {out_dir}")
    return 0


def cmd_eval(args) -> int:
    payload = engine.load_checkpoint(args.checkpoint)
    cfg_text = payload["extra"].get("config")
    if args.dataset:
        bundle = data_mod.load_dataset(args.dataset)
    elif cfg_text:
        bundle = runner.build_data(parse_config(cfg_text))
    else:
        raise InputError("no --dataset given and the checkpoint embeds no data config")
    net = build_model(payload["ensemble_config"], payload["task"],
                      payload["num_outputs"], in_channels=payload["in_channels"])
    net.load_state_dict(payload["state_dict"])
    report = runner.evaluate(net, bundle, payload["task"])
    text = json.dumps(report, indent=2, sort_keys=True)
    if args.out:
        out = _resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text)
    return 0


def cmd_lemma_check(args) -> int:
    report = decorrelation.lemma_monte_carlo(
        shared_channels=args.shared_channels,
        private_channels=args.private_channels,
        height=args.height,
        width=args.width,
        num_heads=args.heads,
        trials=args.trials,
        delta_ratio=args.delta_ratio,
        seed=args.seed,
    )
    text = report.to_json()
    if args.out:
        out = _resolve_out(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text)
    ok1 = report.mean_c_dsa <= report.mean_c_cbe
    ok2 = report.mean_c_dsa <= report.mean_c_sdoas
    print(f"mean orderings: dsa<=cbe {ok1}, dsa<=sdoas {ok2}")
    return 0


def _feature_grid_image(feature: np.ndarray) -> Image.Image:
    """Tile the channels of one (C, H, W) map into a grayscale grid."""
    c, h, w = feature.shape
    cols = int(np.ceil(np.sqrt(c)))
    rows = int(np.ceil(c / cols))
    lo, hi = float(feature.min()), float(feature.max())
    span = (hi - lo) or 1.0
    canvas = np.zeros((rows * (h + 1), cols * (w + 1)), dtype=np.uint8)
    for i in range(c):
        r, col = divmod(i, cols)
        tile = ((feature[i] - lo) / span * 255).astype(np.uint8)
        canvas[r * (h + 1):r * (h + 1) + h, col * (w + 1):col * (w + 1) + w] = tile
    scale = max(1, 128 // max(h, w))
    img = Image.fromarray(canvas)
    if scale > 1:
        img = img.resize((canvas.shape[1] * scale, canvas.shape[0] * scale), Image.NEAREST)
    return img


def cmd_diagnostics(args) -> int:
    payload = engine.load_checkpoint(args.checkpoint)
    out_dir = _resolve_out(args.out)
    runner.prepare_output_dir(out_dir, args.force)
    net = build_model(payload["ensemble_config"], payload["task"],
                      payload["num_outputs"], in_channels=payload["in_channels"])
    net.load_state_dict(payload["state_dict"])
    net.eval()

    if args.dataset:
        bundle = data_mod.load_dataset(args.dataset)
    else:
        cfg_text = payload["extra"].get("config")
        if not cfg_text:
            raise InputError("no --dataset given and the checkpoint embeds no data config")
        bundle = runner.build_data(parse_config(cfg_text))
    probe = torch.from_numpy(bundle.images["test"][:runner.PROBE_SIZE])

    written = []
    with torch.no_grad():
        if hasattr(net, "features"):
            inputs, deltas, _ = net.features(probe)
            outputs = torch.stack([head(f) for head, f in zip(net.heads, inputs)], dim=1)
            corr = decorrelation.mean_head_correlation(
                [f[:runner.PROBE_CORRELATION_SAMPLES] for f in inputs])
            np.savetxt(out_dir / "correlation_matrix.csv", corr.values,
                       delimiter=",", fmt="%.6f")
            written.append("correlation_matrix.csv")
            agreement, cosine = decorrelation.prediction_similarity(outputs)
            (out_dir / "prediction_similarity.json").write_text(
                json.dumps({"agreement": agreement, "cosine": cosine}, indent=2))
            written.append("prediction_similarity.json")
            if deltas is not None:
                for m, delta in enumerate(deltas, start=1):
                    name = f"adapter_{m:02d}_features.png"
                    _feature_grid_image(delta[0].numpy()).save(out_dir / name)
                    written.append(name)

    metrics_path = Path(args.metrics) if args.metrics else Path(args.checkpoint).parent / "metrics.jsonl"
    if metrics_path.exists():
        records = metrics.read_metrics_jsonl(metrics_path)
        with open(out_dir / "similarity_curve.csv", "w") as fh:
            fh.write("epoch,agreement,cosine\n")
            for record in records:
                if record.agreement is not None:
                    fh.write(f"{record.epoch},{record.agreement:.6f},{record.cosine:.6f}\n")
        written.append("similarity_curve.csv")

    print(f"diagnostics written to {out_dir}: {', '.join(written) or 'nothing applicable'}")
    return 0


def cmd_ablation(args) -> int:
    cfg = load_config(args.config, overrides=args.set)
    rows = [r.strip() for r in args.rows.split(",") if r.strip()]
    out_dir = _resolve_out(args.out) if args.out else cfg.resolved_output_dir()
    runner.prepare_output_dir(out_dir, args.force)
    table = runner.run_ablation(cfg, rows, out_dir=out_dir)
    for entry in table:
        parts = [f"{entry['row']:>14}"]
        for key in ("error_rate", "mse"):
            if key in entry:
                std = entry[key]["std"]
                spread = f" +/- {std:.4f}" if std is not None else ""
                parts.append(f"{key}={entry[key]['mean']:.4f}{spread}")
        checks = set(entry["stream_checksums"])
        parts.append(f"streams={len(checks)} unique")
        print("  ".join(parts))
    print(f"ablation table written to {out_dir / 'ablation.csv'}")
    return 0


def cmd_make_data(args) -> int:
    cfg = load_config(args.config, overrides=args.set)
    bundle = runner.build_data(cfg)
    out_dir = _resolve_out(args.out)
    runner.prepare_output_dir(out_dir, args.force)
    data_mod.save_dataset(bundle, out_dir)
    sizes = ", ".join(f"{k}={v}" for k, v in bundle.manifest.split_sizes.items())
    print(f"wrote {cfg.run.task} dataset ({sizes}) to {out_dir}")
    return 0


def cmd_corrupt(args) -> int:
    bundle = data_mod.load_dataset(args.dataset)
    if args.split not in bundle.images:
        raise InputError(f"dataset has no split {args.split!r}")
    bundle.images[args.split] = data_mod.corrupt_images(
        bundle.images[args.split], args.corruption, args.severity, seed=args.seed
    )
    out_dir = _resolve_out(args.out)
    runner.prepare_output_dir(out_dir, args.force)
    data_mod.save_dataset(bundle, out_dir)
    print(f"wrote {args.corruption}@{args.severity} copy of split {args.split!r} to {out_dir}")
    return 0


def cmd_noisify(args) -> int:
    bundle = data_mod.load_dataset(args.dataset)
    if bundle.manifest.task != "classification":
        raise InputError("label noise only applies to classification datasets")
    noisy, mask = data_mod.inject_label_noise(bundle.labels["train"], args.rate, seed=args.seed)
    bundle.labels["train"] = noisy
    out_dir = _resolve_out(args.out)
    runner.prepare_output_dir(out_dir, args.force)
    data_mod.save_dataset(bundle, out_dir)
    (out_dir / "flip_mask.json").write_text(
        json.dumps({"flipped_train_indices": np.nonzero(mask)[0].tolist()}))
    print(f"flipped {int(mask.sum())} of {mask.size} train labels -> {out_dir}")
    return 0


def build_parser() -> _Parser:
    parser = _Parser(prog="dsaens", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train one configuration across its seeds")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default=None, help="override the config output directory")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None, help="dataset directory (default: regenerate from checkpoint)")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("lemma-check", help="Monte-Carlo check of the correlation orderings")
    p.add_argument("--trials", type=int, default=1000)
    p.add_argument("--delta-ratio", type=float, default=0.05)
    p.add_argument("--shared-channels", type=int, default=48)
    p.add_argument("--private-channels", type=int, default=8)
    p.add_argument("--height", type=int, default=32)
    p.add_argument("--width", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_lemma_check)

    p = sub.add_parser("diagnostics", help="export adapter features, correlations, similarity curves")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--dataset", default=None)
    p.add_argument("--metrics", default=None, help="metrics.jsonl (default: next to the checkpoint)")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_diagnostics)

    p = sub.add_parser("ablation", help="train several variants on identical data streams")
    p.add_argument("--config", required=True)
    p.add_argument("--rows", default="DSA,DSA-noadapter,CBE,MHE",
                   help=f"comma list from {sorted(runner.ABLATION_ROWS)}")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", default=None)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_ablation)

    p = sub.add_parser("make-data", help="write a synthetic dataset to disk")
    p.add_argument("--config", required=True)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--out", required=True)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_make_data)

    p = sub.add_parser("corrupt", help="apply an image corruption to one split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--corruption", required=True, choices=data_mod.CORRUPTION_IDS)
    p.add_argument("--severity", type=int, required=True, choices=range(1, 6))
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="test")
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_corrupt)

    p = sub.add_parser("noisify", help="inject symmetric label noise into the train split")
    p.add_argument("--dataset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--rate", type=float, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--force", action="store_true")
    p.set_defaults(func=cmd_noisify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse help/usage paths
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigurationError, InputError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except TrainingDiverged as exc:
        print(f"training failure: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - runtime failures map to exit 2
        print(f"unexpected failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
