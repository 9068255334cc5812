"""Losses, pseudo-labeling, ensemble inference, and checkpoint IO.

Head outputs are stacked along dimension 1: classification predictions are
probability tensors shaped (batch, M, classes); keypoint predictions are
heatmap tensors shaped (batch, M, K, H, W). Cross-entropy on probabilities is
``-sum(target * log p)``; for heatmaps the per-head term is the mean squared
error against the target maps.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict
from pathlib import Path
from typing import NamedTuple, Optional, Union

import numpy as np
import torch

from . import metrics
from .errors import CheckpointError, ConfigurationError, InputError
from .heads import AdapterSpec, EnsembleConfig

LOG_EPS = 1e-12

CHECKPOINT_VERSION = 1


def _check_outputs(outputs: torch.Tensor, kind: Optional[str] = None) -> torch.Tensor:
    t = torch.as_tensor(outputs)
    if t.dim() < 3:
        raise InputError("head outputs need shape (batch, M, ...)")
    if kind == "classification" and t.dim() != 3:
        raise InputError("classification outputs need shape (batch, M, classes)")
    if kind == "heatmaps" and t.dim() != 5:
        raise InputError("heatmap outputs need shape (batch, M, K, H, W)")
    return t


def supervised_loss(outputs: torch.Tensor, targets) -> torch.Tensor:
    """Mean over samples and heads of the per-head supervised term.

    Classification: cross-entropy of each head's probability vector against
    the integer label. Heatmaps: per-pixel mean squared error against the
    target maps.
    """
    t = _check_outputs(outputs)
    if t.dim() == 3:
        labels = torch.as_tensor(targets)
        if labels.dim() != 1 or labels.shape[0] != t.shape[0]:
            raise InputError("labels must be one class index per sample")
        num_classes = t.shape[-1]
        if bool((labels < 0).any()) or bool((labels >= num_classes).any()):
            raise InputError(f"label out of range for {num_classes} classes")
        picked = t.gather(-1, labels[:, None, None].expand(-1, t.shape[1], 1)).squeeze(-1)
        return -torch.log(picked.clamp_min(LOG_EPS)).mean()
    maps = torch.as_tensor(targets)
    if maps.shape != t.shape[:1] + t.shape[2:]:
        raise InputError("target heatmaps must be shaped (batch, K, H, W)")
    diff = (t - maps[:, None]) ** 2
    return diff.mean()


class PseudoLabels(NamedTuple):
    """Threshold-filtered head-averaged targets plus the per-sample validity mask."""

    targets: torch.Tensor
    mask: torch.Tensor


def ensemble_pseudo_label(outputs: torch.Tensor, tau: float, mode: str = "raw") -> PseudoLabels:
    """Average the heads whose peak confidence strictly exceeds ``tau``.

    With ``mode="raw"`` (the default) the result is left unnormalized: a
    sample where only k of M heads pass gets a target summing to roughly k/M,
    and a sample where no head passes gets the zero vector and a False mask.
    ``"renormalize"`` rescales passing samples by M/k so targets sum to one;
    ``"hard"`` replaces passing targets with the one-hot of their argmax.
    """
    if not 0.0 < tau < 1.0:
        raise ConfigurationError(f"confidence threshold must be in (0, 1), got {tau}")
    if mode not in ("raw", "renormalize", "hard"):
        raise ConfigurationError(f"pseudo-label mode must be raw/renormalize/hard, got {mode!r}")
    t = _check_outputs(outputs)
    flat = t.reshape(t.shape[0], t.shape[1], -1)
    confidence = flat.max(dim=-1).values
    passed = confidence > tau
    weights = passed.to(t.dtype)
    targets = (flat * weights[:, :, None]).mean(dim=1)
    mask = passed.any(dim=1)
    if mode == "renormalize":
        count = weights.sum(dim=1).clamp_min(1.0)
        targets = targets * (t.shape[1] / count)[:, None]
    elif mode == "hard":
        hard = torch.zeros_like(targets)
        hard.scatter_(1, targets.argmax(dim=1, keepdim=True), 1.0)
        targets = hard * mask.to(t.dtype)[:, None]
    targets = targets.reshape(t.shape[0], *t.shape[2:])
    return PseudoLabels(targets=targets.detach(), mask=mask)


def ensemble_loss(outputs: torch.Tensor, pseudo: PseudoLabels) -> torch.Tensor:
    """Consistency loss of every head against the shared pseudo-targets.

    Masked-out samples contribute zero but stay in the denominator; no
    gradient flows through the targets.
    """
    t = _check_outputs(outputs)
    targets = pseudo.targets.detach()
    mask = pseudo.mask.to(t.dtype)
    if targets.shape[0] != t.shape[0]:
        raise InputError("pseudo targets misaligned with outputs")
    if t.dim() == 3:
        ce = -(targets[:, None, :] * torch.log(t.clamp_min(LOG_EPS))).sum(dim=-1)
        per_sample = ce.mean(dim=1)
    else:
        diff = (t - targets[:, None]) ** 2
        per_sample = diff.reshape(t.shape[0], t.shape[1], -1).mean(dim=-1).mean(dim=1)
    return (per_sample * mask).mean()


def ensemble_infer(outputs: torch.Tensor):
    """Combine the heads by uniform averaging.

    Classification returns class indices (ties resolved toward the lowest
    index); heatmaps return decoded (x, y) coordinates of the mean map.
    """
    t = _check_outputs(outputs).detach()
    mean = t.mean(dim=1)
    if t.dim() == 3:
        return mean.argmax(dim=-1)
    return torch.from_numpy(metrics.decode_heatmaps(mean.cpu().numpy()))


def per_head_infer(outputs: torch.Tensor):
    """Per-head predictions, same decoding as :func:`ensemble_infer`."""
    t = _check_outputs(outputs).detach()
    if t.dim() == 3:
        return t.argmax(dim=-1)
    return torch.from_numpy(metrics.decode_heatmaps(t.cpu().numpy()))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

_HEADER_FIELDS = ("format_version", "task", "num_outputs", "in_channels",
                  "epoch", "seed", "state_dict")


def save_checkpoint(
    path: Union[str, Path],
    model: torch.nn.Module,
    task: str,
    num_outputs: int,
    epoch: int,
    seed: int,
    ensemble_config: Optional[EnsembleConfig] = None,
    in_channels: int = 3,
    extra: Optional[dict] = None,
) -> None:
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "task": task,
        "num_outputs": num_outputs,
        "in_channels": in_channels,
        "epoch": epoch,
        "seed": seed,
        "ensemble_config": asdict_config(ensemble_config),
        "extra": extra or {},
        "state_dict": model.state_dict(),
    }
    torch.save(payload, path)


def asdict_config(cfg: Optional[EnsembleConfig]) -> Optional[dict]:
    if cfg is None:
        return None
    return {
        "variant": cfg.variant,
        "num_heads": cfg.num_heads,
        "backbone_channels": cfg.backbone_channels,
        "private_channels": cfg.private_channels,
        "adapters": [asdict(spec) for spec in cfg.adapters],
    }


def config_from_dict(raw: Optional[dict]) -> Optional[EnsembleConfig]:
    if raw is None:
        return None
    adapters = tuple(AdapterSpec(**spec) for spec in raw.get("adapters", []))
    return EnsembleConfig(
        variant=raw["variant"],
        num_heads=raw["num_heads"],
        backbone_channels=raw["backbone_channels"],
        private_channels=raw["private_channels"],
        adapters=adapters,
    )


def load_checkpoint(path: Union[str, Path]) -> dict:
    """Read and validate a checkpoint; raises CheckpointError on bad headers."""
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} does not exist")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as exc:
        raise CheckpointError(f"unreadable checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict):
        raise CheckpointError(f"checkpoint {path} has no header dictionary")
    missing = [key for key in _HEADER_FIELDS if key not in payload]
    if missing:
        raise CheckpointError(f"checkpoint {path} is missing header fields {missing}")
    if payload["format_version"] != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {payload['format_version']!r}"
        )
    payload["ensemble_config"] = config_from_dict(payload.get("ensemble_config"))
    return payload
