"""Ensemble head construction on top of a backbone feature map.

Four variants are supported:

* ``MHE``   -- every head reads the raw backbone feature.
* ``CBE``   -- the feature is expanded by a 1x1 convolution and split into a
  shared block plus one private block per head; head m reads
  ``concat(shared, private_m)``.
* ``SDoAs`` -- no split; head m reads ``shared + adapter_m(shared)`` where the
  adapters are small, structurally distinct bottleneck-expansion blocks.
* ``DSA``   -- the combination: ``concat(shared + adapter_m(shared), private_m)``.

Feature maps are tensors whose last three dimensions are (channels, height,
width); a leading batch dimension is optional and preserved.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import torch
import torch.nn as nn

from .errors import ConfigurationError, InputError

VARIANTS = ("MHE", "CBE", "SDoAs", "DSA")

# Cycle used to pick each adapter's nonlinearity; the first adapter always
# gets PReLU and, with five heads, the last gets ELU.
ADAPTER_ACTIVATIONS = ("prelu", "relu", "leaky_relu", "gelu", "elu")

# Width increment of the m-th adapter's hidden layer (1-based m).
ADAPTER_WIDTH_STEP = 10


def make_activation(activation_id: str) -> nn.Module:
    """Instantiate a nonlinearity by identifier. All of them map 0 to 0."""
    factories = {
        "prelu": nn.PReLU,
        "relu": nn.ReLU,
        "leaky_relu": lambda: nn.LeakyReLU(0.1),
        "gelu": nn.GELU,
        "elu": nn.ELU,
    }
    if activation_id not in factories:
        raise ConfigurationError(f"unknown activation_id {activation_id!r}")
    return factories[activation_id]()


@dataclass(frozen=True)
class AdapterSpec:
    """Structure of one adapter: hidden width and activation identifier."""

    index: int  # 1-based position of the head this adapter feeds
    hidden_channels: int
    activation_id: str


def default_adapter_specs(num_heads: int, shared_channels: int) -> tuple[AdapterSpec, ...]:
    """Build the default roster: hidden width ``shared + 10*m``, activations cycled."""
    specs = []
    for m in range(1, num_heads + 1):
        specs.append(
            AdapterSpec(
                index=m,
                hidden_channels=shared_channels + ADAPTER_WIDTH_STEP * m,
                activation_id=ADAPTER_ACTIVATIONS[(m - 1) % len(ADAPTER_ACTIVATIONS)],
            )
        )
    return tuple(specs)


@dataclass(frozen=True)
class EnsembleConfig:
    """Channel bookkeeping for one ensemble variant.

    ``private_channels`` is only meaningful for CBE/DSA (the splitting
    variants); MHE and SDoAs ignore it and use the full backbone feature as
    the shared block.
    """

    variant: str
    num_heads: int
    backbone_channels: int
    private_channels: int = 0
    adapters: tuple[AdapterSpec, ...] = field(default_factory=tuple)

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigurationError(
                f"variant must be one of {VARIANTS}, got {self.variant!r}"
            )
        if self.num_heads < 2:
            raise ConfigurationError("num_heads must be >= 2")
        if self.backbone_channels < 1:
            raise ConfigurationError("backbone_channels must be >= 1")
        if self.uses_split:
            if not (1 <= self.private_channels < self.backbone_channels):
                raise ConfigurationError(
                    "private_channels must satisfy 1 <= private < backbone "
                    f"(got {self.private_channels} of {self.backbone_channels})"
                )
        if self.uses_adapters:
            if len(self.adapters) != self.num_heads:
                raise ConfigurationError(
                    f"{self.variant} needs exactly num_heads={self.num_heads} "
                    f"adapter specs, got {len(self.adapters)}"
                )
            seen = set()
            for spec in self.adapters:
                if spec.hidden_channels <= self.shared_channels:
                    raise ConfigurationError(
                        f"adapter {spec.index}: hidden_channels must exceed the "
                        f"shared width {self.shared_channels}"
                    )
                key = (spec.hidden_channels, spec.activation_id)
                if key in seen:
                    raise ConfigurationError(
                        "adapter specs must be pairwise distinct "
                        f"(duplicate width/activation pair {key})"
                    )
                seen.add(key)
        elif self.adapters:
            raise ConfigurationError(f"{self.variant} does not take adapters")

    @property
    def uses_split(self) -> bool:
        return self.variant in ("CBE", "DSA")

    @property
    def uses_adapters(self) -> bool:
        return self.variant in ("SDoAs", "DSA")

    @property
    def shared_channels(self) -> int:
        if self.uses_split:
            return self.backbone_channels - self.private_channels
        return self.backbone_channels

    @property
    def expanded_channels(self) -> int:
        """Output width of the 1x1 expansion: backbone + (M-1) * private."""
        return self.backbone_channels + (self.num_heads - 1) * self.private_channels

    @classmethod
    def create(
        cls,
        variant: str,
        num_heads: int,
        backbone_channels: int,
        private_channels: Optional[int] = None,
    ) -> "EnsembleConfig":
        """Build a config with default private width and adapter roster."""
        if variant not in VARIANTS:
            raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
        split = variant in ("CBE", "DSA")
        if private_channels is None:
            private_channels = max(1, backbone_channels // 8) if split else 0
        if not split:
            private_channels = 0
        shared = backbone_channels - private_channels if split else backbone_channels
        adapters = (
            default_adapter_specs(num_heads, shared)
            if variant in ("SDoAs", "DSA")
            else ()
        )
        return cls(
            variant=variant,
            num_heads=num_heads,
            backbone_channels=backbone_channels,
            private_channels=private_channels,
            adapters=adapters,
        )


def _channels(x: torch.Tensor) -> int:
    if x.dim() < 3:
        raise InputError(f"feature map needs >= 3 dims (C, H, W), got shape {tuple(x.shape)}")
    return x.shape[-3]


class FeatureExpansion(nn.Module):
    """Learned 1x1 convolution widening the backbone feature before the split."""

    def __init__(self, cfg: EnsembleConfig):
        super().__init__()
        if not cfg.uses_split:
            raise ConfigurationError(f"feature expansion is only used by CBE/DSA, not {cfg.variant}")
        self.in_channels = cfg.backbone_channels
        self.out_channels = cfg.expanded_channels
        self.conv = nn.Conv2d(self.in_channels, self.out_channels, kernel_size=1, bias=True)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        if _channels(features) != self.in_channels:
            raise ConfigurationError(
                f"expansion expects {self.in_channels} channels, got {_channels(features)}"
            )
        if features.dim() == 3:
            return self.conv(features.unsqueeze(0)).squeeze(0)
        return self.conv(features)


def split_shared_private(
    expanded: torch.Tensor, cfg: EnsembleConfig
) -> tuple[torch.Tensor, list[torch.Tensor]]:
    """Partition the expanded feature into the shared block and M private blocks.

    The shared block is the first ``shared_channels`` channels; private block m
    is the m-th following run of ``private_channels`` channels. Concatenating
    the pieces back restores the input exactly.
    """
    if not cfg.uses_split:
        raise ConfigurationError(f"{cfg.variant} has no shared/private split")
    expected = cfg.shared_channels + cfg.num_heads * cfg.private_channels
    if _channels(expanded) != expected:
        raise ConfigurationError(
            f"split expects {expected} channels "
            f"(shared {cfg.shared_channels} + {cfg.num_heads} x {cfg.private_channels}), "
            f"got {_channels(expanded)}"
        )
    shared = expanded.narrow(-3, 0, cfg.shared_channels)
    privates = []
    for m in range(cfg.num_heads):
        start = cfg.shared_channels + m * cfg.private_channels
        privates.append(expanded.narrow(-3, start, cfg.private_channels))
    return shared, privates


class Adapter(nn.Module):
    """Two 1x1 convolutions with a widened hidden layer and two activations.

    The second convolution is zero-initialized so the adapter output is the
    activation image of zero (i.e. exactly zero for the roster used here) at
    the start of training; the first convolution keeps the default fan-in
    scaled initialization.
    """

    def __init__(self, spec: AdapterSpec, channels: int):
        super().__init__()
        if spec.hidden_channels <= channels:
            raise ConfigurationError(
                f"adapter hidden width {spec.hidden_channels} must exceed input width {channels}"
            )
        self.spec = spec
        self.channels = channels
        self.expand = nn.Conv2d(channels, spec.hidden_channels, kernel_size=1)
        self.act1 = make_activation(spec.activation_id)
        self.project = nn.Conv2d(spec.hidden_channels, channels, kernel_size=1)
        self.act2 = make_activation(spec.activation_id)
        nn.init.zeros_(self.project.weight)
        nn.init.zeros_(self.project.bias)

    def forward(self, shared: torch.Tensor) -> torch.Tensor:
        if _channels(shared) != self.channels:
            raise ConfigurationError(
                f"adapter expects {self.channels} channels, got {_channels(shared)}"
            )
        squeeze = shared.dim() == 3
        x = shared.unsqueeze(0) if squeeze else shared
        out = self.act2(self.project(self.act1(self.expand(x))))
        return out.squeeze(0) if squeeze else out


def assemble_head_inputs(
    variant: str,
    shared: torch.Tensor,
    deltas: Optional[Sequence[torch.Tensor]] = None,
    privates: Optional[Sequence[torch.Tensor]] = None,
    num_heads: Optional[int] = None,
) -> list[torch.Tensor]:
    """Combine shared/adapter/private pieces into the per-head input features.

    MHE replicates ``shared`` (the raw backbone feature) for every head; CBE
    concatenates a private block; SDoAs adds an adapter perturbation; DSA does
    both. ``num_heads`` is required for MHE (no per-head list fixes M there).
    """
    if variant not in VARIANTS:
        raise ConfigurationError(f"variant must be one of {VARIANTS}, got {variant!r}")
    if variant == "MHE":
        if num_heads is None:
            raise ConfigurationError("MHE assembly needs num_heads")
        return [shared for _ in range(num_heads)]
    if variant == "CBE":
        if not privates:
            raise ConfigurationError("CBE assembly needs private feature maps")
        return [torch.cat([shared, g], dim=-3) for g in privates]
    if variant == "SDoAs":
        if not deltas:
            raise ConfigurationError("SDoAs assembly needs adapter outputs")
        return [shared + d for d in deltas]
    # DSA
    if not deltas or not privates:
        raise ConfigurationError("DSA assembly needs adapter outputs and private feature maps")
    if len(deltas) != len(privates):
        raise ConfigurationError(
            f"DSA assembly got {len(deltas)} adapter outputs but {len(privates)} private maps"
        )
    return [torch.cat([shared + d, g], dim=-3) for d, g in zip(deltas, privates)]


class ClassificationHead(nn.Module):
    """Global average pooling + linear layer + softmax."""

    def __init__(self, in_channels: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(in_channels, num_classes)

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        squeeze = features.dim() == 3
        x = features.unsqueeze(0) if squeeze else features
        logits = self.fc(x.mean(dim=(-2, -1)))
        probs = torch.softmax(logits, dim=-1)
        return probs.squeeze(0) if squeeze else probs


class HeatmapHead(nn.Module):
    """Stack of 1x1 convolutions emitting one heatmap per keypoint."""

    def __init__(self, in_channels: int, num_keypoints: int):
        super().__init__()
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, in_channels, kernel_size=1),
            nn.ReLU(),
            nn.Conv2d(in_channels, num_keypoints, kernel_size=1),
        )

    def forward(self, features: torch.Tensor) -> torch.Tensor:
        squeeze = features.dim() == 3
        x = features.unsqueeze(0) if squeeze else features
        out = self.net(x)
        return out.squeeze(0) if squeeze else out


class ConvBackbone(nn.Module):
    """Small conv net for 32x32-ish images; ends at 1/8 spatial resolution."""

    def __init__(self, in_channels: int = 3, out_channels: int = 32):
        super().__init__()
        mid = max(8, out_channels // 2)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, mid, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(mid, out_channels, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
        )
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class PoseBackbone(nn.Module):
    """Resolution-preserving conv net for keypoint heatmaps."""

    def __init__(self, in_channels: int = 3, out_channels: int = 32):
        super().__init__()
        mid = max(8, out_channels // 2)
        self.net = nn.Sequential(
            nn.Conv2d(in_channels, mid, 3, padding=1),
            nn.ReLU(),
            nn.MaxPool2d(2),
            nn.Conv2d(mid, out_channels, 3, padding=1),
            nn.ReLU(),
            nn.Conv2d(out_channels, out_channels, 3, padding=1),
            nn.ReLU(),
            nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
        )
        self.out_channels = out_channels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x)


class EnsembleNet(nn.Module):
    """Backbone + variant-specific feature machinery + M identical heads.

    The heads share an architecture but never parameters; diversity comes only
    from initialization, private channels, and the adapters.
    """

    def __init__(self, backbone: nn.Module, cfg: EnsembleConfig, heads: Sequence[nn.Module]):
        super().__init__()
        if len(heads) != cfg.num_heads:
            raise ConfigurationError(
                f"expected {cfg.num_heads} heads, got {len(heads)}"
            )
        self.cfg = cfg
        self.backbone = backbone
        self.heads = nn.ModuleList(heads)
        self.expansion = FeatureExpansion(cfg) if cfg.uses_split else None
        if cfg.uses_adapters:
            self.adapters = nn.ModuleList(
                Adapter(spec, cfg.shared_channels) for spec in cfg.adapters
            )
        else:
            self.adapters = None

    def features(self, x: torch.Tensor):
        """Return (head_inputs, adapter_outputs, private_blocks) for a batch."""
        feat = self.backbone(x)
        if _channels(feat) != self.cfg.backbone_channels:
            raise ConfigurationError(
                f"backbone produced {_channels(feat)} channels, "
                f"config says {self.cfg.backbone_channels}"
            )
        privates = None
        if self.cfg.uses_split:
            shared, privates = split_shared_private(self.expansion(feat), self.cfg)
        else:
            shared = feat
        deltas = None
        if self.adapters is not None:
            deltas = [adapter(shared) for adapter in self.adapters]
        inputs = assemble_head_inputs(
            self.cfg.variant, shared, deltas=deltas, privates=privates,
            num_heads=self.cfg.num_heads,
        )
        return inputs, deltas, privates

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        inputs, _, _ = self.features(x)
        return torch.stack([head(f) for head, f in zip(self.heads, inputs)], dim=1)


class SingleHeadNet(nn.Module):
    """Plain backbone + one head; baseline for the ensemble variants.

    Predictions are stacked to shape (batch, 1, ...) so downstream code treats
    it like a one-member ensemble.
    """

    def __init__(self, backbone: nn.Module, head: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.head = head

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.backbone(x)).unsqueeze(1)


def build_model(
    cfg: Optional[EnsembleConfig],
    task: str,
    num_outputs: int,
    in_channels: int = 3,
) -> nn.Module:
    """Assemble a full model for ``task`` ("classification" or "keypoints").

    ``cfg=None`` builds the single-head baseline with the default backbone
    width. ``num_outputs`` is the class count or the keypoint count.
    """
    if task not in ("classification", "keypoints"):
        raise ConfigurationError(f"unknown task {task!r}")
    backbone_cls = ConvBackbone if task == "classification" else PoseBackbone
    width = cfg.backbone_channels if cfg is not None else 32
    backbone = backbone_cls(in_channels=in_channels, out_channels=width)

    def make_head():
        if task == "classification":
            return ClassificationHead(width, num_outputs)
        return HeatmapHead(width, num_outputs)

    if cfg is None:
        return SingleHeadNet(backbone, make_head())
    heads = [make_head() for _ in range(cfg.num_heads)]
    return EnsembleNet(backbone, cfg, heads)
