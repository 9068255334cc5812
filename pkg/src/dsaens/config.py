"""Run configuration: INI-style files with sections, strict key validation.

Unknown sections or keys are hard errors; a silent typo in a hyperparameter
name is the main reproducibility hazard this guards against. The effective
configuration (defaults applied) can be emitted back to text and re-parsed to
an identical RunConfig.
"""

from __future__ import annotations

import configparser
import hashlib
import io
import os
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Optional, Union

from .errors import ConfigurationError

OUTPUT_ROOT_ENV = "DSAENS_OUTPUT_ROOT"

TASKS = ("classification", "keypoints")
MODEL_VARIANTS = ("MHE", "CBE", "SDoAs", "DSA", "single")


def derive_seed(root: int, *parts) -> int:
    """Stable sub-seed from a root seed and component names/indices."""
    digest = hashlib.sha256()
    digest.update(str(int(root)).encode())
    for part in parts:
        digest.update(b"/")
        digest.update(str(part).encode())
    return int.from_bytes(digest.digest()[:8], "little") & 0x7FFFFFFFFFFFFFFF


@dataclass
class RunSection:
    task: str = "classification"
    output_dir: str = "runs/out"
    seeds: tuple[int, ...] = (0,)


@dataclass
class DataSection:
    source: str = "synthetic"
    path: str = ""
    num_classes: int = 10
    num_keypoints: int = 3
    image_size: int = 32
    labeled: int = 40
    unlabeled: int = 2000
    test: int = 500
    separability: float = 0.7
    heatmap_sigma: float = 2.0
    label_noise: float = 0.0
    seed: int = 7


@dataclass
class ModelSection:
    variant: str = "DSA"
    heads: int = 5
    backbone_channels: int = 32
    private_channels: int = 0  # 0 -> default width


@dataclass
class TrainSection:
    mode: str = "ssl"
    epochs: int = 20
    batch_size: int = 8
    mu: int = 4
    tau: float = 0.95
    lambda_u: float = 1.0
    lambda_lb: float = 0.01
    lr: float = 0.03
    momentum: float = 0.9
    steps_per_epoch: int = 0  # 0 -> one pass over the driving split
    pseudo_label_mode: str = "raw"


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)

    def validate(self) -> "RunConfig":
        r, d, m, t = self.run, self.data, self.model, self.train
        if r.task not in TASKS:
            raise ConfigurationError(f"run.task must be one of {TASKS}, got {r.task!r}")
        if not r.seeds:
            raise ConfigurationError("run.seeds must list at least one seed")
        if d.source not in ("synthetic", "path"):
            raise ConfigurationError(f"data.source must be synthetic or path, got {d.source!r}")
        if d.source == "path" and not d.path:
            raise ConfigurationError("data.path is required when data.source = path")
        if d.num_classes < 2:
            raise ConfigurationError("data.num_classes must be >= 2")
        if d.num_keypoints < 2:
            raise ConfigurationError("data.num_keypoints must be >= 2")
        if d.image_size < 8:
            raise ConfigurationError("data.image_size must be >= 8")
        if d.labeled < 1 or d.test < 1 or d.unlabeled < 0:
            raise ConfigurationError("data split sizes must be positive (unlabeled may be 0)")
        if not 0.0 <= d.separability <= 1.0:
            raise ConfigurationError("data.separability must be in [0, 1]")
        if not 0.0 <= d.label_noise < 1.0:
            raise ConfigurationError("data.label_noise must be in [0, 1)")
        if m.variant not in MODEL_VARIANTS:
            raise ConfigurationError(f"model.variant must be one of {MODEL_VARIANTS}, got {m.variant!r}")
        if m.variant != "single" and m.heads < 2:
            raise ConfigurationError("model.heads must be >= 2 for ensemble variants")
        if m.backbone_channels < 2:
            raise ConfigurationError("model.backbone_channels must be >= 2")
        if t.mode not in ("ssl", "supervised"):
            raise ConfigurationError(f"train.mode must be ssl or supervised, got {t.mode!r}")
        if t.mode == "ssl" and d.unlabeled < 1:
            raise ConfigurationError("train.mode = ssl needs a non-empty unlabeled split")
        if t.epochs < 1:
            raise ConfigurationError("train.epochs must be >= 1")
        if t.batch_size < 1:
            raise ConfigurationError("train.batch_size must be >= 1")
        if t.mu < 1:
            raise ConfigurationError("train.mu must be an integer >= 1")
        if not 0.0 < t.tau < 1.0:
            raise ConfigurationError("train.tau must be in (0, 1)")
        if t.lambda_u < 0 or t.lambda_lb < 0:
            raise ConfigurationError("loss weights must be >= 0")
        if t.lr <= 0:
            raise ConfigurationError("train.lr must be > 0")
        if t.pseudo_label_mode not in ("raw", "renormalize", "hard"):
            raise ConfigurationError("train.pseudo_label_mode must be raw/renormalize/hard")
        return self

    def resolved_output_dir(self) -> Path:
        """Apply the output-root environment variable to relative paths."""
        out = Path(self.run.output_dir)
        root = os.environ.get(OUTPUT_ROOT_ENV)
        if root and not out.is_absolute():
            return Path(root) / out
        return out


_SECTIONS = {"run": RunSection, "data": DataSection, "model": ModelSection, "train": TrainSection}


def _field_kind(value):
    if isinstance(value, bool):
        return bool
    if isinstance(value, tuple):
        return tuple[int, ...]
    return type(value)


def _parse_value(section: str, key: str, raw: str, kind):
    raw = raw.strip()
    try:
        if kind is bool:
            lowered = raw.lower()
            if lowered in ("true", "1", "yes", "on"):
                return True
            if lowered in ("false", "0", "no", "off"):
                return False
            raise ValueError(raw)
        if kind is int:
            return int(raw)
        if kind is float:
            return float(raw)
        if kind is str:
            return raw
        if kind == tuple[int, ...]:
            if not raw:
                return ()
            return tuple(int(v.strip()) for v in raw.split(","))
    except ValueError as exc:
        raise ConfigurationError(
            f"[{section}] {key}: cannot parse {raw!r} as {getattr(kind, '__name__', kind)}"
        ) from exc
    raise ConfigurationError(f"[{section}] {key}: unsupported type {kind}")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(inline_comment_prefixes=("#", ";"))
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigurationError(f"malformed config: {exc}") from exc

    cfg = RunConfig()
    for section in parser.sections():
        if section not in _SECTIONS:
            raise ConfigurationError(
                f"unknown section [{section}]; known sections: {sorted(_SECTIONS)}"
            )
        target = getattr(cfg, section)
        kinds = {f.name: _field_kind(getattr(target, f.name)) for f in fields(target)}
        for key, raw in parser.items(section):
            if key not in kinds:
                raise ConfigurationError(
                    f"unknown key {key!r} in section [{section}]; "
                    f"known keys: {sorted(kinds)}"
                )
            setattr(target, key, _parse_value(section, key, raw, kinds[key]))
    return cfg.validate()


def load_config(path: Union[str, Path], overrides: Optional[list[str]] = None) -> RunConfig:
    """Read a config file and apply ``section.key=value`` override strings."""
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    cfg = parse_config(path.read_text())
    if overrides:
        cfg = apply_overrides(cfg, overrides)
    return cfg


def apply_overrides(cfg: RunConfig, overrides: list[str]) -> RunConfig:
    for item in overrides:
        if "=" not in item or "." not in item.split("=", 1)[0]:
            raise ConfigurationError(
                f"override {item!r} must look like section.key=value"
            )
        dotted, value = item.split("=", 1)
        section, key = dotted.split(".", 1)
        if section not in _SECTIONS:
            raise ConfigurationError(f"unknown section {section!r} in override {item!r}")
        target = getattr(cfg, section)
        names = {f.name for f in fields(target)}
        if key not in names:
            raise ConfigurationError(f"unknown key {key!r} in override {item!r}")
        current = getattr(target, key)
        setattr(target, key, _parse_value(section, key, value, _field_kind(current)))
    return cfg.validate()


def emit_config(cfg: RunConfig) -> str:
    """Render the effective configuration back to INI text."""
    parser = configparser.ConfigParser()
    for section, _ in _SECTIONS.items():
        target = getattr(cfg, section)
        parser[section] = {}
        for f in fields(target):
            value = getattr(target, f.name)
            if isinstance(value, tuple):
                rendered = ", ".join(str(v) for v in value)
            else:
                rendered = repr(value) if isinstance(value, float) else str(value)
            parser[section][f.name] = rendered
    out = io.StringIO()
    parser.write(out)
    return out.getvalue()
