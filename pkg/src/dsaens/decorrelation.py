"""Correlation calculus for ensemble diagnostics and the Low-Bias loss.

Every correlation here is the Pearson coefficient of two feature maps after
flattening each to a one-dimensional vector. Constant (zero-variance) features
make the coefficient undefined; those cases return 0 and raise a degeneracy
flag instead of aborting, because features can go flat mid-training.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from typing import Sequence, Union

import numpy as np
import torch

from .errors import ConfigurationError, InputError

ArrayLike = Union[np.ndarray, torch.Tensor]


def _flatten_pair(a: ArrayLike, b: ArrayLike) -> tuple[torch.Tensor, torch.Tensor]:
    ta = torch.as_tensor(a)
    tb = torch.as_tensor(b)
    if ta.shape != tb.shape:
        raise InputError(f"shape mismatch: {tuple(ta.shape)} vs {tuple(tb.shape)}")
    if ta.numel() < 2:
        raise InputError("correlation needs at least 2 elements")
    return ta.reshape(-1), tb.reshape(-1)


def corrcoef_features(a: ArrayLike, b: ArrayLike, return_flag: bool = False):
    """Pearson correlation of two equally-shaped feature maps.

    Returns a scalar tensor (differentiable when the inputs carry gradients).
    With ``return_flag=True`` also returns whether either input was constant,
    in which case the value is 0.
    """
    x, y = _flatten_pair(a, b)
    x = x - x.mean()
    y = y - y.mean()
    nx = torch.linalg.vector_norm(x)
    ny = torch.linalg.vector_norm(y)
    denom = nx * ny
    degenerate = bool(denom == 0)
    if degenerate:
        value = torch.zeros((), dtype=x.dtype)
    else:
        value = (x @ y) / denom
    if return_flag:
        return value, degenerate
    return value


@dataclass
class CorrelationMatrix:
    """Symmetric matrix of pairwise head correlations plus degeneracy flags."""

    values: np.ndarray
    degenerate: np.ndarray

    @property
    def num_heads(self) -> int:
        return self.values.shape[0]

    def mean_offdiagonal(self) -> float:
        m = self.values.shape[0]
        if m < 2:
            return 0.0
        mask = ~np.eye(m, dtype=bool)
        return float(self.values[mask].mean())


def pairwise_head_correlation(inputs: Sequence[ArrayLike]) -> CorrelationMatrix:
    """Correlation matrix over the per-head input features of one sample."""
    if len(inputs) < 2:
        raise InputError("need at least 2 head inputs")
    m = len(inputs)
    values = np.zeros((m, m), dtype=np.float64)
    degenerate = np.zeros((m, m), dtype=bool)
    for i in range(m):
        for j in range(i, m):
            value, flag = corrcoef_features(inputs[i], inputs[j], return_flag=True)
            v = float(value)
            values[i, j] = values[j, i] = v
            degenerate[i, j] = degenerate[j, i] = flag
    return CorrelationMatrix(values=values, degenerate=degenerate)


def mean_head_correlation(head_inputs: Sequence[torch.Tensor]) -> CorrelationMatrix:
    """Average the per-sample correlation matrices over a batch.

    ``head_inputs`` is a list of M tensors shaped (batch, C, H, W).
    """
    stacked = torch.stack([torch.as_tensor(h) for h in head_inputs], dim=1)
    batch = stacked.shape[0]
    total = None
    any_flag = None
    for n in range(batch):
        mat = pairwise_head_correlation(list(stacked[n]))
        total = mat.values if total is None else total + mat.values
        any_flag = mat.degenerate if any_flag is None else (any_flag | mat.degenerate)
    return CorrelationMatrix(values=total / batch, degenerate=any_flag)


def lb_loss(private: Union[torch.Tensor, Sequence[torch.Tensor]]) -> torch.Tensor:
    """Low-Bias decorrelation loss over private feature blocks.

    Accepts either a tensor shaped (batch, M, C, H, W) or a list of M tensors
    shaped (batch, C, H, W). Per sample, all ordered head pairs i != j
    contribute their correlation; the pair sum is divided by M and the result
    averaged over the batch. Constant blocks contribute 0 to their pairs.
    Differentiable with respect to the features.
    """
    if isinstance(private, (list, tuple)):
        g = torch.stack([torch.as_tensor(p) for p in private], dim=1)
    else:
        g = torch.as_tensor(private)
    if g.dim() < 3:
        raise InputError("private features need shape (batch, M, ...)")
    batch, m = g.shape[0], g.shape[1]
    if m < 2:
        raise InputError("Low-Bias loss needs at least 2 heads")
    flat = g.reshape(batch, m, -1)
    flat = flat - flat.mean(dim=-1, keepdim=True)
    norms = torch.linalg.vector_norm(flat, dim=-1)
    gram = flat @ flat.transpose(1, 2)
    denom = norms[:, :, None] * norms[:, None, :]
    ok = denom > 0
    corr = torch.where(ok, gram / torch.where(ok, denom, torch.ones_like(denom)), torch.zeros_like(gram))
    diag = torch.diagonal(corr, dim1=-2, dim2=-1).sum(dim=-1)
    per_sample = (corr.sum(dim=(-2, -1)) - diag) / m
    return per_sample.mean()


def prediction_similarity(outputs: ArrayLike) -> tuple[float, float]:
    """Mean pairwise argmax-agreement and cosine similarity across heads.

    ``outputs`` is shaped (batch, M, ...) with the trailing dimensions
    flattened per head (class probabilities or heatmaps).
    """
    t = torch.as_tensor(outputs).detach()
    if t.dim() < 3:
        raise InputError("outputs need shape (batch, M, ...)")
    m = t.shape[1]
    if m < 2:
        raise InputError("similarity needs at least 2 heads")
    flat = t.reshape(t.shape[0], m, -1).to(torch.float64)
    labels = flat.argmax(dim=-1)
    norms = torch.linalg.vector_norm(flat, dim=-1)
    safe = torch.where(norms > 0, norms, torch.ones_like(norms))
    unit = flat / safe[..., None]
    agree_sum = 0.0
    cosine_sum = 0.0
    pairs = 0
    for i in range(m):
        for j in range(i + 1, m):
            agree_sum += float((labels[:, i] == labels[:, j]).double().mean())
            cosine_sum += float((unit[:, i] * unit[:, j]).sum(dim=-1).mean())
            pairs += 1
    return agree_sum / pairs, cosine_sum / pairs


@dataclass
class LemmaReport:
    """Monte-Carlo comparison of the three variant correlations.

    ``frac_dsa_le_cbe`` / ``frac_dsa_le_sdoas`` are the per-trial satisfaction
    fractions of the two predicted orderings.
    """

    trials: int
    num_heads: int
    shared_channels: int
    private_channels: int
    height: int
    width: int
    delta_ratio: float
    seed: int
    mean_c_dsa: float
    mean_c_cbe: float
    mean_c_sdoas: float
    frac_dsa_le_cbe: float
    frac_dsa_le_sdoas: float
    resampled: int

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "LemmaReport":
        return cls(**json.loads(text))


def _mean_offdiag_corr(features: list[np.ndarray]) -> tuple[float, bool]:
    """Mean correlation over unordered pairs; flags degenerate pairs."""
    m = len(features)
    total = 0.0
    count = 0
    flagged = False
    for i in range(m):
        for j in range(i + 1, m):
            value, flag = corrcoef_features(features[i], features[j], return_flag=True)
            flagged = flagged or flag
            total += float(value)
            count += 1
    return total / count, flagged


def lemma_monte_carlo(
    shared_channels: int = 48,
    private_channels: int = 8,
    height: int = 32,
    width: int = 32,
    num_heads: int = 2,
    trials: int = 1000,
    delta_ratio: float = 0.05,
    seed: int = 0,
) -> LemmaReport:
    """Sample synthetic features and compare the three head-input correlations.

    Per trial, a shared block, per-head private blocks, and per-head adapter
    perturbations (standard normal entries, perturbations scaled by
    ``delta_ratio``) are drawn independently. The three constructions are
    correlated pairwise and averaged. Each trial's stream is derived from
    (seed, trial index); degenerate draws are resampled and counted.
    """
    if trials < 100:
        raise ConfigurationError("trials must be >= 100")
    if num_heads < 2:
        raise ConfigurationError("num_heads must be >= 2")
    if private_channels < 1:
        raise ConfigurationError(
            "private_channels must be >= 1 (without a private block the "
            "split variants are not comparable)"
        )
    if shared_channels < 1 or height < 1 or width < 1:
        raise ConfigurationError("shared_channels/height/width must be >= 1")
    if delta_ratio < 0:
        raise ConfigurationError("delta_ratio must be >= 0")

    sums = {"dsa": 0.0, "cbe": 0.0, "sdoas": 0.0}
    hits1 = 0
    hits2 = 0
    resampled = 0
    for trial in range(trials):
        attempt = 0
        while True:
            rng = np.random.default_rng((seed, trial, attempt))
            h = rng.standard_normal((shared_channels, height, width))
            gs = [rng.standard_normal((private_channels, height, width)) for _ in range(num_heads)]
            ds = [
                delta_ratio * rng.standard_normal((shared_channels, height, width))
                for _ in range(num_heads)
            ]
            cbe_inputs = [np.concatenate([h, g], axis=0) for g in gs]
            sdoas_inputs = [h + d for d in ds]
            dsa_inputs = [np.concatenate([h + d, g], axis=0) for d, g in zip(ds, gs)]
            c_cbe, f1 = _mean_offdiag_corr(cbe_inputs)
            c_sdoas, f2 = _mean_offdiag_corr(sdoas_inputs)
            c_dsa, f3 = _mean_offdiag_corr(dsa_inputs)
            if not (f1 or f2 or f3):
                break
            attempt += 1
            resampled += 1
        sums["cbe"] += c_cbe
        sums["sdoas"] += c_sdoas
        sums["dsa"] += c_dsa
        hits1 += c_dsa <= c_cbe
        hits2 += c_dsa <= c_sdoas

    return LemmaReport(
        trials=trials,
        num_heads=num_heads,
        shared_channels=shared_channels,
        private_channels=private_channels,
        height=height,
        width=width,
        delta_ratio=delta_ratio,
        seed=seed,
        mean_c_dsa=sums["dsa"] / trials,
        mean_c_cbe=sums["cbe"] / trials,
        mean_c_sdoas=sums["sdoas"] / trials,
        frac_dsa_le_cbe=hits1 / trials,
        frac_dsa_le_sdoas=hits2 / trials,
        resampled=resampled,
    )
