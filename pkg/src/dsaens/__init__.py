"""Decorrelated multi-head ensembles via structure-diverse adapters.

The package builds four ensemble-head variants (MHE, CBE, SDoAs, DSA) on a
shared backbone, trains them with threshold-filtered ensemble pseudo-labels,
and measures head decorrelation both analytically (Monte-Carlo feature
models) and on trained networks.
"""

from .decorrelation import (
    CorrelationMatrix,
    LemmaReport,
    corrcoef_features,
    lb_loss,
    lemma_monte_carlo,
    pairwise_head_correlation,
    prediction_similarity,
)
from .engine import (
    PseudoLabels,
    ensemble_infer,
    ensemble_loss,
    ensemble_pseudo_label,
    load_checkpoint,
    save_checkpoint,
    supervised_loss,
)
from .errors import (
    CheckpointError,
    ConfigurationError,
    InputError,
    TrainingDiverged,
)
from .heads import (
    Adapter,
    AdapterSpec,
    EnsembleConfig,
    EnsembleNet,
    FeatureExpansion,
    assemble_head_inputs,
    build_model,
    default_adapter_specs,
    split_shared_private,
)

__all__ = [
    "Adapter",
    "AdapterSpec",
    "CheckpointError",
    "ConfigurationError",
    "CorrelationMatrix",
    "EnsembleConfig",
    "EnsembleNet",
    "FeatureExpansion",
    "InputError",
    "LemmaReport",
    "PseudoLabels",
    "TrainingDiverged",
    "assemble_head_inputs",
    "build_model",
    "corrcoef_features",
    "default_adapter_specs",
    "ensemble_infer",
    "ensemble_loss",
    "ensemble_pseudo_label",
    "lb_loss",
    "lemma_monte_carlo",
    "load_checkpoint",
    "pairwise_head_correlation",
    "prediction_similarity",
    "save_checkpoint",
    "split_shared_private",
    "supervised_loss",
]

__version__ = "0.1.0"
