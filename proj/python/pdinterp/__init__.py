"""Interpretable DaT-SPECT classification on synthetic phantoms."""

from ._core import (
    ConfigError,
    FormatError,
    MissingArtifactError,
    NumericalError,
    ShapeError,
    __version__,
    architecture_tags,
    canonical_config,
    config_digest,
    dense_input_features,
    dice,
    generate_subject,
    ground_truth_mask,
    kernel_shap_values,
    mcnemar,
    network_layers,
    roc_auc,
    run_stage,
    select_model,
    slice_average,
    topk_mask,
    wilcoxon,
)

__all__ = [
    "ConfigError",
    "FormatError",
    "MissingArtifactError",
    "NumericalError",
    "ShapeError",
    "__version__",
    "architecture_tags",
    "canonical_config",
    "config_digest",
    "dense_input_features",
    "dice",
    "generate_subject",
    "ground_truth_mask",
    "kernel_shap_values",
    "mcnemar",
    "network_layers",
    "roc_auc",
    "run_stage",
    "select_model",
    "slice_average",
    "topk_mask",
    "wilcoxon",
]
