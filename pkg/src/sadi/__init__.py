"""Attention recalibration by robust median consensus and soft masking."""

from .core import (
    Diagnostics,
    Mode,
    NonFiniteLogitsError,
    SadiConfig,
    as_logits,
    dynamic_budget,
    mean_map,
    median_consensus,
    normalize_std,
    recalibrate,
    sadi_forward,
    soft_mask,
    softmax,
    spatial_std,
)

__version__ = "0.1.0"
