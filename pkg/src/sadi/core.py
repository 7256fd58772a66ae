"""Reference implementation of the recalibration pipeline on one layer.

Every function here works on a single query row of pre-softmax attention
logits restricted to the visual tokens: an ``(H, M)`` array with one row per
head. Arithmetic is float64 unless a config asks for float32.

The pipeline is::

    C   = median_h |E_h|                       consensus
    mu  = mean_h |E_h|
    S   = sqrt(mean_h (|E_h| - mu)^2)          inter-head spread
    S~  = (S - min S) / (max S - min S + eps)
    a   = a_min + (a_max - a_min) * S~         per-token budget
    M_h = clip(| |E_h| - C | / (S + eps), 0, 1)
    E^h = E_h + a * C * M_h
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

DEFAULT_ALPHA_MIN = 0.25
DEFAULT_ALPHA_MAX = 0.80
DEFAULT_EPSILON = 1e-6

# float32 results agree with the float64 path to this absolute tolerance
FLOAT32_TOLERANCE = 1e-4


class Mode(str, enum.Enum):
    SADI = "sadi"
    NONE = "none"
    MEAN_ADD = "mean_add"
    HARD_TRUNCATE = "hard_truncate"
    ADD_SUBTRACT = "add_subtract"


class NonFiniteLogitsError(ValueError):
    def __init__(self, head: int, token: int, value: float):
        self.head = head
        self.token = token
        self.value = value
        super().__init__(f"non-finite logit {value!r} at head {head}, token {token}")


@dataclass(frozen=True)
class SadiConfig:
    """Hyperparameters for one intervention.

    ``beta``, ``truncate_threshold`` and ``devil_alpha`` are only read by the
    ``add_subtract``, ``hard_truncate`` and ``mean_add`` modes respectively.
    Use :func:`sadi.policy.validate_config` to build one from untrusted input.
    """

    alpha_min: float = DEFAULT_ALPHA_MIN
    alpha_max: float = DEFAULT_ALPHA_MAX
    epsilon: float = DEFAULT_EPSILON
    mode: Mode = Mode.SADI
    beta: float = 1.0
    truncate_threshold: float = 1.0
    devil_alpha: float = 0.5
    precision: str = "float64"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(np.float32 if self.precision == "float32" else np.float64)


@dataclass
class Diagnostics:
    """Per-token statistics produced by one pipeline run (all length ``M``
    except ``masks`` which is ``(H, M)``). Fields a mode does not compute are
    left as ``None``."""

    consensus: Optional[np.ndarray] = None
    mean: Optional[np.ndarray] = None
    std: Optional[np.ndarray] = None
    std_norm: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None
    masks: Optional[np.ndarray] = None
    extra: dict = field(default_factory=dict)


def as_logits(values, dtype=None) -> np.ndarray:
    """Coerce ``values`` to a C-contiguous ``(H, M)`` array and reject NaN/inf.

    A 1-D input is treated as a single head. Without ``dtype``, float32 input
    stays float32 and everything else becomes float64.
    """
    if dtype is None:
        dtype = getattr(values, "dtype", None)
        if dtype not in (np.float32, np.float64):
            dtype = np.float64
    arr = np.ascontiguousarray(values, dtype=dtype)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"logits must be 2-D (heads, tokens), got shape {arr.shape}")
    if arr.shape[0] < 1 or arr.shape[1] < 1:
        raise ValueError(f"logits need at least one head and one token, got shape {arr.shape}")
    finite = np.isfinite(arr)
    if not finite.all():
        h, m = (int(i) for i in np.argwhere(~finite)[0])
        raise NonFiniteLogitsError(h, m, float(arr[h, m]))
    return arr


def _check_vector(name: str, vec: np.ndarray, n_tokens: int) -> None:
    if vec.shape != (n_tokens,):
        raise ValueError(f"{name} has shape {vec.shape}, expected ({n_tokens},)")


def median_consensus(logits) -> np.ndarray:
    """Per-token median of absolute logits across heads.

    For an even head count this is the mean of the two middle order
    statistics.
    """
    E = as_logits(logits)
    return np.median(np.abs(E), axis=0)


def mean_map(logits) -> np.ndarray:
    E = as_logits(logits)
    # axis-0 sum accumulates rows in order, which keeps the reduction fixed
    return np.abs(E).sum(axis=0) / E.shape[0]


def spatial_std(logits, mu) -> np.ndarray:
    """Population standard deviation (divisor ``H``) of ``|E|`` around ``mu``."""
    E = as_logits(logits)
    mu = np.asarray(mu, dtype=E.dtype)
    _check_vector("mu", mu, E.shape[1])
    dev = np.abs(E) - mu
    return np.sqrt((dev * dev).sum(axis=0) / E.shape[0])


def normalize_std(std, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Min-max normalise the spread map into ``[0, 1)``."""
    if not epsilon > 0:
        raise ValueError(f"epsilon must be > 0, got {epsilon}")
    S = np.asarray(std)
    lo = S.min()
    hi = S.max()
    return (S - lo) / (hi - lo + epsilon)


def dynamic_budget(std_norm, alpha_min: float, alpha_max: float) -> np.ndarray:
    if not 0 <= alpha_min <= alpha_max:
        raise ValueError(f"need 0 <= alpha_min <= alpha_max, got {alpha_min}, {alpha_max}")
    S_norm = np.asarray(std_norm)
    return alpha_min + (alpha_max - alpha_min) * S_norm


def soft_mask(logits, consensus, std, epsilon: float = DEFAULT_EPSILON) -> np.ndarray:
    """Deviation of each head from the consensus in units of the spread,
    clamped to ``[0, 1]``."""
    E = np.asarray(logits)
    C = np.asarray(consensus, dtype=E.dtype)
    S = np.asarray(std, dtype=E.dtype)
    _check_vector("consensus", C, E.shape[1])
    _check_vector("std", S, E.shape[1])
    D = np.abs(np.abs(E) - C)
    return np.clip(D / (S + epsilon), 0.0, 1.0)


def recalibrate(logits, consensus, alpha, masks) -> np.ndarray:
    """Additive recalibration ``E + alpha * C * M``; never lowers a logit."""
    E = np.asarray(logits)
    C = np.asarray(consensus, dtype=E.dtype)
    a = np.asarray(alpha, dtype=E.dtype)
    Mk = np.asarray(masks, dtype=E.dtype)
    _check_vector("consensus", C, E.shape[1])
    _check_vector("alpha", a, E.shape[1])
    if Mk.shape != E.shape:
        raise ValueError(f"masks have shape {Mk.shape}, expected {E.shape}")
    return E + a * C * Mk


def softmax(x, axis: int = -1) -> np.ndarray:
    """Max-subtracted softmax along ``axis``."""
    x = np.asarray(x)
    z = x - x.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def compute_statistics(E: np.ndarray, config: SadiConfig) -> Diagnostics:
    """Consensus, spread, budget and masks for already-validated logits."""
    C = median_consensus(E)
    mu = mean_map(E)
    S = spatial_std(E, mu)
    S_norm = normalize_std(S, config.epsilon)
    alpha = dynamic_budget(S_norm, config.alpha_min, config.alpha_max)
    masks = soft_mask(E, C, S, config.epsilon)
    return Diagnostics(consensus=C, mean=mu, std=S, std_norm=S_norm, alpha=alpha, masks=masks)


def sadi_forward(logits, config: Optional[SadiConfig] = None):
    """Run the full pipeline and return ``(recalibrated, probabilities, diagnostics)``.

    With ``config.mode == "none"`` the logits pass through untouched and the
    diagnostics are empty. Other comparison modes live in
    :func:`sadi.policy.apply_intervention`.
    """
    config = config or SadiConfig()
    E = as_logits(logits, dtype=config.dtype)
    if Mode(config.mode) is Mode.NONE:
        return E, softmax(E), Diagnostics()
    diag = compute_statistics(E, config)
    E_hat = recalibrate(E, diag.consensus, diag.alpha, diag.masks)
    return E_hat, softmax(E_hat), diag
