"""Config validation, layer selection and the comparison intervention modes."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, fields, replace
from fractions import Fraction
from pathlib import Path
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from .core import (
    Diagnostics,
    Mode,
    SadiConfig,
    as_logits,
    compute_statistics,
    mean_map,
    recalibrate,
    softmax,
)

# finite stand-in for -inf: exp underflows to exactly 0 and no NaN appears
NEG_SENTINEL = -1e30

# intervention windows measured for 32- and 40-layer decoders
LAYER_LOOKUP = {32: (5, 18), 40: (8, 24)}
# exact decimals so products like 0.57 * 50 round half up as written
FRACTIONAL_BOUNDS = (Fraction("0.16"), Fraction("0.57"))

# early / middle / deep split of a 32-layer decoder
STAGES_32 = {"early": (0, 4), "middle": (5, 18), "deep": (19, 31)}


class ConfigError(ValueError):
    """Raised with every violated constraint, as ``(field, message)`` pairs."""

    def __init__(self, errors: Sequence[tuple[str, str]]):
        self.errors = list(errors)
        super().__init__("; ".join(f"{name}: {msg}" for name, msg in self.errors))


@dataclass(frozen=True)
class LayerPolicy:
    total_layers: int
    mode: str = "lookup"
    explicit_range: Optional[tuple[int, int]] = None


@dataclass
class InterventionOutcome:
    recalibrated: np.ndarray
    probabilities: np.ndarray
    diagnostics: Diagnostics = field(default_factory=Diagnostics)
    truncated_heads: tuple[int, ...] = ()


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def select_layers(policy: LayerPolicy) -> range:
    """Indices of the layers to intervene on.

    ``lookup`` uses the measured windows for 32 and 40 layers and falls back to
    the fractional rule for other depths.
    """
    L = policy.total_layers
    if L < 1:
        raise ConfigError([("layers.total", f"must be >= 1, got {L}")])
    if policy.mode == "explicit":
        if policy.explicit_range is None:
            raise ConfigError([("layers.range", "explicit mode needs a [start, end] range")])
        start, end = policy.explicit_range
        if not 0 <= start <= end <= L - 1:
            raise ConfigError([("layers.range", f"[{start}, {end}] is not within [0, {L - 1}]")])
        return range(start, end + 1)
    if policy.mode == "lookup" and L in LAYER_LOOKUP:
        start, end = LAYER_LOOKUP[L]
        return range(start, end + 1)
    if policy.mode not in ("lookup", "fractional"):
        raise ConfigError([("layers.mode", f"unknown mode {policy.mode!r}")])
    lo, hi = FRACTIONAL_BOUNDS
    start = min(_round_half_up(lo * L), L - 1)
    end = min(max(_round_half_up(hi * L), start), L - 1)
    return range(start, end + 1)


_NUMERIC_RULES = {
    "alpha_min": (lambda v: v >= 0, "must be >= 0"),
    "alpha_max": (lambda v: v >= 0, "must be >= 0"),
    "epsilon": (lambda v: v > 0, "must be > 0"),
    "beta": (lambda v: v >= 0, "must be >= 0"),
    "truncate_threshold": (lambda v: v > 0, "must be > 0"),
    "devil_alpha": (lambda v: v >= 0, "must be >= 0"),
}


def validate_config(raw=None) -> SadiConfig:
    """Build a :class:`SadiConfig` from a mapping (or check an existing one).

    Missing fields take their defaults. All violations are collected and
    raised together as a :class:`ConfigError`. A ``layers`` entry is ignored
    here; see :func:`parse_layer_policy`.
    """
    if raw is None:
        raw = {}
    elif isinstance(raw, SadiConfig):
        raw = {f.name: getattr(raw, f.name) for f in fields(SadiConfig)}
    elif not isinstance(raw, dict):
        raise ConfigError([("<root>", f"expected an object, got {type(raw).__name__}")])

    known = {f.name for f in fields(SadiConfig)}
    errors = []
    values = {}
    for key, value in raw.items():
        if key == "layers":
            continue
        if key not in known:
            errors.append((key, "unknown field"))
            continue
        if key in _NUMERIC_RULES:
            ok, msg = _NUMERIC_RULES[key]
            if isinstance(value, bool) or not isinstance(value, (int, float)) or not math.isfinite(value):
                errors.append((key, f"must be a finite number, got {value!r}"))
                continue
            if not ok(value):
                errors.append((key, f"{msg}, got {value}"))
                continue
            values[key] = float(value)
        elif key == "mode":
            try:
                values[key] = Mode(value)
            except ValueError:
                choices = ", ".join(m.value for m in Mode)
                errors.append((key, f"unknown mode {value!r} (expected one of {choices})"))
        elif key == "precision":
            if value not in ("float64", "float32"):
                errors.append((key, f"must be 'float64' or 'float32', got {value!r}"))
            else:
                values[key] = value

    bad = {name for name, _ in errors}
    if not bad & {"alpha_min", "alpha_max"}:
        lo = values.get("alpha_min", SadiConfig.alpha_min)
        hi = values.get("alpha_max", SadiConfig.alpha_max)
        if lo > hi:
            errors.append(("alpha_min/alpha_max", f"alpha_min ({lo}) must not exceed alpha_max ({hi})"))
    if errors:
        raise ConfigError(errors)
    return SadiConfig(**values)


def parse_layer_policy(raw) -> Optional[LayerPolicy]:
    """Read the optional ``layers`` block of a config document."""
    if raw is None:
        return None
    if not isinstance(raw, dict):
        raise ConfigError([("layers", "must be an object")])
    errors = []
    total = raw.get("total")
    if isinstance(total, bool) or not isinstance(total, int) or total < 1:
        errors.append(("layers.total", f"must be a positive integer, got {total!r}"))
    mode = raw.get("mode", "lookup")
    if mode not in ("lookup", "fractional", "explicit"):
        errors.append(("layers.mode", f"unknown mode {mode!r}"))
    rng = raw.get("range")
    if rng is not None:
        if (not isinstance(rng, (list, tuple)) or len(rng) != 2
                or not all(isinstance(x, int) and not isinstance(x, bool) for x in rng)):
            errors.append(("layers.range", f"must be [start, end] integers, got {rng!r}"))
            rng = None
        else:
            rng = (rng[0], rng[1])
    if errors:
        raise ConfigError(errors)
    policy = LayerPolicy(total_layers=total, mode=mode, explicit_range=rng)
    select_layers(policy)  # bounds check
    return policy


def load_config(path) -> tuple[SadiConfig, Optional[LayerPolicy]]:
    """Load a JSON config document; a missing path yields the defaults."""
    if path is None:
        return SadiConfig(), None
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([("<root>", f"invalid JSON: {exc}")]) from exc
    if not isinstance(doc, dict):
        raise ConfigError([("<root>", "config must be a JSON object")])
    return validate_config(doc), parse_layer_policy(doc.get("layers"))


def median_split_background(consensus: np.ndarray) -> np.ndarray:
    """1.0 where the consensus is below its median over tokens, else 0.0."""
    return (consensus < np.median(consensus)).astype(consensus.dtype)


def apply_intervention(
    logits,
    config: Optional[SadiConfig] = None,
    background: Callable[[np.ndarray], np.ndarray] = median_split_background,
) -> InterventionOutcome:
    """Apply ``config.mode`` to one layer's ``(H, M)`` visual logits.

    ``background`` decides which tokens the ``add_subtract`` penalty hits.
    """
    config = config or SadiConfig()
    mode = Mode(config.mode)
    E = as_logits(logits, dtype=config.dtype)

    if mode is Mode.NONE:
        return InterventionOutcome(E, softmax(E))

    if mode is Mode.MEAN_ADD:
        mu = mean_map(E)
        E_hat = E + config.devil_alpha * mu
        return InterventionOutcome(E_hat, softmax(E_hat), Diagnostics(mean=mu))

    diag = compute_statistics(E, config)

    if mode is Mode.HARD_TRUNCATE:
        deviation = np.abs(np.abs(E) - diag.consensus).mean(axis=1)
        cut = deviation > config.truncate_threshold * diag.std.mean()
        diag.extra["head_deviation"] = deviation
        if cut.all():
            raise ValueError(
                f"hard truncation would remove all {E.shape[0]} heads "
                f"(threshold {config.truncate_threshold} x mean spread {diag.std.mean():.6g})"
            )
        E_hat = E.copy()
        E_hat[cut] = NEG_SENTINEL
        probs = softmax(E_hat)
        # a removed head contributes no attention mass at all
        probs[cut] = 0.0
        return InterventionOutcome(E_hat, probs, diag, tuple(int(h) for h in np.flatnonzero(cut)))

    E_hat = recalibrate(E, diag.consensus, diag.alpha, diag.masks)
    if mode is Mode.ADD_SUBTRACT:
        bg = background(diag.consensus)
        diag.extra["background"] = bg
        E_hat = E_hat - config.beta * bg * diag.masks
    return InterventionOutcome(E_hat, softmax(E_hat), diag)


def intervene_layers(
    layers: Iterable,
    config: Optional[SadiConfig] = None,
    policy: Optional[LayerPolicy] = None,
) -> list[InterventionOutcome]:
    """Apply the intervention to the selected layers of a stack and pass the
    rest through unchanged."""
    layers = list(layers)
    policy = policy or LayerPolicy(total_layers=len(layers))
    if policy.total_layers != len(layers):
        raise ValueError(f"policy expects {policy.total_layers} layers, got {len(layers)}")
    chosen = select_layers(policy)
    config = config or SadiConfig()
    passthrough = replace(config, mode=Mode.NONE)
    return [apply_intervention(E, config if i in chosen else passthrough) for i, E in enumerate(layers)]
