"""Synthetic attention populations with reliable and drifting heads.

Reliable heads put ``salient_gain`` on a shared salient token set; drifting
heads put ``drift_gain`` on a random subset of the background. Drift is
measured as KL(head || consensus) where the consensus distribution is the
softmax of the median-consensus logits of the unmodified layer.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, replace
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import SadiConfig, as_logits, median_consensus, softmax
from .policy import ConfigError, apply_intervention, validate_config

log = logging.getLogger(__name__)

# heads whose KL before intervention is below this are left out of the reduction ratio
KL_FLOOR = 1e-9
SUM_TOLERANCE = 1e-9

CSV_FIELDS = ("step", "head", "kl_before", "kl_after", "salient_mass_before", "salient_mass_after")


def default_seed() -> int:
    """Seed from ``SADI_SEED`` (0 when unset)."""
    raw = os.environ.get("SADI_SEED")
    if raw is None or raw.strip() == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise ConfigError([("SADI_SEED", f"must be an integer, got {raw!r}")]) from None


@dataclass(frozen=True)
class DriftScenario:
    """A synthetic layer: ``n_reliable`` heads agreeing on ``salient`` and
    ``n_drift`` heads wandering over the background.

    ``drift_tokens`` is how many background tokens each drifting head lights
    up; by default as many as there are salient tokens.
    """

    n_tokens: int
    salient: tuple[int, ...]
    n_reliable: int
    n_drift: int
    salient_gain: float
    drift_gain: float
    noise_std: float = 0.0
    seed: int = 0
    drift_tokens: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "salient", tuple(sorted(int(i) for i in self.salient)))
        errors = []
        if self.n_tokens < 1:
            errors.append(("n_tokens", f"must be >= 1, got {self.n_tokens}"))
        if self.n_reliable < 0 or self.n_drift < 0:
            errors.append(("n_reliable/n_drift", "head counts must be >= 0"))
        elif self.n_reliable + self.n_drift < 2:
            errors.append(("n_reliable/n_drift", f"need at least 2 heads, got {self.n_heads}"))
        if not self.salient:
            errors.append(("salient", "salient set is empty"))
        elif len(set(self.salient)) != len(self.salient):
            errors.append(("salient", "duplicate token indices"))
        elif self.salient[0] < 0 or self.salient[-1] >= self.n_tokens:
            errors.append(("salient", f"indices must lie in [0, {self.n_tokens - 1}]"))
        for name in ("salient_gain", "drift_gain"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                errors.append((name, f"must be a finite number > 0, got {value}"))
        if not (math.isfinite(self.noise_std) and self.noise_std >= 0):
            errors.append(("noise_std", f"must be >= 0, got {self.noise_std}"))
        if not errors and self.n_drift > 0:
            n_bg = self.n_tokens - len(self.salient)
            k = self.n_drift_tokens
            if n_bg == 0:
                errors.append(("salient", "no background tokens left for drifting heads"))
            elif not 1 <= k <= n_bg:
                errors.append(("drift_tokens", f"must be in [1, {n_bg}], got {k}"))
        if errors:
            raise ConfigError(errors)

    @property
    def n_heads(self) -> int:
        return self.n_reliable + self.n_drift

    @property
    def n_drift_tokens(self) -> int:
        return len(self.salient) if self.drift_tokens is None else self.drift_tokens

    @property
    def background(self) -> np.ndarray:
        mask = np.ones(self.n_tokens, dtype=bool)
        mask[list(self.salient)] = False
        return np.flatnonzero(mask)

    @property
    def drifting_heads(self) -> range:
        return range(self.n_reliable, self.n_heads)


@dataclass
class DriftReport:
    """Per-head drift before and after one intervention.

    Heads removed by hard truncation have no distribution afterwards; their
    ``kl_after`` and ``salient_mass_after`` are reported as 0.
    """

    kl_before: np.ndarray
    kl_after: np.ndarray
    mean_drift_reduction: float
    salient_mass_before: Optional[np.ndarray] = None
    salient_mass_after: Optional[np.ndarray] = None
    truncated_heads: tuple[int, ...] = ()

    def to_dict(self) -> dict:
        out = {}
        for key, value in asdict(self).items():
            out[key] = value.tolist() if isinstance(value, np.ndarray) else value
        out["truncated_heads"] = list(self.truncated_heads)
        return out


def scenario_from_dict(doc: dict) -> DriftScenario:
    """Build a scenario from its JSON form.

    The salient set is either an explicit ``salient`` index list or
    ``n_salient`` (the first ``n_salient`` tokens). A missing ``seed`` falls
    back to :func:`default_seed`.
    """
    if not isinstance(doc, dict):
        raise ConfigError([("<root>", "scenario must be a JSON object")])
    allowed = {"n_tokens", "salient", "n_salient", "n_reliable", "n_drift", "salient_gain",
               "drift_gain", "noise_std", "seed", "drift_tokens"}
    errors = [(key, "unknown field") for key in doc if key not in allowed]
    for key in ("n_tokens", "n_reliable", "n_drift", "salient_gain", "drift_gain"):
        if key not in doc:
            errors.append((key, "required"))
    if ("salient" in doc) == ("n_salient" in doc):
        errors.append(("salient", "give exactly one of 'salient' or 'n_salient'"))
    for key in ("n_tokens", "n_reliable", "n_drift", "n_salient", "seed", "drift_tokens"):
        if key in doc and (isinstance(doc[key], bool) or not isinstance(doc[key], int)):
            errors.append((key, f"must be an integer, got {doc[key]!r}"))
    for key in ("salient_gain", "drift_gain", "noise_std"):
        if key in doc and (isinstance(doc[key], bool) or not isinstance(doc[key], (int, float))):
            errors.append((key, f"must be a number, got {doc[key]!r}"))
    if "salient" in doc and not (isinstance(doc["salient"], list)
                                 and all(isinstance(i, int) and not isinstance(i, bool) for i in doc["salient"])):
        errors.append(("salient", "must be a list of integers"))
    if errors:
        raise ConfigError(errors)
    salient = doc["salient"] if "salient" in doc else range(doc["n_salient"])
    return DriftScenario(
        n_tokens=doc["n_tokens"],
        salient=tuple(salient),
        n_reliable=doc["n_reliable"],
        n_drift=doc["n_drift"],
        salient_gain=float(doc["salient_gain"]),
        drift_gain=float(doc["drift_gain"]),
        noise_std=float(doc.get("noise_std", 0.0)),
        seed=doc["seed"] if "seed" in doc else default_seed(),
        drift_tokens=doc.get("drift_tokens"),
    )


def load_scenario(path) -> DriftScenario:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError([("<root>", f"invalid JSON: {exc}")]) from exc
    return scenario_from_dict(doc)


def generate_scene(scenario: DriftScenario) -> np.ndarray:
    """Draw the ``(H, M)`` logits for a scenario; reliable heads come first.

    Uses numpy's PCG64 generator seeded with ``scenario.seed``: first the
    background subset of each drifting head, then one standard normal per
    entry scaled by ``noise_std``.
    """
    rng = np.random.default_rng(scenario.seed)
    E = np.zeros((scenario.n_heads, scenario.n_tokens))
    E[: scenario.n_reliable, list(scenario.salient)] = scenario.salient_gain
    background = scenario.background
    for h in scenario.drifting_heads:
        picked = rng.choice(background, size=scenario.n_drift_tokens, replace=False)
        E[h, picked] = scenario.drift_gain
    E += scenario.noise_std * rng.standard_normal(E.shape)
    return E


def _check_distribution(name: str, p: np.ndarray) -> None:
    if p.ndim != 1:
        raise ValueError(f"{name} must be 1-D, got shape {p.shape}")
    if not np.all(np.isfinite(p)) or np.any(p < 0):
        raise ValueError(f"{name} must be finite and non-negative")
    total = p.sum()
    if abs(total - 1.0) > SUM_TOLERANCE:
        raise ValueError(f"{name} sums to {total!r}, not 1")


def kl_divergence(p, q) -> float:
    """KL(p || q) in nats with ``0 * ln 0 = 0``."""
    p = np.asarray(p, dtype=np.float64)
    q = np.asarray(q, dtype=np.float64)
    _check_distribution("p", p)
    _check_distribution("q", q)
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch: {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(q[support] <= 0):
        i = int(np.flatnonzero(support & (q <= 0))[0])
        raise ValueError(f"q is zero at index {i} where p = {p[i]!r}")
    ps, qs = p[support], q[support]
    return float(max(np.sum(ps * np.log(ps / qs)), 0.0))


def _reduction(before: np.ndarray, after: np.ndarray) -> float:
    keep = before > KL_FLOOR
    if not keep.any():
        return 0.0
    return float(1.0 - after[keep].mean() / before[keep].mean())


def drift_report(logits, config: Optional[SadiConfig] = None,
                 salient: Optional[Sequence[int]] = None) -> DriftReport:
    """KL of every head to the consensus distribution before and after the
    intervention selected by ``config.mode``.

    ``salient`` (token indices) enables the salient-mass fields.
    """
    config = config or SadiConfig()
    E = as_logits(logits, dtype=np.float64)
    q = softmax(median_consensus(E))
    before = softmax(E)
    outcome = apply_intervention(E, config)
    after = np.asarray(outcome.probabilities, dtype=np.float64)
    removed = set(outcome.truncated_heads)

    H = E.shape[0]
    kl_before = np.array([kl_divergence(before[h], q) for h in range(H)])
    kl_after = np.array([0.0 if h in removed else kl_divergence(after[h], q) for h in range(H)])
    mass_before = mass_after = None
    if salient is not None:
        idx = list(salient)
        mass_before = before[:, idx].sum(axis=1)
        mass_after = after[:, idx].sum(axis=1)
    return DriftReport(kl_before, kl_after, _reduction(kl_before, kl_after),
                       mass_before, mass_after, tuple(outcome.truncated_heads))


def scenario_report(scenario: DriftScenario, config: Optional[SadiConfig] = None) -> DriftReport:
    return drift_report(generate_scene(scenario), config, scenario.salient)


def snowball_trajectory(scenario: DriftScenario, steps: int, growth: float,
                        config: Optional[SadiConfig] = None) -> list[DriftReport]:
    """Reports for ``steps`` scenes where step ``t`` scales ``drift_gain`` by
    ``growth**t`` and reseeds with ``seed + t``."""
    if isinstance(steps, bool) or not isinstance(steps, int) or steps < 1:
        raise ConfigError([("steps", f"must be an integer >= 1, got {steps!r}")])
    if not (math.isfinite(growth) and growth >= 1):
        raise ConfigError([("growth", f"must be >= 1, got {growth}")])
    reports = []
    for t in range(steps):
        step = replace(scenario, drift_gain=scenario.drift_gain * growth ** t, seed=scenario.seed + t)
        reports.append(scenario_report(step, config))
    return reports


def mean_kl_area(reports: Sequence[DriftReport]) -> float:
    """Trapezoid area under the mean-KL-after curve (unit step spacing)."""
    y = np.array([r.kl_after.mean() for r in reports])
    if len(y) == 1:
        return float(y[0])
    return float(np.sum((y[1:] + y[:-1]) / 2))


@dataclass
class SweepPoint:
    alpha_min: float
    alpha_max: float
    mean_drift_reduction: float
    mean_salient_mass_change: float
    drift_salient_mass_after: Optional[float]


def budget_sweep(scenario: DriftScenario, alpha_min_grid: Iterable[float],
                 alpha_max_grid: Iterable[float], config: Optional[SadiConfig] = None) -> list[SweepPoint]:
    """One report per valid ``(alpha_min, alpha_max)`` pair on the base scene.

    Pairs with ``alpha_min > alpha_max`` are skipped with a warning; an empty
    effective grid is an error.
    """
    config = config or SadiConfig()
    E = generate_scene(scenario)
    drifting = list(scenario.drifting_heads)
    points = []
    for a_min in alpha_min_grid:
        for a_max in alpha_max_grid:
            if a_min > a_max:
                log.warning("skipping alpha_min=%g > alpha_max=%g", a_min, a_max)
                continue
            cfg = validate_config(replace(config, alpha_min=float(a_min), alpha_max=float(a_max)))
            rep = drift_report(E, cfg, scenario.salient)
            change = float(np.mean(rep.salient_mass_after - rep.salient_mass_before))
            drift_mass = float(np.mean(rep.salient_mass_after[drifting])) if drifting else None
            points.append(SweepPoint(float(a_min), float(a_max), rep.mean_drift_reduction, change, drift_mass))
    if not points:
        raise ConfigError([("grid", "no (alpha_min, alpha_max) pair with alpha_min <= alpha_max")])
    return points


def write_trajectory_csv(reports: Sequence[DriftReport], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(CSV_FIELDS)
    nan = float("nan")
    for step, rep in enumerate(reports):
        for h in range(len(rep.kl_before)):
            mb = rep.salient_mass_before[h] if rep.salient_mass_before is not None else nan
            ma = rep.salient_mass_after[h] if rep.salient_mass_after is not None else nan
            writer.writerow([step, h, repr(float(rep.kl_before[h])), repr(float(rep.kl_after[h])),
                             repr(float(mb)), repr(float(ma))])


def write_sweep_csv(points: Sequence[SweepPoint], fh) -> None:
    writer = csv.writer(fh, lineterminator="\n")
    names = [f.name for f in SweepPoint.__dataclass_fields__.values()]
    writer.writerow(names)
    for p in points:
        writer.writerow(["" if getattr(p, n) is None else repr(getattr(p, n)) for n in names])
