"""Overhead of the intervention relative to a softmax-only forward.

Both paths run ``K`` layers back to back on the same random logits. The
baseline applies the per-head softmax; the intervened path first rewrites the
logits (fused kernel for ``sadi``, the reference dispatch for the other
modes) and then applies the same softmax. The two paths are timed
alternately within every iteration, swapping which goes first, and the
medians of the per-iteration times are compared.
"""

from __future__ import annotations

import gc
import time
from dataclasses import asdict, dataclass, replace
from typing import Optional

import numpy as np

from .core import Mode, SadiConfig, softmax
from .kernel import FusedSadi
from .policy import ConfigError, apply_intervention

MIN_ITERS = 100
MIN_WARMUP = 10


@dataclass
class BenchReport:
    heads: int
    tokens: int
    layers: int
    mode: str
    iters: int
    warmup: int
    seed: int
    baseline_ns: float
    intervened_ns: float
    ratio: float
    threads: int = 1

    def to_dict(self) -> dict:
        return asdict(self)


def _make_intervened(config: SadiConfig, heads: int, tokens: int):
    mode = Mode(config.mode)
    if mode is Mode.NONE:
        return lambda E: softmax(E)
    if mode is Mode.SADI and config.precision == "float64":
        fused = FusedSadi(heads, tokens, config.alpha_min, config.alpha_max, config.epsilon)
        out = np.empty((heads, tokens))
        return lambda E: softmax(fused(E, out))
    return lambda E: apply_intervention(E, config).probabilities


def run_bench(heads: int = 32, tokens: int = 576, layers: int = 14, mode: str = "sadi",
              iters: int = MIN_ITERS, warmup: int = MIN_WARMUP, seed: int = 0,
              config: Optional[SadiConfig] = None) -> BenchReport:
    errors = []
    for name, value, low in (("heads", heads, 1), ("tokens", tokens, 1), ("layers", layers, 1),
                             ("iters", iters, MIN_ITERS), ("warmup", warmup, MIN_WARMUP)):
        if value < low:
            errors.append((name, f"must be >= {low}, got {value}"))
    if errors:
        raise ConfigError(errors)
    config = replace(config or SadiConfig(), mode=Mode(mode))

    rng = np.random.default_rng(seed)
    stack = [rng.standard_normal((heads, tokens)) for _ in range(layers)]
    intervened = _make_intervened(config, heads, tokens)

    def base():
        for E in stack:
            softmax(E)

    def treated():
        for E in stack:
            intervened(E)

    base_ns = np.empty(iters)
    treat_ns = np.empty(iters)
    clock = time.perf_counter_ns
    for _ in range(warmup):
        base()
        treated()
    was_enabled = gc.isenabled()
    gc.disable()
    try:
        for i in range(iters):
            first, second = (base, treated) if i % 2 == 0 else (treated, base)
            t0 = clock()
            first()
            t1 = clock()
            second()
            t2 = clock()
            a, b = t1 - t0, t2 - t1
            base_ns[i], treat_ns[i] = (a, b) if i % 2 == 0 else (b, a)
    finally:
        if was_enabled:
            gc.enable()
    b_med = float(np.median(base_ns))
    t_med = float(np.median(treat_ns))
    return BenchReport(heads, tokens, layers, config.mode.value, iters, warmup, seed,
                       b_med, t_med, t_med / b_med)
