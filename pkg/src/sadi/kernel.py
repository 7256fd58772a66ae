"""Fused single-pass kernel for the sadi mode.

:mod:`sadi.core` is the readable reference; this module computes the same
thing in two sweeps over the logits so the overhead on top of a softmax stays
small. The per-token median uses a sorting network pruned to the comparators
that feed the middle order statistic(s), unrolled for the head count and
compiled with numba. Generated sources are written to a cache directory so
numba can reuse compiled code across processes.

Results match the reference to within a few ulp: the masks multiply by a
per-token reciprocal instead of dividing and FMA contraction is allowed.
"""

from __future__ import annotations

import functools
import hashlib
import importlib.util
import logging
import os
import sys
import tempfile
from pathlib import Path

import numpy as np
from numba import njit

from .core import NonFiniteLogitsError, as_logits

log = logging.getLogger(__name__)

# above this the unrolled source gets too large to compile quickly
MAX_UNROLLED_HEADS = 64


def sorting_network(n: int) -> list[tuple[int, int]]:
    """Batcher odd-even merge sort comparators for ``n`` inputs (any ``n``)."""
    pairs = []
    p = 1
    while p < n:
        k = p
        while k >= 1:
            for j in range(k % p, n - k, 2 * k):
                for i in range(min(k, n - j - k)):
                    if (i + j) // (2 * p) == (i + j + k) // (2 * p):
                        pairs.append((i + j, i + j + k))
            k //= 2
        p *= 2
    return pairs


def median_network(n: int) -> list[tuple[int, int, bool, bool]]:
    """Comparators needed to place the median order statistic(s) of ``n``
    inputs, as ``(i, j, keep_low, keep_high)``.

    Walks the full network backwards and keeps a comparator only if one of
    its outputs is still needed; a comparator with a single live output
    becomes a lone min or max.
    """
    targets = {n // 2} if n % 2 else {n // 2 - 1, n // 2}
    live = set(targets)
    kept = []
    for i, j in reversed(sorting_network(n)):
        lo, hi = i in live, j in live
        if lo or hi:
            kept.append((i, j, lo, hi))
            live |= {i, j}
    kept.reverse()
    return kept


def kernel_source(n_heads: int) -> str:
    H = n_heads
    v = [f"v{h}" for h in range(H)]
    body = [
        "import numpy as np",
        "from numba import njit",
        "",
        "",
        "@njit(cache=True, boundscheck=False, fastmath={'contract'})",
        "def kernel(E, alpha_min, alpha_max, eps, out, C, S, ac, inv):",
        "    H, M = E.shape",
        "    bad = False",
        "    for m in range(M):",
    ]
    body += [f"        {v[h]} = abs(E[{h}, m])" for h in range(H)]
    body += [
        "        s = " + " + ".join(v),
        # inf - inf and nan - nan are nan
        "        bad |= not (s - s == 0.0)",
        f"        mean = s / {H}",
        "        q = " + " + ".join(f"({x} - mean) * ({x} - mean)" for x in v),
        f"        S[m] = np.sqrt(q / {H})",
    ]
    for i, j, lo, hi in median_network(H):
        body.append(f"        c = v{i} < v{j}")
        low = f"(v{i} if c else v{j})"
        high = f"(v{j} if c else v{i})"
        if lo and hi:
            body.append(f"        v{i}, v{j} = {low}, {high}")
        elif lo:
            body.append(f"        v{i} = {low}")
        else:
            body.append(f"        v{j} = {high}")
    if H % 2:
        body.append(f"        C[m] = v{H // 2}")
    else:
        body.append(f"        C[m] = 0.5 * (v{H // 2 - 1} + v{H // 2})")
    body += [
        "    if bad:",
        "        return False",
        "    lo = S[0]",
        "    hi = S[0]",
        "    for m in range(1, M):",
        "        x = S[m]",
        "        lo = x if x < lo else lo",
        "        hi = x if x > hi else hi",
        "    den = hi - lo + eps",
        "    span = alpha_max - alpha_min",
        "    for m in range(M):",
        "        ac[m] = (alpha_min + span * ((S[m] - lo) / den)) * C[m]",
        "        inv[m] = 1.0 / (S[m] + eps)",
        "    for h in range(H):",
        "        e = E[h]",
        "        o = out[h]",
        "        for m in range(M):",
        "            x = e[m]",
        "            r = abs(abs(x) - C[m]) * inv[m]",
        "            r = r if r < 1.0 else 1.0",
        "            o[m] = x + ac[m] * r",
        "    return True",
        "",
    ]
    return "\n".join(body)


def _cache_dir() -> Path | None:
    root = os.environ.get("SADI_CACHE_DIR")
    path = Path(root) if root else Path.home() / ".cache" / "sadi" / "kernels"
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError:
        return None
    return path if os.access(path, os.W_OK) else None


def _load_from_file(path: Path, source: str):
    if not path.exists() or path.read_text() != source:
        fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
        with os.fdopen(fd, "w") as fh:
            fh.write(source)
        os.replace(tmp, path)
    name = f"_{path.stem}"
    module = sys.modules.get(name)
    if module is None:
        spec = importlib.util.spec_from_file_location(name, path)
        module = importlib.util.module_from_spec(spec)
        # numba's cache re-imports the defining module by name
        sys.modules[name] = module
        spec.loader.exec_module(module)
    return module.kernel


@functools.lru_cache(maxsize=None)
def compiled_kernel(n_heads: int):
    """Return the jitted kernel for ``n_heads`` (compiled lazily on first call)."""
    if n_heads > MAX_UNROLLED_HEADS:
        return _generic_kernel
    source = kernel_source(n_heads)
    digest = hashlib.sha1(source.encode()).hexdigest()[:12]
    cache = _cache_dir()
    if cache is not None:
        return _load_from_file(cache / f"sadi_kernel_h{n_heads}_{digest}.py", source)
    log.debug("kernel cache directory unavailable; compiling in memory")
    namespace: dict = {}
    exec(compile(source.replace("cache=True, ", ""), f"<sadi-kernel-h{n_heads}>", "exec"), namespace)
    return namespace["kernel"]


@njit(cache=True, boundscheck=False)
def _generic_kernel(E, alpha_min, alpha_max, eps, out, C, S, ac, inv):
    H, M = E.shape
    col = np.empty(H)
    for m in range(M):
        s = 0.0
        for h in range(H):
            col[h] = abs(E[h, m])
            s += col[h]
        if not (s - s == 0.0):
            return False
        mean = s / H
        q = 0.0
        for h in range(H):
            d = col[h] - mean
            q += d * d
        S[m] = np.sqrt(q / H)
        col.sort()
        C[m] = col[H // 2] if H % 2 else 0.5 * (col[H // 2 - 1] + col[H // 2])
    lo = S.min()
    hi = S.max()
    den = hi - lo + eps
    for m in range(M):
        ac[m] = (alpha_min + (alpha_max - alpha_min) * ((S[m] - lo) / den)) * C[m]
        inv[m] = 1.0 / (S[m] + eps)
    for h in range(H):
        for m in range(M):
            r = min(abs(abs(E[h, m]) - C[m]) * inv[m], 1.0)
            out[h, m] = E[h, m] + ac[m] * r
    return True


class FusedSadi:
    """Reusable fused kernel for a fixed ``(n_heads, n_tokens)`` shape.

    Holds its scratch buffers, so one instance must not be shared between
    threads; create one per thread instead.
    """

    def __init__(self, n_heads: int, n_tokens: int, alpha_min: float = 0.25,
                 alpha_max: float = 0.80, epsilon: float = 1e-6):
        if n_heads < 1 or n_tokens < 1:
            raise ValueError(f"need at least one head and one token, got {n_heads}x{n_tokens}")
        self.shape = (n_heads, n_tokens)
        self.alpha_min = float(alpha_min)
        self.alpha_max = float(alpha_max)
        self.epsilon = float(epsilon)
        self._kernel = compiled_kernel(n_heads)
        self.consensus = np.empty(n_tokens)
        self.std = np.empty(n_tokens)
        self._alpha_c = np.empty(n_tokens)
        self._inv = np.empty(n_tokens)

    def __call__(self, logits: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
        """Recalibrate ``logits`` (float64, C-contiguous, shape ``self.shape``).

        ``out`` may be supplied to avoid an allocation; it must not alias
        ``logits``.
        """
        if logits.shape != self.shape or logits.dtype != np.float64 or not logits.flags.c_contiguous:
            logits = np.ascontiguousarray(logits, dtype=np.float64)
            if logits.shape != self.shape:
                raise ValueError(f"expected shape {self.shape}, got {logits.shape}")
        if out is None:
            out = np.empty(self.shape)
        ok = self._kernel(logits, self.alpha_min, self.alpha_max, self.epsilon,
                          out, self.consensus, self.std, self._alpha_c, self._inv)
        if not ok:
            as_logits(logits)  # raises with the offending index
            raise NonFiniteLogitsError(-1, -1, float("nan"))
        return out
