import itertools

import numpy as np
import pytest
from hypothesis import given, strategies as st

from oracles import median_py
from sadi import NonFiniteLogitsError, SadiConfig, sadi_forward
from sadi.kernel import MAX_UNROLLED_HEADS, FusedSadi, median_network, sorting_network

# the fused path reorders a few floating-point operations
ULP_TOL = dict(rtol=1e-13, atol=1e-13)


def run_network(pairs, values):
    v = list(values)
    for i, j in pairs:
        if v[j] < v[i]:
            v[i], v[j] = v[j], v[i]
    return v


def run_median_network(n, values):
    v = list(values)
    for i, j, keep_lo, keep_hi in median_network(n):
        lo, hi = min(v[i], v[j]), max(v[i], v[j])
        if keep_lo:
            v[i] = lo
        if keep_hi:
            v[j] = hi
    return median_py(v[n // 2 - 1:n // 2 + 1]) if n % 2 == 0 else v[n // 2]


@pytest.mark.parametrize("n", range(1, 13))
def test_sorting_network_sorts_all_binary_inputs(n):
    pairs = sorting_network(n)
    for bits in itertools.product((0, 1), repeat=n):
        assert run_network(pairs, bits) == sorted(bits)


@pytest.mark.parametrize("n", range(1, 13))
def test_median_network_on_all_binary_inputs(n):
    for bits in itertools.product((0, 1), repeat=n):
        assert run_median_network(n, bits) == median_py(bits)


@given(st.lists(st.floats(0, 1e6), min_size=1, max_size=40))
def test_median_network_on_random_values(values):
    assert run_median_network(len(values), values) == median_py(values)


def test_median_network_is_smaller_than_full_sort():
    assert len(median_network(32)) < len(sorting_network(32))


@pytest.mark.parametrize("H", [1, 2, 3, 5, 8, 32, MAX_UNROLLED_HEADS + 1])
@pytest.mark.parametrize("M", [1, 7, 576])
def test_fused_matches_reference(H, M):
    rng = np.random.default_rng(H * 1000 + M)
    E = rng.standard_normal((H, M)) * rng.uniform(0.1, 10)
    cfg = SadiConfig(alpha_min=0.3, alpha_max=0.7, epsilon=1e-5)
    fused = FusedSadi(H, M, cfg.alpha_min, cfg.alpha_max, cfg.epsilon)
    ref, _, diag = sadi_forward(E, cfg)
    out = fused(E)
    np.testing.assert_allclose(out, ref, **ULP_TOL)
    np.testing.assert_array_equal(fused.consensus, diag.consensus)
    np.testing.assert_allclose(fused.std, diag.std, **ULP_TOL)


def test_fused_identical_heads_exact():
    E = np.tile(np.random.default_rng(0).standard_normal(576), (32, 1))
    np.testing.assert_array_equal(FusedSadi(32, 576)(E), E)


def test_fused_reuses_output_buffer():
    E = np.random.default_rng(1).standard_normal((8, 16))
    f = FusedSadi(8, 16)
    out = np.empty((8, 16))
    assert f(E, out) is out


@pytest.mark.parametrize("bad", [np.nan, np.inf, -np.inf])
def test_fused_rejects_non_finite(bad):
    E = np.zeros((8, 16))
    E[5, 9] = bad
    with pytest.raises(NonFiniteLogitsError) as info:
        FusedSadi(8, 16)(E)
    assert (info.value.head, info.value.token) == (5, 9)


def test_fused_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        FusedSadi(8, 16)(np.zeros((8, 15)))
