import json

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from sadi import Mode, SadiConfig, sadi_forward, softmax
from sadi.policy import (
    NEG_SENTINEL,
    STAGES_32,
    ConfigError,
    LayerPolicy,
    apply_intervention,
    intervene_layers,
    load_config,
    median_split_background,
    parse_layer_policy,
    select_layers,
    validate_config,
)

finite = st.floats(-30, 30, allow_nan=False)
head_logits = st.tuples(st.integers(1, 8), st.integers(1, 10)).flatmap(
    lambda s: arrays(np.float64, s, elements=finite))


def test_lookup_windows():
    assert list(select_layers(LayerPolicy(32))) == list(range(5, 19))
    assert list(select_layers(LayerPolicy(40))) == list(range(8, 25))


def test_single_layer_fractional():
    assert list(select_layers(LayerPolicy(1, "fractional"))) == [0]


def test_fractional_rounding_examples():
    # 0.16 * 24 = 3.84 -> 4 and 0.57 * 24 = 13.68 -> 14
    assert list(select_layers(LayerPolicy(24, "fractional"))) == list(range(4, 15))
    # 0.16 * 50 = 8 and 0.57 * 50 = 28.5 rounds half up to 29
    assert list(select_layers(LayerPolicy(50, "fractional"))) == list(range(8, 30))


def test_lookup_falls_back_to_fractional():
    assert select_layers(LayerPolicy(24)) == select_layers(LayerPolicy(24, "fractional"))


def test_stage_split_covers_valid_indices():
    covered = set()
    for lo, hi in STAGES_32.values():
        covered |= set(range(lo, hi + 1))
    assert covered == set(range(32))


@given(st.integers(1, 200))
def test_fractional_monotone(L):
    a = select_layers(LayerPolicy(L, "fractional"))
    b = select_layers(LayerPolicy(L + 1, "fractional"))
    assert b.start >= a.start and b.stop >= a.stop
    assert 0 <= a.start and a.stop - 1 <= L - 1 and len(a) >= 1


def test_explicit_range():
    assert list(select_layers(LayerPolicy(10, "explicit", (2, 4)))) == [2, 3, 4]
    with pytest.raises(ConfigError, match="layers.range"):
        select_layers(LayerPolicy(10, "explicit", (2, 10)))
    with pytest.raises(ConfigError):
        select_layers(LayerPolicy(10, "explicit", (5, 4)))
    with pytest.raises(ConfigError):
        select_layers(LayerPolicy(10, "explicit"))


def test_validate_defaults():
    cfg = validate_config({})
    assert (cfg.alpha_min, cfg.alpha_max, cfg.epsilon, cfg.mode) == (0.25, 0.80, 1e-6, Mode.SADI)
    assert validate_config(None) == cfg
    assert validate_config(cfg) == cfg


def test_validate_inverted_bounds_names_both_fields():
    with pytest.raises(ConfigError) as info:
        validate_config({"alpha_min": 0.9, "alpha_max": 0.8})
    fields = [name for name, _ in info.value.errors]
    assert fields == ["alpha_min/alpha_max"]
    assert "alpha_min" in str(info.value) and "alpha_max" in str(info.value)


def test_validate_reports_every_violation():
    with pytest.raises(ConfigError) as info:
        validate_config({"epsilon": 0, "beta": -1, "mode": "magic", "colour": 1, "alpha_min": True})
    fields = {name for name, _ in info.value.errors}
    assert fields == {"epsilon", "beta", "mode", "colour", "alpha_min"}


@pytest.mark.parametrize("raw", [{"epsilon": float("nan")}, {"alpha_max": float("inf")},
                                 {"truncate_threshold": 0}, {"precision": "float16"}])
def test_validate_rejects(raw):
    with pytest.raises(ConfigError):
        validate_config(raw)


def test_layer_policy_parsing(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text(json.dumps({"mode": "add_subtract", "beta": 0.5,
                                "layers": {"mode": "explicit", "total": 32, "range": [3, 7]}}))
    cfg, policy = load_config(path)
    assert cfg.mode is Mode.ADD_SUBTRACT and cfg.beta == 0.5
    assert list(select_layers(policy)) == [3, 4, 5, 6, 7]
    with pytest.raises(ConfigError):
        parse_layer_policy({"total": 0})
    with pytest.raises(ConfigError):
        parse_layer_policy({"total": 8, "range": [1]})


def test_load_config_rejects_bad_json(tmp_path):
    path = tmp_path / "cfg.json"
    path.write_text("{not json")
    with pytest.raises(ConfigError):
        load_config(path)
    assert load_config(None) == (SadiConfig(), None)


@given(head_logits)
def test_none_is_exact_fixpoint(E):
    cfg = SadiConfig(mode=Mode.NONE)
    once = apply_intervention(E, cfg)
    twice = apply_intervention(once.recalibrated, cfg)
    np.testing.assert_array_equal(once.recalibrated, E)
    np.testing.assert_array_equal(twice.recalibrated, once.recalibrated)
    np.testing.assert_array_equal(once.probabilities, softmax(E))


@given(head_logits)
def test_mean_add_zero_equals_none(E):
    a = apply_intervention(E, SadiConfig(mode=Mode.MEAN_ADD, devil_alpha=0.0))
    b = apply_intervention(E, SadiConfig(mode=Mode.NONE))
    np.testing.assert_array_equal(a.recalibrated, b.recalibrated)
    np.testing.assert_array_equal(a.probabilities, b.probabilities)


@given(head_logits, st.floats(0, 3))
def test_mean_add_shifts_every_head_equally(E, devil_alpha):
    out = apply_intervention(E, SadiConfig(mode=Mode.MEAN_ADD, devil_alpha=devil_alpha)).recalibrated
    shift = out - E
    np.testing.assert_allclose(shift, np.broadcast_to(shift[0], shift.shape), rtol=0, atol=1e-12)


@given(head_logits)
def test_add_subtract_beta_zero_is_sadi(E):
    a = apply_intervention(E, SadiConfig(mode=Mode.ADD_SUBTRACT, beta=0.0))
    out, probs, _ = sadi_forward(E)
    np.testing.assert_array_equal(a.recalibrated, out)
    np.testing.assert_array_equal(a.probabilities, probs)


@given(head_logits)
def test_sadi_mode_delegates(E):
    a = apply_intervention(E, SadiConfig())
    out, probs, _ = sadi_forward(E)
    np.testing.assert_array_equal(a.recalibrated, out)
    np.testing.assert_array_equal(a.probabilities, probs)


def test_background_median_split():
    np.testing.assert_array_equal(median_split_background(np.array([1.0, 4.0, 2.0, 3.0])), [1, 0, 1, 0])
    assert not median_split_background(np.full(5, 2.0)).any()


def test_add_subtract_penalises_background_only():
    E = np.random.default_rng(5).standard_normal((8, 16)) * 3
    sadi = apply_intervention(E, SadiConfig()).recalibrated
    out = apply_intervention(E, SadiConfig(mode=Mode.ADD_SUBTRACT, beta=1.0))
    bg = out.diagnostics.extra["background"].astype(bool)
    np.testing.assert_array_equal(out.recalibrated[:, ~bg], sadi[:, ~bg])
    assert np.all(out.recalibrated[:, bg] <= sadi[:, bg])


def test_custom_background_policy():
    E = np.random.default_rng(6).standard_normal((4, 6))
    everything = apply_intervention(E, SadiConfig(mode=Mode.ADD_SUBTRACT, beta=2.0),
                                    background=lambda C: np.ones_like(C))
    sadi = apply_intervention(E, SadiConfig())
    np.testing.assert_allclose(everything.recalibrated, sadi.recalibrated - 2.0 * sadi.diagnostics.masks)


def test_hard_truncation_removes_outlier_head():
    E = np.zeros((5, 10))
    E[:, :3] = 4.0
    E[4] = 0.0
    E[4, 6:] = 9.0
    out = apply_intervention(E, SadiConfig(mode=Mode.HARD_TRUNCATE, truncate_threshold=1.0))
    assert out.truncated_heads == (4,)
    assert np.all(out.recalibrated[4] == NEG_SENTINEL)
    np.testing.assert_array_equal(out.probabilities[4], 0.0)
    np.testing.assert_array_equal(out.probabilities[:4], softmax(E[:4]))


@given(head_logits.filter(lambda E: E.shape[0] >= 2), st.floats(0.05, 5))
def test_hard_truncation_never_perturbs_survivors(E, thr):
    try:
        out = apply_intervention(E, SadiConfig(mode=Mode.HARD_TRUNCATE, truncate_threshold=thr))
    except ValueError as exc:
        assert "all" in str(exc)
        return
    keep = [h for h in range(E.shape[0]) if h not in out.truncated_heads]
    np.testing.assert_array_equal(out.probabilities[keep], softmax(E[keep]))
    assert np.all(np.isfinite(out.probabilities))


def test_hard_truncation_all_heads_rejected():
    E = np.array([[0.0, 10.0], [10.0, 0.0]])
    with pytest.raises(ValueError, match="all 2 heads"):
        apply_intervention(E, SadiConfig(mode=Mode.HARD_TRUNCATE, truncate_threshold=0.01))


def test_intervene_layers_respects_policy():
    rng = np.random.default_rng(7)
    stack = [rng.standard_normal((4, 6)) for _ in range(32)]
    outs = intervene_layers(stack, SadiConfig(), LayerPolicy(32))
    for i, (E, o) in enumerate(zip(stack, outs)):
        if 5 <= i <= 18:
            np.testing.assert_array_equal(o.recalibrated, sadi_forward(E)[0])
        else:
            np.testing.assert_array_equal(o.recalibrated, E)
    with pytest.raises(ValueError):
        intervene_layers(stack[:3], SadiConfig(), LayerPolicy(32))
