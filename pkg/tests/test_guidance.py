import math

import numpy as np
import pytest

from cocktail.errors import ContractError, ShapeError
from cocktail.guidance import (LITERAL, LOGIT, GuidanceConfig, GuidanceEditor, RegionSpec, build_masks,
                               downsample_region, guided_attention_output, masked_attention, omega,
                               substitute_attention)


def literal_oracle(logits, m_pos, m_neg, w_pos, w_neg):
    """Scalar loops, one entry at a time."""
    n_i, n_t = logits.shape
    out = np.zeros((n_i, n_t))
    for i in range(n_i):
        denom = sum(math.exp(float(logits[i, k])) for k in range(n_t))
        for j in range(n_t):
            out[i, j] = (math.exp(float(logits[i, j])) + w_pos * m_pos[i, j] - w_neg * m_neg[i, j]) / denom
    return out


def random_case(rng):
    n_i, n_t = int(rng.integers(1, 10)), int(rng.integers(1, 9))
    logits = rng.standard_normal((n_i, n_t)) * 2
    m_pos = (rng.random((n_i, n_t)) < 0.3).astype(np.float64)
    m_neg = (rng.random((n_i, n_t)) < 0.3).astype(np.float64)
    return logits, m_pos, m_neg, float(rng.random() * 3), float(rng.random() * 3)


def test_literal_matches_oracle():
    rng = np.random.default_rng(0)
    for _ in range(30):
        logits, mp, mn, wp, wn = random_case(rng)
        np.testing.assert_allclose(masked_attention(logits, mp, mn, wp, wn, LITERAL),
                                   literal_oracle(logits, mp, mn, wp, wn), atol=1e-12)


def test_logit_variant_rows_are_distributions():
    rng = np.random.default_rng(1)
    for _ in range(30):
        logits, mp, mn, wp, wn = random_case(rng)
        out = masked_attention(logits, mp, mn, wp, wn, LOGIT)
        np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-12)
        assert (out >= 0).all()


def test_zero_weight_is_softmax():
    logits = np.random.default_rng(2).standard_normal((4, 5))
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    ref = e / e.sum(axis=1, keepdims=True)
    ones = np.ones((4, 5))
    for variant in (LITERAL, LOGIT):
        np.testing.assert_allclose(masked_attention(logits, ones, ones, 0.0, 0.0, variant), ref, atol=1e-12)


def test_per_head_weights_broadcast():
    rng = np.random.default_rng(3)
    logits = rng.standard_normal((2, 3, 4))
    mp = np.zeros((3, 4))
    mp[0, 1] = 1
    out = masked_attention(logits, mp, np.zeros((3, 4)), np.array([0.0, 1.0]), np.array([0.0, 0.0]))
    np.testing.assert_allclose(out[1], literal_oracle(logits[1], mp, 0 * mp, 1.0, 0.0), atol=1e-12)
    np.testing.assert_allclose(out[0], literal_oracle(logits[0], mp, 0 * mp, 0.0, 0.0), atol=1e-12)


def test_omega_schedule():
    assert omega(1.0, 0.0, np.ones(3)) == 0.0
    assert abs(omega(2.0, math.e - 1, np.array([0.2, 1.0])) - 2.0) < 1e-12
    with pytest.raises(ContractError):
        omega(1.0, -0.1, np.ones(1))


def test_downsample_and_masks():
    region = np.zeros((32, 32), dtype=bool)
    region[:16, :16] = True
    small = downsample_region(region, 2)
    np.testing.assert_array_equal(small, [[True, False], [False, False]])
    m_pos, m_neg = build_masks([RegionSpec(1, region)], 3, 2)
    assert m_pos.shape == (4, 3)
    np.testing.assert_array_equal(m_pos[:, 1], [1, 0, 0, 0])
    # tokens without a positive region are pushed away from the union
    np.testing.assert_array_equal(m_neg[:, 0], [1, 0, 0, 0])
    np.testing.assert_array_equal(m_neg[:, 2], [1, 0, 0, 0])
    np.testing.assert_array_equal(m_neg[:, 1], [0, 0, 0, 0])


def test_explicit_negative_region():
    region = np.zeros((4, 4), dtype=bool)
    region[2:, 2:] = True
    _, m_neg = build_masks([RegionSpec(0, region, positive=False)], 2, 2)
    np.testing.assert_array_equal(m_neg[:, 0], [0, 0, 0, 1])


def test_region_validation():
    with pytest.raises(ContractError):
        RegionSpec(0, np.zeros((4, 4)))
    with pytest.raises(ContractError):
        build_masks([RegionSpec(9, np.ones((4, 4)))], 8, 2)
    with pytest.raises(ShapeError):
        downsample_region(np.ones((5, 5)), 2)
    with pytest.raises(ContractError):
        GuidanceConfig(substitute=(8,)).validate(8)


def test_substitution_touches_only_chosen_columns():
    rng = np.random.default_rng(4)
    a = rng.random((2, 4, 5))
    b = rng.random((2, 4, 5))
    out = substitute_attention(a, b, (1, 3))
    np.testing.assert_array_equal(out[..., [1, 3]], b[..., [1, 3]])
    np.testing.assert_array_equal(out[..., [0, 2, 4]], a[..., [0, 2, 4]])
    np.testing.assert_array_equal(substitute_attention(a, b, ()), a)
    with pytest.raises(ShapeError):
        substitute_attention(a, b[:, :3], (0,))


def test_guided_output():
    a = np.eye(3)
    v = np.arange(6.0).reshape(3, 2)
    np.testing.assert_array_equal(guided_attention_output(a, v), v)
    with pytest.raises(ShapeError):
        guided_attention_output(np.ones((2, 4)), v)


def test_editor_neutral_and_active():
    attn = np.full((1, 2, 4, 3), 1 / 3, dtype=np.float32)
    logits = np.zeros((1, 2, 4, 3), dtype=np.float32)
    neutral = GuidanceEditor(GuidanceConfig(omega_prime=0.0), 3, sigma=5.0)
    assert neutral("enc4", logits, attn) is None
    region = np.zeros((4, 4), dtype=bool)
    region[:2, :2] = True
    ed = GuidanceEditor(GuidanceConfig(1.0, [RegionSpec(1, region)]), 3, sigma=math.e - 1)
    out = ed("enc4", logits, attn)
    # w = 1 * log(e) * 1/3, added before dividing by the exp-sum of 3
    np.testing.assert_allclose(out[0, :, 0], [[2 / 9, 4 / 9, 2 / 9]] * 2, atol=1e-6)
    np.testing.assert_allclose(out[0, :, 3], [[1 / 3] * 3] * 2, atol=1e-6)


def test_editor_substitutes_from_mirrored_level():
    attn = np.zeros((2, 2, 4, 3), dtype=np.float32)
    branch = {"enc4": np.arange(2 * 2 * 4 * 3, dtype=np.float32).reshape(2, 2, 4, 3)}
    ed = GuidanceEditor(GuidanceConfig(0.0, [], substitute=(2,)), 3, 1.0, branch_maps=branch, rows=slice(1, 2))
    out = ed("dec4", attn[1:], attn[1:])
    np.testing.assert_array_equal(out[..., 2], branch["enc4"][1:, ..., 2])
    assert not out[..., :2].any()
