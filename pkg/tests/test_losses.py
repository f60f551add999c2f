import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from fdcheck import central_diff, rel_err
from proxynovel.embedding import l2_normalize, l2_normalize_rows
from proxynovel.errors import ConfigError, DimensionMismatch, UnknownClass
from proxynovel.losses import (
    LossSpec,
    bce_class_loss,
    distill_loss,
    distill_loss_grad,
    proxy_loss,
    proxy_loss_grad,
)

VARIANTS = ["l1", "l2", "cosine"]
E1, E2 = np.array([1.0, 0.0]), np.array([0.0, 1.0])
unit = arrays(np.float64, 8, elements=st.floats(-1, 1)).filter(lambda v: np.linalg.norm(v) > 1e-2).map(l2_normalize)


class TestProxyLoss:
    @pytest.mark.parametrize("variant", VARIANTS)
    def test_identical_is_zero(self, variant):
        t = l2_normalize([0.2, -0.5, 0.7])
        assert proxy_loss(t, t.copy(), variant) == 0.0

    @pytest.mark.parametrize("variant, expected", [("l1", 2.0), ("l2", 1.41421356), ("cosine", 1.0)])
    def test_orthogonal(self, variant, expected):
        assert proxy_loss(E1, E2, variant) == pytest.approx(expected, abs=1e-8)

    def test_hand_l1(self):
        assert proxy_loss([0.6, 0.8], [1.0, 0.0], "l1") == pytest.approx(1.2, abs=1e-15)

    def test_errors(self):
        with pytest.raises(DimensionMismatch):
            proxy_loss([1.0, 0.0], [1.0, 0.0, 0.0])
        with pytest.raises(ConfigError):
            proxy_loss(E1, E2, "huber")

    @pytest.mark.parametrize("variant", VARIANTS)
    @given(t=unit, r=unit)
    def test_symmetric_nonnegative(self, variant, t, r):
        a, b = proxy_loss(t, r, variant), proxy_loss(r, t, variant)
        assert a >= 0
        assert a == pytest.approx(b, abs=1e-15)

    def test_norm_inequality(self):
        rng = np.random.default_rng(0)
        M = 32
        T = l2_normalize_rows(rng.standard_normal((10_000, M)))
        R = l2_normalize_rows(rng.standard_normal((10_000, M)))
        for t, r in zip(T, R):
            l1, l2 = proxy_loss(t, r, "l1"), proxy_loss(t, r, "l2")
            assert l2 <= l1 + 1e-12
            assert l1 <= math.sqrt(M) * l2 + 1e-12

    @pytest.mark.parametrize("variant", VARIANTS)
    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, variant, seed):
        rng = np.random.default_rng(seed)
        t, r = l2_normalize_rows(rng.standard_normal((2, 8)))
        if variant == "l1":
            assert np.abs(t - r).min() > 1e-6  # away from kinks
        _, g_t, g_r = proxy_loss_grad(t, r, variant)
        assert rel_err(g_t, central_diff(lambda x: proxy_loss(x, r, variant), t)) < 1e-4
        assert rel_err(g_r, central_diff(lambda x: proxy_loss(t, x, variant), r)) < 1e-4

    def test_l1_subgradient_zero_at_kink(self):
        _, g_t, g_r = proxy_loss_grad([0.6, 0.8], [0.6, 0.0], "l1")
        np.testing.assert_array_equal(g_t, [0.0, 1.0])
        np.testing.assert_array_equal(g_r, [-0.0, -1.0])


class TestBCE:
    def test_zero_scale_is_ln2(self):
        rng = np.random.default_rng(1)
        text = l2_normalize_rows(rng.standard_normal((5, 6)))
        loss, _ = bce_class_loss(l2_normalize(rng.standard_normal(6)), 2, range(5), text, scale=1e-12)
        assert loss == pytest.approx(0.69314718, abs=1e-8)

    def test_exact_match_orthogonal_others(self):
        text = np.eye(4)
        loss, _ = bce_class_loss(text[1], 1, [0, 1, 2, 3], text, scale=50.0)
        positive = math.log1p(math.exp(-50.0))
        assert positive == pytest.approx(1.9e-22, rel=0.01)
        assert loss == pytest.approx((positive + 3 * math.log(2)) / 4, abs=1e-15)

    def test_unknown_label(self):
        with pytest.raises(UnknownClass):
            bce_class_loss(E1, 9, [0, 1], np.eye(2))

    @pytest.mark.parametrize("seed", range(5))
    def test_gradient_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        text = l2_normalize_rows(rng.standard_normal((6, 8)))
        # moderate scale keeps the logistic out of saturation so the check is informative
        for scale in (5.0, 50.0):
            r = l2_normalize(rng.standard_normal(8))
            _, g = bce_class_loss(r, 3, range(6), text, scale)
            num = central_diff(lambda x: bce_class_loss(x, 3, range(6), text, scale)[0], r)
            assert rel_err(g, num) < 1e-4

    def test_large_logits_are_finite(self):
        loss, g = bce_class_loss(-E1, 0, [0, 1], np.eye(2), scale=1e4)
        assert np.isfinite(loss) and np.all(np.isfinite(g))
        assert loss == pytest.approx((1e4 + math.log(2)) / 2)


class TestDistill:
    def test_examples(self):
        assert distill_loss(E1, E1) == 0.0
        assert distill_loss(E1, E2) == 2.0

    @given(a=unit, b=unit)
    def test_equals_l1_proxy(self, a, b):
        assert distill_loss(a, b) == proxy_loss(a, b, "l1")

    def test_gradient(self):
        rng = np.random.default_rng(3)
        r, t = l2_normalize_rows(rng.standard_normal((2, 7)))
        _, g = distill_loss_grad(r, t)
        assert rel_err(g, central_diff(lambda x: distill_loss(x, t), r)) < 1e-4

    def test_dimension_mismatch(self):
        with pytest.raises(DimensionMismatch):
            distill_loss([1.0], [1.0, 0.0])


class TestLossSpec:
    def test_defaults(self):
        s = LossSpec()
        assert (s.proxy_variant, s.proxy_weight, s.bce_logit_scale, s.distill_weight) == ("l1", 1.0, 50.0, 0.0)

    @pytest.mark.parametrize("kw", [{"proxy_variant": "l3"}, {"proxy_weight": -1.0},
                                    {"distill_weight": float("inf")}, {"bce_logit_scale": 0.0}])
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            LossSpec(**kw)
