import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from proxynovel.datagen import SyntheticSpec, gen_benchmark
from proxynovel.embedding import cosine_sim, l2_normalize, l2_normalize_rows
from proxynovel.errors import ConfigError, EmptyClass, NearZeroNorm
from proxynovel.prototype import WeightingSpec, batch_prototypes, build_prototype, weights

MODES = ["centroid", "softmax_iou", "softmax_objectness"]
quality = arrays(np.float64, st.integers(1, 30), elements=st.floats(0, 1))


class TestWeights:
    def test_centroid_uniform(self):
        np.testing.assert_array_equal(weights([0.2, 0.9, 0.5], [0, 0, 0], WeightingSpec("centroid")), [1 / 3] * 3)

    def test_softmax_iou_ln2(self):
        w = weights([0.0, math.log(2)], [0.5, 0.5], WeightingSpec("softmax_iou"))
        np.testing.assert_allclose(w, [1 / 3, 2 / 3], atol=1e-15)

    def test_equal_objectness_is_uniform(self):
        w = weights([0.1, 0.9, 0.4, 0.3], [0.7] * 4, WeightingSpec("softmax_objectness"))
        np.testing.assert_allclose(w, 0.25, atol=1e-15)

    def test_empty(self):
        with pytest.raises(EmptyClass):
            weights([], [], WeightingSpec())

    def test_bad_spec(self):
        with pytest.raises(ConfigError):
            WeightingSpec("softmax_iou", temperature=0.0)
        with pytest.raises(ConfigError):
            WeightingSpec("median")

    @pytest.mark.parametrize("mode", MODES)
    @given(q=quality)
    def test_sum_to_one(self, mode, q):
        w = weights(q, q[::-1], WeightingSpec(mode, temperature=0.3))
        assert np.all(w >= 0)
        assert abs(w.sum() - 1.0) <= 1e-9

    @pytest.mark.parametrize("mode", ["softmax_iou", "softmax_objectness"])
    @given(q=arrays(np.float64, st.integers(2, 20), elements=st.floats(0, 1), unique=True)
           .filter(lambda a: np.diff(np.sort(a)).min() > 1e-9))
    def test_monotone(self, mode, q):
        w = weights(q, q, WeightingSpec(mode))
        order = np.argsort(q)
        assert np.all(np.diff(w[order]) > 0)

    @given(q=quality)
    def test_high_temperature_is_uniform(self, q):
        w = weights(q, q, WeightingSpec("softmax_iou", temperature=1e6))
        np.testing.assert_allclose(w, 1.0 / len(q), atol=1e-4)


class TestBuildPrototype:
    def test_single_region(self):
        r = l2_normalize([0.3, -0.2, 0.9])
        p = build_prototype(5, r[None, :], [0.4], [0.6], WeightingSpec("softmax_iou"))
        np.testing.assert_allclose(p.embedding, r, atol=1e-15)
        assert (p.class_id, p.support) == (5, 1)

    @pytest.mark.parametrize("mode", MODES)
    def test_identical_regions(self, mode):
        r = l2_normalize([1.0, 2.0, 3.0])
        p = build_prototype(0, np.stack([r, r]), [0.3, 0.9], [0.5, 0.1], WeightingSpec(mode))
        np.testing.assert_allclose(p.embedding, r, atol=1e-15)

    def test_orthogonal_centroid(self):
        p = build_prototype(0, np.eye(2), [1, 1], [1, 1], WeightingSpec())
        np.testing.assert_allclose(p.embedding, [0.70710678, 0.70710678], atol=1e-8)

    def test_cancelling_regions(self):
        with pytest.raises(NearZeroNorm):
            build_prototype(0, np.array([[1.0, 0.0], [-1.0, 0.0]]), [0.5, 0.5], [0.5, 0.5], WeightingSpec())

    def test_empty(self):
        with pytest.raises(EmptyClass):
            build_prototype(0, np.zeros((0, 3)), [], [], WeightingSpec())

    @pytest.mark.parametrize("mode", MODES)
    def test_permutation_invariance(self, mode):
        rng = np.random.default_rng(3)
        R = l2_normalize_rows(rng.standard_normal((25, 8)))
        iou, obj = rng.uniform(0, 1, 25), rng.uniform(0, 1, 25)
        perm = rng.permutation(25)
        a = build_prototype(0, R, iou, obj, WeightingSpec(mode)).embedding
        b = build_prototype(0, R[perm], iou[perm], obj[perm], WeightingSpec(mode)).embedding
        np.testing.assert_allclose(a, b, atol=1e-9, rtol=0)


class TestBatchPrototypes:
    def test_keys_match_present_classes(self):
        rng = np.random.default_rng(0)
        R = l2_normalize_rows(rng.standard_normal((6, 4)))
        out = batch_prototypes(R, [7, 3, 7, 3, 3, 7], np.full(6, 0.5), np.full(6, 0.5), WeightingSpec())
        assert set(out) == {3, 7}
        assert out[3].support == 3
        expected = l2_normalize(R[[1, 3, 4]].mean(axis=0))
        np.testing.assert_allclose(out[3].embedding, expected, atol=1e-12)

    def test_empty_batch(self):
        assert batch_prototypes(np.zeros((0, 4)), [], [], [], WeightingSpec()) == {}

    def test_quality_weighting_beats_centroid_on_noisy_region(self):
        bench = gen_benchmark(SyntheticSpec(seed=3, quality_noise_coupling=2.0))
        train = bench.train.select([3])
        # sharpest and noisiest proposal of class 3
        pick = [int(np.argmax(train.iou)), int(np.argmin(train.iou))]
        assert train.iou[pick[0]] > 0.95 and train.iou[pick[1]] < 0.3
        head = np.linalg.pinv(bench.mixing_matrix)
        R = l2_normalize_rows(train.features[pick] @ head.T)
        iou = train.iou[pick]
        t = bench.registry.text(3)
        cen = batch_prototypes(R, [3, 3], iou, iou, WeightingSpec("centroid"))[3]
        wtd = batch_prototypes(R, [3, 3], iou, iou, WeightingSpec("softmax_iou"))[3]
        assert cosine_sim(wtd.embedding, t) > cosine_sim(cen.embedding, t)
