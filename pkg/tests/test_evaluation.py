import math

import numpy as np
import pytest

from proxynovel.datagen import RegionSet, SyntheticSpec, gen_benchmark
from proxynovel.embedding import ClassRegistry, l2_normalize, l2_normalize_rows
from proxynovel.errors import ConfigError, DimensionMismatch, EmptyGroup, InsufficientClasses, UnknownGroup
from proxynovel.evaluation import (
    PRESETS,
    FusionParams,
    evaluate,
    fuse_scores,
    head_scores,
    hull_proximity,
    make_positive,
    similarity_histogram,
    sweep_fusion,
)
from proxynovel.mixer import LAMBDA_GRID
from proxynovel.trainer import HeadParams, init_heads


@pytest.fixture(scope="module")
def bench():
    return gen_benchmark(SyntheticSpec(seed=7))


@pytest.fixture(scope="module")
def heads(bench):
    # two different heads: the noisy-inverse oracle and a random init
    oracle = HeadParams(np.linalg.pinv(bench.mixing_matrix))
    rand = init_heads(bench.train.feature_dim, bench.registry.dimension, 3)[0]
    return rand, oracle


def _reg():
    rng = np.random.default_rng(0)
    return ClassRegistry.from_arrays([0, 1, 2, 3], ["base", "base", "novel", "novel"], rng.standard_normal((4, 5)))


class TestFuseScores:
    def test_zero_exponents_give_bce_scores(self):
        reg = _reg()
        rng = np.random.default_rng(1)
        rp, rb = l2_normalize_rows(rng.standard_normal((2, 5)))
        p = FusionParams(0.0, 0.0)
        np.testing.assert_array_equal(fuse_scores(rp, rb, reg, p), make_positive(reg.matrix() @ rb, p))

    @pytest.mark.parametrize("positivity", ["logistic", "shift_clamp"])
    @pytest.mark.parametrize("alpha, beta", [(0.45, 0.65), (0.15, 0.35), (1.0, 0.0), (0.3, 1.0)])
    def test_identical_heads(self, positivity, alpha, beta):
        reg = _reg()
        r = l2_normalize(np.random.default_rng(2).standard_normal(5))
        p = FusionParams(alpha, beta, positivity, scale=5.0)
        np.testing.assert_allclose(fuse_scores(r, r, reg, p), make_positive(reg.matrix() @ r, p), rtol=1e-12)

    def test_range(self):
        reg = _reg()
        rng = np.random.default_rng(3)
        rp, rb = l2_normalize_rows(rng.standard_normal((2, 5)))
        for pos in ("logistic", "shift_clamp"):
            s = fuse_scores(rp, rb, reg, FusionParams(positivity=pos))
            assert np.all(s > 0) and np.all(s <= 1)

    def test_shift_clamp_values(self):
        p = FusionParams(positivity="shift_clamp", eps=1e-6)
        np.testing.assert_allclose(make_positive([-1.0, 0.0, 1.0], p), [5e-7, 0.5, 1.0])

    def test_errors(self):
        reg = _reg()
        with pytest.raises(DimensionMismatch):
            fuse_scores(np.ones(4), np.ones(5), reg, FusionParams())
        proxy_reg = ClassRegistry.from_arrays([0], ["proxy"], [[1.0, 0.0]])
        with pytest.raises(UnknownGroup):
            fuse_scores([1.0, 0.0], [1.0, 0.0], proxy_reg, FusionParams())
        for kw in ({"alpha": 1.2}, {"beta": -0.1}, {"positivity": "relu"}, {"scale": 0.0}):
            with pytest.raises(ConfigError):
                FusionParams(**kw)

    def test_presets(self):
        assert (PRESETS["ov-coco"].alpha, PRESETS["ov-coco"].beta) == (0.45, 0.65)
        assert (PRESETS["ov-lvis"].alpha, PRESETS["ov-lvis"].beta) == (0.15, 0.35)
        assert FusionParams() == PRESETS["ov-coco"]


class TestEvaluate:
    def test_alpha_beta_zero_is_bce_head(self, bench, heads):
        rep = evaluate(heads, bench.eval, bench.registry, FusionParams(0.0, 0.0))
        alone = np.argmax(head_scores(heads[0], bench.eval.features, bench.registry), axis=1)
        np.testing.assert_array_equal(rep.predictions, np.array(bench.registry.ids())[alone])

    def test_alpha_beta_one_is_proxy_head(self, bench, heads):
        rep = evaluate(heads, bench.eval, bench.registry, FusionParams(1.0, 1.0))
        alone = np.argmax(head_scores(heads[1], bench.eval.features, bench.registry), axis=1)
        np.testing.assert_array_equal(rep.predictions, np.array(bench.registry.ids())[alone])

    def test_noiseless_inverse_is_perfect(self):
        b = gen_benchmark(SyntheticSpec(seed=3, quality_noise_coupling=0.0))
        h = HeadParams(np.linalg.pinv(b.mixing_matrix))
        rep = evaluate((h, h), b.eval, b.registry, FusionParams())
        assert rep.base_top1 == 1.0 and rep.novel_top1 == 1.0

    def test_one_class_registry(self):
        reg = ClassRegistry.from_arrays([5], ["base"], [[1.0, 0.0]])
        s = RegionSet(np.array([[0.3, -1.0], [-1.0, 0.2]]), np.array([5, 5]), np.array([0.5, 0.5]), np.array([0.5, 0.5]))
        h = HeadParams(np.eye(2))
        rep = evaluate((h, h), s, reg, FusionParams())
        assert rep.overall_top1 == 1.0 and rep.base_top1 == 1.0
        assert math.isnan(rep.novel_top1)

    def test_report_invariants(self, bench, heads):
        rep = evaluate(heads, bench.eval, bench.registry, FusionParams())
        assert rep.counts["base"] + rep.counts["novel"] == rep.counts["total"] == len(bench.eval)
        for v in (rep.base_top1, rep.novel_top1, rep.overall_top1):
            assert 0.0 <= v <= 1.0
        weighted = (rep.base_top1 * rep.counts["base"] + rep.novel_top1 * rep.counts["novel"]) / rep.counts["total"]
        assert rep.overall_top1 == pytest.approx(weighted, abs=1e-12)
        assert rep.confusion.sum() == len(bench.eval)
        assert rep.metadata == {"alpha": 0.45, "beta": 0.65, "positivity": "logistic", "scale": 50.0, "eps": 1e-6}

    def test_saturated_scores_still_rank(self, bench):
        # at scale 50 many logistic scores round to 1.0; ranking must still follow the cosine
        h = HeadParams(np.linalg.pinv(bench.mixing_matrix))
        rep = evaluate((h, h), bench.eval, bench.registry, FusionParams())
        alone = np.argmax(head_scores(h, bench.eval.features, bench.registry), axis=1)
        np.testing.assert_array_equal(rep.predictions, np.array(bench.registry.ids())[alone])

    def test_shared_scale_leaves_argmax(self, bench, heads):
        # multiplying both transformed score vectors by c > 0 adds log c to every class
        cp = head_scores(heads[1], bench.eval.features[:50], bench.registry)
        cb = head_scores(heads[0], bench.eval.features[:50], bench.registry)
        p = FusionParams(positivity="shift_clamp")
        exps = np.where(np.array(bench.registry.groups) == "base", p.alpha, p.beta)
        sp, sb = make_positive(cp, p), make_positive(cb, p)
        a = np.argmax(sp ** exps * sb ** (1 - exps), axis=1)
        b = np.argmax((3.7 * sp) ** exps * (3.7 * sb) ** (1 - exps), axis=1)
        np.testing.assert_array_equal(a, b)


class TestSweep:
    def test_rows_and_consistency(self, bench, heads):
        rows = sweep_fusion(heads, bench.eval, bench.registry, [0.0, 0.5, 1.0], [0.0, 0.25, 1.0])
        assert len(rows) == 9
        assert [(r["alpha"], r["beta"]) for r in rows][:3] == [(0.0, 0.0), (0.0, 0.25), (0.0, 1.0)]
        rep = evaluate(heads, bench.eval, bench.registry, FusionParams(0.0, 0.0))
        assert rows[0]["novel_top1"] == rep.novel_top1 and rows[0]["base_top1"] == rep.base_top1

    def test_best_point_dominates_origin(self, bench, heads):
        rows = sweep_fusion(heads, bench.eval, bench.registry, np.linspace(0, 1, 5), np.linspace(0, 1, 5))
        origin = next(r for r in rows if r["alpha"] == 0 and r["beta"] == 0)
        assert max(r["novel_top1"] for r in rows) >= origin["novel_top1"]


class TestHistogram:
    def test_self_similarity(self, bench):
        novel = bench.registry.subset("novel")
        h = similarity_histogram(novel, novel)
        np.testing.assert_allclose(h.per_novel_max, 1.0, atol=1e-12)
        assert h.max_counts.sum() == len(novel)

    def test_orthogonal(self):
        h = similarity_histogram(np.eye(4)[:2], np.eye(4)[2:], bins=4)
        np.testing.assert_array_equal(h.per_novel_max, 0.0)
        assert h.mean_pairwise == 0.0
        assert [r["count"] for r in h.rows()] == [0, 0, 2, 0]
        assert h.rows()[0] == {"bin_left": -1.0, "bin_right": -0.5, "count": 0, "pair_count": 0}

    def test_empty(self):
        with pytest.raises(EmptyGroup):
            similarity_histogram(np.zeros((0, 3)), np.eye(3))


def brute_force_hull(v, T):
    v = l2_normalize(v)
    best = -np.inf
    for i in range(len(T)):
        for j in range(len(T)):
            if i == j:
                continue
            for lam in LAMBDA_GRID:
                m = lam * T[i] + (1 - lam) * T[j]
                n = np.linalg.norm(m)
                if n > 1e-12:
                    best = max(best, float(m @ v) / n)
    return best


class TestHullProximity:
    def test_base_member(self):
        T = l2_normalize_rows(np.random.default_rng(0).standard_normal((4, 6)))
        hp = hull_proximity(T[2], T)
        assert hp.nearest_single_sim == pytest.approx(1.0, abs=1e-12)
        assert hp.best_pair_mix_sim == pytest.approx(1.0, abs=1e-12)
        assert hp.residual == pytest.approx(0.0, abs=1e-12)

    def test_midpoint(self):
        T = np.eye(3)
        hp = hull_proximity(l2_normalize(T[0] + T[1]), T)
        assert hp.best_pair_mix_sim == pytest.approx(1.0, abs=1e-12)
        assert hp.pair == (0, 1, 0.5)

    @pytest.mark.parametrize("seed", range(4))
    def test_off_hull_against_brute_force(self, seed):
        rng = np.random.default_rng(seed)
        T = l2_normalize_rows(rng.standard_normal((8, 64)))
        v = rng.standard_normal(64)
        hp = hull_proximity(v, T)
        assert hp.best_pair_mix_sim == pytest.approx(brute_force_hull(v, T), abs=1e-12)
        assert hp.best_pair_mix_sim >= hp.nearest_single_sim
        assert hp.best_pair_mix_sim < 0.5

    def test_registry_input(self, bench):
        for cid in bench.registry.ids("novel"):
            hp = hull_proximity(bench.registry.text(cid), bench.registry)
            assert hp.best_pair_mix_sim >= hp.nearest_single_sim
            assert hp.pair[0] in bench.registry.ids("base")

    def test_insufficient(self):
        with pytest.raises(InsufficientClasses):
            hull_proximity([1.0, 0.0], np.array([[1.0, 0.0]]))
