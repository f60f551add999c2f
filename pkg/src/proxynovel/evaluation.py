"""Two-head score fusion, open-vocabulary evaluation and embedding-geometry analyses."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datagen import RegionSet
from .embedding import ClassRegistry, is_unit, l2_normalize, l2_normalize_rows
from .errors import ConfigError, DimensionMismatch, EmptyGroup, InsufficientClasses, UnknownGroup
from .mixer import LAMBDA_GRID, Sampler, best_mix, sample_lambda
from .trainer import HeadParams, forward_batch


@dataclass(frozen=True)
class FusionParams:
    """Exponents on the proxy-head score: ``alpha`` for base, ``beta`` for novel classes."""

    alpha: float = 0.45
    beta: float = 0.65
    positivity: str = "logistic"
    scale: float = 50.0
    eps: float = 1e-6

    def __post_init__(self):
        for name in ("alpha", "beta"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1], got {v}")
        if self.positivity == "logistic":
            if not self.scale > 0:
                raise ConfigError("logistic scale must be > 0")
        elif self.positivity == "shift_clamp":
            if not self.eps > 0:
                raise ConfigError("shift_clamp eps must be > 0")
        else:
            raise ConfigError(f"unknown positivity transform {self.positivity!r}")

    def metadata(self) -> dict:
        return {"alpha": self.alpha, "beta": self.beta, "positivity": self.positivity,
                "scale": self.scale, "eps": self.eps}


# operating points reported for the two benchmark families
PRESETS = {
    "ov-coco": FusionParams(alpha=0.45, beta=0.65),
    "ov-lvis": FusionParams(alpha=0.15, beta=0.35),
}


def log_positive(cos: np.ndarray, params: FusionParams) -> np.ndarray:
    """Log of the positivity transform, computed without saturation."""
    cos = np.asarray(cos, dtype=np.float64)
    if params.positivity == "logistic":
        return -np.logaddexp(0.0, -params.scale * cos)
    return np.log(np.maximum(cos + 1.0, params.eps) / 2.0)


def make_positive(cos: np.ndarray, params: FusionParams) -> np.ndarray:
    cos = np.asarray(cos, dtype=np.float64)
    if params.positivity == "logistic":
        return np.exp(-np.logaddexp(0.0, -params.scale * cos))
    return np.maximum(cos + 1.0, params.eps) / 2.0


def class_exponents(registry: ClassRegistry, params: FusionParams) -> np.ndarray:
    out = np.empty(len(registry))
    for k, g in enumerate(registry.groups):
        if g == "base":
            out[k] = params.alpha
        elif g == "novel":
            out[k] = params.beta
        else:
            raise UnknownGroup(f"class group {g!r} has no fusion exponent")
    return out


def fuse(proxy_scores: np.ndarray, bce_scores: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """Per-class weighted geometric mean of two positive score arrays."""
    return proxy_scores ** exponents * bce_scores ** (1.0 - exponents)


def fuse_log(proxy_log: np.ndarray, bce_log: np.ndarray, exponents: np.ndarray) -> np.ndarray:
    """``log(fuse(...))`` from log scores.

    Used for ranking: at logit scale 50 the logistic score rounds to exactly
    1.0 for every cosine above ~0.74, which would turn the argmax into ties.
    """
    return exponents * proxy_log + (1.0 - exponents) * bce_log


def fuse_scores(r_proxy, r_bce, registry: ClassRegistry, params: FusionParams) -> np.ndarray:
    """Fused per-class scores for one region seen by both heads."""
    r_proxy = np.asarray(r_proxy, dtype=np.float64)
    r_bce = np.asarray(r_bce, dtype=np.float64)
    if r_proxy.shape != (registry.dimension,) or r_bce.shape != (registry.dimension,):
        raise DimensionMismatch(f"embeddings must have length {registry.dimension}")
    W = registry.matrix()
    exps = class_exponents(registry, params)
    # unit inputs are used as given: renormalizing is not bitwise idempotent
    sp = make_positive(W @ (r_proxy if is_unit(r_proxy) else l2_normalize(r_proxy)), params)
    sb = make_positive(W @ (r_bce if is_unit(r_bce) else l2_normalize(r_bce)), params)
    return fuse(sp, sb, exps)


@dataclass
class EvalReport:
    base_top1: float
    novel_top1: float
    overall_top1: float
    per_class: dict[int, float]
    counts: dict[str, int]
    confusion: np.ndarray  # (C, C) rows true, columns predicted, registry order
    predictions: np.ndarray
    metadata: dict = field(default_factory=dict)


def head_scores(head: HeadParams, features: np.ndarray, registry: ClassRegistry) -> np.ndarray:
    """Cosine of every region with every class text embedding, (n, C)."""
    R, _ = forward_batch(head, features)
    return R @ registry.matrix().T


def _acc(mask: np.ndarray, correct: np.ndarray) -> float:
    n = int(mask.sum())
    return float(correct[mask].sum() / n) if n else float("nan")


def report_from_scores(scores: np.ndarray, samples: RegionSet, registry: ClassRegistry,
                       metadata: dict | None = None) -> EvalReport:
    pred_idx = np.argmax(scores, axis=1)
    ids = np.array(registry.ids(), dtype=np.int64)
    predictions = ids[pred_idx]
    true_idx = np.array([registry.index_of(c) for c in samples.class_ids.tolist()], dtype=np.int64)
    correct = pred_idx == true_idx
    groups = np.array(registry.groups)[true_idx] if len(true_idx) else np.array([], dtype=str)
    base_mask = groups == "base"
    novel_mask = groups == "novel"
    C = len(registry)
    confusion = np.zeros((C, C), dtype=np.int64)
    np.add.at(confusion, (true_idx, pred_idx), 1)
    per_class = {}
    for cid in samples.classes():
        per_class[int(cid)] = _acc(samples.class_ids == cid, correct)
    return EvalReport(
        base_top1=_acc(base_mask, correct),
        novel_top1=_acc(novel_mask, correct),
        overall_top1=_acc(np.ones(len(correct), dtype=bool), correct),
        per_class=per_class,
        counts={"base": int(base_mask.sum()), "novel": int(novel_mask.sum()), "total": len(correct)},
        confusion=confusion,
        predictions=predictions,
        metadata=dict(metadata or {}),
    )


def evaluate(heads, samples: RegionSet, registry: ClassRegistry, params: FusionParams) -> EvalReport:
    """Top-1 accuracy of the fused classifier over all registry classes.

    ``heads`` is ``(bce_head, proxy_head)``.  Ties in the argmax go to the
    class listed first in the registry.
    """
    bce_head, proxy_head = heads
    exps = class_exponents(registry, params)
    lp = log_positive(head_scores(proxy_head, samples.features, registry), params)
    lb = log_positive(head_scores(bce_head, samples.features, registry), params)
    return report_from_scores(fuse_log(lp, lb, exps[None, :]), samples, registry, params.metadata())


def sweep_fusion(heads, samples: RegionSet, registry: ClassRegistry, alphas, betas,
                 base_params: FusionParams | None = None) -> list[dict]:
    """Evaluate every (alpha, beta) pair; rows ordered alpha-major."""
    base_params = base_params or FusionParams()
    bce_head, proxy_head = heads
    cos_p = head_scores(proxy_head, samples.features, registry)
    cos_b = head_scores(bce_head, samples.features, registry)
    lp = log_positive(cos_p, base_params)
    lb = log_positive(cos_b, base_params)
    rows = []
    for a in alphas:
        for b in betas:
            params = FusionParams(float(a), float(b), base_params.positivity, base_params.scale, base_params.eps)
            exps = class_exponents(registry, params)
            rep = report_from_scores(fuse_log(lp, lb, exps[None, :]), samples, registry)
            rows.append({"alpha": float(a), "beta": float(b), "base_top1": rep.base_top1,
                         "novel_top1": rep.novel_top1, "overall_top1": rep.overall_top1})
    return rows


# ---------------------------------------------------------------------------
# geometry analyses

@dataclass
class SimilarityHistogram:
    edges: np.ndarray
    max_counts: np.ndarray  # histogram of per-novel max similarity
    pair_counts: np.ndarray  # histogram of all pairwise similarities
    per_novel_max: np.ndarray
    mean_max: float
    mean_pairwise: float

    def rows(self) -> list[dict]:
        return [{"bin_left": float(self.edges[k]), "bin_right": float(self.edges[k + 1]),
                 "count": int(self.max_counts[k]), "pair_count": int(self.pair_counts[k])}
                for k in range(len(self.max_counts))]


def similarity_histogram(group_a, novel, bins: int = 40) -> SimilarityHistogram:
    """Cosine similarities between a class group and the novel classes.

    ``group_a`` and ``novel`` are (n, M) embedding matrices (rows need not be
    unit norm) or registries.
    """
    A = group_a.matrix() if isinstance(group_a, ClassRegistry) else np.atleast_2d(group_a)
    N = novel.matrix() if isinstance(novel, ClassRegistry) else np.atleast_2d(novel)
    if A.shape[0] == 0 or N.shape[0] == 0 or A.size == 0 or N.size == 0:
        raise EmptyGroup("both groups must be nonempty")
    if A.shape[1] != N.shape[1]:
        raise DimensionMismatch("groups have different embedding dimensions")
    sims = np.clip(l2_normalize_rows(N) @ l2_normalize_rows(A).T, -1.0, 1.0)  # (novel, A)
    per_max = sims.max(axis=1)
    edges = np.linspace(-1.0, 1.0, bins + 1)
    return SimilarityHistogram(
        edges=edges,
        max_counts=np.histogram(per_max, bins=edges)[0],
        pair_counts=np.histogram(sims.ravel(), bins=edges)[0],
        per_novel_max=per_max,
        mean_max=float(per_max.mean()),
        mean_pairwise=float(sims.mean()),
    )


def sample_proxy_texts(registry: ClassRegistry, n: int, sampler: Sampler, rng: np.random.Generator) -> np.ndarray:
    """``n`` proxy-novel text embeddings mixed from random base-class pairs."""
    base = registry.matrix(registry.ids("base"))
    if base.shape[0] < 2:
        raise InsufficientClasses("need >= 2 base classes")
    out = np.empty((n, base.shape[1]))
    for k in range(n):
        i, j = rng.choice(base.shape[0], size=2, replace=False)
        lam = sample_lambda(sampler, rng)
        out[k] = l2_normalize(lam * base[i] + (1.0 - lam) * base[j])
    return out


@dataclass(frozen=True)
class HullProximity:
    nearest_single_sim: float
    best_pair_mix_sim: float
    residual: float
    pair: tuple[int, int, float]


def hull_proximity(novel_embedding, base) -> HullProximity:
    """How well a novel embedding is matched by one base class versus the best
    two-class mix on the lambda grid.  ``base`` is a registry or (n, M) matrix.
    """
    if isinstance(base, ClassRegistry):
        ids = base.ids("base") or base.ids()
        T = base.matrix(ids)
    else:
        T = l2_normalize_rows(np.atleast_2d(base))
        ids = list(range(T.shape[0]))
    if T.shape[0] < 2:
        raise InsufficientClasses("need >= 2 base classes")
    v = l2_normalize(novel_embedding)
    single = float(min(1.0, (T @ v).max()))
    i, j, k, best = best_mix(v, T)
    # endpoints of the grid are the single classes; guard rounding
    best = max(best, single)
    return HullProximity(single, best, 1.0 - best, (ids[i], ids[j], float(LAMBDA_GRID[k])))
