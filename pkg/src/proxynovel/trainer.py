"""Two-head linear region-embedding model trained by SGD.

Both heads map a feature ``x`` to ``l2_normalize(W @ x)``.  The BCE head is
trained on the cosine BCE loss only; the proxy head additionally receives the
proxy loss on proxy-novel classes synthesized from the batch prototypes.
Gradients are assembled by hand, so ``batch_objective`` doubles as the target
of the finite-difference checker.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .datagen import RegionSet
from .embedding import ClassRegistry, l2_normalize, read_json, write_json
from .errors import ConfigError, NearZeroNorm
from .losses import LossSpec, bce_batch_grad, distill_loss_grad, proxy_loss_grad
from .mixer import MixSpec, select_pairs
from .prototype import WeightingSpec, weighted_sum, weights


@dataclass
class HeadParams:
    matrix: np.ndarray  # (M, F)

    @property
    def embedding_dim(self) -> int:
        return self.matrix.shape[0]

    @property
    def feature_dim(self) -> int:
        return self.matrix.shape[1]

    def copy(self) -> "HeadParams":
        return HeadParams(self.matrix.copy())

    def to_dict(self) -> dict:
        return {"feature_dim": self.feature_dim, "embedding_dim": self.embedding_dim,
                "matrix": self.matrix}

    @classmethod
    def from_dict(cls, data: dict) -> "HeadParams":
        from .embedding import _require, parse_vector

        f = _require(data, "feature_dim", int, "checkpoint")
        m = _require(data, "embedding_dim", int, "checkpoint")
        rows = _require(data, "matrix", list, "checkpoint")
        if len(rows) != m:
            from .errors import SchemaError
            raise SchemaError(f"checkpoint: expected {m} matrix rows, got {len(rows)}")
        return cls(np.stack([parse_vector(r, f, f"matrix[{k}]") for k, r in enumerate(rows)]))


@dataclass(frozen=True)
class TrainConfig:
    seed: int = 0
    epochs: int = 30
    batch_size: int = 64
    learning_rate: float = 0.05
    weight_decay: float = 1e-4
    grad_clip: float = 5.0
    init_scale: float = 1.0
    mix: MixSpec = field(default_factory=MixSpec)
    weighting: WeightingSpec = field(default_factory=WeightingSpec)
    loss: LossSpec = field(default_factory=LossSpec)
    # proxy head trained on the proxy loss alone (no BCE)
    proxy_only: bool = False
    teacher_sigma: float = 0.1

    def validate(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 2:
            raise ConfigError(f"batch_size must be >= 2, got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"learning_rate must be > 0, got {self.learning_rate}")
        if not self.weight_decay >= 0:
            raise ConfigError("weight_decay must be >= 0")
        if not self.grad_clip > 0:
            raise ConfigError("grad_clip must be > 0")


@dataclass(frozen=True)
class PairPlan:
    """Frozen randomness of one step: the mixed pairs and, for instance-wise
    mixup, the batch rows that stand in for each class."""

    pairs: tuple[tuple[int, int, float], ...] = ()
    rows: tuple[tuple[int, int], ...] = ()


@dataclass
class StepReport:
    bce_loss: float
    proxy_head_bce: float
    proxy_loss: float
    distill_loss: float
    proxy_pairs: int
    proxy_skipped: bool


def substream(seed: int, stage: str) -> np.random.Generator:
    """Independent generator for a named stage: sha256 of ``"{seed}:{stage}"``."""
    digest = hashlib.sha256(f"{int(seed)}:{stage}".encode()).digest()
    return np.random.default_rng(int.from_bytes(digest[:8], "little"))


def init_heads(feature_dim: int, embedding_dim: int, seed: int, scale: float = 1.0):
    """Two identically initialized heads (Gaussian, std ``scale / sqrt(F)``)."""
    rng = substream(seed, "init")
    W = rng.standard_normal((embedding_dim, feature_dim)) * (scale / math.sqrt(feature_dim))
    return HeadParams(W.copy()), HeadParams(W.copy())


def forward(head: HeadParams, feature) -> np.ndarray:
    return l2_normalize(head.matrix @ np.asarray(feature, dtype=np.float64))


def forward_batch(head: HeadParams, features: np.ndarray):
    """Return unit embeddings (n, M) and pre-normalization norms (n, 1)."""
    Z = features @ head.matrix.T
    norms = np.linalg.norm(Z, axis=1, keepdims=True)
    if np.any(~(norms > 1e-12)):
        raise NearZeroNorm("head output with (near) zero norm")
    return Z / norms, norms


def forward_jacobian(head: HeadParams, feature) -> np.ndarray:
    """d embedding / d matrix as an (M, M, F) array."""
    x = np.asarray(feature, dtype=np.float64)
    z = head.matrix @ x
    n = np.linalg.norm(z)
    r = z / n
    P = (np.eye(len(z)) - np.outer(r, r)) / n
    return P[:, :, None] * x[None, None, :]


def _project_back(g_out: np.ndarray, out: np.ndarray, norm) -> np.ndarray:
    # gradient through out = v / |v| (rows)
    return (g_out - (g_out * out).sum(axis=-1, keepdims=True) * out) / norm


def plan_step(batch: RegionSet, registry: ClassRegistry, config: TrainConfig,
              rng: np.random.Generator) -> PairPlan:
    """Draw this step's pairs (and instance rows) from ``rng``.

    Returns an empty plan without touching ``rng`` when the proxy term is off
    or fewer than two base classes are present.
    """
    base = set(registry.ids("base"))
    present = sorted(c for c in set(batch.class_ids.tolist()) if c in base)
    if config.loss.proxy_weight == 0 or len(present) < 2:
        return PairPlan()
    targets = None
    if config.mix.pair_strategy == "novel_nearest":
        targets = np.asarray(registry.ids("novel"), dtype=np.int64)
    pairs = tuple(select_pairs(present, registry, config.mix, rng, novel_targets=targets))
    rows: tuple = ()
    if config.mix.granularity == "instance_wise":
        picked = []
        for i, j, _ in pairs:
            ri = np.flatnonzero(batch.class_ids == i)
            rj = np.flatnonzero(batch.class_ids == j)
            picked.append((int(ri[rng.integers(len(ri))]), int(rj[rng.integers(len(rj))])))
        rows = tuple(picked)
    return PairPlan(pairs, rows)


def batch_objective(head: HeadParams, batch: RegionSet, registry: ClassRegistry, config: TrainConfig,
                    plan: PairPlan, *, bce_weight: float = 1.0, proxy_weight: float | None = None,
                    teachers: np.ndarray | None = None):
    """Mean loss of one head on one batch and its gradient w.r.t. ``head.matrix``.

    objective = bce_weight * mean BCE + proxy_weight * mean proxy loss over
    ``plan.pairs`` + distill_weight * mean distillation loss (if ``teachers``).
    Returns ``(total, parts, grad)`` with ``parts`` a dict of the unweighted
    mean terms.
    """
    if proxy_weight is None:
        proxy_weight = config.loss.proxy_weight
    base_ids = registry.ids("base")
    text = registry.matrix(base_ids)
    label_index = {c: k for k, c in enumerate(base_ids)}
    X = batch.features
    n = len(batch)
    R, norms = forward_batch(head, X)
    g_R = np.zeros_like(R)
    parts = {"bce": 0.0, "proxy": 0.0, "distill": 0.0}

    if bce_weight:
        labels = np.array([label_index[c] for c in batch.class_ids.tolist()])
        per, g = bce_batch_grad(R, labels, text, config.loss.bce_logit_scale)
        parts["bce"] = float(per.mean())
        g_R += (bce_weight / n) * g

    if proxy_weight and plan.pairs:
        parts["proxy"] = _proxy_term(R, g_R, batch, registry, config, plan, proxy_weight)

    dw = config.loss.distill_weight
    if dw and teachers is not None:
        total_d = 0.0
        for k in range(n):
            d, g = distill_loss_grad(R[k], teachers[k])
            total_d += d
            g_R[k] += (dw / n) * g
        parts["distill"] = total_d / n

    g_Z = _project_back(g_R, R, norms)
    grad = g_Z.T @ X
    total = bce_weight * parts["bce"] + proxy_weight * parts["proxy"] + dw * parts["distill"]
    return total, parts, grad


def _proxy_term(R, g_R, batch, registry, config, plan, proxy_weight) -> float:
    """Mean proxy loss over the plan's pairs; accumulates its gradient into ``g_R``."""
    variant = config.loss.proxy_variant
    npairs = len(plan.pairs)
    scale = proxy_weight / npairs
    total = 0.0

    if config.mix.granularity == "instance_wise":
        for (i, j, lam), (a, b) in zip(plan.pairs, plan.rows):
            m = lam * R[a] + (1.0 - lam) * R[b]
            mn = np.linalg.norm(m)
            if not mn > 1e-12:
                raise NearZeroNorm("instance mixup cancelled to zero")
            v = m / mn
            t = l2_normalize(lam * registry.text(i) + (1.0 - lam) * registry.text(j))
            loss, _, g_v = proxy_loss_grad(t, v, variant)
            total += loss
            g_m = _project_back(g_v, v, mn) * scale
            g_R[a] += lam * g_m
            g_R[b] += (1.0 - lam) * g_m
        return total / npairs

    needed = sorted({c for i, j, _ in plan.pairs for c in (i, j)})
    protos, cache = {}, {}
    for c in needed:
        idx = np.flatnonzero(batch.class_ids == c)
        w = weights(batch.iou[idx], batch.objectness[idx], config.weighting)
        s = weighted_sum(w, R[idx])
        sn = np.linalg.norm(s)
        if not sn > 1e-12:
            raise NearZeroNorm(f"prototype of class {c} cancelled to zero")
        protos[c] = s / sn
        cache[c] = (idx, w, sn)
    g_p = {c: np.zeros(R.shape[1]) for c in needed}
    for i, j, lam in plan.pairs:
        m = lam * protos[i] + (1.0 - lam) * protos[j]
        mn = np.linalg.norm(m)
        if not mn > 1e-12:
            raise NearZeroNorm("class mixup cancelled to zero")
        v = m / mn
        t = l2_normalize(lam * registry.text(i) + (1.0 - lam) * registry.text(j))
        loss, _, g_v = proxy_loss_grad(t, v, variant)
        total += loss
        g_m = _project_back(g_v, v, mn) * scale
        g_p[i] += lam * g_m
        g_p[j] += (1.0 - lam) * g_m
    for c in needed:
        idx, w, sn = cache[c]
        g_s = _project_back(g_p[c], protos[c], sn)
        g_R[idx] += w[:, None] * g_s[None, :]
    return total / npairs


def _clip(g: np.ndarray, limit: float) -> np.ndarray:
    n = float(np.linalg.norm(g))
    return g * (limit / n) if n > limit else g


def _sgd(head: HeadParams, grad: np.ndarray, config: TrainConfig) -> HeadParams:
    g = _clip(grad, config.grad_clip)
    return HeadParams(head.matrix - config.learning_rate * (g + config.weight_decay * head.matrix))


def train_step(heads, batch: RegionSet, registry: ClassRegistry, config: TrainConfig,
               rng: np.random.Generator, teachers: np.ndarray | None = None, plan: PairPlan | None = None):
    """One SGD update of both heads; returns ``((bce_head, proxy_head), StepReport)``.

    A zero learning rate is allowed here (heads come back unchanged) even
    though ``fit`` rejects it.
    """
    bce_head, proxy_head = heads
    if plan is None:
        plan = plan_step(batch, registry, config, rng)
    _, parts_b, grad_b = batch_objective(bce_head, batch, registry, config, PairPlan(), proxy_weight=0.0)
    _, parts_p, grad_p = batch_objective(
        proxy_head, batch, registry, config, plan,
        bce_weight=0.0 if config.proxy_only else 1.0, teachers=teachers,
    )
    report = StepReport(
        bce_loss=parts_b["bce"], proxy_head_bce=parts_p["bce"], proxy_loss=parts_p["proxy"],
        distill_loss=parts_p["distill"], proxy_pairs=len(plan.pairs),
        proxy_skipped=config.loss.proxy_weight > 0 and not plan.pairs,
    )
    return (_sgd(bce_head, grad_b, config), _sgd(proxy_head, grad_p, config)), report


@dataclass
class TrainResult:
    bce_head: HeadParams
    proxy_head: HeadParams
    log: list[dict]


def fit(config: TrainConfig, registry: ClassRegistry, samples: RegionSet) -> TrainResult:
    """Train both heads from one seed.

    Randomness: ``substream(seed, "init")`` for the shared initial matrix,
    ``"shuffle"`` for the per-epoch permutation, ``"mix"`` for pairs, lambdas
    and instance rows (consumed by ``plan_step`` once per batch), ``"teacher"``
    for distillation targets.
    """
    config.validate()
    if len(samples) == 0:
        raise ConfigError("no training samples")
    base = set(registry.ids("base"))
    if not set(samples.class_ids.tolist()) <= base:
        raise ConfigError("training samples must be labeled with base classes")
    heads = init_heads(samples.feature_dim, registry.dimension, config.seed, config.init_scale)
    shuffle_rng = substream(config.seed, "shuffle")
    mix_rng = substream(config.seed, "mix")
    teachers = None
    if config.loss.distill_weight > 0:
        from .datagen import teacher_embeddings
        teachers = teacher_embeddings(registry, samples.class_ids, int(substream(config.seed, "teacher").integers(2**63)),
                                      config.teacher_sigma)

    n = len(samples)
    log = []
    for epoch in range(1, config.epochs + 1):
        order = shuffle_rng.permutation(n)
        sums = {"bce": 0.0, "pbce": 0.0, "proxy": 0.0, "pairs": 0, "steps": 0, "proxy_steps": 0}
        for start in range(0, n, config.batch_size):
            idx = np.sort(order[start:start + config.batch_size])
            t = None if teachers is None else teachers[idx]
            heads, rep = train_step(heads, samples[idx], registry, config, mix_rng, teachers=t)
            sums["bce"] += rep.bce_loss
            sums["pbce"] += rep.proxy_head_bce
            sums["steps"] += 1
            if rep.proxy_pairs:
                sums["proxy"] += rep.proxy_loss
                sums["pairs"] += rep.proxy_pairs
                sums["proxy_steps"] += 1
        steps = sums["steps"]
        pbce = sums["pbce"] / steps
        proxy = sums["proxy"] / sums["proxy_steps"] if sums["proxy_steps"] else 0.0
        log.append({
            "epoch": epoch,
            "bce_loss": sums["bce"] / steps,
            "proxy_loss": proxy,
            "proxy_head_bce": pbce,
            "total_loss": (0.0 if config.proxy_only else pbce) + config.loss.proxy_weight * proxy,
            "proxy_pairs": sums["pairs"],
        })
    return TrainResult(heads[0], heads[1], log)


def save_head(head: HeadParams, path) -> None:
    write_json(path, head.to_dict())


def load_head(path) -> HeadParams:
    return HeadParams.from_dict(read_json(path))


def with_overrides(config: TrainConfig, **changes) -> TrainConfig:
    return replace(config, **changes)
