"""Seeded synthetic open-vocabulary benchmark.

Class text embeddings are random unit vectors (base) and, depending on the
mode, normalized two-class mixes of them (novel).  Region features are
produced by one shared linear map ``A`` applied to the class text embedding
plus Gaussian noise whose scale grows as the proposal quality (IoU) drops.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .embedding import (
    ClassRegistry,
    _require,
    l2_normalize,
    l2_normalize_rows,
    parse_vector,
    read_json,
    write_json,
)
from .errors import SchemaError, SpecError

NOVEL_MODES = ("in_hull", "off_hull", "mixed")
IOU_RANGE = (0.25, 1.0)
OBJECTNESS_JITTER = 0.1


@dataclass(frozen=True)
class RegionSample:
    feature: np.ndarray
    class_id: int
    iou: float
    objectness: float


@dataclass(frozen=True)
class RegionSet:
    """Column-oriented collection of region samples."""

    features: np.ndarray  # (n, F)
    class_ids: np.ndarray  # (n,) int64
    iou: np.ndarray
    objectness: np.ndarray

    def __post_init__(self):
        n = len(self.class_ids)
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise SchemaError("features must be an (n, F) array matching class_ids")
        if len(self.iou) != n or len(self.objectness) != n:
            raise SchemaError("quality arrays must match the sample count")
        for name in ("iou", "objectness"):
            q = getattr(self, name)
            if np.any((q < 0) | (q > 1)):
                raise SchemaError(f"{name} values must lie in [0, 1]")

    @classmethod
    def from_samples(cls, samples, feature_dim: int | None = None) -> "RegionSet":
        samples = list(samples)
        if not samples:
            f = 0 if feature_dim is None else feature_dim
            return cls(np.zeros((0, f)), np.zeros(0, dtype=np.int64), np.zeros(0), np.zeros(0))
        return cls(
            np.stack([np.asarray(s.feature, dtype=np.float64) for s in samples]),
            np.array([s.class_id for s in samples], dtype=np.int64),
            np.array([s.iou for s in samples], dtype=np.float64),
            np.array([s.objectness for s in samples], dtype=np.float64),
        )

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def __len__(self):
        return len(self.class_ids)

    def __getitem__(self, idx):
        if isinstance(idx, (int, np.integer)):
            return RegionSample(self.features[idx], int(self.class_ids[idx]),
                                float(self.iou[idx]), float(self.objectness[idx]))
        return RegionSet(self.features[idx], self.class_ids[idx], self.iou[idx], self.objectness[idx])

    def __iter__(self) -> Iterator[RegionSample]:
        for k in range(len(self)):
            yield self[k]

    def classes(self) -> list[int]:
        return sorted(set(self.class_ids.tolist()))

    def select(self, class_ids) -> "RegionSet":
        return self[np.isin(self.class_ids, list(class_ids))]


@dataclass(frozen=True)
class SyntheticSpec:
    seed: int = 7
    M: int = 32
    F: int = 48
    n_base: int = 16
    n_novel: int = 8
    novel_mode: str = "in_hull"
    samples_per_class: int = 64
    eval_samples_per_class: int = 64
    quality_noise_coupling: float = 0.5
    novel_perturbation: float = 0.05
    novel_mix_range: tuple[float, float] = (0.2, 0.8)

    def validate(self) -> None:
        if self.n_base < 2:
            raise SpecError(f"n_base must be >= 2 for mixup, got {self.n_base}")
        if self.n_novel < 0:
            raise SpecError("n_novel must be >= 0")
        if self.M < 2 or self.F < 1:
            raise SpecError("M must be >= 2 and F >= 1")
        if self.samples_per_class < 1 or self.eval_samples_per_class < 1:
            raise SpecError("samples_per_class must be >= 1")
        if self.novel_mode not in NOVEL_MODES:
            raise SpecError(f"novel_mode must be one of {NOVEL_MODES}, got {self.novel_mode!r}")
        if not self.quality_noise_coupling >= 0 or not self.novel_perturbation >= 0:
            raise SpecError("noise magnitudes must be >= 0")
        lo, hi = self.novel_mix_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise SpecError("novel_mix_range must satisfy 0 <= lo <= hi <= 1")


@dataclass(frozen=True)
class Benchmark:
    registry: ClassRegistry
    train: RegionSet
    eval: RegionSet
    mixing_matrix: np.ndarray  # A, (F, M)
    novel_sources: tuple  # (i, j, lambda) per in-hull novel class, None otherwise


def _unit_rows(rng: np.random.Generator, n: int, m: int) -> np.ndarray:
    return l2_normalize_rows(rng.standard_normal((n, m)))


def _draw_regions(rng, registry, class_ids, per_class, A, coupling) -> RegionSet:
    feats, labels, ious, objs = [], [], [], []
    for cid in class_ids:
        clean = A @ registry.text(cid)
        iou = rng.uniform(*IOU_RANGE, size=per_class)
        obj = np.clip(iou + rng.uniform(-OBJECTNESS_JITTER, OBJECTNESS_JITTER, size=per_class), 0.0, 1.0)
        noise = rng.standard_normal((per_class, A.shape[0]))
        scale = coupling * (1.0 - iou)
        feats.append(clean[None, :] + noise * scale[:, None])
        labels.append(np.full(per_class, cid, dtype=np.int64))
        ious.append(iou)
        objs.append(obj)
    return RegionSet(np.concatenate(feats), np.concatenate(labels),
                     np.concatenate(ious), np.concatenate(objs))


def gen_benchmark(spec: SyntheticSpec) -> Benchmark:
    """Generate registry, training regions (base only) and eval regions (base + novel).

    All randomness comes from one ``default_rng(seed)`` stream consumed in a
    fixed order: base texts, novel texts, the map ``A``, training regions,
    eval regions.
    """
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    base = _unit_rows(rng, spec.n_base, spec.M)

    n_in = {"in_hull": spec.n_novel, "off_hull": 0, "mixed": math.ceil(spec.n_novel / 2)}[spec.novel_mode]
    novel, sources = [], []
    for k in range(spec.n_novel):
        if k < n_in:
            i, j = rng.choice(spec.n_base, size=2, replace=False)
            # on the 0.01 grid so the pair search can recover it exactly
            lo, hi = (round(100 * x) for x in spec.novel_mix_range)
            lam = int(rng.integers(lo, hi + 1)) / 100
            v = l2_normalize(lam * base[i] + (1.0 - lam) * base[j])
            if spec.novel_perturbation > 0:
                v = v + spec.novel_perturbation * rng.standard_normal(spec.M)
            novel.append(l2_normalize(v))
            sources.append((int(i), int(j), lam))
        else:
            novel.append(_unit_rows(rng, 1, spec.M)[0])
            sources.append(None)

    ids = list(range(spec.n_base + spec.n_novel))
    groups = ["base"] * spec.n_base + ["novel"] * spec.n_novel
    emb = np.concatenate([base, np.reshape(novel, (spec.n_novel, spec.M))])
    registry = ClassRegistry.from_arrays(ids, groups, emb)

    A = rng.standard_normal((spec.F, spec.M)) / math.sqrt(spec.M)
    train = _draw_regions(rng, registry, registry.ids("base"), spec.samples_per_class,
                          A, spec.quality_noise_coupling)
    evalset = _draw_regions(rng, registry, ids, spec.eval_samples_per_class,
                            A, spec.quality_noise_coupling)
    return Benchmark(registry, train, evalset, A, tuple(sources))


def teacher_embeddings(registry: ClassRegistry, class_ids, seed: int, sigma: float = 0.1) -> np.ndarray:
    """Noisy unit-norm class directions used as a distillation teacher."""
    rng = np.random.default_rng(seed)
    clean = registry.matrix(np.asarray(class_ids).tolist())
    return l2_normalize_rows(clean + sigma * rng.standard_normal(clean.shape))


# ---------------------------------------------------------------------------
# samples file

def samples_to_dict(regions: RegionSet) -> dict:
    return {
        "feature_dim": regions.feature_dim,
        "samples": [
            {"feature": regions.features[k], "class_id": int(regions.class_ids[k]),
             "iou": float(regions.iou[k]), "objectness": float(regions.objectness[k])}
            for k in range(len(regions))
        ],
    }


def samples_from_dict(data: dict) -> RegionSet:
    fdim = _require(data, "feature_dim", int, "samples file")
    items = _require(data, "samples", list, "samples file")
    samples = []
    for k, item in enumerate(items):
        where = f"samples[{k}]"
        feat = parse_vector(_require(item, "feature", list, where), fdim, where + ".feature")
        cid = _require(item, "class_id", int, where)
        q = []
        for key in ("iou", "objectness"):
            v = _require(item, key, float, where)
            if isinstance(v, bool) or not isinstance(v, (int, float)) or not 0.0 <= v <= 1.0:
                raise SchemaError(f"{where}: {key} must be a number in [0, 1]")
            q.append(float(v))
        samples.append(RegionSample(feat, cid, q[0], q[1]))
    return RegionSet.from_samples(samples, feature_dim=fdim)


def save_samples(regions: RegionSet, path) -> None:
    write_json(path, samples_to_dict(regions))


def load_samples(path) -> RegionSet:
    return samples_from_dict(read_json(path))
