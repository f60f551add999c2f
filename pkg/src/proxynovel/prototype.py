"""Class-wise visual prototypes with optional proposal-quality weighting."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .embedding import l2_normalize
from .errors import ConfigError, EmptyClass

WEIGHTING_MODES = ("centroid", "softmax_iou", "softmax_objectness")


@dataclass(frozen=True)
class WeightingSpec:
    mode: str = "centroid"
    # 1.0 is the plain softmax over the quality score
    temperature: float = 1.0

    def __post_init__(self):
        if self.mode not in WEIGHTING_MODES:
            raise ConfigError(f"weighting mode must be one of {WEIGHTING_MODES}, got {self.mode!r}")
        if not self.temperature > 0:
            raise ConfigError(f"temperature must be > 0, got {self.temperature}")


@dataclass(frozen=True)
class Prototype:
    class_id: int
    embedding: np.ndarray
    support: int


def weights(iou, objectness, spec: WeightingSpec) -> np.ndarray:
    """Per-region contribution weights; nonnegative and summing to one.

    Centroid mode ignores the quality scores. Softmax modes use
    ``exp(phi / T)`` normalized over the class, with ``phi`` the IoU or the
    objectness score.
    """
    iou = np.asarray(iou, dtype=np.float64)
    n = iou.shape[0]
    if n == 0:
        raise EmptyClass("cannot weight an empty set of regions")
    if spec.mode == "centroid":
        return np.full(n, 1.0 / n)
    phi = iou if spec.mode == "softmax_iou" else np.asarray(objectness, dtype=np.float64)
    z = phi / spec.temperature
    e = np.exp(z - z.max())
    return e / e.sum()


def weighted_sum(w: np.ndarray, regions: np.ndarray) -> np.ndarray:
    # ascending index order so results do not depend on BLAS blocking
    acc = np.zeros(regions.shape[1])
    for k in range(regions.shape[0]):
        acc += w[k] * regions[k]
    return acc


def build_prototype(class_id: int, regions, iou, objectness, spec: WeightingSpec) -> Prototype:
    """Normalized weighted mean of unit-norm region embeddings of one class.

    ``regions`` is an (n, M) array of region embeddings already on the unit
    sphere.
    """
    regions = np.atleast_2d(np.asarray(regions, dtype=np.float64))
    if regions.shape[0] == 0 or regions.size == 0:
        raise EmptyClass(f"class {class_id} has no regions")
    w = weights(iou, objectness, spec)
    return Prototype(int(class_id), l2_normalize(weighted_sum(w, regions)), regions.shape[0])


def batch_prototypes(embeddings, class_ids, iou, objectness, spec: WeightingSpec) -> dict[int, Prototype]:
    """One prototype per class present in the batch, keyed by class id.

    Rows are grouped by ``class_ids``; within a class they keep batch order.
    """
    class_ids = np.asarray(class_ids)
    out = {}
    for cid in sorted(set(class_ids.tolist())):
        idx = np.flatnonzero(class_ids == cid)
        out[int(cid)] = build_prototype(
            cid, np.asarray(embeddings)[idx], np.asarray(iou)[idx], np.asarray(objectness)[idx], spec
        )
    return out
