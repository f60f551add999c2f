"""Proxy-novel synthesis: mixing-coefficient samplers, pair selection, mixup."""

from __future__ import annotations

import re
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from .embedding import ClassRegistry, l2_normalize, l2_normalize_rows
from .errors import ConfigError, InsufficientClasses, MissingTargets

LAMBDA_GRID = np.arange(101) / 100
# candidates within this of the best similarity count as ties
TIE_TOL = 1e-12


@dataclass(frozen=True)
class Sampler:
    kind: str = "beta"
    param: float = 1.0

    def __post_init__(self):
        if self.kind == "beta":
            if not self.param > 0:
                raise ConfigError(f"beta gamma must be > 0, got {self.param}")
        elif self.kind in ("bernoulli", "fixed"):
            if not 0.0 <= self.param <= 1.0:
                raise ConfigError(f"{self.kind} parameter must lie in [0, 1], got {self.param}")
        else:
            raise ConfigError(f"unknown sampler {self.kind!r}")

    @classmethod
    def parse(cls, text: str) -> "Sampler":
        """Parse ``beta:G``, ``bernoulli:P`` or ``fixed:L``."""
        m = re.fullmatch(r"\s*(beta|bernoulli|fixed)\s*:\s*([^\s]+)\s*", text)
        if not m:
            raise ConfigError(f"sampler must look like beta:G, bernoulli:P or fixed:L, got {text!r}")
        try:
            value = float(m.group(2))
        except ValueError:
            raise ConfigError(f"bad sampler parameter in {text!r}") from None
        return cls(m.group(1), value)

    def __str__(self):
        return f"{self.kind}:{self.param:g}"


@dataclass(frozen=True)
class MixSpec:
    sampler: Sampler = Sampler()
    pair_strategy: str = "random"
    pairs_per_batch: int = 4
    granularity: str = "class_wise"

    def __post_init__(self):
        if self.pair_strategy not in ("random", "novel_nearest"):
            raise ConfigError(f"unknown pair strategy {self.pair_strategy!r}")
        if self.granularity not in ("class_wise", "instance_wise"):
            raise ConfigError(f"unknown granularity {self.granularity!r}")
        if self.pairs_per_batch < 1:
            raise ConfigError("pairs_per_batch must be >= 1")


@dataclass(frozen=True)
class ProxyPair:
    visual: np.ndarray
    textual: np.ndarray
    source: tuple[int, int, float]


def sample_lambda(spec: MixSpec | Sampler, rng: np.random.Generator) -> float:
    s = spec.sampler if isinstance(spec, MixSpec) else spec
    if s.kind == "fixed":
        return float(s.param)
    if s.kind == "bernoulli":
        return 1.0 if rng.random() < s.param else 0.0
    return float(rng.beta(s.param, s.param))


def _mix(a: np.ndarray, b: np.ndarray, lam: float) -> np.ndarray:
    # inputs are unit vectors already; endpoints pass through untouched
    if lam == 1.0:
        return np.array(a, dtype=np.float64)
    if lam == 0.0:
        return np.array(b, dtype=np.float64)
    return l2_normalize(lam * a + (1.0 - lam) * b)


def mix_pair(proto_i, proto_j, text_i, text_j, lam: float, source=None) -> ProxyPair:
    """Normalized convex combination of two visual prototypes and their texts.

    ``proto_i``/``proto_j`` may be Prototype objects or bare unit vectors.
    At the endpoints the corresponding inputs are returned unchanged.
    """
    if not 0.0 <= lam <= 1.0:
        raise ConfigError(f"lambda must lie in [0, 1], got {lam}")
    vi = getattr(proto_i, "embedding", proto_i)
    vj = getattr(proto_j, "embedding", proto_j)
    if source is None:
        source = (getattr(proto_i, "class_id", -1), getattr(proto_j, "class_id", -1), float(lam))
    return ProxyPair(_mix(np.asarray(vi), np.asarray(vj), lam),
                     _mix(np.asarray(text_i), np.asarray(text_j), lam), source)


def instance_mixup(region_a, class_i: int, region_b, class_j: int, text_i, text_j, lam: float) -> ProxyPair:
    """Mixup of two individual region embeddings instead of class prototypes."""
    return mix_pair(region_a, region_b, text_i, text_j, lam, source=(int(class_i), int(class_j), float(lam)))


def best_mix(target: np.ndarray, texts: np.ndarray, grid: np.ndarray = LAMBDA_GRID):
    """Best (row i, row j, grid index, similarity) for approximating ``target``.

    Searches normalized mixes ``lam * texts[i] + (1 - lam) * texts[j]`` over
    all ordered pairs ``i != j`` and the lambda grid.  Because ``(i, j, lam)``
    and ``(j, i, 1 - lam)`` describe the same point, only ``i < j`` is
    evaluated, which is also where the lexicographic tie-break lands.
    """
    n = texts.shape[0]
    if n < 2:
        raise InsufficientClasses("need at least two classes to mix")
    target = l2_normalize(target)
    iu, ju = np.triu_indices(n, k=1)
    mixes = grid[None, :, None] * texts[iu][:, None, :] + (1.0 - grid)[None, :, None] * texts[ju][:, None, :]
    norms = np.linalg.norm(mixes, axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        sims = (mixes @ target) / norms
    sims = np.where(norms > 1e-12, sims, -np.inf)
    best = sims.max()
    p, k = np.argwhere(sims >= best - TIE_TOL)[0]
    return int(iu[p]), int(ju[p]), int(k), float(min(1.0, best))


@lru_cache(maxsize=4096)
def _best_mix_cached(target: bytes, texts: bytes, m: int):
    return best_mix(np.frombuffer(target), np.frombuffer(texts).reshape(-1, m))


def select_pairs(present, registry: ClassRegistry, spec: MixSpec, rng: np.random.Generator,
                 novel_targets=None) -> list[tuple[int, int, float]]:
    """Choose ``(i, j, lambda)`` triples for one batch.

    ``random``: ``pairs_per_batch`` unordered pairs of distinct present base
    classes, each with an independently sampled lambda.  ``novel_nearest``:
    one target per pair is drawn from ``novel_targets`` (class ids or a matrix
    of unit text embeddings) and the best grid mix over present base classes
    is returned.

    Rng consumption per pair is fixed: two class draws then one lambda draw
    (random), or one target draw (novel_nearest).
    """
    present = sorted(int(c) for c in present)
    if len(present) < 2:
        raise InsufficientClasses(f"need >= 2 base classes, got {len(present)}")
    if spec.pair_strategy == "random":
        out = []
        for _ in range(spec.pairs_per_batch):
            a, b = rng.choice(len(present), size=2, replace=False)
            out.append((present[a], present[b], sample_lambda(spec, rng)))
        return out

    if novel_targets is None or len(novel_targets) == 0:
        raise MissingTargets("novel_nearest selection needs novel target embeddings")
    targets = np.asarray(novel_targets)
    if targets.dtype.kind in "iu":
        targets = registry.matrix(targets.tolist())
    targets = l2_normalize_rows(np.atleast_2d(targets))
    texts = registry.matrix(present)
    out = []
    for _ in range(spec.pairs_per_batch):
        t = targets[int(rng.integers(len(targets)))]
        i, j, k, _ = _best_mix_cached(t.tobytes(), texts.tobytes(), texts.shape[1])
        out.append((present[i], present[j], float(LAMBDA_GRID[k])))
    return out
