"""Vector primitives, the class registry and its JSON file format."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import DimensionMismatch, NearZeroNorm, SchemaError, UnknownClass

NORM_EPS = 1e-12
UNIT_TOL = 1e-6
GROUPS = ("base", "novel", "proxy")


def l2_normalize(v) -> np.ndarray:
    """Scale ``v`` to unit L2 norm.

    Raises NearZeroNorm when ``||v|| <= 1e-12``; upstream this usually means a
    degenerate mix (antipodal inputs) or a prototype whose weighted sum
    cancelled out.
    """
    v = np.asarray(v, dtype=np.float64)
    norm = float(np.linalg.norm(v))
    if not norm > NORM_EPS:
        raise NearZeroNorm(f"cannot normalize vector with norm {norm:.3g}")
    return v / norm


def l2_normalize_rows(m: np.ndarray) -> np.ndarray:
    m = np.asarray(m, dtype=np.float64)
    norms = np.linalg.norm(m, axis=-1, keepdims=True)
    if np.any(~(norms > NORM_EPS)):
        raise NearZeroNorm("cannot normalize a row with (near) zero norm")
    return m / norms


def is_unit(v, tol: float = UNIT_TOL) -> bool:
    return abs(float(np.linalg.norm(v)) - 1.0) <= tol


def cosine_sim(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    na = float(np.linalg.norm(a))
    nb = float(np.linalg.norm(b))
    if not (na > NORM_EPS and nb > NORM_EPS):
        raise NearZeroNorm("cosine similarity of a zero vector is undefined")
    c = float(a @ b) / (na * nb)
    return min(1.0, max(-1.0, c))


@dataclass(frozen=True)
class ClassRecord:
    id: int
    name: str
    group: str
    text_embedding: np.ndarray

    def __post_init__(self):
        if self.group not in GROUPS:
            raise SchemaError(f"class {self.id}: unknown group {self.group!r}")
        if self.id < 0:
            raise SchemaError(f"class ids must be >= 0, got {self.id}")


@dataclass(frozen=True)
class ClassRegistry:
    """Ordered, immutable set of classes sharing one embedding dimension.

    ``normalization_warnings`` counts file embeddings the loader had to
    renormalize.
    """

    dimension: int
    records: tuple[ClassRecord, ...]
    normalization_warnings: int = field(default=0, compare=False)

    def __post_init__(self):
        if self.dimension < 2:
            raise SchemaError(f"dimension must be >= 2, got {self.dimension}")
        seen = set()
        for rec in self.records:
            if rec.id in seen:
                raise SchemaError(f"duplicate class id {rec.id}")
            seen.add(rec.id)
            emb = rec.text_embedding
            if emb.shape != (self.dimension,):
                raise SchemaError(
                    f"class {rec.id}: embedding length {emb.shape} != dimension {self.dimension}"
                )
            if not np.all(np.isfinite(emb)):
                raise SchemaError(f"class {rec.id}: non-finite embedding value")
            if not is_unit(emb):
                raise SchemaError(f"class {rec.id}: text embedding is not unit norm")
            emb.flags.writeable = False
        object.__setattr__(self, "_index", {rec.id: k for k, rec in enumerate(self.records)})

    @classmethod
    def from_arrays(cls, ids: Sequence[int], groups: Sequence[str], embeddings,
                    names: Sequence[str] | None = None) -> "ClassRegistry":
        embeddings = np.asarray(embeddings, dtype=np.float64)
        if names is None:
            names = [f"{g}_{i}" for i, g in zip(ids, groups)]
        records = tuple(
            ClassRecord(int(i), str(n), str(g), l2_normalize(e).copy())
            for i, g, e, n in zip(ids, groups, embeddings, names)
        )
        return cls(embeddings.shape[1], records)

    def __len__(self):
        return len(self.records)

    def __iter__(self):
        return iter(self.records)

    def __contains__(self, class_id) -> bool:
        return class_id in self._index

    def index_of(self, class_id: int) -> int:
        try:
            return self._index[class_id]
        except KeyError:
            raise UnknownClass(f"class id {class_id} not in registry") from None

    def get(self, class_id: int) -> ClassRecord:
        return self.records[self.index_of(class_id)]

    def text(self, class_id: int) -> np.ndarray:
        return self.get(class_id).text_embedding

    def ids(self, group: str | None = None) -> list[int]:
        return [r.id for r in self.records if group is None or r.group == group]

    def subset(self, group: str) -> "ClassRegistry":
        return ClassRegistry(self.dimension, tuple(r for r in self.records if r.group == group))

    @property
    def groups(self) -> list[str]:
        return [r.group for r in self.records]

    def matrix(self, ids: Iterable[int] | None = None) -> np.ndarray:
        """Classifier weights, one unit-norm row per class (registry order by default)."""
        if ids is None:
            return np.stack([r.text_embedding for r in self.records])
        return np.stack([self.text(i) for i in ids])

    def __eq__(self, other):
        if not isinstance(other, ClassRegistry):
            return NotImplemented
        if self.dimension != other.dimension or len(self) != len(other):
            return False
        return all(
            a.id == b.id and a.name == b.name and a.group == b.group
            and np.array_equal(a.text_embedding, b.text_embedding)
            for a, b in zip(self.records, other.records)
        )

    __hash__ = None


# ---------------------------------------------------------------------------
# JSON interchange

def format_float(x: float) -> str:
    x = float(x)
    if not math.isfinite(x):
        raise SchemaError(f"non-finite value {x!r} cannot be serialized")
    return format(x, ".17g")


def dumps(obj, indent: int | None = None, _level: int = 0) -> str:
    """JSON text with every float written using 17 significant digits.

    Output is deterministic: dict keys keep insertion order.
    """
    nl = "" if indent is None else "\n"
    pad = "" if indent is None else " " * (indent * (_level + 1))
    end_pad = "" if indent is None else " " * (indent * _level)
    sep = ", " if indent is None else ","
    if isinstance(obj, (bool, np.bool_)) or obj is None or isinstance(obj, str):
        return json.dumps(obj.item() if isinstance(obj, np.bool_) else obj)
    if isinstance(obj, (int, np.integer)):
        return str(int(obj))
    if isinstance(obj, (float, np.floating)):
        return format_float(obj)
    if isinstance(obj, np.ndarray):
        obj = obj.tolist()
    if isinstance(obj, dict):
        if not obj:
            return "{}"
        items = [f"{pad}{json.dumps(str(k))}: {dumps(v, indent, _level + 1)}" for k, v in obj.items()]
        return "{" + nl + (sep + nl).join(items) + nl + end_pad + "}"
    if isinstance(obj, (list, tuple)):
        if not obj:
            return "[]"
        # numeric rows stay on one line
        if all(isinstance(v, (int, float, np.integer, np.floating)) and not isinstance(v, bool) for v in obj):
            return "[" + ", ".join(dumps(v) for v in obj) + "]"
        items = [pad + dumps(v, indent, _level + 1) for v in obj]
        return "[" + nl + (sep + nl).join(items) + nl + end_pad + "]"
    raise TypeError(f"cannot serialize {type(obj).__name__}")


def write_json(path, obj) -> None:
    Path(path).write_text(dumps(obj, indent=1) + "\n", encoding="utf-8")


def read_json(path):
    try:
        return json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None


def _require(obj: dict, key: str, kind, where: str):
    if not isinstance(obj, dict) or key not in obj:
        raise SchemaError(f"{where}: missing field {key!r}")
    value = obj[key]
    if kind is int and (isinstance(value, bool) or not isinstance(value, int)):
        raise SchemaError(f"{where}: field {key!r} must be an integer")
    if kind is str and not isinstance(value, str):
        raise SchemaError(f"{where}: field {key!r} must be a string")
    if kind is list and not isinstance(value, list):
        raise SchemaError(f"{where}: field {key!r} must be a list")
    return value


def parse_vector(values, length: int, where: str) -> np.ndarray:
    if not isinstance(values, list) or len(values) != length:
        got = len(values) if isinstance(values, list) else type(values).__name__
        raise SchemaError(f"{where}: expected {length} values, got {got}")
    if any(isinstance(v, bool) or not isinstance(v, (int, float)) for v in values):
        raise SchemaError(f"{where}: values must be numbers")
    arr = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise SchemaError(f"{where}: non-finite value")
    return arr


def registry_from_dict(data: dict) -> ClassRegistry:
    dim = _require(data, "dimension", int, "registry")
    if dim < 2:
        raise SchemaError(f"registry: dimension must be >= 2, got {dim}")
    classes = _require(data, "classes", list, "registry")
    records = []
    warnings = 0
    for k, item in enumerate(classes):
        where = f"classes[{k}]"
        cid = _require(item, "id", int, where)
        name = _require(item, "name", str, where)
        group = _require(item, "group", str, where)
        if group not in GROUPS:
            raise SchemaError(f"{where}: unknown group {group!r}")
        emb = parse_vector(_require(item, "embedding", list, where), dim, where + ".embedding")
        if not is_unit(emb):
            try:
                emb = l2_normalize(emb)
            except Exception:
                raise SchemaError(f"{where}: zero embedding") from None
            warnings += 1
        records.append(ClassRecord(cid, name, group, emb))
    return ClassRegistry(dim, tuple(records), normalization_warnings=warnings)


def registry_to_dict(registry: ClassRegistry) -> dict:
    return {
        "dimension": registry.dimension,
        "classes": [
            {"id": r.id, "name": r.name, "group": r.group, "embedding": r.text_embedding}
            for r in registry.records
        ],
    }


def load_registry(path) -> ClassRegistry:
    return registry_from_dict(read_json(path))


def save_registry(registry: ClassRegistry, path) -> None:
    write_json(path, registry_to_dict(registry))
