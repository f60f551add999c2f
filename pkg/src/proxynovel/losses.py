"""Proxy-loss variants, the cosine BCE classification loss and a distillation term.

Each loss comes with a ``*_grad`` companion returning the value together with
its gradient, so the trainer can backpropagate by hand.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionMismatch, NearZeroNorm, UnknownClass

PROXY_VARIANTS = ("l1", "l2", "cosine")


@dataclass(frozen=True)
class LossSpec:
    proxy_variant: str = "l1"
    proxy_weight: float = 1.0
    bce_logit_scale: float = 50.0
    distill_weight: float = 0.0

    def __post_init__(self):
        if self.proxy_variant not in PROXY_VARIANTS:
            raise ConfigError(f"proxy_variant must be one of {PROXY_VARIANTS}, got {self.proxy_variant!r}")
        for name in ("proxy_weight", "distill_weight"):
            v = getattr(self, name)
            if not (np.isfinite(v) and v >= 0):
                raise ConfigError(f"{name} must be finite and >= 0, got {v}")
        if not (np.isfinite(self.bce_logit_scale) and self.bce_logit_scale > 0):
            raise ConfigError(f"bce_logit_scale must be > 0, got {self.bce_logit_scale}")


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatch(f"shapes {a.shape} and {b.shape} differ")
    return a, b


def _cos_and_grad(t: np.ndarray, r: np.ndarray):
    """cos(t, r) and its gradients with respect to t and r."""
    nt, nr = np.linalg.norm(t), np.linalg.norm(r)
    if not (nt > 1e-12 and nr > 1e-12):
        raise NearZeroNorm("cosine of a zero vector is undefined")
    th, rh = t / nt, r / nr
    c = float(th @ rh)
    return c, (rh - c * th) / nt, (th - c * rh) / nr


def proxy_loss_grad(text, visual, variant: str = "l1"):
    """Return ``(loss, d loss / d text, d loss / d visual)``.

    The l1 subgradient is 0 on components where text and visual agree.
    """
    t, r = _pair(text, visual)
    d = t - r
    if variant == "l1":
        g = np.sign(d)
        return float(np.abs(d).sum()), g, -g
    if variant == "l2":
        n = float(np.sqrt(d @ d))
        g = d / n if n > 0 else np.zeros_like(d)
        return n, g, -g
    if variant == "cosine":
        c, gt, gr = _cos_and_grad(t, r)
        return max(0.0, 1.0 - c), -gt, -gr
    raise ConfigError(f"unknown proxy variant {variant!r}")


def proxy_loss(text, visual, variant: str = "l1") -> float:
    return proxy_loss_grad(text, visual, variant)[0]


def distill_loss(region, teacher) -> float:
    r, t = _pair(region, teacher)
    return float(np.abs(r - t).sum())


def distill_loss_grad(region, teacher):
    """``(loss, d loss / d region)`` for the L1 distillation term."""
    r, t = _pair(region, teacher)
    return float(np.abs(r - t).sum()), np.sign(r - t)


def _log_sigmoid(x):
    # log(sigmoid(x)) without overflow
    return -np.logaddexp(0.0, -x)


def _sigmoid(x):
    return np.exp(_log_sigmoid(x))


def bce_batch_grad(regions: np.ndarray, labels: np.ndarray, text: np.ndarray, scale: float):
    """Vectorized BCE over a batch.

    ``regions`` is (n, M) (need not be unit norm; cosine is taken), ``labels``
    holds row indices into ``text`` (C, M, unit rows).  Returns the per-sample
    losses (n,) and per-sample gradients (n, M); each sample loss is averaged
    over the C classes.
    """
    regions = np.asarray(regions, dtype=np.float64)
    norms = np.linalg.norm(regions, axis=1, keepdims=True)
    if np.any(~(norms > 1e-12)):
        raise NearZeroNorm("region embedding with zero norm")
    rh = regions / norms
    cos = rh @ text.T  # (n, C)
    logits = scale * cos
    y = np.zeros_like(cos)
    y[np.arange(len(labels)), labels] = 1.0
    # -[y log s + (1 - y) log(1 - s)]; log(1 - s(x)) = log s(-x)
    per = -(y * _log_sigmoid(logits) + (1.0 - y) * _log_sigmoid(-logits))
    C = text.shape[0]
    loss = per.sum(axis=1) / C
    dlogit = (_sigmoid(logits) - y) / C
    dcos = scale * dlogit  # (n, C)
    g_rh = dcos @ text  # d loss / d rh
    # through rh = r / |r|
    g = (g_rh - (g_rh * rh).sum(axis=1, keepdims=True) * rh) / norms
    return loss, g


def bce_class_loss(region, label: int, base_ids, base_text, scale: float = 50.0):
    """BCE of one region against every base class; returns ``(loss, grad)``.

    ``base_ids`` lists the class ids matching the rows of ``base_text``.
    """
    base_ids = list(base_ids)
    if label not in base_ids:
        raise UnknownClass(f"label {label} is not a base class")
    region = np.asarray(region, dtype=np.float64)
    base_text = np.asarray(base_text, dtype=np.float64)
    if region.shape[-1] != base_text.shape[1]:
        raise DimensionMismatch(f"region dim {region.shape[-1]} != text dim {base_text.shape[1]}")
    loss, g = bce_batch_grad(region[None, :], np.array([base_ids.index(label)]), base_text, scale)
    return float(loss[0]), g[0]
