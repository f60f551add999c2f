"""Seeded ablation studies on the synthetic benchmark.

Each study trains one model per (condition, seed) and reports test accuracy
with the default fusion parameters.  Conditions share the benchmark and the
training seed, so they differ only in the ablated setting.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np

from .datagen import SyntheticSpec, gen_benchmark
from .evaluation import FusionParams, evaluate
from .losses import LossSpec
from .mixer import MixSpec, Sampler
from .prototype import WeightingSpec
from .trainer import TrainConfig, fit

DEFAULT_SEEDS = (7, 8, 9, 10, 11)


def _cond(base: TrainConfig, *, weighting=None, sampler=None, strategy=None, granularity=None,
          proxy_weight=None, variant=None, distill_weight=None) -> TrainConfig:
    mix = base.mix
    mix = replace(mix, sampler=sampler or mix.sampler, pair_strategy=strategy or mix.pair_strategy,
                  granularity=granularity or mix.granularity)
    loss = base.loss
    loss = replace(
        loss,
        proxy_weight=loss.proxy_weight if proxy_weight is None else proxy_weight,
        proxy_variant=variant or loss.proxy_variant,
        distill_weight=loss.distill_weight if distill_weight is None else distill_weight,
    )
    return replace(base, mix=mix, loss=loss,
                   weighting=WeightingSpec(weighting) if weighting else base.weighting)


def study_conditions(study: str, base: TrainConfig | None = None) -> dict[str, TrainConfig]:
    """Named training configurations for one ablation study."""
    base = base or TrainConfig()
    obj = "softmax_objectness"
    if study == "prototype":
        return {
            "no_proxy": _cond(base, proxy_weight=0.0),
            "instance_wise": _cond(base, granularity="instance_wise", weighting="centroid"),
            "centroid": _cond(base, weighting="centroid"),
            "softmax_iou": _cond(base, weighting="softmax_iou"),
            "softmax_objectness": _cond(base, weighting=obj),
        }
    if study == "lambda":
        return {
            "no_proxy": _cond(base, proxy_weight=0.0),
            "bernoulli_0.5": _cond(base, weighting=obj, sampler=Sampler("bernoulli", 0.5)),
            "beta_1": _cond(base, weighting=obj, sampler=Sampler("beta", 1.0)),
            "beta_5": _cond(base, weighting=obj, sampler=Sampler("beta", 5.0)),
        }
    if study == "pairs":
        return {
            "no_proxy": _cond(base, proxy_weight=0.0),
            "random": _cond(base, weighting=obj, strategy="random"),
            "novel_nearest": _cond(base, weighting=obj, strategy="novel_nearest"),
        }
    if study == "loss":
        return {v: _cond(base, weighting=obj, variant=v) for v in ("l1", "l2", "cosine")}
    if study == "distill":
        return {
            "bce_only": _cond(base, proxy_weight=0.0),
            "bce_distill": _cond(base, proxy_weight=0.0, distill_weight=1.0),
            "bce_proxy": _cond(base, weighting=obj),
        }
    raise ValueError(f"unknown study {study!r}")


STUDIES = ("prototype", "lambda", "pairs", "loss", "distill")


def run_study(study: str, seeds=DEFAULT_SEEDS, data_spec: SyntheticSpec | None = None,
              base: TrainConfig | None = None, fusion: FusionParams | None = None) -> list[dict]:
    """One row per (condition, seed) plus a ``mean`` row per condition."""
    data_spec = data_spec or SyntheticSpec()
    fusion = fusion or FusionParams()
    conditions = study_conditions(study, base)
    rows = []
    for seed in seeds:
        bench = gen_benchmark(replace(data_spec, seed=seed))
        for name, cfg in conditions.items():
            res = fit(replace(cfg, seed=seed), bench.registry, bench.train)
            rep = evaluate((res.bce_head, res.proxy_head), bench.eval, bench.registry, fusion)
            rows.append({"study": study, "condition": name, "seed": seed,
                         "base_top1": rep.base_top1, "novel_top1": rep.novel_top1,
                         "overall_top1": rep.overall_top1,
                         "final_proxy_loss": res.log[-1]["proxy_loss"]})
    for name in conditions:
        sub = [r for r in rows if r["condition"] == name]
        rows.append({"study": study, "condition": name, "seed": "mean",
                     **{k: float(np.mean([r[k] for r in sub]))
                        for k in ("base_top1", "novel_top1", "overall_top1", "final_proxy_loss")}})
    return rows


def means(rows: list[dict], key: str = "novel_top1") -> dict[str, float]:
    return {r["condition"]: r[key] for r in rows if r["seed"] == "mean"}
