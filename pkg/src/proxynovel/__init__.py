"""Proxy-novel synthesis for open-vocabulary classification on synthetic embeddings.

Quality-aware class prototypes, class-wise mixup of base classes into
proxy-novel classes, the proxy loss, and two-head geometric-mean score fusion.
"""

__version__ = "0.1.0"

from .datagen import Benchmark, RegionSet, SyntheticSpec, gen_benchmark
from .embedding import ClassRegistry, cosine_sim, l2_normalize, load_registry, save_registry
from .evaluation import FusionParams, evaluate, fuse_scores, sweep_fusion
from .losses import LossSpec, proxy_loss
from .mixer import MixSpec, Sampler, mix_pair, select_pairs
from .prototype import WeightingSpec, build_prototype
from .trainer import TrainConfig, fit, train_step

__all__ = [
    "Benchmark", "ClassRegistry", "FusionParams", "LossSpec", "MixSpec", "RegionSet", "Sampler",
    "SyntheticSpec", "TrainConfig", "WeightingSpec", "build_prototype", "cosine_sim", "evaluate", "fit",
    "fuse_scores", "gen_benchmark", "l2_normalize", "load_registry", "mix_pair", "proxy_loss",
    "save_registry", "select_pairs", "sweep_fusion", "train_step",
]
