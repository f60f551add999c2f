"""Command-line front end: gen, train, eval, fuse-sweep, mix, analyze, ablate.

Every command resolves one flat configuration (defaults, then ``--config``
JSON with dotted keys, then flags) and stamps each CSV it writes with a
header line carrying the configuration hash and seed.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .datagen import SyntheticSpec, gen_benchmark, load_samples, save_samples
from .embedding import (
    ClassRegistry,
    dumps,
    load_registry,
    read_json,
    save_registry,
    write_json,
)
from .errors import ConfigError, ProxyNovelError
from .evaluation import PRESETS, FusionParams, evaluate, hull_proximity, sample_proxy_texts, similarity_histogram, sweep_fusion
from .experiments import DEFAULT_SEEDS, STUDIES, run_study
from .losses import LossSpec
from .mixer import MixSpec, Sampler, mix_pair, select_pairs
from .prototype import WeightingSpec, batch_prototypes
from .trainer import TrainConfig, fit, forward_batch, load_head, save_head, substream

REGISTRY, TRAIN, EVAL = "registry.json", "train.json", "eval.json"
BCE_HEAD, PROXY_HEAD = "bce_head.json", "proxy_head.json"

_DATA_KEYS = [f.name for f in fields(SyntheticSpec) if f.name not in ("seed", "novel_mix_range")]
_TRAIN_KEYS = ["epochs", "batch_size", "learning_rate", "weight_decay", "grad_clip", "init_scale",
               "proxy_only", "teacher_sigma"]


def default_config() -> dict:
    """Flat dotted-key view of every default."""
    d, t = SyntheticSpec(), TrainConfig()
    cfg = {"seed": d.seed, "name": "run"}
    cfg.update({f"data.{k}": getattr(d, k) for k in _DATA_KEYS})
    cfg.update({f"train.{k}": getattr(t, k) for k in _TRAIN_KEYS})
    cfg.update({
        "mix.sampler": str(t.mix.sampler), "mix.pair_strategy": t.mix.pair_strategy,
        "mix.pairs_per_batch": t.mix.pairs_per_batch, "mix.granularity": t.mix.granularity,
        "weighting.mode": t.weighting.mode, "weighting.temperature": t.weighting.temperature,
        "loss.proxy_variant": t.loss.proxy_variant, "loss.proxy_weight": t.loss.proxy_weight,
        "loss.bce_logit_scale": t.loss.bce_logit_scale, "loss.distill_weight": t.loss.distill_weight,
    })
    f = FusionParams()
    cfg.update({f"fusion.{k}": v for k, v in f.metadata().items()})
    return cfg


_ALIASES = {"novel-nearest": "novel_nearest", "class": "class_wise", "instance": "instance_wise"}


def _coerce(key: str, value, default):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"config key {key!r} must be true or false")
        return value
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"config key {key!r} must be an integer")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"config key {key!r} must be a number")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"config key {key!r} must be a string")
    return _ALIASES.get(value, value)


def resolve_config(args: argparse.Namespace) -> dict:
    cfg = default_config()
    overrides = {}
    if getattr(args, "config", None):
        data = read_json(args.config)
        if not isinstance(data, dict):
            raise ConfigError("config file must hold a JSON object")
        overrides.update(data)
    if getattr(args, "preset", None):
        p = PRESETS[args.preset]
        overrides.update({"fusion.alpha": p.alpha, "fusion.beta": p.beta})
    flag_map = {"seed": "seed", "alpha": "fusion.alpha", "beta": "fusion.beta",
                "proxy_variant": "loss.proxy_variant", "weighting": "weighting.mode",
                "sampler": "mix.sampler", "pair_strategy": "mix.pair_strategy",
                "granularity": "mix.granularity", "epochs": "train.epochs"}
    for attr, key in flag_map.items():
        v = getattr(args, attr, None)
        if v is not None:
            overrides[key] = v
    for key, value in overrides.items():
        if key not in cfg:
            raise ConfigError(f"unknown config key {key!r}")
        cfg[key] = _coerce(key, value, cfg[key])
    build(cfg)  # validate every nested piece up front
    return cfg


def build(cfg: dict):
    """``(SyntheticSpec, TrainConfig, FusionParams)`` from a flat config."""
    spec = SyntheticSpec(seed=cfg["seed"], **{k: cfg[f"data.{k}"] for k in _DATA_KEYS})
    spec.validate()
    train = TrainConfig(
        seed=cfg["seed"],
        mix=MixSpec(Sampler.parse(cfg["mix.sampler"]), cfg["mix.pair_strategy"],
                    cfg["mix.pairs_per_batch"], cfg["mix.granularity"]),
        weighting=WeightingSpec(cfg["weighting.mode"], cfg["weighting.temperature"]),
        loss=LossSpec(cfg["loss.proxy_variant"], cfg["loss.proxy_weight"],
                      cfg["loss.bce_logit_scale"], cfg["loss.distill_weight"]),
        **{k: cfg[f"train.{k}"] for k in _TRAIN_KEYS},
    )
    train.validate()
    fusion = FusionParams(**{k: cfg[f"fusion.{k}"] for k in ("alpha", "beta", "positivity", "scale", "eps")})
    return spec, train, fusion


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(dumps(dict(sorted(cfg.items()))).encode()).hexdigest()[:16]


def header(cfg: dict, **extra) -> str:
    items = [f"config_hash={config_hash(cfg)}", f"seed={cfg['seed']}"]
    items += [f"{k}={v}" for k, v in extra.items()]
    return "# proxynovel " + " ".join(items)


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))  # shortest round-trip form
    return str(v)


def csv_text(head: str, columns: list[str], rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(head + "\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_cell(r[c]) for c in columns])
    return buf.getvalue()


def write_csv(path: Path, head: str, columns: list[str], rows: list[dict]) -> Path:
    path.write_text(csv_text(head, columns, rows), encoding="utf-8")
    return path


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _save_config(cfg: dict, out: Path) -> None:
    write_json(out / "config.json", dict(sorted(cfg.items())))


# ---------------------------------------------------------------------------
# commands

def cmd_gen(args, cfg) -> int:
    spec, _, _ = build(cfg)
    bench = gen_benchmark(spec)
    out = _outdir(args)
    save_registry(bench.registry, out / REGISTRY)
    save_samples(bench.train, out / TRAIN)
    save_samples(bench.eval, out / EVAL)
    _save_config(cfg, out)
    for name in (REGISTRY, TRAIN, EVAL):
        print(out / name)
    reg = bench.registry
    print(f"classes: {len(reg.ids('base'))} base, {len(reg.ids('novel'))} novel, M={reg.dimension}; "
          f"regions: {len(bench.train)} train, {len(bench.eval)} eval, F={spec.F}; mode={spec.novel_mode}")
    return 0


def _data_dir(args) -> Path:
    return Path(args.data if args.data is not None else args.out)


def cmd_train(args, cfg) -> int:
    _, tc, _ = build(cfg)
    data = _data_dir(args)
    registry = load_registry(data / REGISTRY)
    samples = load_samples(data / TRAIN)
    res = fit(tc, registry, samples)
    out = _outdir(args)
    save_head(res.bce_head, out / BCE_HEAD)
    save_head(res.proxy_head, out / PROXY_HEAD)
    _save_config(cfg, out)
    head = header(cfg, proxy_variant=tc.loss.proxy_variant, weighting=tc.weighting.mode,
                  sampler=tc.mix.sampler, pair_strategy=tc.mix.pair_strategy, granularity=tc.mix.granularity)
    cols = ["epoch", "bce_loss", "proxy_loss", "proxy_head_bce", "total_loss", "proxy_pairs"]
    log = write_csv(out / "train_log.csv", head, cols, res.log)
    for p in (out / BCE_HEAD, out / PROXY_HEAD, log):
        print(p)
    last = res.log[-1]
    print(f"epoch {last['epoch']}: bce_loss={last['bce_loss']:.4f} proxy_loss={last['proxy_loss']:.4f}")
    return 0


def _heads(args):
    hdir = Path(args.heads if args.heads is not None else _data_dir(args))
    bce = load_head(args.bce_head or hdir / BCE_HEAD)
    proxy = load_head(args.proxy_head or hdir / PROXY_HEAD)
    return bce, proxy


def cmd_eval(args, cfg) -> int:
    _, _, fusion = build(cfg)
    data = _data_dir(args)
    registry = load_registry(data / REGISTRY)
    samples = load_samples(data / EVAL)
    rep = evaluate(_heads(args), samples, registry, fusion)
    rows = [{"scope": g, "class_id": "", "count": rep.counts["total" if g == "overall" else g],
             "top1": getattr(rep, f"{g}_top1")} for g in ("base", "novel", "overall")]
    groups = dict(zip(registry.ids(), registry.groups))
    for cid, acc in sorted(rep.per_class.items()):
        rows.append({"scope": groups[cid], "class_id": cid, "count": int((samples.class_ids == cid).sum()),
                     "top1": acc})
    out = _outdir(args)
    path = write_csv(out / "eval.csv", header(cfg, alpha=fusion.alpha, beta=fusion.beta),
                     ["scope", "class_id", "count", "top1"], rows)
    print(path)
    print(f"base_top1={rep.base_top1:.4f} novel_top1={rep.novel_top1:.4f} overall_top1={rep.overall_top1:.4f}")
    return 0


def _grid(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise ConfigError(f"bad grid {text!r}; expected comma-separated numbers") from None


def cmd_sweep(args, cfg) -> int:
    _, _, fusion = build(cfg)
    data = _data_dir(args)
    registry = load_registry(data / REGISTRY)
    samples = load_samples(data / EVAL)
    rows = sweep_fusion(_heads(args), samples, registry, _grid(args.alphas), _grid(args.betas), fusion)
    path = write_csv(_outdir(args) / "sweep.csv", header(cfg),
                     ["alpha", "beta", "base_top1", "novel_top1", "overall_top1"], rows)
    print(path)
    best = max(rows, key=lambda r: (r["novel_top1"], r["base_top1"]))
    print(f"best novel_top1={best['novel_top1']:.4f} at alpha={best['alpha']:g} beta={best['beta']:g}")
    return 0


def _registry_arg(args) -> ClassRegistry:
    return load_registry(args.registry if args.registry else _data_dir(args) / REGISTRY)


def cmd_mix(args, cfg) -> int:
    _, tc, _ = build(cfg)
    registry = _registry_arg(args)
    base = registry.ids("base")
    novel = registry.ids("novel")
    spec = MixSpec(tc.mix.sampler, tc.mix.pair_strategy, args.pairs or tc.mix.pairs_per_batch, tc.mix.granularity)
    targets = np.asarray(novel, dtype=np.int64) if spec.pair_strategy == "novel_nearest" else None
    pairs = select_pairs(base, registry, spec, substream(cfg["seed"], "mix"), novel_targets=targets)
    rows = []
    for i, j, lam in pairs:
        t = mix_pair(registry.text(i), registry.text(j), registry.text(i), registry.text(j), lam).textual
        row = {"i": i, "j": j, "lambda": lam}
        row.update({f"sim_novel_{c}": float(np.clip(t @ registry.text(c), -1, 1)) for c in novel})
        rows.append(row)
    cols = ["i", "j", "lambda"] + [f"sim_novel_{c}" for c in novel]
    text = csv_text(header(cfg, sampler=spec.sampler, pair_strategy=spec.pair_strategy), cols, rows)
    if args.out:
        (_outdir(args) / "mix.csv").write_text(text, encoding="utf-8")
    sys.stdout.write(text)

    if args.dump_prototypes:
        data = _data_dir(args) if (args.data or args.out) else None
        if data is None:
            raise ConfigError("--dump-prototypes needs --data with training samples and heads")
        samples = load_samples(data / TRAIN)
        _, proxy = _heads(args)
        R, _ = forward_batch(proxy, samples.features)
        protos = batch_prototypes(R, samples.class_ids, samples.iou, samples.objectness, tc.weighting)
        ids = sorted(protos)
        reg = ClassRegistry.from_arrays(ids, ["base"] * len(ids), np.stack([protos[c].embedding for c in ids]),
                                        names=[f"prototype_{c}" for c in ids])
        save_registry(reg, args.dump_prototypes)
        print(f"# prototypes written to {args.dump_prototypes}", file=sys.stderr)
    return 0


def cmd_analyze(args, cfg) -> int:
    _, tc, _ = build(cfg)
    registry = _registry_arg(args)
    base = registry.matrix(registry.ids("base"))
    novel_ids = registry.ids("novel")
    novel = registry.matrix(novel_ids)
    proxy = sample_proxy_texts(registry, args.n_proxy, tc.mix.sampler, substream(cfg["seed"], "analyze"))
    hb = similarity_histogram(base, novel, bins=args.bins)
    hp = similarity_histogram(proxy, novel, bins=args.bins)
    rows = []
    for k, cid in enumerate(novel_ids):
        hull = hull_proximity(registry.text(cid), registry)
        rows.append({"novel_id": cid, "base_max_sim": hb.per_novel_max[k], "proxy_max_sim": hp.per_novel_max[k],
                     "nearest_single_sim": hull.nearest_single_sim,
                     "best_pair_mix_sim": hull.best_pair_mix_sim, "residual": hull.residual})
    mean = {"novel_id": "mean"}
    for c in list(rows[0])[1:]:
        mean[c] = float(np.mean([r[c] for r in rows]))
    rows.append(mean)
    out = _outdir(args)
    head = header(cfg, sampler=tc.mix.sampler, n_proxy=args.n_proxy)
    paths = [write_csv(out / "analyze.csv", head, list(rows[0]), rows)]
    for tag, h in (("base", hb), ("proxy", hp)):
        paths.append(write_csv(out / f"hist_{tag}.csv", head, ["bin_left", "bin_right", "count", "pair_count"],
                               h.rows()))
    for p in paths:
        print(p)
    print(f"mean per-novel max similarity: base={hb.mean_max:.4f} proxy={hp.mean_max:.4f}")
    return 0


def cmd_ablate(args, cfg) -> int:
    spec, tc, fusion = build(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else list(DEFAULT_SEEDS)
    rows = run_study(args.study, seeds, spec, tc, fusion)
    cols = ["study", "condition", "seed", "base_top1", "novel_top1", "overall_top1", "final_proxy_loss"]
    path = write_csv(_outdir(args) / f"ablation_{args.study}.csv",
                     header(cfg, study=args.study, seeds=",".join(map(str, seeds))), cols, rows)
    print(path)
    for r in rows:
        if r["seed"] == "mean":
            print(f"{r['condition']}: novel_top1={r['novel_top1']:.4f} base_top1={r['base_top1']:.4f}")
    return 0


# ---------------------------------------------------------------------------
# parser

def _common(p: argparse.ArgumentParser, out_required: bool = False) -> None:
    p.add_argument("--config", metavar="PATH", help="JSON file with flat dotted keys")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=out_required, metavar="DIR")


def _training_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--proxy-variant", choices=["l1", "l2", "cosine"])
    p.add_argument("--weighting", choices=["centroid", "softmax_iou", "softmax_objectness"])
    p.add_argument("--sampler", metavar="beta:G|bernoulli:P|fixed:L")
    p.add_argument("--pair-strategy", choices=["random", "novel-nearest"])
    p.add_argument("--granularity", choices=["class", "instance"])
    p.add_argument("--epochs", type=int)


def _fusion_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float)
    p.add_argument("--beta", type=float)
    p.add_argument("--preset", choices=sorted(PRESETS))


def _head_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--data", metavar="DIR", help="directory with registry/train/eval files (default: --out)")
    p.add_argument("--heads", metavar="DIR", help="directory with head checkpoints (default: --data)")
    p.add_argument("--bce-head", metavar="PATH")
    p.add_argument("--proxy-head", metavar="PATH")


def make_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="proxynovel", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic benchmark")
    _common(p, out_required=True)

    p = sub.add_parser("train", help="train the two heads")
    _common(p, out_required=True)
    _training_flags(p)
    p.add_argument("--data", metavar="DIR", help="directory from gen (default: --out)")

    p = sub.add_parser("eval", help="fused top-1 accuracy on the eval samples")
    _common(p, out_required=True)
    _fusion_flags(p)
    _head_flags(p)

    p = sub.add_parser("fuse-sweep", help="grid over fusion exponents")
    _common(p, out_required=True)
    _fusion_flags(p)
    _head_flags(p)
    p.add_argument("--alphas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")
    p.add_argument("--betas", default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1")

    p = sub.add_parser("mix", help="print selected base pairs and proxy-novel similarities")
    _common(p)
    _training_flags(p)
    _head_flags(p)
    p.add_argument("--registry", metavar="PATH")
    p.add_argument("--pairs", type=int, help="number of pairs (default: mix.pairs_per_batch)")
    p.add_argument("--dump-prototypes", metavar="PATH", help="write training prototypes as a registry file")

    p = sub.add_parser("analyze", help="similarity histograms and hull proximity")
    _common(p, out_required=True)
    _training_flags(p)
    p.add_argument("--data", metavar="DIR")
    p.add_argument("--registry", metavar="PATH")
    p.add_argument("--n-proxy", type=int, default=500)
    p.add_argument("--bins", type=int, default=40)

    p = sub.add_parser("ablate", help="seeded ablation study on fresh benchmarks")
    _common(p, out_required=True)
    _training_flags(p)
    _fusion_flags(p)
    p.add_argument("--study", choices=STUDIES, default="loss")
    p.add_argument("--seeds", help="comma-separated seeds (default 7,8,9,10,11)")
    return parser


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "fuse-sweep": cmd_sweep,
            "mix": cmd_mix, "analyze": cmd_analyze, "ablate": cmd_ablate}


def main(argv=None) -> int:
    args = make_parser().parse_args(argv)
    try:
        cfg = resolve_config(args)
        return COMMANDS[args.command](args, cfg)
    except (ProxyNovelError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
