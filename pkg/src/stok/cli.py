"""``stok`` command line: dataset tokenization, training runs and reports.

Every command that produces outputs writes into ``--out`` exactly: the
resolved config (``config.json``), its logs (``*.csv``), its artifacts and a
``report.json``. ``--dry-run`` resolves the config, checks prerequisites and
prints the plan without touching the filesystem.

Settings come from defaults, then ``--config`` (JSON), then ``STOK_SEED``
for the seed, then command-line flags.

Exit codes: 0 success, 2 config error, 3 missing prerequisite, 4 data error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import os
import sys
import time
from dataclasses import fields
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from . import checkpoint, ingest, model as model_mod, mtm, toydata
from .augment import AugSpec
from .augment.pixel import CORRUPTIONS
from .augment.pipeline import seit_baseline, seitpp_default
from .codec import (PatchTokenizer, dataset_stats, format_stats, read_codebook, read_manifest,
                    read_split, write_codebook, write_split)
from .errors import ConfigError, DataError, MissingArtifactError, StokError
from .fileio import atomic_write_text
from .tokenadapt import TokenAdaptHyper, TokenAdaptModule, apply_token_adapt, train_token_adapt
from .training import LineLog, TrainRecipe

SCHEMA_VERSION = 1
EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_DATA = 0, 2, 3, 4

_BACKBONE_KEYS = ("depth", "width", "heads", "mlp_ratio", "stem")
_MTM_KEYS = ("decoder_depth", "decoder_width", "decoder_heads",
             "ratio_mean", "ratio_std", "ratio_lo", "ratio_hi")


def default_config() -> dict:
    recipe = {f.name: f.default for f in fields(TrainRecipe) if f.name != "seed"}
    hyper = {f.name: f.default for f in fields(TokenAdaptHyper) if f.name != "seed"}
    return {
        "version": SCHEMA_VERSION,
        "seed": 0,
        "toy": {"num_train": 2000, "num_val": 500, "size": 32, "num_classes": 10, "noise": 4.0},
        "codebook": {"patch_size": 4, "K": 512, "max_iter": 25, "max_patches": 50000},
        "tokenadapt": {**hyper, "ops": ["hflip", "affine"]},
        "backbone": {"depth": 6, "width": 192, "heads": 3, "mlp_ratio": 4.0,
                     "stem": "conv4x4_overlap"},
        "mtm": {"decoder_depth": 2, "decoder_width": 128, "decoder_heads": 4,
                "ratio_mean": 0.7, "ratio_std": 0.25, "ratio_lo": 0.4, "ratio_hi": 1.0},
        "recipe": recipe,
        "pretrain_recipe": {**recipe, "epochs": 50, "weight_decay": 0.05,
                            "label_smoothing": 0.0},
        "augment": "seitpp",
        "eval": {"corruptions": []},
    }


def merge_config(base: dict, override: dict, path: str = "") -> dict:
    """Deep-merge ``override`` into ``base``; keys absent from ``base`` are rejected."""
    out = copy.deepcopy(base)
    for key, value in override.items():
        where = f"{path}.{key}" if path else key
        if key not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {where!r} must be an object")
            out[key] = merge_config(base[key], value, where)
        else:
            out[key] = value
    return out


def config_hash(config: dict) -> str:
    return hashlib.sha256(json.dumps(config, sort_keys=True).encode("utf-8")).hexdigest()[:16]


def resolve_config(args) -> dict:
    config = default_config()
    if getattr(args, "config", None):
        path = Path(args.config)
        if not path.exists():
            raise MissingArtifactError(f"config file not found: {path}")
        try:
            user = json.loads(path.read_text("utf-8"))
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(user, dict):
            raise ConfigError(f"{path}: top level must be an object")
        if user.get("version", SCHEMA_VERSION) != SCHEMA_VERSION:
            raise ConfigError(f"unsupported config version {user['version']!r}")
        config = merge_config(config, user)
    env = os.environ.get("STOK_SEED")
    if env is not None:
        try:
            config["seed"] = int(env)
        except ValueError as exc:
            raise ConfigError(f"STOK_SEED must be an integer, got {env!r}") from exc
    epochs_key = "pretrain_recipe" if args.command == "pretrain" else "recipe"
    flags = {
        "seed": ("seed",), "epochs": (epochs_key, "epochs"), "K": ("codebook", "K"),
        "patch_size": ("codebook", "patch_size"), "augment": ("augment",),
    }
    for flag, keys in flags.items():
        value = getattr(args, flag, None)
        if value is not None:
            target = config
            for k in keys[:-1]:
                target = target[k]
            target[keys[-1]] = value
    _validate(config)
    return config


def _validate(config: dict) -> None:
    """Build every typed object once so schema errors surface before any work."""
    recipe(config, "recipe")
    recipe(config, "pretrain_recipe")
    ta_hyper(config)
    for op in config["tokenadapt"]["ops"]:
        AugSpec(op)
    augment_specs(config)
    cb = config["codebook"]
    if int(cb["K"]) < 2 or int(cb["patch_size"]) < 1:
        raise ConfigError("codebook.K must be >= 2 and codebook.patch_size >= 1")
    bb = config["backbone"]
    if bb["width"] % bb["heads"]:
        raise ConfigError("backbone.width must be divisible by backbone.heads")
    for kind, severity in corruptions(config):
        if kind not in CORRUPTIONS or severity not in (1, 2, 3, 4, 5):
            raise ConfigError(f"eval.corruptions: bad entry {[kind, severity]}")


def recipe(config: dict, section: str) -> TrainRecipe:
    return TrainRecipe.from_dict({**config[section], "seed": int(config["seed"])})


def ta_hyper(config: dict) -> TokenAdaptHyper:
    params = {k: v for k, v in config["tokenadapt"].items() if k != "ops"}
    return TokenAdaptHyper(**params, seed=int(config["seed"]))


def augment_specs(config: dict) -> list:
    value = config["augment"]
    presets = {"seit": seit_baseline, "seitpp": seitpp_default, "none": list}
    if isinstance(value, str):
        if value not in presets:
            raise ConfigError(f"augment preset must be one of {sorted(presets)}, got {value!r}")
        return presets[value]()
    if not isinstance(value, list):
        raise ConfigError("augment must be a preset name or a list of op objects")
    return [AugSpec.from_dict(v) for v in value]


def corruptions(config: dict) -> list:
    return [(str(k), int(s)) for k, s in config["eval"]["corruptions"]]


def backbone_config(config: dict, grid, codebook, num_classes: int, stem=None):
    bb = {k: config["backbone"][k] for k in _BACKBONE_KEYS}
    if stem:
        bb["stem"] = stem
    return model_mod.BackboneConfig(grid=tuple(grid), in_dim=codebook.d, K=codebook.K,
                                    num_classes=num_classes, **bb)


def _patch_size(codebook) -> int:
    p = int(round((codebook.d / 3) ** 0.5))
    if 3 * p * p != codebook.d:
        raise DataError(f"codebook d={codebook.d} is not a 3-channel square patch")
    return p


# --------------------------------------------------------------------- runs

class Run:
    """Collects outputs of one command and writes them on success."""

    def __init__(self, args, config: dict):
        self.args = args
        self.config = config
        self.out = Path(args.out) if getattr(args, "out", None) else None
        self.dry = bool(getattr(args, "dry_run", False))
        self.start = time.perf_counter()
        self.planned: list[str] = []

    def log(self, name: str, header: str) -> LineLog:
        """Open a log inside the output directory; call after :meth:`begin`."""
        return LineLog(header, self.out / name)

    def path(self, name: str) -> Path:
        self.planned.append(name)
        return self.out / name

    def begin(self) -> None:
        if self.out is None:
            raise ConfigError(f"{self.args.command} needs --out")
        if not self.dry:
            self.out.mkdir(parents=True, exist_ok=True)
            atomic_write_text(self.out / "config.json",
                              json.dumps(self.config, indent=2, sort_keys=True) + "\n")

    def finish(self, metrics, extra: Optional[dict] = None) -> dict:
        report = {
            "command": self.args.command,
            "config_hash": config_hash(self.config),
            "seeds": [int(self.config["seed"])],
            "metrics": metrics,
            "wall_time_s": round(time.perf_counter() - self.start, 3),
            **(extra or {}),
        }
        if not self.dry:
            atomic_write_text(self.out / "report.json",
                              json.dumps(report, indent=2, sort_keys=True) + "\n")
        return report

    def plan(self) -> dict:
        return {"command": self.args.command, "out": str(self.out),
                "writes": ["config.json", *self.planned, "report.json"], "config": self.config}


def metrics_table(log_text: str) -> list:
    """Last value of every ``(split, metric)`` pair in an ``epoch,split,metric,value`` log."""
    last = {}
    for line in log_text.splitlines()[1:]:
        epoch, split, metric, value = line.split(",")
        last[(split, metric)] = [int(epoch), split, metric, float(value)]
    return [last[k] for k in sorted(last)]


def _need(path) -> Path:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"missing prerequisite: {path}")
    return path


def _codebook_from(args):
    return read_codebook(_need(args.codebook))


def _labelled(split):
    if split.labels is None:
        raise DataError(f"split has no labels file ({split.manifest.num_images} grids)")
    return split


def _num_classes(*splits) -> int:
    names = splits[0].manifest.class_names
    if names:
        return len(names)
    return int(max(int(np.max(s.labels)) for s in splits if s.labels is not None)) + 1


def cmd_make_toy(args, config):
    run = Run(args, config)
    toy = config["toy"]
    run.path("train.npz"), run.path("val.npz")
    if run.dry:
        return run
    run.begin()
    seed = int(config["seed"])
    names = list(toydata.CLASS_NAMES[:toy["num_classes"]])
    total = toy["num_train"] + toy["num_val"]
    images, labels = toydata.make_shapes(total, toy["size"], seed, toy["num_classes"], toy["noise"])
    ntr = toy["num_train"]
    ingest.save_npz(run.out / "train.npz", ingest.ImageSet(images[:ntr], labels[:ntr], names))
    ingest.save_npz(run.out / "val.npz", ingest.ImageSet(images[ntr:], labels[ntr:], names))
    run.finish([], {"num_train": ntr, "num_val": toy["num_val"]})
    return run


def cmd_fit_codebook(args, config):
    run = Run(args, config)
    data = ingest.load_images(args.data)
    run.path("codebook.scbk")
    if run.dry:
        return run
    cb = config["codebook"]
    tok = PatchTokenizer.fit(data.images, int(cb["patch_size"]), int(cb["K"]),
                             seed=int(config["seed"]), max_iter=int(cb["max_iter"]),
                             max_patches=cb["max_patches"])
    run.begin()
    write_codebook(run.out, tok.codebook)
    run.finish([], {"codebook_id": tok.codebook.id, "K": tok.codebook.K, "d": tok.codebook.d})
    return run


def _split_args(values) -> dict:
    out = {}
    for item in values:
        if "=" not in item:
            raise ConfigError(f"--data expects name=path, got {item!r}")
        name, path = item.split("=", 1)
        if not name.isidentifier():
            raise ConfigError(f"split name {name!r} must be an identifier")
        out[name] = path
    return out


def cmd_tokenize(args, config):
    run = Run(args, config)
    codebook = _codebook_from(args)
    tok = PatchTokenizer(codebook, _patch_size(codebook))
    sources = {name: ingest.load_images(path) for name, path in _split_args(args.data).items()}
    run.path("codebook.scbk")
    for name in sources:
        run.path(f"{name}.stok"), run.path(f"{name}.labels"), run.path(f"{name}.manifest.json")
    if run.dry:
        return run
    grids = {name: tok.tokenize(data.images) for name, data in sources.items()}
    run.begin()
    write_codebook(run.out, codebook)
    stats = {}
    for name, data in sources.items():
        manifest = write_split(run.out, name, grids[name], codebook, data.raw_bytes,
                               data.labels, data.class_names)
        stats[name] = dataset_stats(manifest)
    run.finish([], {"storage": stats})
    return run


def cmd_stats(args, config):
    manifest = read_manifest(_need(args.tokens), args.split)
    stats = dataset_stats(manifest)
    print(format_stats(stats))
    return None


def cmd_train_tokenadapt(args, config):
    run = Run(args, config)
    codebook = _codebook_from(args)
    data = ingest.load_images(args.data)
    run.path("tokenadapt_log.csv"), run.path("tokenadapt.stam")
    if run.dry:
        return run
    run.begin()
    log = run.log("tokenadapt_log.csv", "epoch,step,loss")
    tok = PatchTokenizer(codebook, _patch_size(codebook))
    specs = [AugSpec(op) for op in config["tokenadapt"]["ops"]]
    module, log = train_token_adapt(data.images, tok, specs, ta_hyper(config), log)
    module.save(run.out / "tokenadapt.stam")
    losses = [float(l.split(",")[2]) for l in log.lines]
    run.finish([["final_loss", losses[-1]]] if losses else [])
    return run


def _token_dir(args):
    directory = _need(args.tokens)
    codebook = read_codebook(_need(directory / "codebook.scbk"))
    return directory, codebook


def cmd_pretrain(args, config):
    run = Run(args, config)
    directory, codebook = _token_dir(args)
    train = read_split(directory, args.split, codebook)
    mtm_cfg = mtm.MTMConfig(backbone=backbone_config(config, train.manifest.grid_shape, codebook,
                                                     1, stem="conv2x2"),
                            **{k: config["mtm"][k] for k in _MTM_KEYS})
    run.path("pretrain_log.csv"), run.path("mtm.smtm")
    if run.dry:
        return run
    run.begin()
    log = run.log("pretrain_log.csv", "epoch,step,loss,ratio_mean")
    net, log = mtm.pretrain(train, codebook, mtm_cfg, recipe(config, "pretrain_recipe"), log)
    mtm.save(run.out / "mtm.smtm", net, codebook.id)
    metrics = []
    if args.val_split:
        val = read_split(directory, args.val_split, codebook)
        metrics.append(["masked_top1", mtm.evaluate_masked(net, val.tokens, codebook,
                                                           seed=int(config["seed"]))])
    run.finish(metrics)
    return run


def _load_token_adapt(args, config, codebook, specs):
    if not any(s.via == "tokenadapt" for s in specs):
        return None
    if not args.token_adapt:
        raise MissingArtifactError("augmentation pipeline needs a TokenAdapt module "
                                   "(--token-adapt; produce one with train-tokenadapt)")
    return TokenAdaptModule.load(_need(args.token_adapt), codebook).eval()


def _train_common(args, config, pretrained=None):
    run = Run(args, config)
    directory, codebook = _token_dir(args)
    train = _labelled(read_split(directory, args.split, codebook))
    val = _labelled(read_split(directory, args.val_split, codebook)) if args.val_split else None
    specs = augment_specs(config)
    ta = _load_token_adapt(args, config, codebook, specs)
    ckpt = None if pretrained is None else checkpoint.load(_need(pretrained), mtm.MAGIC)
    cfg = backbone_config(config, train.manifest.grid_shape, codebook,
                          _num_classes(*[s for s in (train, val) if s is not None]))
    run.path("train_log.csv"), run.path("model.smod")
    if run.dry:
        return run
    run.begin()
    log = run.log("train_log.csv", "epoch,split,metric,value")
    rec = recipe(config, "recipe")
    if ckpt is None:
        net, log = model_mod.train_supervised(train, codebook, cfg, rec, specs, ta, val, log)
    else:
        net, log = model_mod.finetune(ckpt, train, codebook, cfg, rec, specs, ta, val, log)
    model_mod.save(run.out / "model.smod", net, codebook.id)
    run.finish(metrics_table(log.text()))
    return run


def cmd_train(args, config):
    return _train_common(args, config)


def cmd_finetune(args, config):
    return _train_common(args, config, args.pretrained)


def cmd_eval(args, config):
    run = Run(args, config)
    directory, codebook = _token_dir(args)
    split = _labelled(read_split(directory, args.split, codebook))
    net = model_mod.load(_need(args.checkpoint), codebook)
    corr = corruptions(config)
    if args.corrupt:
        kind, _, levels = args.corrupt.partition(":")
        try:
            corr = [(kind, int(s)) for s in (levels or "1,2,3,4,5").split(",")]
        except ValueError as exc:
            raise ConfigError(f"--corrupt expects kind:1,2,3, got {args.corrupt!r}") from exc
        config["eval"]["corruptions"] = [list(c) for c in corr]
        _validate(config)
    images = tok = None
    if corr:
        if not args.data:
            raise MissingArtifactError("corruption evaluation needs the source images (--data)")
        images = ingest.load_images(args.data).images
        if len(images) != len(split.tokens):
            raise DataError(f"{args.data} has {len(images)} images, split has {len(split.tokens)}")
        tok = PatchTokenizer(codebook, _patch_size(codebook))
    if run.dry:
        return run
    run.begin()
    rows = model_mod.evaluate(net, split, codebook, images, tok, corr, seed=int(config["seed"]))
    for row in rows:
        print(f"{row['corruption']:>16s}  severity {row['severity']}  top1 {row['top1']:.4f}")
    run.finish([[r["corruption"], r["severity"], r["top1"]] for r in rows])
    return run


def cmd_decode_dump(args, config):
    run = Run(args, config)
    directory, codebook = _token_dir(args)
    split = read_split(directory, args.split, codebook)
    tok = PatchTokenizer(codebook, _patch_size(codebook))
    ta = TokenAdaptModule.load(_need(args.token_adapt), codebook).eval() if args.token_adapt else None
    spec = AugSpec(args.op)
    n = min(args.count, len(split.tokens))
    for i in range(n):
        run.path(f"sample_{i:03d}.ppm")
    if run.dry:
        return run
    run.begin()
    rng = np.random.default_rng(int(config["seed"]))
    T = split.tokens[:n]
    panels = [tok.decode(T)]
    if args.op == "hflip":
        panels.append(tok.decode(T[:, :, ::-1]))
    if ta is not None:
        partner = T[::-1] if spec.op == "mixup" else None
        panels.append(tok.decode(apply_token_adapt(T, spec, ta, codebook, rng, partner)))
    for i in range(n):
        strip = np.concatenate([p[i] for p in panels], axis=1)
        ingest.write_ppm(run.out / f"sample_{i:03d}.ppm", np.rint(strip).astype(np.uint8))
    run.finish([], {"panels": ["original", *(["naive_flip"] if args.op == "hflip" else []),
                               *(["tokenadapt"] if ta is not None else [])]})
    return run


COMMANDS = {
    "make-toy": cmd_make_toy,
    "fit-codebook": cmd_fit_codebook,
    "tokenize": cmd_tokenize,
    "stats": cmd_stats,
    "train-tokenadapt": cmd_train_tokenadapt,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "finetune": cmd_finetune,
    "eval": cmd_eval,
    "decode-dump": cmd_decode_dump,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stok", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, help_text, out=True):
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int)
        if out:
            p.add_argument("--out", required=True, help="output directory")
            p.add_argument("--dry-run", action="store_true",
                           help="resolve config and check inputs without writing")
        return p

    add("make-toy", "write procedural toy train/val archives")
    p = add("fit-codebook", "fit a patch k-means codebook")
    p.add_argument("--data", required=True)
    p.add_argument("--K", type=int)
    p.add_argument("--patch-size", type=int)
    p = add("tokenize", "tokenize image splits into packed token files")
    p.add_argument("--codebook", required=True)
    p.add_argument("--data", action="append", required=True, metavar="SPLIT=PATH")
    p = add("stats", "print the storage report of a token split", out=False)
    p.add_argument("--tokens", required=True)
    p.add_argument("--split", default="train")
    p = add("train-tokenadapt", "train the TokenAdapt module on pixel pairs")
    p.add_argument("--codebook", required=True)
    p.add_argument("--data", required=True)
    p = add("pretrain", "masked token modeling pre-training")
    p.add_argument("--tokens", required=True)
    p.add_argument("--split", default="train")
    p.add_argument("--val-split")
    p.add_argument("--epochs", type=int)
    for name, text in (("train", "supervised training from scratch"),
                       ("finetune", "fine-tune from a pre-trained encoder")):
        p = add(name, text)
        p.add_argument("--tokens", required=True)
        p.add_argument("--split", default="train")
        p.add_argument("--val-split")
        p.add_argument("--epochs", type=int)
        p.add_argument("--augment", help="seit, seitpp or none")
        p.add_argument("--token-adapt", help="TokenAdapt checkpoint")
        if name == "finetune":
            p.add_argument("--pretrained", required=True)
    p = add("eval", "evaluate a classifier, optionally under pixel corruptions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--tokens", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--data", help="source images of the split (for corruptions)")
    p.add_argument("--corrupt", help="kind[:severities], e.g. gaussian_noise:1,3,5")
    p = add("decode-dump", "decode original and augmented tokens side by side")
    p.add_argument("--tokens", required=True)
    p.add_argument("--split", default="val")
    p.add_argument("--op", default="hflip")
    p.add_argument("--token-adapt")
    p.add_argument("--count", type=int, default=8)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    torch.set_num_threads(max(1, int(os.environ.get("STOK_THREADS", "1"))))
    try:
        config = resolve_config(args)
        run = COMMANDS[args.command](args, config)
        if run is not None and run.dry:
            print(json.dumps(run.plan(), indent=2, sort_keys=True))
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MissingArtifactError as exc:
        print(f"missing prerequisite: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (DataError, StokError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
