"""Command-line interface: ``protovae <command> [options]``.

Exit codes: 0 success, 2 usage or input error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import __version__
from .checkpoint import load_checkpoint, save_checkpoint
from .data import load_idx
from .errors import NumericalError, ProtoVAEError
from .explain import (
    LRPConfig,
    explain_all,
    image_to_gray,
    read_pgm,
    save_map_csv,
    save_map_pgm,
    top_prototypes,
    write_pgm,
)
from .metrics import (
    ad_ai,
    lrp_maps,
    ordering_curves,
    ordering_grid,
    random_maps,
    read_maps_csv,
    write_ad_ai_csv,
    write_ordering_csv,
)
from .model import ProtoVAE
from .trainer import CSV_COLUMNS, TrainConfig, evaluate_accuracy, train, within_class_min_distance

log = logging.getLogger("protovae")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 2, 3


class UsageError(Exception):
    """Bad flags or inputs detected after argument parsing."""


# -- config resolution --------------------------------------------------------------

# flag destination -> TrainConfig field
TRAIN_FLAGS = {
    "epochs": "epochs",
    "batch_size": "batch_size",
    "lr": "learning_rate",
    "seed": "seed",
    "k": "num_classes",
    "m": "protos_per_class",
    "d": "latent_dim",
    "epsilon": "epsilon",
    "w_pred": "w_pred",
    "w_orth": "w_orth",
    "w_recon": "w_recon",
    "w_kl": "w_kl",
    "disable_orth": "disable_orth",
    "disable_kl": "disable_kl",
    "channels": "channels",
    "hidden": "hidden",
    "classifier_init": "classifier_init",
    "prototype_init": "prototype_init",
    "center_scale": "center_scale",
}


def _convert(field_type, raw, key):
    field_type = str(field_type)
    try:
        if field_type == "bool":
            lowered = str(raw).strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if field_type == "int":
            return int(raw)
        if field_type == "float":
            return float(raw)
        if field_type == "tuple":
            return tuple(int(v) for v in str(raw).split(","))
        return str(raw).strip()
    except ValueError:
        raise UsageError(f"bad value {raw!r} for {key}") from None


def read_config_file(path):
    """Flat ``key = value`` file; ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such file: {path}")
    values = {}
    for lineno, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key = value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key.replace("-", "_")] = value
    return values


def resolve_train_config(args):
    """Built-in defaults, overridden by the config file, overridden by flags."""
    types = {f.name: f.type for f in fields(TrainConfig)}
    resolved = TrainConfig().to_dict()
    if args.config:
        for key, raw in read_config_file(args.config).items():
            name = TRAIN_FLAGS.get(key, key)
            if name not in types:
                raise UsageError(f"unknown config key {key!r} in {args.config}")
            resolved[name] = _convert(types[name], raw, key)
    for flag, name in TRAIN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            resolved[name] = _convert(types[name], value, flag) if isinstance(value, str) else value
    return TrainConfig.from_dict(resolved)


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out, command, config, inputs, layout):
    manifest = {
        "command": command,
        "tool": "protovae",
        "version": __version__,
        "config": config,
        "inputs": {name: {"path": str(p), "sha256": sha256(p)} for name, p in inputs.items()},
        "layout": layout,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _out_dir(args, seed):
    if args.out:
        out = Path(args.out)
    else:
        out = Path("runs") / f"{time.strftime('%Y%m%d-%H%M%S')}-{seed}"
    out.mkdir(parents=True, exist_ok=True)
    return out


def _require(path, what):
    if path is None:
        raise UsageError(f"--{what} is required")
    if not Path(path).exists():
        raise FileNotFoundError(f"no such file: {path}")
    return Path(path)


def _load_dataset(images, labels, name, num_classes, limit=None):
    return load_idx(
        _require(images, "images"), _require(labels, "labels"), name, num_classes, limit
    )


def _fmt(v):
    return repr(float(v))


# -- commands ----------------------------------------------------------------------------


def cmd_train(args):
    config = resolve_train_config(args)
    out = _out_dir(args, config.seed)
    inputs = {"images": _require(args.images, "images"), "labels": _require(args.labels, "labels")}
    if args.test_images or args.test_labels:
        inputs["test_images"] = _require(args.test_images, "test-images")
        inputs["test_labels"] = _require(args.test_labels, "test-labels")
    layout = {"checkpoint": "checkpoint.pvae", "metrics": "metrics.csv",
              "prototypes": "prototypes/", "maps": "maps/"}
    resolved = {"dataset": args.dataset, "limit": args.limit, "train": config.to_dict()}
    write_manifest(out, "train", resolved, inputs, layout)

    train_set = _load_dataset(args.images, args.labels, args.dataset, config.num_classes, args.limit)
    test_set = None
    if "test_images" in inputs:
        test_set = _load_dataset(args.test_images, args.test_labels, args.dataset, config.num_classes)
    model = ProtoVAE(config.model_config(train_set.image_shape), seed=config.seed)
    rng = np.random.default_rng([config.seed, 1])

    def progress(info):
        if info["batch"] % 50 == 0:
            log.info("epoch %d batch %d total %.4f", info["epoch"], info["batch"], info["total"])

    model, records = train(model, train_set, config, progress, test_set, rng)
    with open(out / "metrics.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for r in records:
            writer.writerow([r.epoch, *(_fmt(v) for v in r.csv_row()[1:])])
    save_checkpoint(model, out / "checkpoint.pvae", config.to_dict(), rng.bit_generator.state,
                    {"dataset": args.dataset})
    (out / "prototypes").mkdir(exist_ok=True)
    (out / "maps").mkdir(exist_ok=True)
    final = records[-1] if records else None
    if final is not None:
        print(f"epoch {final.epoch}: total {final.total:.4f} test_acc {final.test_acc:.4f}")
    print(f"min within-class prototype distance {within_class_min_distance(model):.4f}")
    print(f"wrote {out}")
    return EXIT_OK


def _load_model(args):
    return load_checkpoint(_require(args.checkpoint, "checkpoint"))


def cmd_prototypes(args):
    ck = _load_model(args)
    model = ck.model
    out = Path(args.out or "prototypes")
    out.mkdir(parents=True, exist_ok=True)
    images = model.decode_all_prototypes()
    cfg = model.config
    for k in range(cfg.num_classes):
        for j in range(cfg.protos_per_class):
            write_pgm(out / f"proto_k{k}_j{j}.pgm", image_to_gray(images[k, j]))
    if args.montage:
        rows = [np.concatenate([image_to_gray(images[k, j]) for j in range(cfg.protos_per_class)], axis=1)
                for k in range(cfg.num_classes)]
        write_pgm(out / "montage.pgm", np.concatenate(rows, axis=0))
    print(f"wrote {cfg.num_prototypes} prototypes to {out}")
    return EXIT_OK


def _pick_image(args, model):
    if args.image_file:
        gray = read_pgm(_require(args.image_file, "image-file")).astype(np.float32)
        image = (gray * np.float32(2.0 / 255.0) - np.float32(1.0))[None]
        label = None
    else:
        ds = _load_dataset(args.images, args.labels, "dataset", model.config.num_classes)
        if not 0 <= args.index < len(ds):
            raise UsageError(f"--index {args.index} out of range for {len(ds)} images")
        image, label = ds.images[args.index], int(ds.targets[args.index])
    expected = (model.config.in_channels, *model.config.image_size)
    if image.shape != expected:
        raise UsageError(f"image shape {image.shape} does not match model input {expected}")
    return image, label


def cmd_explain(args):
    model = _load_model(args).model
    image, label = _pick_image(args, model)
    total = model.config.num_prototypes
    top = args.top
    if top < 1:
        raise UsageError("--top must be positive")
    if top > total:
        log.warning("--top %d exceeds the %d prototypes; using %d", top, total, total)
        top = total
    ranked = top_prototypes(model, image, top)
    config = LRPConfig(alpha=args.alpha, beta=args.alpha - 1.0, eta=args.eta)
    maps = explain_all(model, image, config, [p for p, _ in ranked], args.index)
    out = Path(args.out or "maps")
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "scores.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["rank", "k", "j", "similarity", "label"])
        for rank, (((k, j), s), rmap) in enumerate(zip(ranked, maps)):
            writer.writerow([rank, k, j, _fmt(s), "" if label is None else label])
            save_map_pgm(out / f"map_k{k}_j{j}.pgm", rmap)
            save_map_csv(out / f"map_k{k}_j{j}.csv", rmap)
    write_pgm(out / "input.pgm", image_to_gray(image))
    print(f"wrote {top} maps to {out}")
    return EXIT_OK


def _pair(text):
    try:
        k, j = (int(v) for v in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected K,J but got {text!r}") from None
    return k, j


def cmd_interpolate(args):
    model = _load_model(args).model
    cfg = model.config
    for k, j in (args.source, args.target):
        if not (0 <= k < cfg.num_classes and 0 <= j < cfg.protos_per_class):
            raise UsageError(f"prototype ({k}, {j}) out of range")
    if args.steps < 2:
        raise UsageError("--steps must be at least 2")
    phi = model.prototypes.data
    images = model.interpolate(phi[args.source], phi[args.target], args.steps)
    out = Path(args.out or "interpolation")
    out.mkdir(parents=True, exist_ok=True)
    grays = [image_to_gray(img) for img in images]
    for i, g in enumerate(grays):
        write_pgm(out / f"step_{i:03d}.pgm", g)
    write_pgm(out / "strip.pgm", np.concatenate(grays, axis=1))
    print(f"wrote {len(grays)} steps to {out}")
    return EXIT_OK


def _subset_indices(n_total, n, seed):
    return np.sort(np.random.default_rng(seed).choice(n_total, size=min(n, n_total), replace=False))


def cmd_metrics(args):
    ck = _load_model(args)
    model = ck.model
    cfg = model.config
    ds = _load_dataset(args.images, args.labels, args.dataset, cfg.num_classes)
    out = Path(args.out or "metrics")
    out.mkdir(parents=True, exist_ok=True)
    seeds = [int(s) for s in args.seeds.split(",")]
    lrp_config = LRPConfig(alpha=args.alpha, beta=args.alpha - 1.0, eta=args.eta)
    external = None
    if args.maps_csv:
        external = read_maps_csv(_require(args.maps_csv, "maps-csv"), cfg.num_classes, cfg.protos_per_class)

    if args.which == "accuracy":
        acc = evaluate_accuracy(model, ds)
        with open(out / "accuracy.csv", "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["dataset", "n", "accuracy"])
            writer.writerow([args.dataset, len(ds), _fmt(acc)])
        print(f"accuracy {acc:.4f}")
    elif args.which == "adai":
        rows = []
        for seed in seeds:
            idx = _subset_indices(len(ds), args.n, seed)
            images = ds.images[idx]
            if external is not None:
                maps = [external[i] for i in idx]
            elif args.baseline == "random":
                maps = random_maps(cfg.image_size, len(idx), np.random.default_rng([seed, 2]), cfg.num_prototypes)
            else:
                maps = lrp_maps(model, images, lrp_config)
            ad, ai = ad_ai(model, images, maps, args.fraction)
            rows.append((args.dataset, seed, ad, ai))
            print(f"seed {seed}: AD {ad:.4f} AI {ai:.4f}")
        write_ad_ai_csv(out / "ad_ai.csv", rows)
    else:
        seed = seeds[0]
        idx = _subset_indices(len(ds), args.n, seed)
        images, labels = ds.images[idx], ds.targets[idx]
        maps = [external[i] for i in idx] if external is not None else lrp_maps(model, images, lrp_config)
        curves = ordering_curves(model, images, labels, maps, ordering_grid(), seed)
        write_ordering_csv(out / "ordering.csv", curves)
        for c in curves:
            print(f"{c.baseline} area {c.area():.4f}")
    fingerprint = {"which": args.which, "seeds": seeds, "n": args.n, "fraction": args.fraction,
                   "epsilon": cfg.epsilon, "eta": args.eta, "alpha": args.alpha,
                   "beta": args.alpha - 1.0, "baseline": args.baseline}
    inputs = {"checkpoint": Path(args.checkpoint), "images": Path(args.images), "labels": Path(args.labels)}
    write_manifest(out, "metrics", fingerprint, inputs, {})
    return EXIT_OK


def cmd_export_embeddings(args):
    model = _load_model(args).model
    cfg = model.config
    ds = _load_dataset(args.images, args.labels, args.dataset, cfg.num_classes, args.limit)
    mu = model.embed(ds.images)
    phi = model.prototypes.data
    out = Path(args.out or "embeddings.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    with open(out, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["kind", "index", "label", "k", "j", *(f"v{i}" for i in range(cfg.latent_dim))])
        for i, (vec, label) in enumerate(zip(mu, ds.targets)):
            writer.writerow(["image", i, int(label), "", "", *map(_fmt, vec)])
        for k in range(cfg.num_classes):
            for j in range(cfg.protos_per_class):
                writer.writerow(["proto", k * cfg.protos_per_class + j, k, k, j, *map(_fmt, phi[k, j])])
    print(f"wrote {len(ds) + cfg.num_prototypes} rows to {out}")
    return EXIT_OK


# -- parser ---------------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="protovae", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"protovae {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_flags(p, required=True):
        p.add_argument("--dataset", default="mnist", help="dataset name recorded in outputs")
        p.add_argument("--images", required=required, help="IDX image file")
        p.add_argument("--labels", required=required, help="IDX label file")

    p = sub.add_parser("train", help="train a model and write checkpoint + metrics")
    data_flags(p)
    p.add_argument("--test-images")
    p.add_argument("--test-labels")
    p.add_argument("--config", help="key = value file; flags override it")
    p.add_argument("--out", help="output directory (default runs/<timestamp>-<seed>)")
    p.add_argument("--limit", type=int, help="use only the first N training images")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--k", type=int, help="number of classes")
    p.add_argument("--m", type=int, help="prototypes per class")
    p.add_argument("--d", type=int, help="latent dimension")
    p.add_argument("--epsilon", type=float)
    p.add_argument("--w-pred", type=float)
    p.add_argument("--w-orth", type=float)
    p.add_argument("--w-recon", type=float)
    p.add_argument("--w-kl", type=float)
    p.add_argument("--channels", help="comma-separated encoder widths")
    p.add_argument("--hidden", type=int)
    p.add_argument("--classifier-init", choices=("class", "uniform"))
    p.add_argument("--prototype-init", choices=("clustered", "normal"))
    p.add_argument("--center-scale", type=float)
    p.add_argument("--disable-orth", action="store_const", const=True)
    p.add_argument("--disable-kl", action="store_const", const=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("prototypes", help="decode every prototype to a PGM image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.add_argument("--montage", action="store_true", help="also write a K x M grid")
    p.set_defaults(func=cmd_prototypes)

    p = sub.add_parser("explain", help="LRP maps for the most similar prototypes of one image")
    p.add_argument("--checkpoint", required=True)
    data_flags(p, required=False)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--image-file", help="P5 PGM instead of an IDX image")
    p.add_argument("--top", type=int, default=3)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_explain)

    p = sub.add_parser("interpolate", help="decode a straight latent path between two prototypes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--from", dest="source", type=_pair, required=True, metavar="K,J")
    p.add_argument("--to", dest="target", type=_pair, required=True, metavar="K,J")
    p.add_argument("--steps", type=int, default=8)
    p.add_argument("--out")
    p.set_defaults(func=cmd_interpolate)

    p = sub.add_parser("metrics", help="accuracy, AD/AI or relevance-ordering curves")
    p.add_argument("--checkpoint", required=True)
    data_flags(p)
    p.add_argument("--which", choices=("accuracy", "adai", "ordering"), default="accuracy")
    p.add_argument("--n", type=int, default=100, help="test images per seed")
    p.add_argument("--seeds", default="0", help="comma-separated subset seeds")
    p.add_argument("--fraction", type=float, default=0.5)
    p.add_argument("--baseline", choices=("lrp", "random"), default="lrp")
    p.add_argument("--maps-csv", help="score externally computed maps instead of LRP")
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--eta", type=float, default=1e-6)
    p.add_argument("--out")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("export-embeddings", help="CSV of posterior means and prototypes")
    p.add_argument("--checkpoint", required=True)
    data_flags(p)
    p.add_argument("--limit", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_export_embeddings)
    return parser


def _check_threads():
    value = os.environ.get("PROTOVAE_THREADS")
    if value is not None and not (value.isdigit() and int(value) > 0):
        raise UsageError(f"PROTOVAE_THREADS must be a positive integer, got {value!r}")


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(message)s",
        stream=sys.stderr,
    )
    try:
        _check_threads()
        return args.func(args)
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (UsageError, ProtoVAEError, FileNotFoundError, KeyError, IndexError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
