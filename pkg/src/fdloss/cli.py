"""``fdloss`` command line: train, fuse, eval, cam, verify.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as cfgmod
from . import plotting, verify
from .cam import export, grad_cam, overlap
from .checkpoint import load_model
from .data import Dataset, load_cifar10, load_image_dir, make_two_patch, subsample, write_split_manifest
from .errors import ConfigError, FormatError, StateError, TrainingError
from .fusion import METHODS, Ensemble, FusionHead, StackingMeta, base_probabilities, evaluate
from .ppm import read_ppm
from .trainer import train

logger = logging.getLogger("fdloss")

RESOLVED_CONFIG = "config.resolved.txt"


class UsageError(Exception):
    """Bad command-line input that is not a config key (exit 2)."""


def load_dataset(cfg: cfgmod.RunConfig) -> Dataset:
    if cfg.dataset == "two_patch":
        ds = make_two_patch(cfg.two_patch_per_class, cfg.image_size, cfg.split_seed, cfg.channels)
    elif cfg.dataset == "cifar10":
        ds = load_cifar10(cfg.dataset_path, cfg.split_seed)
    else:
        ds = load_image_dir(cfg.dataset_path, cfg.split_seed)
    if cfg.k_per_class:
        ds = subsample(ds, cfg.k_per_class, cfg.split_seed)
    return ds


def read_manifest(path) -> dict[str, str]:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    entries = {}
    for line in path.read_text().splitlines():
        if line.strip():
            key, sep, value = line.partition("=")
            if not sep:
                raise FormatError(f"{path}: malformed line {line!r}")
            entries[key.strip()] = value.strip()
    return entries


def load_base_models(manifest_path) -> tuple[list, list[str]]:
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    if "m" not in entries:
        raise FormatError(f"{manifest_path}: no model count")
    names = [entries[f"model_{i}"] for i in range(int(entries["m"]))]
    models = []
    for name in names:
        path = manifest_path.parent / name
        if not path.is_file():
            raise FileNotFoundError(f"checkpoint listed in {manifest_path} is missing: {path}")
        models.append(load_model(path))
    return models, names


def load_ensemble(manifest_path, spec) -> Ensemble:
    """Base models plus a saved head when ``manifest_path`` is an ensemble manifest."""
    manifest_path = Path(manifest_path)
    entries = read_manifest(manifest_path)
    models, _ = load_base_models(manifest_path)
    head = meta = None
    if entries.get("format") == "fdloss-fusion-1":
        if entries["method"] != spec.method:
            raise ConfigError(f"manifest holds a {entries['method']} ensemble, not {spec.method}", key="fusion_method")
        ckpt = entries.get("head_checkpoint")
        if ckpt:
            path = manifest_path.parent / ckpt
            if not path.is_file():
                raise FileNotFoundError(f"head checkpoint listed in {manifest_path} is missing: {path}")
            if spec.method == "stacking":
                meta = StackingMeta.load(path)
            else:
                head = FusionHead.load(path, spec)
    return Ensemble(models, spec, head=head, meta=meta)


def _resolve(args, manifest=None) -> cfgmod.RunConfig:
    overrides = {}
    for flag, key in (("out", "out"), ("seed", "seed"), ("workers", "workers")):
        if getattr(args, flag, None) is not None:
            overrides[key] = getattr(args, flag)
    if getattr(args, "no_distance_loss", False):
        overrides["distance_enabled"] = False
    if getattr(args, "method", None):
        overrides["fusion_method"] = args.method
    path = args.config
    if path is None and manifest is not None and (Path(manifest).parent / RESOLVED_CONFIG).is_file():
        path = Path(manifest).parent / RESOLVED_CONFIG
        if "out" not in overrides:
            overrides["out"] = str(Path(manifest).parent)
    return cfgmod.RunConfig.resolve(path, overrides)


def _write_report(report, out: Path) -> Path:
    out.mkdir(parents=True, exist_ok=True)
    stem = out / f"report_{report.method}_{report.split}"
    text = report.to_text()
    stem.with_suffix(".txt").write_text(text)
    plotting.class_accuracy(report, stem.with_suffix(".png"))
    sys.stdout.write(text)
    return stem.with_suffix(".txt")


# -- commands --------------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _resolve(args)
    ds = load_dataset(cfg)
    ens_cfg = cfg.ensemble(ds.image_shape, ds.n_classes)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    cfg.write(out / RESOLVED_CONFIG)
    write_split_manifest(ds, out / "splits.txt")
    result = train(ens_cfg, ds, out)
    rows = plotting.parse_metrics_log(out / "metrics.log")
    plotting.training_curves(rows, out / "training_curves.png")
    rec = result.record
    print(f"trained m={ens_cfg.m} epochs={ens_cfg.epochs} best_epoch={rec.best_epoch} "
          f"best_val_acc={rec.best_val_acc!r} manifest={result.manifest}")
    return 0


def cmd_fuse(args) -> int:
    cfg = _resolve(args, args.manifest)
    spec = cfg.fusion()
    models, names = load_base_models(args.manifest)
    ds = load_dataset(cfg)
    ensemble = Ensemble(models, spec).fit(ds)
    out = Path(args.out) if args.out else Path(args.manifest).parent
    out.mkdir(parents=True, exist_ok=True)
    src_dir = Path(args.manifest).parent
    if out.resolve() != src_dir.resolve():
        names = [str((src_dir / n).resolve()) for n in names]
    manifest = ensemble.save(out, names)
    images, labels = ds.split(args.split)
    _write_report(evaluate(ensemble, images, labels, ds.class_names, args.split), out)
    print(f"ensemble_manifest={manifest}")
    return 0


def cmd_eval(args) -> int:
    cfg = _resolve(args, args.manifest)
    entries = read_manifest(args.manifest)
    # an ensemble manifest names its own method unless --method overrides it
    spec = cfg.fusion(args.method or entries.get("method"))
    ensemble = load_ensemble(args.manifest, spec)
    ds = load_dataset(cfg)
    if not ensemble.ready:
        ensemble.fit(ds)
    images, labels = ds.split(args.split)
    out = Path(args.out) if args.out else Path(args.manifest).parent
    _write_report(evaluate(ensemble, images, labels, ds.class_names, args.split), out)
    return 0


def _cam_image(args, cfg, shape) -> tuple[np.ndarray, str]:
    if args.image:
        pixels = read_ppm(args.image).astype(np.float64) / 255.0
        if shape[2] == 1:
            pixels = pixels.mean(axis=2, keepdims=True)
        if pixels.shape != shape:
            raise UsageError(f"image {args.image} is {pixels.shape[:2]}, models expect {shape[:2]}")
        return pixels, Path(args.image).stem
    ds = load_dataset(cfg)
    images, _ = ds.split(args.split)
    if not 0 <= args.index < len(images):
        raise UsageError(f"--index {args.index} outside the {args.split} split (size {len(images)})")
    return images[args.index], f"{args.split}{args.index}"


def cmd_cam(args) -> int:
    cfg = _resolve(args, args.manifest)
    models, _ = load_base_models(args.manifest)
    spec = models[0].spec
    image, stem = _cam_image(args, cfg, spec.input_shape)
    stem = args.stem or stem
    if args.class_id == "predicted":
        class_id = int(base_probabilities(models, image[None]).mean(axis=0)[0].argmax())
    else:
        try:
            class_id = int(args.class_id)
        except ValueError:
            raise UsageError(f"--class must be an integer or 'predicted', got {args.class_id!r}") from None
        if not 0 <= class_id < spec.n_classes:
            raise UsageError(f"--class {class_id} outside [0, {spec.n_classes})")
    out = Path(args.out) if args.out else Path(args.manifest).parent
    out.mkdir(parents=True, exist_ok=True)
    maps = [grad_cam(mdl, image, class_id, source_model=i) for i, mdl in enumerate(models)]
    for i, hm in enumerate(maps):
        path = export(hm, None if args.no_blend else image, out / f"{stem}_model{i}_class{class_id}.ppm")
        print(f"heatmap={path} raw_max={hm.raw_max!r}")
    score = overlap(maps, cfg.cam_quantile) if len(maps) > 1 else 1.0
    print(f"overlap={score!r} q={cfg.cam_quantile!r} class={class_id} m={len(maps)}")
    plotting.cam_panel(image, maps, out / f"{stem}_class{class_id}_panel.png", score)
    return 0


def cmd_verify(args) -> int:
    return 0 if verify.run() else 1


# -- parser ----------------------------------------------------------------------


def _global_flags(parser, suppress: bool) -> None:
    default = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", metavar="PATH", default=default, help="key=value run configuration file")
    parser.add_argument("--out", metavar="DIR", default=default, help="output directory")
    parser.add_argument("--seed", type=int, metavar="N", default=default, help="shuffle/augmentation seed")
    parser.add_argument("--workers", type=int, metavar="N", default=default, help="threads for per-model passes")
    parser.add_argument(
        "--no-distance-loss", action="store_true", default=argparse.SUPPRESS if suppress else False,
        help="train with cross entropy only",
    )
    parser.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS if suppress else False)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fdloss",
        description="Train CNN ensembles under a feature distance loss, fuse them and inspect their heatmaps.",
        epilog=(
            f"Config keys (file lines key=value, or env {cfgmod.ENV_PREFIX}<KEY>; "
            "precedence defaults < file < env < flags):\n" + cfgmod.describe_schema()
        ),
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the base models")
    _global_flags(p, suppress=True)
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (
        ("fuse", cmd_fuse, "train an ensemble head and report its accuracy"),
        ("eval", cmd_eval, "report the accuracy of a saved ensemble"),
    ):
        p = sub.add_parser(name, help=helptext)
        _global_flags(p, suppress=True)
        p.add_argument("--manifest", required=True, help="manifest.txt from train, or an ensemble manifest")
        p.add_argument("--method", choices=METHODS, help="ensemble method (default: config fusion_method)")
        p.add_argument("--split", default="test", choices=("train", "val", "test"))
        p.set_defaults(func=func)

    p = sub.add_parser("cam", help="write one Grad-CAM heatmap per base model and their overlap")
    _global_flags(p, suppress=True)
    p.add_argument("--manifest", required=True)
    src = p.add_mutually_exclusive_group()
    src.add_argument("--index", type=int, default=0, help="image index within --split")
    src.add_argument("--image", help="P6 image file instead of a dataset image")
    p.add_argument("--split", default="test", choices=("train", "val", "test"))
    p.add_argument("--class", dest="class_id", default="predicted", help="class id or 'predicted'")
    p.add_argument("--no-blend", action="store_true", help="write the bare heatmap without the image")
    p.add_argument("--stem", help="file name prefix (default: split and index, or the image stem)")
    p.set_defaults(func=cmd_cam)

    p = sub.add_parser("verify", help="run the built-in self-check suite")
    _global_flags(p, suppress=True)
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        key = f" [{exc.key}]" if getattr(exc, "key", None) else ""
        print(f"fdloss: config error{key}: {exc}", file=sys.stderr)
        return 2
    except UsageError as exc:
        print(f"fdloss: usage error: {exc}", file=sys.stderr)
        return 2
    except (FormatError, StateError, TrainingError, OSError, ValueError) as exc:
        print(f"fdloss: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
