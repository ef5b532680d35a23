"""Flat ``key=value`` run configuration.

Resolution order, later wins: built-in defaults, the config file,
``FDLOSS_<KEY>`` environment variables, command-line flags. Unknown keys
are rejected everywhere. Lines starting with ``#`` are comments.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable

from .augment import TRANSFORMS, AugmentConfig
from .distance import KINDS, DistanceSpec
from .errors import ConfigError
from .fusion import HEADS, METHODS, FusionSpec
from .layers import FAMILIES, ArchSpec
from .trainer import INIT_STRATEGIES, EnsembleConfig

ENV_PREFIX = "FDLOSS_"
DATASETS = ("two_patch", "cifar10", "image_dir")


def _bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _int_list(text: str) -> tuple[int, ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    return tuple(int(p) for p in text.split(",") if p.strip())


def _name_list(text: str) -> tuple[str, ...]:
    if text.strip().lower() in ("", "none"):
        return ()
    return tuple(sorted(p.strip() for p in text.split(",") if p.strip()))


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(str(v) for v in value) if value else "none"
    if isinstance(value, float):
        return repr(value)
    return str(value)


@dataclass(frozen=True)
class Key:
    parse: Callable[[str], Any]
    default: Any
    doc: str
    choices: tuple = ()


SCHEMA: dict[str, Key] = {
    # dataset
    "dataset": Key(str, "two_patch", "two_patch, cifar10 or image_dir", DATASETS),
    "dataset_path": Key(str, "", "directory for cifar10 / image_dir datasets"),
    "split_seed": Key(int, 0, "seed of the 60/20/20 split"),
    "k_per_class": Key(int, 0, "training samples kept per class (0 keeps all)"),
    "two_patch_per_class": Key(int, 150, "synthetic images per class"),
    "image_size": Key(int, 16, "synthetic image side"),
    "channels": Key(int, 1, "synthetic image channels"),
    # ensemble
    "family": Key(str, "tiny", "base architecture family", FAMILIES),
    "width_scale": Key(Fraction, Fraction(1), "channel width multiplier"),
    "m": Key(int, 2, "number of base models"),
    "init_strategy": Key(str, "different", "none, same or different", INIT_STRATEGIES),
    "seeds": Key(_int_list, (), "comma-separated init seeds (default 1..m)"),
    "distance_kind": Key(str, "cosine_plus_euclidean", "pair distance function", KINDS),
    "distance_enabled": Key(_bool, True, "add the feature distance loss"),
    "alpha": Key(float, 1.0, "cosine term weight"),
    "beta": Key(float, 10.0, "exponential euclidean term weight"),
    "epsilon": Key(float, 1e-8, "norm guard"),
    "epochs": Key(int, 20, "training epochs"),
    "learning_rate": Key(float, 1e-3, "optimizer step size"),
    "batch_size": Key(int, 32, "mini-batch size"),
    "optimizer": Key(str, "adam", "adam or sgd", ("adam", "sgd")),
    "augment": Key(_name_list, (), "comma-separated transforms or none"),
    "seed": Key(int, 0, "shuffle and augmentation seed"),
    "workers": Key(int, 1, "threads for per-model forward passes"),
    # fusion
    "fusion_method": Key(str, "concat_fusion", "ensemble method", METHODS),
    "head": Key(str, "gap_then_dense", "fusion head layout", HEADS),
    "head_epochs": Key(int, 20, "fusion head epochs"),
    "head_lr": Key(float, 1e-3, "fusion head step size"),
    "head_batch_size": Key(int, 32, "fusion head mini-batch size"),
    # cam
    "cam_quantile": Key(float, 0.75, "top-region quantile for the overlap score"),
    # output
    "out": Key(str, "runs/default", "output directory"),
}


def parse_value(key: str, text: str) -> Any:
    if key not in SCHEMA:
        raise ConfigError(f"unknown config key {key!r}", key=key)
    spec = SCHEMA[key]
    try:
        value = spec.parse(text.strip())
    except (ValueError, ZeroDivisionError) as exc:
        raise ConfigError(f"{key}: {exc}", key=key) from None
    if spec.choices and value not in spec.choices:
        raise ConfigError(f"{key}: {value!r} is not one of {', '.join(spec.choices)}", key=key)
    return value


def read_file(path) -> dict[str, Any]:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}", key="config") from None
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value", key="config")
        key, _, raw = line.partition("=")
        values[key.strip()] = parse_value(key.strip(), raw)
    return values


def from_env(environ=None) -> dict[str, Any]:
    environ = os.environ if environ is None else environ
    values = {}
    for name, raw in environ.items():
        if name.startswith(ENV_PREFIX):
            values[name[len(ENV_PREFIX) :].lower()] = parse_value(name[len(ENV_PREFIX) :].lower(), raw)
    return values


@dataclass(frozen=True)
class RunConfig:
    values: dict

    def __getattr__(self, key):
        try:
            return self.__dict__["values"][key]
        except KeyError:
            raise AttributeError(key) from None

    @classmethod
    def resolve(cls, path=None, overrides: dict | None = None, environ=None) -> "RunConfig":
        values = {k: s.default for k, s in SCHEMA.items()}
        if path is not None:
            values.update(read_file(path))
        values.update(from_env(environ))
        for key, value in (overrides or {}).items():
            if key not in SCHEMA:
                raise ConfigError(f"unknown config key {key!r}", key=key)
            values[key] = value
        cfg = cls(values)
        cfg.validate()
        return cfg

    def validate(self) -> None:
        v = self.values
        if v["dataset"] != "two_patch" and not v["dataset_path"]:
            raise ConfigError(f"dataset={v['dataset']} needs dataset_path", key="dataset_path")
        if v["dataset_path"] and v["dataset"] != "two_patch" and not Path(v["dataset_path"]).is_dir():
            raise ConfigError(f"dataset_path {v['dataset_path']} is not a directory", key="dataset_path")
        for key in ("m", "epochs", "batch_size", "head_epochs", "head_batch_size", "workers", "two_patch_per_class"):
            if v[key] < 1:
                raise ConfigError(f"{key} must be >= 1", key=key)
        if v["k_per_class"] < 0:
            raise ConfigError("k_per_class must be >= 0", key="k_per_class")
        if not 0 <= v["cam_quantile"] < 1:
            raise ConfigError("cam_quantile must lie in [0, 1)", key="cam_quantile")
        unknown = set(v["augment"]) - set(TRANSFORMS)
        if unknown:
            raise ConfigError(f"unknown augmentation(s): {sorted(unknown)}", key="augment")
        if v["seeds"] and len(v["seeds"]) != v["m"] and v["init_strategy"] == "different":
            raise ConfigError("seeds must list m values", key="seeds")
        self.distance()

    def distance(self) -> DistanceSpec:
        return DistanceSpec(self.distance_kind, self.alpha, self.beta, self.epsilon)

    def ensemble(self, input_shape, n_classes: int) -> EnsembleConfig:
        arch = ArchSpec(self.family, self.width_scale, tuple(input_shape), n_classes)
        return EnsembleConfig(
            arch=arch,
            m=self.m,
            init_strategy=self.init_strategy,
            seeds=self.seeds or None,
            distance=self.distance(),
            distance_enabled=self.distance_enabled,
            epochs=self.epochs,
            learning_rate=self.learning_rate,
            batch_size=self.batch_size,
            optimizer=self.optimizer,
            augment=AugmentConfig(frozenset(self.augment)),
            rng_seed=self.seed,
            workers=self.workers,
        )

    def fusion(self, method: str | None = None) -> FusionSpec:
        return FusionSpec(
            method or self.fusion_method, self.head, self.head_epochs, self.head_lr, self.head_batch_size, self.seed
        )

    def to_text(self) -> str:
        return "".join(f"{k}={_fmt(self.values[k])}\n" for k in SCHEMA)

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())


def describe_schema() -> str:
    """Human-readable key list with defaults, for ``--help`` and docs."""
    rows = []
    for key, spec in SCHEMA.items():
        choices = f" [{'|'.join(spec.choices)}]" if spec.choices else ""
        rows.append(f"  {key}={_fmt(spec.default)}  {spec.doc}{choices}")
    return "\n".join(rows)
