"""Joint training of ``m`` base models under cross entropy plus the pairwise
feature distance loss, with best-checkpoint retention by mean validation
accuracy."""

from __future__ import annotations

import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import functional as F
from .augment import TRANSFORMS, AugmentConfig, augment_batch
from .autodiff import Tensor, backward, no_grad
from .checkpoint import save_model, spec_to_dict
from .distance import DistanceSpec, ensemble_distance_loss, pairs, pairwise_report
from .errors import ConfigError, TrainingError
from .features import represent
from .layers import ArchSpec, LayerGraph, build
from .optim import make_optimizer

logger = logging.getLogger(__name__)

INIT_STRATEGIES = ("none", "same", "different")
MANIFEST_FORMAT = "fdloss-ensemble-1"


@dataclass(frozen=True)
class EnsembleConfig:
    arch: ArchSpec = ArchSpec()
    m: int = 5
    init_strategy: str = "different"
    seeds: tuple[int, ...] | None = None
    distance: DistanceSpec = DistanceSpec()
    distance_enabled: bool = True
    epochs: int = 300
    learning_rate: float = 1e-4
    batch_size: int = 32
    optimizer: str = "adam"
    augment: AugmentConfig = AugmentConfig(frozenset(TRANSFORMS))
    rng_seed: int = 0
    workers: int = 1

    def __post_init__(self):
        if self.m < 1:
            raise ConfigError("m must be >= 1", key="m")
        if self.init_strategy not in INIT_STRATEGIES:
            raise ConfigError(f"unknown init strategy {self.init_strategy!r}", key="init_strategy")
        if not self.learning_rate >= 0:
            raise ConfigError("learning_rate must be >= 0", key="learning_rate")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1", key="batch_size")
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1", key="epochs")
        if self.distance_enabled and self.m < 2:
            raise ConfigError("the distance loss needs m >= 2", key="m")
        seeds = self.resolved_seeds()
        if self.init_strategy == "different" and len(set(seeds)) != self.m:
            raise ConfigError("init_strategy=different needs m distinct seeds", key="seeds")

    def resolved_seeds(self) -> list[int | None]:
        if self.init_strategy == "none":
            return [None] * self.m
        if self.init_strategy == "same":
            return [self.seeds[0] if self.seeds else 1] * self.m
        return list(self.seeds) if self.seeds else list(range(1, self.m + 1))

    def describe(self) -> str:
        """Canonical ``key=value`` text, used for hashing."""
        items = {
            "arch": spec_to_dict(self.arch),
            "m": self.m,
            "init_strategy": self.init_strategy,
            "seeds": self.resolved_seeds(),
            "distance": (self.distance.kind, self.distance.alpha, self.distance.beta, self.distance.epsilon),
            "distance_enabled": self.distance_enabled,
            "epochs": self.epochs,
            "learning_rate": self.learning_rate,
            "batch_size": self.batch_size,
            "optimizer": self.optimizer,
            "augment": sorted(self.augment.enabled),
            "rng_seed": self.rng_seed,
        }
        return "\n".join(f"{k}={v!r}" for k, v in sorted(items.items()))

    def hash(self) -> str:
        return hashlib.sha256(self.describe().encode()).hexdigest()


@dataclass
class EpochMetrics:
    epoch: int
    ce: list[float]
    distance: float
    pairwise: np.ndarray
    val_acc: list[float]
    val_ce: list[float]
    best_epoch: int

    @property
    def mean_val_acc(self) -> float:
        return float(np.mean(self.val_acc))

    def log_line(self) -> str:
        fields = [f"epoch={self.epoch}"]
        fields += [f"ce_{i}={v!r}" for i, v in enumerate(self.ce)]
        fields.append(f"distance={self.distance!r}")
        fields += [f"pair_{i}_{j}={float(self.pairwise[i, j])!r}" for i, j in pairs(len(self.ce))]
        fields += [f"val_acc_{i}={v!r}" for i, v in enumerate(self.val_acc)]
        fields.append(f"val_acc_mean={self.mean_val_acc!r}")
        fields += [f"val_ce_{i}={v!r}" for i, v in enumerate(self.val_ce)]
        fields.append(f"best_epoch={self.best_epoch}")
        return " ".join(fields)


@dataclass
class RunRecord:
    epochs: list[EpochMetrics] = field(default_factory=list)
    best_epoch: int = 0
    wall_time: float = 0.0
    config_hash: str = ""

    @property
    def best_val_acc(self) -> float:
        return self.epochs[self.best_epoch - 1].mean_val_acc if self.best_epoch else float("nan")


@dataclass
class TrainResult:
    models: list[LayerGraph]
    record: RunRecord
    checkpoints: list[Path] = field(default_factory=list)
    manifest: Path | None = None


@dataclass
class JointLoss:
    total: Tensor
    ce: list[Tensor]
    distance: Tensor | None
    vectors: list[Tensor]


def init_models(config: EnsembleConfig) -> list[LayerGraph]:
    return [build(config.arch, seed) for seed in config.resolved_seeds()]


def _check_homogeneous(models) -> None:
    spec0 = models[0].spec
    for mdl in models[1:]:
        if mdl.spec.input_shape != spec0.input_shape or mdl.spec.n_classes != spec0.n_classes:
            raise ConfigError("all base models must share input shape and class count", key="arch")


def forward_all(models, x, workers: int = 1):
    """Per-model ``(logits, last_conv)``; optionally threaded, always in model order."""
    if workers > 1 and len(models) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda mdl: mdl.forward(x), models))
    return [mdl.forward(x) for mdl in models]


def compute_joint_loss(models, images, labels, config: EnsembleConfig) -> JointLoss:
    if not models:
        raise ConfigError("no models", key="m")
    if len(images) == 0:
        raise ConfigError("empty batch")
    _check_homogeneous(models)
    x = Tensor(images)
    onehot = F.one_hot(labels, models[0].spec.n_classes)
    outs = forward_all(models, x, config.workers)
    ce = [F.softmax_cross_entropy(logits, onehot).mean() for logits, _ in outs]
    vectors = [represent(tap).vector for _, tap in outs]
    total = ce[0]
    for term in ce[1:]:
        total = total + term
    dist = None
    if config.distance_enabled:
        dist = ensemble_distance_loss(vectors, config.distance).mean()
        total = total + dist
    return JointLoss(total, ce, dist, vectors)


def joint_loss(models, images, labels, config: EnsembleConfig) -> Tensor:
    """Sum of per-model mean cross entropy plus the batch-mean distance loss."""
    return compute_joint_loss(models, images, labels, config).total


def predict_logits(model: LayerGraph, images: np.ndarray, chunk: int = 256) -> np.ndarray:
    with no_grad():
        return np.concatenate([model.forward(images[i : i + chunk])[0].data for i in range(0, len(images), chunk)])


def accuracy(model: LayerGraph, images, labels) -> float:
    return float(np.mean(predict_logits(model, images).argmax(axis=1) == labels))


def evaluate(model: LayerGraph, images, labels) -> tuple[float, float]:
    """``(accuracy, mean cross entropy)`` on a labelled set."""
    logits = predict_logits(model, images)
    with no_grad():
        ce = F.softmax_cross_entropy(logits, F.one_hot(labels, logits.shape[1])).data
    return float(np.mean(logits.argmax(axis=1) == labels)), float(np.mean(ce))


def write_manifest(path: Path, checkpoints: list[Path], record: RunRecord, extra: dict | None = None) -> None:
    lines = [f"format={MANIFEST_FORMAT}", f"m={len(checkpoints)}"]
    lines += [f"model_{i}={p.name}" for i, p in enumerate(checkpoints)]
    lines += [f"config_hash={record.config_hash}", f"best_epoch={record.best_epoch}"]
    for k, v in (extra or {}).items():
        lines.append(f"{k}={v}")
    path.write_text("\n".join(lines) + "\n")


def train(config: EnsembleConfig, dataset, out_dir=None, models: list[LayerGraph] | None = None) -> TrainResult:
    """Train the ensemble; write checkpoints, manifest and metrics log to ``out_dir``."""
    xtr, ytr = dataset.split("train")
    xval, yval = dataset.split("val")
    if len(xtr) == 0 or len(xval) == 0:
        raise ConfigError("train and val splits must be non-empty", key="dataset")
    if tuple(xtr.shape[1:]) != config.arch.input_shape:
        raise ConfigError(f"dataset images {xtr.shape[1:]} do not match arch input {config.arch.input_shape}", key="arch")
    models = models if models is not None else init_models(config)
    if len(models) != config.m:
        raise ConfigError(f"expected {config.m} models, got {len(models)}", key="m")
    optimizers = [make_optimizer(config.optimizer, mdl.parameters(), config.learning_rate) for mdl in models]
    rng = np.random.default_rng(config.rng_seed)
    record = RunRecord(config_hash=config.hash())
    out_dir = Path(out_dir) if out_dir is not None else None
    log_path = None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "metrics.log"
        log_path.write_text("")
    best_state = [mdl.state() for mdl in models]
    best_acc, best_ce = -1.0, np.inf
    start = time.perf_counter()
    m = len(models)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(len(xtr))
        ce_sum = np.zeros(m)
        dist_sum = 0.0
        pair_sum = np.zeros((m, m))
        for b, lo in enumerate(range(0, len(order), config.batch_size)):
            idx = order[lo : lo + config.batch_size]
            xb = augment_batch(xtr[idx], rng, config.augment)
            for opt in optimizers:
                opt.zero_grad()
            jl = compute_joint_loss(models, xb, ytr[idx], config)
            ce_vals = [t.item() for t in jl.ce]
            dist_val = jl.distance.item() if jl.distance is not None else 0.0
            if not np.isfinite(jl.total.item()):
                raise TrainingError(
                    f"non-finite loss at epoch {epoch} batch {b}: ce={ce_vals} distance={dist_val}"
                )
            backward(jl.total)
            for opt in optimizers:
                opt.step()
            n = len(idx)
            ce_sum += np.array(ce_vals) * n
            dist_sum += dist_val * n
            if m > 1:
                pair_sum += pairwise_report([v.data for v in jl.vectors], config.distance) * n
        scores = [evaluate(mdl, xval, yval) for mdl in models]
        val_acc = [a for a, _ in scores]
        val_ce = [c for _, c in scores]
        mean_acc, mean_ce = float(np.mean(val_acc)), float(np.mean(val_ce))
        # accuracy ties go to the lower validation cross entropy
        if mean_acc > best_acc or (mean_acc == best_acc and mean_ce < best_ce):
            best_acc, best_ce = mean_acc, mean_ce
            record.best_epoch = epoch
            best_state = [mdl.state() for mdl in models]
        metrics = EpochMetrics(
            epoch, [float(v) for v in ce_sum / len(xtr)], float(dist_sum / len(xtr)), pair_sum / len(xtr), val_acc, val_ce,
            record.best_epoch,
        )
        record.epochs.append(metrics)
        logger.info(metrics.log_line())
        if log_path is not None:
            with log_path.open("a") as fh:
                fh.write(metrics.log_line() + "\n")

    for mdl, state in zip(models, best_state):
        mdl.load_state(state)
    record.wall_time = time.perf_counter() - start
    result = TrainResult(models, record)
    if out_dir is not None:
        for i, mdl in enumerate(models):
            path = out_dir / f"model_{i}.ckpt"
            save_model(path, mdl)
            result.checkpoints.append(path)
        result.manifest = out_dir / "manifest.txt"
        write_manifest(result.manifest, result.checkpoints, record)
    return result
