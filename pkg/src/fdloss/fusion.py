"""Combining trained base models into one classifier.

Feature-level methods run the frozen convolutional parts, fuse their last
activations and train a fresh head; voting methods combine the base models'
own predictions; stacking trains a softmax meta-learner on their
probabilities.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import functional as F
from .autodiff import Tensor, backward, concat, no_grad, relu
from .checkpoint import read_container, write_container
from .errors import ConfigError, DimensionError, FormatError, StateError
from .layers import LayerGraph, he_normal
from .optim import Adam

FUSION_METHODS = ("concat_fusion", "addition_fusion", "trainable_fusion", "pooling_approach")
METHODS = FUSION_METHODS + ("hard_vote", "soft_vote", "stacking")
HEADS = ("gap_then_dense", "flatten_then_dense")


@dataclass(frozen=True)
class FusionSpec:
    method: str = "concat_fusion"
    head: str = "gap_then_dense"
    head_epochs: int = 20
    head_lr: float = 1e-3
    batch_size: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ConfigError(f"unknown ensemble method {self.method!r}", key="fusion_method")
        if self.head not in HEADS:
            raise ConfigError(f"unknown head {self.head!r}", key="head")
        if self.head_epochs < 1:
            raise ConfigError("head_epochs must be >= 1", key="head_epochs")

    @property
    def needs_training(self) -> bool:
        return self.method not in ("hard_vote", "soft_vote")


def fuse_features(last_convs, method: str, params: dict | None = None) -> Tensor:
    """Fuse per-model ``h x w x d_i`` activations (batched or not).

    ``params`` must hold ``fuse.weight``/``fuse.bias`` for ``trainable_fusion``.
    """
    convs = [x if isinstance(x, Tensor) else Tensor(x) for x in last_convs]
    spatial = {x.shape[:-1] for x in convs}
    if len(spatial) != 1:
        raise DimensionError(f"spatial extents differ across models: {sorted(spatial)}")
    if method == "concat_fusion":
        return concat(convs, axis=-1)
    if method == "addition_fusion":
        if len({x.shape for x in convs}) != 1:
            raise DimensionError("addition fusion needs equal channel counts")
        out = convs[0]
        for x in convs[1:]:
            out = out + x
        return out
    if method == "trainable_fusion":
        if params is None:
            raise StateError("trainable fusion needs its 1x1 convolution parameters")
        return relu(F.conv2d(concat(convs, axis=-1), params["fuse.weight"], params["fuse.bias"]))
    if method == "pooling_approach":
        descriptors = []
        for x in convs:
            g = F.global_avg_pool(x)
            descriptors.append(g / (F.l2norm(g).reshape(g.shape[:-1] + (1,)) + 1e-8))
        return concat(descriptors, axis=-1)
    raise ConfigError(f"{method!r} is not a feature-fusion method", key="fusion_method")


class FusionHead:
    """Trainable part of a feature-fusion ensemble."""

    def __init__(self, spec: FusionSpec, channels: list[int], spatial: tuple[int, int], n_classes: int, seed: int = 0):
        if spec.method not in FUSION_METHODS:
            raise ConfigError(f"{spec.method!r} has no fusion head", key="fusion_method")
        self.spec, self.channels, self.spatial, self.n_classes = spec, list(channels), tuple(spatial), n_classes
        rng = np.random.default_rng(seed)
        shapes = {}
        depth = sum(channels)
        if spec.method == "addition_fusion":
            depth = channels[0]
        if spec.method == "trainable_fusion":
            width = max(channels)
            shapes["fuse.weight"] = (1, 1, depth, width)
            shapes["fuse.bias"] = (width,)
            depth = width
        if spec.method == "pooling_approach" or spec.head == "gap_then_dense":
            n_in = depth
        else:
            n_in = depth * spatial[0] * spatial[1]
        shapes["head.weight"] = (n_in, n_classes)
        shapes["head.bias"] = (n_classes,)
        self.params = {
            name: Tensor(np.zeros(s) if name.endswith("bias") else he_normal(s, rng), requires_grad=True, name=name)
            for name, s in shapes.items()
        }
        self.trained = False

    def forward(self, last_convs) -> Tensor:
        fused = fuse_features(last_convs, self.spec.method, self.params)
        if self.spec.method != "pooling_approach":
            fused = F.global_avg_pool(fused) if self.spec.head == "gap_then_dense" else F.flatten(fused)
        return F.dense(fused, self.params["head.weight"], self.params["head.bias"])

    def header(self) -> dict:
        return {
            "kind": "fusion_head",
            "method": self.spec.method,
            "head": self.spec.head,
            "channels": self.channels,
            "spatial": list(self.spatial),
            "n_classes": self.n_classes,
        }

    def save(self, path) -> None:
        write_container(path, self.header(), {n: t.data for n, t in self.params.items()})

    @classmethod
    def load(cls, path, spec: FusionSpec) -> "FusionHead":
        header, tensors = read_container(path)
        if header.get("kind") != "fusion_head" or header.get("method") != spec.method:
            raise FormatError(f"{path}: not a {spec.method} head")
        spec = FusionSpec(spec.method, header["head"], spec.head_epochs, spec.head_lr, spec.batch_size, spec.seed)
        head = cls(spec, header["channels"], tuple(header["spatial"]), header["n_classes"])
        for name, value in tensors.items():
            head.params[name] = Tensor(value, requires_grad=True, name=name)
        head.trained = True
        return head


class StackingMeta:
    """Softmax layer over the concatenated base-model probability vectors."""

    def __init__(self, m: int, n_classes: int, seed: int = 0):
        rng = np.random.default_rng(seed)
        self.m, self.n_classes = m, n_classes
        shape = (m * n_classes, n_classes)
        self.params = {
            "meta.weight": Tensor(he_normal(shape, rng), requires_grad=True, name="meta.weight"),
            "meta.bias": Tensor(np.zeros(n_classes), requires_grad=True, name="meta.bias"),
        }
        self.trained = False

    def forward(self, probs) -> Tensor:
        return F.dense(probs, self.params["meta.weight"], self.params["meta.bias"])

    def save(self, path) -> None:
        header = {"kind": "stacking_meta", "m": self.m, "n_classes": self.n_classes}
        write_container(path, header, {n: t.data for n, t in self.params.items()})

    @classmethod
    def load(cls, path) -> "StackingMeta":
        header, tensors = read_container(path)
        if header.get("kind") != "stacking_meta":
            raise FormatError(f"{path}: not a stacking meta-learner")
        meta = cls(header["m"], header["n_classes"])
        for name, value in tensors.items():
            meta.params[name] = Tensor(value, requires_grad=True, name=name)
        meta.trained = True
        return meta


def base_features(models: list[LayerGraph], images: np.ndarray, chunk: int = 256) -> list[np.ndarray]:
    """Frozen last-conv activations of every model, ``n x h x w x d`` each."""
    with no_grad():
        return [
            np.concatenate([mdl.features(images[i : i + chunk]).data for i in range(0, len(images), chunk)])
            for mdl in models
        ]


def base_probabilities(models: list[LayerGraph], images: np.ndarray, chunk: int = 256) -> np.ndarray:
    """``m x n x classes`` softmax outputs."""
    with no_grad():
        return np.stack(
            [
                np.concatenate([F.softmax(mdl.forward(images[i : i + chunk])[0]) for i in range(0, len(images), chunk)])
                for mdl in models
            ]
        )


def _fit(forward, params: dict, inputs, labels, n_classes, spec: FusionSpec, val=None):
    """Mini-batch Adam on cross entropy; keeps the best-validation parameters."""
    opt = Adam(list(params.values()), spec.head_lr)
    rng = np.random.default_rng(spec.seed)
    onehot = F.one_hot(labels, n_classes)
    n = len(labels)
    best = (-1.0, np.inf)
    best_state = {k: t.data.copy() for k, t in params.items()}
    history = []
    for _ in range(spec.head_epochs):
        order = rng.permutation(n)
        for lo in range(0, n, spec.batch_size):
            idx = order[lo : lo + spec.batch_size]
            opt.zero_grad()
            loss = F.softmax_cross_entropy(forward(inputs(idx)), onehot[idx]).mean()
            backward(loss)
            opt.step()
        with no_grad():
            train_ce = float(F.softmax_cross_entropy(forward(inputs(None)), onehot).data.mean())
        history.append(train_ce)
        if val is not None:
            vx, vy = val
            with no_grad():
                logits = forward(vx).data
            acc = float(np.mean(logits.argmax(axis=1) == vy))
            ce = float(F.softmax_cross_entropy(logits, F.one_hot(vy, n_classes)).data.mean())
            if acc > best[0] or (acc == best[0] and ce < best[1]):
                best = (acc, ce)
                best_state = {k: t.data.copy() for k, t in params.items()}
    if val is not None:
        for k, value in best_state.items():
            params[k].data[...] = value
    return history


def train_head(models: list[LayerGraph], spec: FusionSpec, dataset) -> FusionHead:
    """Train a fusion head on frozen base models (their parameters are untouched)."""
    xtr, ytr = dataset.split("train")
    xval, yval = dataset.split("val")
    feats = base_features(models, xtr)
    vfeats = base_features(models, xval) if len(yval) else []
    h, w = feats[0].shape[1:3]
    head = FusionHead(spec, [f.shape[-1] for f in feats], (h, w), models[0].spec.n_classes, seed=spec.seed)

    def inputs(idx):
        return [Tensor(f if idx is None else f[idx]) for f in feats]

    val = ([Tensor(f) for f in vfeats], yval) if len(yval) else None
    head.history = _fit(head.forward, head.params, inputs, ytr, head.n_classes, spec, val)
    head.trained = True
    return head


def train_stacking(models: list[LayerGraph], spec: FusionSpec, dataset) -> StackingMeta:
    """Fit the meta-learner on the validation split."""
    xval, yval = dataset.split("val")
    if len(yval) == 0:
        raise ConfigError("stacking needs a non-empty validation split", key="dataset")
    probs = base_probabilities(models, xval)
    flat = np.concatenate(list(probs), axis=1)
    meta = StackingMeta(len(models), models[0].spec.n_classes, seed=spec.seed)
    meta.history = _fit(
        meta.forward, meta.params, lambda idx: Tensor(flat if idx is None else flat[idx]), yval, meta.n_classes, spec
    )
    meta.trained = True
    return meta


def hard_vote(predictions: np.ndarray, n_classes: int) -> tuple[np.ndarray, np.ndarray]:
    """Modal class per column of an ``m x n`` label array; ties go to the lowest class."""
    predictions = np.asarray(predictions)
    counts = np.zeros((predictions.shape[1], n_classes))
    for row in predictions:
        counts[np.arange(len(row)), row] += 1
    return counts.argmax(axis=1), counts / predictions.shape[0]


def soft_vote(probabilities: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Argmax of the mean of ``m x n x classes`` probability vectors."""
    mean = np.asarray(probabilities).mean(axis=0)
    return mean.argmax(axis=-1), mean


class Ensemble:
    """Frozen base models plus whatever the chosen method needs on top."""

    def __init__(self, models: list[LayerGraph], spec: FusionSpec, head: FusionHead | None = None, meta: StackingMeta | None = None):
        if not models:
            raise ConfigError("an ensemble needs at least one model", key="m")
        self.models, self.spec, self.head, self.meta = models, spec, head, meta

    @property
    def n_classes(self) -> int:
        return self.models[0].spec.n_classes

    def fit(self, dataset) -> "Ensemble":
        if self.spec.method in FUSION_METHODS:
            self.head = train_head(self.models, self.spec, dataset)
        elif self.spec.method == "stacking":
            self.meta = train_stacking(self.models, self.spec, dataset)
        return self

    @property
    def ready(self) -> bool:
        if self.spec.method in FUSION_METHODS:
            return self.head is not None and self.head.trained
        if self.spec.method == "stacking":
            return self.meta is not None and self.meta.trained
        return True

    def predict_proba(self, images: np.ndarray) -> np.ndarray:
        if not self.ready:
            raise StateError(f"{self.spec.method} ensemble used before its head was trained")
        images = np.asarray(images, dtype=np.float64)
        method = self.spec.method
        if method in FUSION_METHODS:
            feats = base_features(self.models, images)
            with no_grad():
                return F.softmax(self.head.forward([Tensor(f) for f in feats]))
        probs = base_probabilities(self.models, images)
        if method == "soft_vote":
            return soft_vote(probs)[1]
        if method == "hard_vote":
            return hard_vote(probs.argmax(axis=-1), self.n_classes)[1]
        with no_grad():
            return F.softmax(self.meta.forward(Tensor(np.concatenate(list(probs), axis=1))))

    def predict_batch(self, images) -> tuple[np.ndarray, np.ndarray]:
        probs = self.predict_proba(images)
        return probs.argmax(axis=1), probs

    def predict(self, image) -> tuple[int, np.ndarray]:
        """Class and probability vector for one ``h x w x c`` image."""
        labels, probs = self.predict_batch(np.asarray(image, dtype=np.float64)[None])
        return int(labels[0]), probs[0]

    def save(self, directory, base_checkpoints: list[str]) -> Path:
        """Write the head (if any) and an ensemble manifest; return the manifest path."""
        directory = Path(directory)
        method = self.spec.method
        lines = [
            "format=fdloss-fusion-1",
            f"method={method}",
            f"head={self.spec.head}",
            f"head_epochs={self.spec.head_epochs}",
            f"head_lr={self.spec.head_lr!r}",
            f"batch_size={self.spec.batch_size}",
            f"seed={self.spec.seed}",
            f"m={len(base_checkpoints)}",
        ]
        lines += [f"model_{i}={p}" for i, p in enumerate(base_checkpoints)]
        if self.head is not None:
            self.head.save(directory / f"head_{method}.ckpt")
            lines.append(f"head_checkpoint=head_{method}.ckpt")
        if self.meta is not None:
            self.meta.save(directory / f"head_{method}.ckpt")
            lines.append(f"head_checkpoint=head_{method}.ckpt")
        path = directory / f"ensemble_{method}.txt"
        path.write_text("\n".join(lines) + "\n")
        return path


@dataclass
class Report:
    method: str
    split: str
    n: int
    accuracy: float
    per_class: dict[str, float]
    counts: dict[str, int]

    def to_text(self) -> str:
        lines = [f"method={self.method}", f"split={self.split}", f"n={self.n}", f"accuracy={self.accuracy!r}"]
        for name, acc in self.per_class.items():
            lines.append(f"class={name} n={self.counts[name]} accuracy={acc!r}")
        return "\n".join(lines) + "\n"


def evaluate(ensemble: Ensemble, images, labels, class_names, split: str = "test") -> Report:
    pred, _ = ensemble.predict_batch(images)
    labels = np.asarray(labels)
    per_class, counts = {}, {}
    for c, name in enumerate(class_names):
        sel = labels == c
        counts[name] = int(sel.sum())
        per_class[name] = float(np.mean(pred[sel] == c)) if sel.any() else float("nan")
    return Report(ensemble.spec.method, split, len(labels), float(np.mean(pred == labels)), per_class, counts)
