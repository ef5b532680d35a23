"""Pairwise similarity penalties between feature representations.

The default penalty adds a weighted cosine similarity to a weighted
``exp(-squared euclidean distance)``; both parts are largest when the two
representations coincide, so minimising the penalty pushes them apart.
"""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from typing import Sequence

import numpy as np

from . import functional as F
from .autodiff import Tensor, as_tensor, exp, no_grad
from .errors import ConfigError, DimensionError

KINDS = ("cosine_plus_euclidean", "cosine_only", "euclidean_only", "ssim")


@dataclass(frozen=True)
class DistanceSpec:
    """``alpha`` weights the cosine term (and SSIM), ``beta`` the exp term."""

    kind: str = "cosine_plus_euclidean"
    alpha: float = 1.0
    beta: float = 10.0
    epsilon: float = 1e-8

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown distance kind {self.kind!r}", key="distance_kind")
        if self.alpha < 0 or self.beta < 0:
            raise ConfigError("distance weights must be non-negative", key="alpha" if self.alpha < 0 else "beta")
        if not self.epsilon > 0:
            raise ConfigError("epsilon must be positive", key="epsilon")

    @property
    def upper_bound(self) -> float:
        """Largest value one pair can contribute (non-negative inputs)."""
        if self.kind == "cosine_only":
            return self.alpha
        if self.kind == "euclidean_only":
            return self.beta
        if self.kind == "ssim":
            return self.alpha
        return self.alpha + self.beta


def cosine_term(vi, vj, epsilon: float = 1e-8) -> Tensor:
    vi, vj = as_tensor(vi), as_tensor(vj)
    dot = (vi * vj).sum(axis=-1)
    return dot / ((F.l2norm(vi) + epsilon) * (F.l2norm(vj) + epsilon))


def exp_euclidean_term(vi, vj) -> Tensor:
    diff = as_tensor(vi) - as_tensor(vj)
    return exp(-(diff * diff).sum(axis=-1))


def ssim_term(vi, vj, epsilon: float = 1e-8) -> Tensor:
    """Windowless SSIM between two maps given as flattened vectors.

    The dynamic range is the largest entry of either map (a constant of the
    forward pass), with the usual 0.01 / 0.03 stabilisers.
    """
    vi, vj = as_tensor(vi), as_tensor(vj)
    L = np.maximum(np.maximum(vi.data.max(axis=-1), vj.data.max(axis=-1)), epsilon)
    c1, c2 = (0.01 * L) ** 2, (0.03 * L) ** 2
    mu_i, mu_j = vi.mean(axis=-1, keepdims=True), vj.mean(axis=-1, keepdims=True)
    di, dj = vi - mu_i, vj - mu_j
    var_i, var_j = (di * di).mean(axis=-1), (dj * dj).mean(axis=-1)
    cov = (di * dj).mean(axis=-1)
    mu_i, mu_j = mu_i.sum(axis=-1), mu_j.sum(axis=-1)
    num = (2.0 * mu_i * mu_j + c1) * (2.0 * cov + c2)
    den = (mu_i * mu_i + mu_j * mu_j + c1) * (var_i + var_j + c2)
    return num / den


def pair_loss(vi, vj, spec: DistanceSpec = DistanceSpec()) -> Tensor:
    """Similarity penalty for one pair of vectors (or rows of two batches)."""
    vi, vj = as_tensor(vi), as_tensor(vj)
    if vi.shape != vj.shape:
        raise DimensionError(f"representation shapes differ: {vi.shape} vs {vj.shape}")
    if spec.kind == "ssim":
        return spec.alpha * ssim_term(vi, vj, spec.epsilon)
    total = None
    if spec.kind in ("cosine_plus_euclidean", "cosine_only"):
        total = spec.alpha * cosine_term(vi, vj, spec.epsilon)
    if spec.kind in ("cosine_plus_euclidean", "euclidean_only"):
        e = spec.beta * exp_euclidean_term(vi, vj)
        total = e if total is None else total + e
    return total


def pairs(m: int) -> list[tuple[int, int]]:
    return list(combinations(range(m), 2))


def ensemble_distance_loss(reps: Sequence, spec: DistanceSpec = DistanceSpec()) -> Tensor:
    """Sum of :func:`pair_loss` over the ``m(m-1)/2`` unordered pairs."""
    if len(reps) < 2:
        raise ConfigError("the distance loss needs at least two representations", key="m")
    shapes = {as_tensor(r).shape for r in reps}
    if len(shapes) != 1:
        raise DimensionError(f"representation shapes differ: {sorted(shapes)}")
    total = None
    for i, j in pairs(len(reps)):
        term = pair_loss(reps[i], reps[j], spec)
        total = term if total is None else total + term
    return total


def pairwise_report(reps: Sequence, spec: DistanceSpec = DistanceSpec()) -> np.ndarray:
    """Symmetric ``m x m`` matrix of pair losses (batch-averaged, no graph)."""
    m = len(reps)
    out = np.zeros((m, m))
    with no_grad():
        for i in range(m):
            for j in range(i, m):
                out[i, j] = out[j, i] = float(np.mean(pair_loss(reps[i], reps[j], spec).data))
    return out
