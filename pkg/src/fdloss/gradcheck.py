"""Analytic-versus-finite-difference gradient comparison.

A parameter is excluded when its central-difference step changes any
recorded branch decision (ReLU sign, max-pool winner, mask membership):
the loss is not differentiable across such a step.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .autodiff import Tensor, backward, no_grad, record_branches

DENOM_FLOOR = 1e-6


@dataclass
class GradCheck:
    analytic: np.ndarray
    numeric: np.ndarray
    excluded: np.ndarray

    @property
    def rel_errors(self) -> np.ndarray:
        a, n = self.analytic[~self.excluded], self.numeric[~self.excluded]
        return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), DENOM_FLOOR)

    @property
    def worst(self) -> float:
        err = self.rel_errors
        return float(err.max()) if err.size else 0.0

    def fraction_within(self, tol: float) -> float:
        err = self.rel_errors
        return float(np.mean(err < tol)) if err.size else 1.0

    def passed(self, tol: float = 1e-4, fraction: float = 0.99, worst_tol: float = 1e-3) -> bool:
        return self.fraction_within(tol) >= fraction and self.worst < worst_tol

    def summary(self) -> str:
        return (
            f"checked={int((~self.excluded).sum())} excluded={int(self.excluded.sum())} "
            f"within_1e-4={self.fraction_within(1e-4):.4f} worst={self.worst:.3e}"
        )


def _same_branches(a: list, b: list) -> bool:
    return len(a) == len(b) and all(x.shape == y.shape and np.array_equal(x, y) for x, y in zip(a, b))


def check_gradients(
    loss_fn: Callable[[], Tensor],
    params: Sequence[Tensor],
    reference: Callable[[], float] | None = None,
    h: float = 1e-4,
) -> GradCheck:
    """Compare ``backward(loss_fn())`` with central differences.

    ``reference`` (defaults to ``loss_fn``) is the function differenced
    numerically; pass an independent implementation to catch errors that
    the forward and backward passes would share.
    """
    for p in params:
        p.zero_grad()
    with record_branches() as base:
        loss = loss_fn()
    backward(loss)
    analytic = np.concatenate([np.zeros(p.size) if p.grad is None else p.grad.reshape(-1) for p in params])

    def evaluate() -> tuple[float, list]:
        with no_grad(), record_branches() as log:
            value = reference() if reference is not None else loss_fn().item()
            if reference is not None:
                loss_fn()
        return float(value), log

    numeric = np.zeros_like(analytic)
    excluded = np.zeros(analytic.shape, dtype=bool)
    k = 0
    for p in params:
        flat = p.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp, log_p = evaluate()
            flat[i] = orig - h
            fm, log_m = evaluate()
            flat[i] = orig
            numeric[k] = (fp - fm) / (2 * h)
            excluded[k] = not (_same_branches(base, log_p) and _same_branches(base, log_m))
            k += 1
    return GradCheck(analytic, numeric, excluded)
