"""Global feature representation of one base model's last conv activation.

The channels are summed into an aggregation map, entries not strictly above
the map's own mean are zeroed, and the result is flattened row-major.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import functional as F
from .autodiff import Tensor, as_tensor
from .errors import DimensionError


@dataclass
class FeatureRepresentation:
    aggregation: Tensor
    masked: Tensor
    tau: np.ndarray | float
    vector: Tensor


def aggregate(feature_maps) -> Tensor:
    """Pointwise channel sum: ``h x w x d -> h x w`` (batched: ``n x h x w x d``)."""
    fm = as_tensor(feature_maps)
    if fm.ndim not in (3, 4):
        raise DimensionError(f"aggregate expects h x w x d maps, got shape {fm.shape}")
    return fm.sum(axis=-1)


def mask(A) -> tuple[Tensor, np.ndarray | float]:
    """Keep entries strictly above the mean of each map; zero the rest.

    The threshold is a constant of the forward pass and receives no gradient.
    """
    A = as_tensor(A)
    if A.ndim not in (2, 3):
        raise DimensionError(f"mask expects an h x w map, got shape {A.shape}")
    # shift by the minimum so a constant map yields tau equal to its value exactly
    low = A.data.min(axis=(-2, -1), keepdims=True)
    tau = low + (A.data - low).mean(axis=(-2, -1), keepdims=True)
    masked = F.keep_where(A, A.data > tau)
    tau = tau.reshape(A.shape[:-2])
    return masked, float(tau) if tau.ndim == 0 else tau


def represent(feature_maps) -> FeatureRepresentation:
    A = aggregate(feature_maps)
    masked, tau = mask(A)
    lead = masked.shape[:-2]
    vector = masked.reshape(lead + (-1,))
    return FeatureRepresentation(A, masked, tau, vector)
