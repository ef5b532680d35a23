"""Grad-CAM heatmaps on the last convolutional activation, a top-quantile
IoU overlap score between heatmaps, and P6 export."""

from __future__ import annotations

from dataclasses import dataclass
from itertools import combinations
from pathlib import Path

import numpy as np

from .autodiff import Tensor, grad, no_grad
from .errors import DimensionError, ValidationError
from .layers import LayerGraph
from .ppm import write_ppm


@dataclass
class HeatMap:
    values: np.ndarray
    source_model: int
    class_id: int
    raw_max: float


def normalise(raw: np.ndarray) -> tuple[np.ndarray, float]:
    peak = float(raw.max()) if raw.size else 0.0
    if peak > 0:
        return raw / peak, peak
    return np.zeros_like(raw), 0.0


def grad_cam(model: LayerGraph, image: np.ndarray, class_id: int, source_model: int = 0) -> HeatMap:
    """Channel weights are the spatial means of d(logit)/d(activation)."""
    if not 0 <= class_id < model.spec.n_classes:
        raise ValidationError(f"class_id {class_id} outside [0, {model.spec.n_classes})")
    image = np.asarray(image, dtype=np.float64)
    if image.shape != model.spec.input_shape:
        raise DimensionError(f"image {image.shape} does not match {model.spec.input_shape}")
    with no_grad():
        fm = model.features(Tensor(image)).data
    tap = Tensor(fm, requires_grad=True)
    logits = model.head(tap)
    (dA,) = grad(logits[class_id], [tap])
    weights = dA.mean(axis=(0, 1))
    raw = np.maximum((tap.data * weights).sum(axis=-1), 0.0)
    values, peak = normalise(raw)
    return HeatMap(values, source_model, class_id, peak)


def top_region(values: np.ndarray, q: float) -> np.ndarray:
    """Entries strictly above the ``q``-quantile (all ties kept if none are)."""
    thr = np.quantile(values, q)
    region = values > thr
    if not region.any():
        region = values >= thr
    return region


def iou(a: np.ndarray, b: np.ndarray) -> float:
    union = np.logical_or(a, b).sum()
    return float(np.logical_and(a, b).sum() / union) if union else 0.0


def overlap(maps, q: float = 0.75) -> float:
    """Mean pairwise IoU of the maps' top-quantile regions, in ``[0, 1]``.

    A pair containing an all-zero map scores 0.
    """
    maps = list(maps)
    if len(maps) < 2:
        raise ValidationError("overlap needs at least two maps")
    arrays = [np.asarray(m.values if isinstance(m, HeatMap) else m) for m in maps]
    if len({a.shape for a in arrays}) != 1:
        raise DimensionError("heatmaps must share one shape")
    empty = [(m.raw_max == 0 if isinstance(m, HeatMap) else False) or not np.any(a) for m, a in zip(maps, arrays)]
    regions = [top_region(a, q) for a in arrays]
    scores = [0.0 if empty[i] or empty[j] else iou(regions[i], regions[j]) for i, j in combinations(range(len(maps)), 2)]
    return float(np.mean(scores))


def _jet(t: np.ndarray) -> np.ndarray:
    r = np.clip(1.5 - np.abs(4.0 * t - 3.0), 0.0, 1.0)
    g = np.clip(1.5 - np.abs(4.0 * t - 2.0), 0.0, 1.0)
    b = np.clip(1.5 - np.abs(4.0 * t - 1.0), 0.0, 1.0)
    return np.stack([r, g, b], axis=-1)


# Entry i colours the value i/255: piecewise-linear "jet" running dark
# blue -> cyan -> yellow -> dark red, each channel clip(1.5 - |4t - c|, 0, 1)
# with c = 3, 2, 1 for R, G, B, scaled to bytes and rounded.
RAMP = np.round(_jet(np.arange(256) / 255.0) * 255.0).astype(np.uint8)


def ramp_index(values: np.ndarray) -> np.ndarray:
    return np.round(np.clip(values, 0.0, 1.0) * 255.0).astype(np.intp)


def upscale_nearest(values: np.ndarray, h: int, w: int) -> np.ndarray:
    mh, mw = values.shape
    rows = (np.arange(h) * mh) // h
    cols = (np.arange(w) * mw) // w
    return values[rows][:, cols]


def render(heatmap: HeatMap | np.ndarray, image: np.ndarray | None = None) -> np.ndarray:
    """Colour the heatmap, upscale to the image, blend 50/50 when given."""
    values = heatmap.values if isinstance(heatmap, HeatMap) else np.asarray(heatmap)
    if image is None:
        return RAMP[ramp_index(values)]
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 2:
        image = image[..., None]
    if image.shape[2] == 1:
        image = np.repeat(image, 3, axis=2)
    colour = RAMP[ramp_index(upscale_nearest(values, *image.shape[:2]))].astype(np.float64)
    blended = 0.5 * colour + 0.5 * np.clip(image, 0.0, 1.0) * 255.0
    return np.round(blended).astype(np.uint8)


def export(heatmap: HeatMap | np.ndarray, image: np.ndarray | None, path) -> Path:
    path = Path(path)
    write_ppm(path, render(heatmap, image))
    return path
