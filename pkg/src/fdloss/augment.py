"""Random label-preserving image transforms applied during training."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import ConfigError

TRANSFORMS = ("rotation", "hflip", "vflip", "laplace_noise", "translation")


@dataclass(frozen=True)
class AugmentConfig:
    enabled: frozenset = frozenset()
    rotation_deg: float = 15.0
    flip_p: float = 0.5
    laplace_scale: float = 0.02
    translate_frac: float = 0.1

    def __post_init__(self):
        unknown = set(self.enabled) - set(TRANSFORMS)
        if unknown:
            raise ConfigError(f"unknown augmentation(s): {sorted(unknown)}", key="augment")
        object.__setattr__(self, "enabled", frozenset(self.enabled))


def augment(image: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    """Apply each enabled transform independently to one ``h x w x c`` image.

    Transforms run in a fixed order (rotation, flips, translation, noise) so
    the draw sequence from ``rng`` is reproducible.
    """
    on = config.enabled
    if not on:
        return image
    out = image
    if "rotation" in on:
        angle = rng.uniform(-config.rotation_deg, config.rotation_deg)
        out = ndimage.rotate(out, angle, axes=(1, 0), reshape=False, order=1, mode="constant", cval=0.0)
    if "hflip" in on and rng.random() < config.flip_p:
        out = out[:, ::-1]
    if "vflip" in on and rng.random() < config.flip_p:
        out = out[::-1]
    if "translation" in on:
        h, w = out.shape[:2]
        dy = int(round(rng.uniform(-config.translate_frac, config.translate_frac) * h))
        dx = int(round(rng.uniform(-config.translate_frac, config.translate_frac) * w))
        out = ndimage.shift(out, (dy, dx, 0), order=0, mode="constant", cval=0.0)
    if "laplace_noise" in on:
        out = out + rng.laplace(0.0, config.laplace_scale, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def augment_batch(images: np.ndarray, rng: np.random.Generator, config: AugmentConfig) -> np.ndarray:
    if not config.enabled:
        return images
    return np.stack([augment(im, rng, config) for im in images])
