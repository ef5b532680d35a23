"""CNN ensembles trained under a pairwise feature distance loss.

Core pieces: a small reverse-mode autodiff engine (:mod:`fdloss.autodiff`),
convolutional layers and model families (:mod:`fdloss.layers`), the masked
aggregation representation and distance losses, joint training, feature
fusion and voting ensembles, and Grad-CAM diagnostics.
"""

from .autodiff import Tensor, backward, grad, no_grad
from .cam import grad_cam, overlap
from .distance import DistanceSpec, ensemble_distance_loss, pair_loss
from .features import represent
from .fusion import Ensemble, FusionSpec
from .layers import ArchSpec, build
from .trainer import EnsembleConfig, joint_loss, train

__version__ = "0.1.0"

__all__ = [
    "ArchSpec",
    "DistanceSpec",
    "Ensemble",
    "EnsembleConfig",
    "FusionSpec",
    "Tensor",
    "backward",
    "build",
    "ensemble_distance_loss",
    "grad",
    "grad_cam",
    "joint_loss",
    "no_grad",
    "overlap",
    "pair_loss",
    "represent",
    "train",
]
