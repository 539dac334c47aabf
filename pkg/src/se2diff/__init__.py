"""Score-based SE(2) pose diffusion with a coarse-to-fine pick-and-place pipeline."""

__version__ = "0.1.0"

from .lie_se2 import Se2Pose, Twist, compose, exp_map, inverse, log_map

__all__ = [
    "Se2Pose",
    "Twist",
    "compose",
    "exp_map",
    "inverse",
    "log_map",
    "__version__",
]
