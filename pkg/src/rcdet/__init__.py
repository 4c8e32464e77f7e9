"""Small three-scale anchor-free detector with CAFM and RCM blocks."""
__version__ = "0.1.0"

from .cafm import CAFM, ConfigError, channel_attention, channel_shuffle  # noqa: E402
from .detector import Detector, ModelConfig, build_model, count_params_flops  # noqa: E402
from .rcm import RCM, axial_context  # noqa: E402

__all__ = [
    "CAFM",
    "RCM",
    "ConfigError",
    "Detector",
    "ModelConfig",
    "axial_context",
    "build_model",
    "channel_attention",
    "channel_shuffle",
    "count_params_flops",
]
