"""Small-object detector built from partial convolutions, a BiFPN-style neck
and dual one-to-many / one-to-one heads, with a numpy autodiff engine."""

from .errors import ConfigError, DimensionError, NumericError, ParseError, TapeError
from .model import ABLATIONS, Detector, GraphConfig, ablation_config
from .tensor import Tensor, no_grad, set_default_dtype

__version__ = "0.1.0"

__all__ = [
    "ABLATIONS",
    "ConfigError",
    "DimensionError",
    "Detector",
    "GraphConfig",
    "NumericError",
    "ParseError",
    "TapeError",
    "Tensor",
    "ablation_config",
    "no_grad",
    "set_default_dtype",
]
