"""Explicit task routing with non-learnable primitives, on a small numpy autodiff engine."""

from .autodiff import Tensor, backward
from .etr import EtrModule, split_channels
from .nets import ArchConfig, Network, build_network, count_params_flops
from .primitives import DEFAULT_PRIMITIVES, NlpLayer, PrimitiveSpec

__version__ = "0.1.0"

__all__ = [
    "Tensor", "backward", "EtrModule", "split_channels", "ArchConfig", "Network",
    "build_network", "count_params_flops", "DEFAULT_PRIMITIVES", "NlpLayer", "PrimitiveSpec",
]
