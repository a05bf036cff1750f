"""Attribute-axis convolutional networks in numpy.

Each hidden layer is a tensor over pixel position plus learned attribute
axes; all layer maps are n-d convolutions along those axes.
"""
from .config import AugmentationPolicy, DataConfig, NetworkConfig, RunConfig, Schedule
from .errors import ConfigError, DataError, HCNNError, NumericError, ShapeError
from .model import (Model, calibrate_buffers, count_parameters, forward, init_buffers,
                    init_params, load_checkpoint, predict, save_checkpoint, shape_schedule)
from .tensor import PERIODIC, ZERO, BoundaryMode, conv_nd, translate

__version__ = "0.1.0"

__all__ = [
    "AugmentationPolicy", "BoundaryMode", "ConfigError", "DataConfig", "DataError", "HCNNError",
    "Model", "NetworkConfig", "NumericError", "PERIODIC", "RunConfig", "Schedule", "ShapeError",
    "ZERO", "calibrate_buffers", "conv_nd", "count_parameters", "forward", "init_buffers",
    "init_params", "load_checkpoint", "predict", "save_checkpoint", "shape_schedule", "translate",
]
