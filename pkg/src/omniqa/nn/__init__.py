"""Minimal differentiable network engine (numpy forward/backward + Adam)."""
from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    Flatten,
    GlobalAvgPool,
    GlobalMaxPool,
    Layer,
    MaxPool2d,
    NetworkError,
    NumericError,
    Param,
    ReLU,
    Softplus,
    finite_checks_enabled,
    set_finite_checks,
)
from .network import (
    LayerSpec,
    Sequential,
    batchnorm,
    build_network,
    conv,
    dense,
    flatten,
    global_avgpool,
    global_maxpool,
    maxpool,
    relu,
    softplus,
)
from .optim import Adam
from .gradcheck import check_layer, fd_gradient, max_rel_error, run_op_suite

__all__ = [
    "Adam", "BatchNorm", "Conv2d", "Dense", "Flatten", "GlobalAvgPool",
    "GlobalMaxPool", "Layer", "LayerSpec", "MaxPool2d", "NetworkError",
    "NumericError", "Param", "ReLU", "Sequential", "Softplus",
    "batchnorm", "build_network", "check_layer", "conv", "dense",
    "fd_gradient", "flatten", "global_avgpool", "global_maxpool",
    "maxpool", "max_rel_error", "relu", "run_op_suite",
    "set_finite_checks", "softplus",
]
