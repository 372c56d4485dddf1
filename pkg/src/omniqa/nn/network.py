"""Declarative layer specs and the sequential network builder."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

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
    Param,
    ReLU,
    Softplus,
)

KINDS = (
    "conv", "maxpool", "batchnorm", "dense", "softplus", "relu",
    "flatten", "global-maxpool", "global-avgpool",
)


@dataclass(frozen=True)
class LayerSpec:
    """One row of a network description.

    conv uses (channels, kernel, stride); maxpool uses (window, stride);
    dense uses features; the rest take no arguments.
    """

    kind: str
    channels: int = 0
    kernel: int = 0
    stride: int = 1
    window: int = 0
    features: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise NetworkError(f"unknown layer kind {self.kind!r}")


def conv(channels: int, kernel: int, stride: int = 1) -> LayerSpec:
    return LayerSpec("conv", channels=channels, kernel=kernel, stride=stride)


def maxpool(window: int, stride: int | None = None) -> LayerSpec:
    return LayerSpec("maxpool", window=window,
                     stride=stride if stride is not None else window)


def dense(features: int) -> LayerSpec:
    return LayerSpec("dense", features=features)


def batchnorm() -> LayerSpec:
    return LayerSpec("batchnorm")


def relu() -> LayerSpec:
    return LayerSpec("relu")


def softplus() -> LayerSpec:
    return LayerSpec("softplus")


def flatten() -> LayerSpec:
    return LayerSpec("flatten")


def global_maxpool() -> LayerSpec:
    return LayerSpec("global-maxpool")


def global_avgpool() -> LayerSpec:
    return LayerSpec("global-avgpool")


class Sequential:
    """A validated chain of layers with forward/backward and parameter access."""

    def __init__(self, layers: list[Layer], input_shape: tuple[int, ...],
                 output_shape: tuple[int, ...], name: str = "net"):
        self.layers = layers
        self.input_shape = input_shape
        self.output_shape = output_shape
        self.name = name

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def named_params(self) -> dict[str, Param]:
        return {p.name: p for p in self.params()}

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def zero_grad(self):
        for p in self.params():
            p.zero_grad()

    def forward(self, x: np.ndarray, train: bool = False) -> np.ndarray:
        from .layers import NumericError, finite_checks_enabled

        check = finite_checks_enabled()
        for layer in self.layers:
            x = layer.forward(x, train=train)
            if check and not np.all(np.isfinite(x)):
                raise NumericError(f"non-finite activations after {layer.name}")
        return x

    def backward(self, gout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            gout = layer.backward(gout)
        return gout


def build_network(
    specs: list[LayerSpec],
    input_shape: tuple[int, ...],
    seed: int = 0,
    dtype=np.float32,
    name: str = "net",
) -> Sequential:
    """Instantiate a spec chain, validating that shapes compose.

    Conv/dense weights get seeded He-normal initialization; batch-norm starts
    at gamma 1 / beta 0.  A malformed chain raises NetworkError naming the
    first offending layer.
    """
    rng = np.random.default_rng(seed)
    layers: list[Layer] = []
    shape = tuple(input_shape)
    for i, spec in enumerate(specs):
        lname = f"{name}.{i}_{spec.kind}"
        try:
            if spec.kind == "conv":
                if len(shape) != 3:
                    raise NetworkError(f"conv needs (C, H, W) input, got {shape}")
                layer = Conv2d(shape[0], spec.channels, spec.kernel, spec.stride,
                               rng, dtype=dtype, name=lname)
            elif spec.kind == "maxpool":
                if len(shape) != 3:
                    raise NetworkError(f"maxpool needs (C, H, W) input, got {shape}")
                layer = MaxPool2d(spec.window, spec.stride, name=lname)
            elif spec.kind == "batchnorm":
                channels = shape[0] if len(shape) == 3 else shape[-1]
                layer = BatchNorm(channels, dtype=dtype, name=lname)
            elif spec.kind == "dense":
                if len(shape) != 1:
                    raise NetworkError(f"dense needs flat input, got {shape}")
                layer = Dense(shape[0], spec.features, rng, dtype=dtype, name=lname)
            elif spec.kind == "relu":
                layer = ReLU()
            elif spec.kind == "softplus":
                layer = Softplus()
            elif spec.kind == "flatten":
                layer = Flatten()
            elif spec.kind == "global-maxpool":
                layer = GlobalMaxPool()
            elif spec.kind == "global-avgpool":
                layer = GlobalAvgPool()
            else:  # pragma: no cover - guarded by LayerSpec
                raise NetworkError(f"unknown kind {spec.kind}")
            shape = layer.output_shape(shape)
        except NetworkError as err:
            raise NetworkError(f"layer {i} ({spec.kind}): {err}") from None
        layer.name = lname
        layers.append(layer)
    return Sequential(layers, tuple(input_shape), shape, name=name)
