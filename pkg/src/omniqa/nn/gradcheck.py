"""Central finite-difference verification of every layer's gradients.

All checks run in float64: finite differences at 32-bit precision cannot
resolve the 1e-4 relative-error bar these suites enforce.  Inputs for
kinked ops (relu, max pooling) are drawn away from their kinks so the
difference quotient never straddles one.
"""
from __future__ import annotations

from collections.abc import Callable

import numpy as np

from .layers import (
    BatchNorm,
    Conv2d,
    Dense,
    GlobalAvgPool,
    GlobalMaxPool,
    Layer,
    MaxPool2d,
    ReLU,
    Softplus,
)

DEFAULT_STEP = 1e-6


def max_rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst-coordinate relative error with a small-magnitude floor."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-3)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def fd_gradient(f: Callable[[], float], x: np.ndarray, h: float = DEFAULT_STEP) -> np.ndarray:
    """Central finite differences of scalar f with respect to array x in place."""
    grad = np.zeros_like(x, dtype=np.float64)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_layer(layer: Layer, x: np.ndarray, rng: np.random.Generator,
                train: bool = False) -> float:
    """Gradient check a single layer against a random linear readout loss.

    Checks d(loss)/d(input) and d(loss)/d(param) for every parameter, where
    loss = sum(r * forward(x)) with fixed random weights r.  Returns the
    worst relative error across all checked tensors.
    """
    x = np.asarray(x, dtype=np.float64)
    y0 = layer.forward(x.copy(), train=train)
    r = rng.normal(size=y0.shape)

    def loss() -> float:
        return float(np.sum(r * layer.forward(x, train=train)))

    for p in layer.params():
        p.zero_grad()
    layer.forward(x, train=train)
    gin = layer.backward(r.copy())

    worst = max_rel_error(gin, fd_gradient(loss, x))
    for p in layer.params():
        value = p.value

        def ploss() -> float:
            return float(np.sum(r * layer.forward(x, train=train)))

        worst = max(worst, max_rel_error(p.grad, fd_gradient(ploss, value)))
    return worst


def _away_from_zero(rng: np.random.Generator, shape, margin: float = 0.1) -> np.ndarray:
    """Random values with |x| >= margin (keeps relu kinks out of FD reach)."""
    return (rng.uniform(margin, 1.0, size=shape)
            * rng.choice([-1.0, 1.0], size=shape))


def _all_distinct(rng: np.random.Generator, shape) -> np.ndarray:
    """Random values whose pairwise gaps far exceed the FD step (for argmax ops)."""
    n = int(np.prod(shape))
    vals = (rng.permutation(n) + rng.uniform(-0.25, 0.25, size=n)) / n
    return vals.reshape(shape)


def run_op_suite(n_instances: int = 20, seed: int = 0) -> dict[str, float]:
    """Gradient-check every differentiable layer over random instances.

    Returns {op name: max relative error}; each entry aggregates
    n_instances independent random configurations.
    """
    rng = np.random.default_rng(seed)
    results: dict[str, float] = {}

    def record(name: str, err: float):
        results[name] = max(results.get(name, 0.0), err)

    for _ in range(n_instances):
        c_in, c_out = int(rng.integers(1, 4)), int(rng.integers(1, 5))
        k = int(rng.choice([1, 3]))
        stride = int(rng.choice([1, 2]))
        conv = Conv2d(c_in, c_out, k, stride, rng, dtype=np.float64)
        x = rng.normal(size=(2, c_in, 6, 6))
        record("conv2d", check_layer(conv, x, rng))

        pool = MaxPool2d(int(rng.choice([2, 3])), int(rng.choice([1, 2])))
        record("maxpool2d", check_layer(pool, _all_distinct(rng, (2, 2, 6, 6)), rng))

        bn2 = BatchNorm(5, dtype=np.float64)
        bn2.gamma.value[...] = rng.normal(1.0, 0.2, size=5)
        bn2.beta.value[...] = rng.normal(0.0, 0.2, size=5)
        record("batchnorm_train", check_layer(bn2, rng.normal(size=(6, 5)), rng, train=True))

        bn4 = BatchNorm(3, dtype=np.float64)
        bn4.running_mean[...] = rng.normal(size=3)
        bn4.running_var[...] = rng.uniform(0.5, 2.0, size=3)
        record("batchnorm_eval", check_layer(bn4, rng.normal(size=(2, 3, 4, 4)), rng))

        bn4t = BatchNorm(3, dtype=np.float64)
        record("batchnorm_spatial_train",
               check_layer(bn4t, rng.normal(size=(2, 3, 4, 4)), rng, train=True))

        record("relu", check_layer(ReLU(), _away_from_zero(rng, (3, 7)), rng))
        record("softplus", check_layer(Softplus(), 3.0 * rng.normal(size=(3, 7)), rng))

        f_in, f_out = int(rng.integers(2, 7)), int(rng.integers(1, 5))
        record("dense", check_layer(Dense(f_in, f_out, rng, dtype=np.float64),
                                    rng.normal(size=(3, f_in)), rng))

        record("global_maxpool",
               check_layer(GlobalMaxPool(), _all_distinct(rng, (2, 3, 4, 4)), rng))
        record("global_avgpool",
               check_layer(GlobalAvgPool(), rng.normal(size=(2, 3, 4, 4)), rng))
    return results
