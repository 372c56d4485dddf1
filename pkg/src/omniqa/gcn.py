"""Spatial viewport graph and graph-convolution stack.

Viewports become graph nodes; two nodes are joined when their viewing
directions are within 45 degrees (half the 90-degree field of view, i.e.
each center falls inside the other's window).  Propagation per layer is
softplus(batchnorm(A_hat @ H @ W)) with A_hat the symmetrically normalized
affinity, and the per-node scalars of the last layer are averaged into one
local quality score.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .nn.layers import BatchNorm, NetworkError, Param, Softplus
from .sphere import pairwise_angular_dist
from .viewpoint import ViewpointSet

AFFINITY_THRESHOLD_DEG = 45.0


@dataclass(frozen=True)
class ViewportGraph:
    """Binary affinity and its symmetric normalization for one viewpoint set."""

    affinity: np.ndarray
    normalized: np.ndarray

    @property
    def n(self) -> int:
        return self.affinity.shape[0]


def build_affinity(centers: ViewpointSet, threshold: float = AFFINITY_THRESHOLD_DEG) -> np.ndarray:
    """A[i, j] = 1 iff the great-circle angle between centers is <= threshold.

    The diagonal is always 1 (zero self-distance), so every node has a
    self-loop and all degrees are positive.
    """
    if len(centers) < 1:
        raise ValueError("affinity needs at least one viewpoint")
    dist = pairwise_angular_dist(centers.lons(), centers.lats())
    return (dist <= threshold).astype(np.float64)


def fov_rule_affinity(centers: ViewpointSet, fov: float = 90.0) -> np.ndarray:
    """Connect i and j when j's center lies inside i's field of view.

    A center is inside a square viewport's fov whenever its angular distance
    from the axis is at most fov / 2, so this coincides with build_affinity
    at threshold fov / 2.
    """
    if len(centers) < 1:
        raise ValueError("affinity needs at least one viewpoint")
    dist = pairwise_angular_dist(centers.lons(), centers.lats())
    inside = dist <= (fov / 2.0)
    # Symmetric by construction; keep the explicit or for clarity.
    return (inside | inside.T).astype(np.float64)


def normalize_adjacency(affinity: np.ndarray) -> np.ndarray:
    """D^(-1/2) A D^(-1/2) with D the diagonal row-sum matrix."""
    a = np.asarray(affinity, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"affinity must be square, got {a.shape}")
    if not np.allclose(a, a.T):
        raise ValueError("affinity must be symmetric")
    deg = a.sum(axis=1)
    if np.any(deg <= 0):
        raise ValueError("zero-degree node: self-loops are missing")
    inv_sqrt = 1.0 / np.sqrt(deg)
    return a * inv_sqrt[:, None] * inv_sqrt[None, :]


def build_graph(centers: ViewpointSet, threshold: float = AFFINITY_THRESHOLD_DEG) -> ViewportGraph:
    a = build_affinity(centers, threshold)
    return ViewportGraph(affinity=a, normalized=normalize_adjacency(a))


class GraphConvLayer:
    """One propagation step: softplus(batchnorm(A_hat @ H @ W)).

    The normalized adjacency is supplied per forward call (it changes with
    every image); weights and batch-norm state persist across calls.
    """

    def __init__(self, f_in: int, f_out: int, rng: np.random.Generator,
                 dtype=np.float32, name: str = "gcn"):
        std = np.sqrt(2.0 / f_in)
        self.name = name
        self.f_in, self.f_out = f_in, f_out
        self.weight = Param(f"{name}.weight",
                            rng.normal(0.0, std, size=(f_in, f_out)).astype(dtype))
        self.bn = BatchNorm(f_out, dtype=dtype, name=f"{name}.bn")
        self.act = Softplus()
        self._cache = None

    def params(self) -> list[Param]:
        return [self.weight] + self.bn.params()

    def buffers(self) -> dict[str, np.ndarray]:
        return self.bn.buffers()

    def forward(self, h: np.ndarray, a_hat: np.ndarray, train: bool = False) -> np.ndarray:
        if h.ndim != 2 or h.shape[1] != self.f_in:
            raise NetworkError(f"{self.name}: expected (n, {self.f_in}) features, got {h.shape}")
        if a_hat.shape != (h.shape[0], h.shape[0]):
            raise NetworkError(f"{self.name}: adjacency {a_hat.shape} does not match {h.shape[0]} nodes")
        hw = h @ self.weight.value
        z = a_hat @ hw
        self._cache = (h, a_hat)
        return self.act.forward(self.bn.forward(z, train=train), train=train)

    def backward(self, gout: np.ndarray) -> np.ndarray:
        h, a_hat = self._cache
        gz = self.bn.backward(self.act.backward(gout))
        ghw = a_hat.T @ gz
        self.weight.grad += h.T @ ghw
        return ghw @ self.weight.value.T


class GcnStack:
    """The five-layer quality aggregator ending in one scalar per node."""

    def __init__(self, dims: list[int], rng: np.random.Generator,
                 dtype=np.float32, name: str = "gcn"):
        if len(dims) < 2 or dims[-1] != 1:
            raise NetworkError(f"gcn dims must end in 1, got {dims}")
        self.dims = list(dims)
        self.layers = [
            GraphConvLayer(dims[i], dims[i + 1], rng, dtype=dtype, name=f"{name}.{i}")
            for i in range(len(dims) - 1)
        ]

    def params(self) -> list[Param]:
        return [p for layer in self.layers for p in layer.params()]

    def buffers(self) -> dict[str, np.ndarray]:
        out: dict[str, np.ndarray] = {}
        for layer in self.layers:
            out.update(layer.buffers())
        return out

    def forward(self, x: np.ndarray, a_hat: np.ndarray, train: bool = False) -> np.ndarray:
        h = x
        for layer in self.layers:
            h = layer.forward(h, a_hat, train=train)
        return h

    def backward(self, gout: np.ndarray) -> np.ndarray:
        for layer in reversed(self.layers):
            gout = layer.backward(gout)
        return gout


def gcn_forward(x: np.ndarray, graph: ViewportGraph, stack: GcnStack,
                train: bool = False) -> np.ndarray:
    """Run the stack over one graph; returns (n, 1) per-node scores."""
    if x.shape[0] != graph.n:
        raise NetworkError(f"feature rows {x.shape[0]} != graph nodes {graph.n}")
    return stack.forward(x, graph.normalized, train=train)


def aggregate(node_scores: np.ndarray) -> float:
    """Average pooling of per-node scalars into the local quality."""
    scores = np.asarray(node_scores)
    if scores.size == 0:
        raise ValueError("cannot aggregate an empty graph")
    return float(scores.mean())


def stack_gradient_check(n_instances: int = 20, seed: int = 0) -> float:
    """Finite-difference check of the stack's gradients (float64).

    Random graphs with self-loops, random features; checks d(loss)/dX and
    every layer weight and batch-norm parameter in train and eval mode.
    Returns the worst relative error observed.
    """
    from .nn.gradcheck import fd_gradient, max_rel_error

    rng = np.random.default_rng(seed)
    worst = 0.0
    done = 0
    attempt = 0
    while done < n_instances:
        attempt += 1
        if attempt > 40 * n_instances:
            raise RuntimeError("could not draw non-degenerate check instances")
        n = int(rng.integers(3, 7))
        a = (rng.random((n, n)) < 0.4).astype(np.float64)
        a = np.maximum(a, a.T)
        np.fill_diagonal(a, 1.0)
        a_hat = normalize_adjacency(a)
        dims = [6, 4, 3, 2, 1]
        stack = GcnStack(dims, rng, dtype=np.float64, name=f"gc{attempt}")
        for layer in stack.layers:
            layer.bn.running_mean[...] = rng.normal(size=layer.f_out) * 0.1
            layer.bn.running_var[...] = rng.uniform(0.5, 1.5, size=layer.f_out)
        x = rng.normal(size=(n, dims[0]))

        # Complete (or near-regular) graphs make every node identical after
        # one propagation step: batch variance collapses and the eps-guarded
        # normalization, while still smooth, has curvature far beyond what
        # central differences can resolve.  Check the gradient elsewhere.
        stack.forward(x, a_hat, train=True)
        min_var = min(
            float(np.min(1.0 / np.square(layer.bn._cache[1]) - layer.bn.eps))
            for layer in stack.layers
        )
        if min_var < 1e-2:
            continue
        done += 1
        for train in (True, False):
            r = rng.normal(size=(n, 1))

            def loss() -> float:
                return float(np.sum(r * stack.forward(x, a_hat, train=train)))

            for p in stack.params():
                p.zero_grad()
            stack.forward(x, a_hat, train=train)
            gin = stack.backward(r.copy())
            worst = max(worst, max_rel_error(gin, fd_gradient(loss, x)))
            for p in stack.params():
                worst = max(worst, max_rel_error(p.grad, fd_gradient(loss, p.value)))
    return worst


def write_graph_csv(path, graph: ViewportGraph) -> None:
    """Debug dump: affinity then normalized adjacency, blank-line separated."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        for row in graph.affinity:
            writer.writerow([f"{v:.0f}" for v in row])
        writer.writerow([])
        for row in graph.normalized:
            writer.writerow([f"{v:.12g}" for v in row])
