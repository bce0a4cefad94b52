"""Central finite-difference checks for graph-built losses."""

from __future__ import annotations

from typing import Callable

import numpy as np

from kgaugment.numerics.tensor import Graph, Tensor

LossBuilder = Callable[[Graph, dict[str, Tensor]], Tensor]


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    scale = np.linalg.norm(analytic) + np.linalg.norm(numeric)
    if scale == 0.0:
        return 0.0
    return float(np.linalg.norm(analytic - numeric) / scale)


def evaluate_loss(build: LossBuilder, params: dict[str, np.ndarray]) -> float:
    graph = Graph()
    leaves = {name: graph.leaf(value, name=name) for name, value in params.items()}
    return float(build(graph, leaves).data)


def numerical_gradient(
    build: LossBuilder, params: dict[str, np.ndarray], name: str, step: float = 1e-5
) -> np.ndarray:
    base = {key: np.array(value, dtype=np.float64) for key, value in params.items()}
    target = base[name]
    grad = np.zeros_like(target)
    for index in np.ndindex(target.shape):
        original = target[index]
        target[index] = original + step
        upper = evaluate_loss(build, base)
        target[index] = original - step
        lower = evaluate_loss(build, base)
        target[index] = original
        grad[index] = (upper - lower) / (2.0 * step)
    return grad


def analytic_gradients(
    build: LossBuilder, params: dict[str, np.ndarray]
) -> dict[str, np.ndarray]:
    graph = Graph()
    leaves = {name: graph.leaf(value, name=name) for name, value in params.items()}
    graph.backward(build(graph, leaves))
    return {name: graph.grad(leaf) for name, leaf in leaves.items()}


def check_gradients(
    build: LossBuilder, params: dict[str, np.ndarray], step: float = 1e-5
) -> dict[str, float]:
    """Relative error between analytic and numeric gradient, per parameter."""
    analytic = analytic_gradients(build, params)
    return {
        name: relative_error(analytic[name], numerical_gradient(build, params, name, step))
        for name in params
    }
