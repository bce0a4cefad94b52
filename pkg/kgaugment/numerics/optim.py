"""Adam over a dict of named float64 arrays."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from kgaugment.errors import DimensionError, TrainingError


@dataclass
class OptimizerState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first: dict[str, np.ndarray] = field(default_factory=dict)
    second: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(
    params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimizerState
) -> None:
    """
    One bias-corrected Adam update, in place on `params`.

    Parameters missing from `grads` are left untouched (frozen for this step).
    """
    for name, grad in grads.items():
        if name not in params:
            raise DimensionError(f"gradient for unknown parameter {name!r}")
        if grad.shape != params[name].shape:
            raise DimensionError(
                f"gradient for {name!r} has shape {grad.shape}, parameter has {params[name].shape}"
            )
        if not np.all(np.isfinite(grad)):
            raise TrainingError(f"non-finite gradient for parameter {name!r}")

    state.step += 1
    b1, b2 = state.beta1, state.beta2
    correction1 = 1.0 - b1**state.step
    correction2 = 1.0 - b2**state.step

    for name, grad in grads.items():
        first = state.first.get(name)
        second = state.second.get(name)
        if first is None:
            first = np.zeros_like(grad)
            second = np.zeros_like(grad)
        first = b1 * first + (1.0 - b1) * grad
        second = b2 * second + (1.0 - b2) * grad * grad
        state.first[name] = first
        state.second[name] = second

        update = (first / correction1) / (np.sqrt(second / correction2) + state.epsilon)
        params[name] = params[name] - state.learning_rate * update
