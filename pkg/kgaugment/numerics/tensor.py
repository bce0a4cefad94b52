"""
Taped reverse-mode graph over float64 arrays.

A Graph is rebuilt for every training step. Each op appends one Node, so the
node list is always in topological order and backward is a single reverse
sweep over it.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from kgaugment.errors import DimensionError, TrainingError

Backward = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


def _freeze(array: np.ndarray) -> np.ndarray:
    if array.flags.writeable:
        array.setflags(write=False)
    return array


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    value: np.ndarray
    backward: Backward | None
    requires_grad: bool
    name: str | None = None


class Tensor:
    """Handle to one node of a Graph; its data is read-only."""

    __slots__ = ("graph", "index")

    def __init__(self, graph: "Graph", index: int):
        self.graph = graph
        self.index = index

    @property
    def node(self) -> Node:
        return self.graph.nodes[self.index]

    @property
    def data(self) -> np.ndarray:
        return self.graph.nodes[self.index].value

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def requires_grad(self) -> bool:
        return self.node.requires_grad

    def __repr__(self) -> str:
        node = self.node
        label = node.name or node.op
        return f"Tensor({label}, shape={self.shape})"

    def __add__(self, other: "Tensor") -> "Tensor":
        from kgaugment.numerics import ops

        return ops.add(self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        from kgaugment.numerics import ops

        return ops.sub(self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        from kgaugment.numerics import ops

        return ops.mul(self, other)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        from kgaugment.numerics import ops

        return ops.matmul(self, other)


class Graph:
    def __init__(self) -> None:
        self.nodes: list[Node] = []
        self._grads: list[np.ndarray | None] | None = None

    def __len__(self) -> int:
        return len(self.nodes)

    def leaf(self, array, name: str | None = None, requires_grad: bool = True) -> Tensor:
        value = _freeze(np.array(array, dtype=np.float64))
        if not np.all(np.isfinite(value)):
            raise TrainingError(f"non-finite values in input {name or 'leaf'}")
        self.nodes.append(Node("leaf", (), value, None, requires_grad, name))
        return Tensor(self, len(self.nodes) - 1)

    def constant(self, array, name: str | None = None) -> Tensor:
        return self.leaf(array, name=name, requires_grad=False)

    def record(
        self, op: str, inputs: Sequence[Tensor], value: np.ndarray, backward: Backward
    ) -> Tensor:
        for tensor in inputs:
            if tensor.graph is not self:
                raise DimensionError(f"{op}: input {tensor!r} belongs to another graph")
        value = _freeze(np.asarray(value, dtype=np.float64))
        if not np.all(np.isfinite(value)):
            raise TrainingError(f"{op} produced non-finite values")
        requires_grad = any(self.nodes[t.index].requires_grad for t in inputs)
        self.nodes.append(
            Node(
                op,
                tuple(t.index for t in inputs),
                value,
                backward if requires_grad else None,
                requires_grad,
            )
        )
        return Tensor(self, len(self.nodes) - 1)

    def backward(self, loss: Tensor) -> None:
        if loss.graph is not self:
            raise DimensionError("loss belongs to another graph")
        if loss.data.size != 1:
            raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")

        grads: list[np.ndarray | None] = [None] * len(self.nodes)
        grads[loss.index] = np.ones_like(loss.data)

        for index in range(loss.index, -1, -1):
            upstream = grads[index]
            node = self.nodes[index]
            if upstream is None or node.backward is None:
                continue
            for input_index, input_grad in zip(node.inputs, node.backward(upstream)):
                if input_grad is None or not self.nodes[input_index].requires_grad:
                    continue
                current = grads[input_index]
                grads[input_index] = input_grad if current is None else current + input_grad

        self._grads = grads

    def grad(self, tensor: Tensor) -> np.ndarray:
        """Gradient of the last backward() loss; zeros where the loss never reached."""
        if self._grads is None:
            raise TrainingError("backward() has not been called on this graph")
        grad = self._grads[tensor.index]
        if grad is None:
            return np.zeros_like(tensor.data)
        return grad
