from kgaugment.numerics.optim import OptimizerState, adam_step
from kgaugment.numerics.tensor import Graph, Node, Tensor

__all__ = ["Graph", "Node", "OptimizerState", "Tensor", "adam_step"]
