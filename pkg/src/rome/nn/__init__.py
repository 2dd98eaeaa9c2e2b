from .graph import ComputationGraph, GraphError, Node, backward, forward, load_graph, save_graph
from .losses import SaturationWarning, cross_entropy, softmax
from .optim import Adam, AdamState, adam_step, cosine_lr
from .tensor import NonFiniteError, Tensor

__all__ = [
    "Adam", "AdamState", "ComputationGraph", "GraphError", "Node", "NonFiniteError",
    "SaturationWarning", "Tensor", "adam_step", "backward", "cosine_lr", "cross_entropy",
    "forward", "load_graph", "save_graph", "softmax",
]
