"""Named operator graphs over the tensor tape.

A ``Graph`` is an ordered list of operator nodes wired by name to graph
inputs, parameters and earlier nodes. Shapes are checked while the graph is
built, so a bad wiring fails at construction and names the node.
"""
from dataclasses import dataclass, field
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from autood.errors import AutoODError, ContractError, GraphConstructionError, NumericError
from autood.substrate import functional as F
from autood.substrate.tensor import Tensor, as_tensor, grad

# Operators that change behaviour between training and evaluation.
TRAINING_AWARE = {"batch_norm"}

OPS: Dict[str, Callable[..., Tensor]] = {
    "identity": F.linear,
    "dense": F.dense,
    "conv2d": F.conv2d,
    "conv_transpose2d": F.conv_transpose2d,
    "max_pool2d": F.max_pool2d,
    "avg_pool2d": F.avg_pool2d,
    "unpool_nearest": F.unpool_nearest,
    "batch_norm": F.batch_norm,
    "instance_norm": F.instance_norm,
    "softmax": F.softmax,
    "flatten": lambda x: as_tensor(x).reshape(x.shape[0], -1),
    **F.ACTIVATIONS,
}

DRY_RUN_BATCH = 2


@dataclass
class Node:
    name: str
    op: str
    inputs: Tuple[str, ...]
    attrs: Dict[str, Any] = field(default_factory=dict)
    shape: Tuple[int, ...] = ()


class Graph:
    def __init__(self, name: str = "graph"):
        self.name = name
        self.inputs: Dict[str, Tuple[int, ...]] = {}
        self.parameters: Dict[str, Tensor] = {}
        self.nodes: List[Node] = []
        self._shapes: Dict[str, Tuple[int, ...]] = {}

    def input(self, name: str, shape: Sequence[int]) -> str:
        """Declare an input; ``shape`` excludes the batch axis."""
        self._claim(name)
        self.inputs[name] = tuple(shape)
        self._shapes[name] = (DRY_RUN_BATCH,) + tuple(shape)
        return name

    def parameter(self, name: str, tensor: Tensor) -> str:
        self._claim(name)
        self.parameters[name] = tensor
        self._shapes[name] = tensor.shape
        return name

    def add(self, name: str, op: str, inputs: Sequence[str], **attrs) -> str:
        self._claim(name)
        if op not in OPS:
            raise GraphConstructionError(f"unknown operator '{op}'", node=name)
        missing = [i for i in inputs if i not in self._shapes]
        if missing:
            raise GraphConstructionError(f"unbound inputs {missing}", node=name)
        placeholders = [self.parameters[i] if i in self.parameters else Tensor(np.zeros(self._shapes[i]))
                        for i in inputs]
        try:
            out = _apply(op, placeholders, attrs, training=False)
        except AutoODError as exc:
            raise GraphConstructionError(exc.message, node=name, op=op) from exc
        except (ValueError, IndexError) as exc:
            raise GraphConstructionError(str(exc), node=name, op=op) from exc
        node = Node(name=name, op=op, inputs=tuple(inputs), attrs=dict(attrs), shape=out.shape[1:])
        self.nodes.append(node)
        self._shapes[name] = out.shape
        return name

    @property
    def edges(self) -> List[Tuple[str, str]]:
        return [(source, node.name) for node in self.nodes for source in node.inputs]

    def shape_of(self, name: str) -> Tuple[int, ...]:
        """Shape of an input, parameter or node output, batch axis excluded for activations."""
        if name in self.parameters:
            return self.parameters[name].shape
        return self._shapes[name][1:]

    def audit(self) -> List[Tuple[str, str]]:
        """(node, operator) pairs in evaluation order."""
        return [(node.name, node.op) for node in self.nodes]

    def _claim(self, name: str) -> None:
        if name in self._shapes:
            raise GraphConstructionError("name already used", node=name)


def _apply(op: str, args: List[Tensor], attrs: Mapping[str, Any], training: bool) -> Tensor:
    if op in TRAINING_AWARE:
        return OPS[op](*args, training=training, **attrs)
    return OPS[op](*args, **attrs)


def forward(graph: Graph, inputs: Mapping[str, Any], outputs: Optional[Sequence[str]] = None,
            training: bool = False) -> Dict[str, Tensor]:
    """Evaluate ``graph`` and return the requested node outputs (all nodes by default)."""
    missing = [name for name in graph.inputs if name not in inputs]
    if missing:
        raise ContractError(f"graph '{graph.name}' inputs not bound: {missing}")
    values: Dict[str, Tensor] = dict(graph.parameters)
    for name in graph.inputs:
        value = as_tensor(inputs[name])
        if value.shape[1:] != graph.inputs[name]:
            raise ContractError(f"input '{name}' has shape {value.shape[1:]}, expected {graph.inputs[name]}")
        values[name] = value
    for node in graph.nodes:
        try:
            values[node.name] = _apply(node.op, [values[i] for i in node.inputs], node.attrs, training)
        except NumericError as exc:
            raise NumericError(exc.message, where=f"{graph.name}/{node.name}") from exc
    wanted = outputs if outputs is not None else [node.name for node in graph.nodes]
    return {name: values[name] for name in wanted}


def backward(graph: Graph, loss: Tensor) -> Dict[str, np.ndarray]:
    """Gradient of a scalar loss with respect to every trainable graph parameter."""
    names = [name for name, tensor in graph.parameters.items() if tensor.requires_grad]
    return dict(zip(names, grad(loss, [graph.parameters[name] for name in names])))
