"""Computation graphs: ordered DAGs of named NN operations.

Every network in the package (encoder, classifiers, APG, MPD) is a
:class:`ComputationGraph`.  The same node list drives training (via the
autodiff tape in :mod:`rome.nn.tensor`) and bound propagation in
:mod:`rome.verify`.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor


class GraphError(ValueError):
    pass


@dataclass
class Node:
    id: str
    op: str
    parents: list
    params: dict = field(default_factory=dict)
    attrs: dict = field(default_factory=dict)


def _op_input(node, xs):
    raise GraphError("input nodes are fed, not evaluated")


def _op_linear(node, xs):
    return T.linear(xs[0], node.params["W"], node.params.get("b"))


def _op_conv2d(node, xs):
    return T.conv2d(xs[0], node.params["W"], node.params.get("b"),
                    stride=node.attrs.get("stride", 1), padding=node.attrs.get("padding", 1))


def _op_relu(node, xs):
    return T.relu(xs[0])


def _op_avgpool(node, xs):
    return T.avg_pool2d(xs[0], node.attrs["kernel"])


def _op_add(node, xs):
    out = xs[0]
    for x in xs[1:]:
        out = T.add(out, x)
    return out


def _op_flatten(node, xs):
    return T.reshape(xs[0], (xs[0].shape[0], -1))


def _op_reshape(node, xs):
    return T.reshape(xs[0], (xs[0].shape[0], *node.attrs["shape"]))


def _op_concat(node, xs):
    return T.concat(xs, axis=1)


def _op_softmax(node, xs):
    return T.softmax(xs[0], axis=-1)


def _op_pam(node, xs):
    f, eps = xs
    n, c = f.shape[:2]
    a = T.mean(T.reshape(f, (n, c, -1)), axis=2)
    a_hat = T.concat([T.reshape(eps, (n, 1)), a], axis=1)
    p = node.params
    hidden = T.relu(T.linear(a_hat, p["W1"], p["b1"]))
    cal = T.minmax_normalize(T.linear(hidden, p["W2"], p["b2"]))
    return T.mul(f, T.reshape(cal, (n, c, 1, 1)))


def _op_lppg(node, xs):
    pm = xs[0]  # (batch, N, C)
    n, rows = pm.shape[:2]
    feats = [
        T.tsum(pm, axis=2),
        T.sqrt(T.tsum(T.square(pm), axis=2)),
        T.amax(pm, axis=2),
        T.amin(pm, axis=2),
    ]
    stacked = T.concat([T.reshape(f, (n, rows, 1)) for f in feats], axis=2)
    return T.reshape(stacked, (n, 4 * rows))


def _op_project_l2(node, xs):
    x, eps = xs
    return T.project_l2(x, eps.data.reshape(-1))


OPS = {
    "input": _op_input,
    "linear": _op_linear,
    "conv2d": _op_conv2d,
    "relu": _op_relu,
    "avgpool": _op_avgpool,
    "add": _op_add,
    "flatten": _op_flatten,
    "reshape": _op_reshape,
    "concat": _op_concat,
    "softmax": _op_softmax,
    "pam": _op_pam,
    "lppg": _op_lppg,
    "project_l2": _op_project_l2,
}


class ComputationGraph:
    """A DAG of nodes kept in topological order with one designated output.

    Graphs are exclusive-write while training; once trained they are treated
    as immutable and may be shared for read-only inference.
    """

    def __init__(self, inputs: dict, name: str = "graph"):
        self.name = name
        self.nodes: list[Node] = []
        self._index: dict[str, Node] = {}
        self.input_shapes = {k: tuple(v) for k, v in inputs.items()}
        self.input_ids = list(inputs)
        self.output_id = None
        self._cache = None
        self._out = None
        self._fed = None
        self._batched = True
        for k in self.input_ids:
            self._append(Node(k, "input", []))

    # ------------------------------------------------------------ building
    def _append(self, node):
        if node.id in self._index:
            raise GraphError(f"duplicate node id {node.id!r}")
        for p in node.parents:
            if p not in self._index:
                raise GraphError(f"node {node.id!r} references unknown parent {p!r}")
        self.nodes.append(node)
        self._index[node.id] = node
        self.output_id = node.id

    def add(self, op, parents, params=None, attrs=None, id=None) -> str:
        if op not in OPS:
            raise GraphError(f"unknown op kind {op!r}")
        if isinstance(parents, str):
            parents = [parents]
        node_id = id or f"{op}{len(self.nodes)}"
        params = {k: v if isinstance(v, Tensor) else Tensor(v, requires_grad=True)
                  for k, v in (params or {}).items()}
        self._append(Node(node_id, op, list(parents), params, dict(attrs or {})))
        return node_id

    def set_output(self, node_id):
        if node_id not in self._index:
            raise GraphError(f"unknown node {node_id!r}")
        self.output_id = node_id

    def node(self, node_id) -> Node:
        return self._index[node_id]

    # ------------------------------------------------------------ parameters
    def parameters(self) -> dict:
        return {f"{n.id}.{k}": t for n in self.nodes for k, t in n.params.items()}

    def freeze(self):
        for t in self.parameters().values():
            t.requires_grad = False
        return self

    def unfreeze(self):
        for t in self.parameters().values():
            t.requires_grad = True
        return self

    def zero_grad(self):
        for t in self.parameters().values():
            t.grad = None

    def num_parameters(self) -> int:
        return sum(t.data.size for t in self.parameters().values())

    # ------------------------------------------------------------ evaluation
    def __call__(self, *inputs: Tensor, cache=False) -> Tensor:
        """Evaluate on batched tensors, keeping the autodiff tape."""
        if len(inputs) != len(self.input_ids):
            raise GraphError(f"{self.name} expects {len(self.input_ids)} inputs, got {len(inputs)}")
        values = {}
        for k, x in zip(self.input_ids, inputs):
            x = T.as_tensor(x)
            if tuple(x.shape[1:]) != self.input_shapes[k]:
                raise GraphError(f"input {k!r}: expected (batch, {self.input_shapes[k]}), got {x.shape}")
            values[k] = x
        for node in self.nodes:
            if node.op == "input":
                continue
            try:
                values[node.id] = OPS[node.op](node, [values[p] for p in node.parents])
            except T.NonFiniteError as exc:
                raise T.NonFiniteError(f"{self.name}/{node.id}: {exc}") from None
        if cache:
            self._cache = values
        return values[self.output_id]

    def run(self, *arrays, batch_size=512) -> np.ndarray:
        """Inference on numpy batches without recording gradients."""
        arrays = [np.asarray(a, dtype=np.float64) for a in arrays]
        n = arrays[0].shape[0]
        saved = {k: t.requires_grad for k, t in self.parameters().items()}
        self.freeze()
        try:
            outs = [self(*[Tensor(a[i:i + batch_size]) for a in arrays]).data
                    for i in range(0, n, batch_size)]
        finally:
            for k, t in self.parameters().items():
                t.requires_grad = saved[k]
        return np.concatenate(outs, axis=0) if outs else np.zeros((0,))

    def node_shapes(self) -> dict:
        """Per-node output shapes (without the batch axis)."""
        zeros = [np.zeros((1, *self.input_shapes[k])) for k in self.input_ids]
        saved = {k: t.requires_grad for k, t in self.parameters().items()}
        self.freeze()
        try:
            self(*[Tensor(z) for z in zeros], cache=True)
            shapes = {k: v.shape[1:] for k, v in self._cache.items()}
        finally:
            for k, t in self.parameters().items():
                t.requires_grad = saved[k]
            self._cache = None
        return shapes

    def validate(self):
        seen = set()
        for n in self.nodes:
            for p in n.parents:
                if p not in seen:
                    raise GraphError(f"node {n.id!r} precedes its parent {p!r}")
            seen.add(n.id)
        if self.output_id not in seen:
            raise GraphError("graph has no output node")
        return True


# ------------------------------------------------------------------ forward / backward

def forward(graph: ComputationGraph, inputs) -> Tensor:
    """Evaluate ``graph`` and cache activations for :func:`backward`.

    Inputs may be given with or without a leading batch axis; an unbatched call
    returns an unbatched output.
    """
    if len(inputs) != len(graph.input_ids):
        raise GraphError(f"expected {len(graph.input_ids)} inputs, got {len(inputs)}")
    batched = None
    leaves = []
    for k, x in zip(graph.input_ids, inputs):
        x = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
        shape = graph.input_shapes[k]
        if x.shape == shape:
            b = False
            x = x[None]
        elif x.shape[1:] == shape:
            b = True
        else:
            raise GraphError(f"input {k!r}: shape {x.shape} does not match {shape}")
        if batched is not None and b != batched:
            raise GraphError("mixing batched and unbatched inputs")
        batched = b
        leaves.append(Tensor(x, requires_grad=True))
    graph.zero_grad()
    out = graph(*leaves, cache=True)
    if not batched:
        out = T.reshape(out, out.shape[1:])
    graph._out = out
    graph._fed = leaves
    graph._batched = batched
    return out


def backward(graph: ComputationGraph, upstream) -> dict:
    """Gradients of ``sum(upstream * output)`` for every parameter and input.

    Keys are ``"<node>.<param>"`` for parameters and the input ids for inputs.
    """
    if graph._out is None:
        raise GraphError("backward called before forward")
    upstream = np.asarray(upstream, dtype=np.float64)
    if upstream.shape != graph._out.shape:
        raise GraphError(f"upstream shape {upstream.shape} != output shape {graph._out.shape}")
    graph.zero_grad()
    for leaf in graph._fed:
        leaf.grad = None
    graph._out.backward(upstream)
    grads = {}
    for name, t in graph.parameters().items():
        grads[name] = np.zeros_like(t.data) if t.grad is None else t.grad
    for k, leaf in zip(graph.input_ids, graph._fed):
        g = np.zeros_like(leaf.data) if leaf.grad is None else leaf.grad
        grads[k] = g if graph._batched else g[0]
    return grads


# ------------------------------------------------------------------ checkpoints
#
# A checkpoint is a numpy ``.npz`` archive.  The entry ``__topology__`` holds a
# UTF-8 JSON document {"name", "inputs", "output", "nodes": [{"id", "op",
# "parents", "attrs", "params": [names]}]} where "inputs" is a list of
# [id, shape] pairs in feed order; every parameter is stored as a
# little-endian float64 array under the key "<node>.<param>".

def save_graph(graph: ComputationGraph, path):
    path = Path(path)
    topo = {
        "name": graph.name,
        "inputs": [[k, list(graph.input_shapes[k])] for k in graph.input_ids],
        "output": graph.output_id,
        "nodes": [{"id": n.id, "op": n.op, "parents": n.parents, "attrs": n.attrs,
                   "params": sorted(n.params)} for n in graph.nodes if n.op != "input"],
    }
    arrays = {k: np.ascontiguousarray(t.data, dtype="<f8") for k, t in graph.parameters().items()}
    arrays["__topology__"] = np.frombuffer(json.dumps(topo, sort_keys=True).encode(), dtype=np.uint8)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_graph(path) -> ComputationGraph:
    with np.load(path) as z:
        topo = json.loads(bytes(z["__topology__"]).decode())
        g = ComputationGraph({k: tuple(v) for k, v in topo["inputs"]}, name=topo["name"])
        for n in topo["nodes"]:
            attrs = {k: tuple(v) if isinstance(v, list) else v for k, v in n["attrs"].items()}
            params = {p: np.array(z[f"{n['id']}.{p}"], dtype=np.float64) for p in n["params"]}
            g.add(n["op"], n["parents"], params, attrs, id=n["id"])
        g.set_output(topo["output"])
    return g
