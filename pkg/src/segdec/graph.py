"""Declarative layer graph, shape inference and execution over the tape."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Mapping

import numpy as np

from . import ops
from .ops import ConvParams, RunningStats
from .tensor import Tensor

OPS = ("input", "conv", "deconv", "bn", "relu", "maxpool", "add")


class GraphError(ValueError):
    """Inconsistent wiring or shapes; the message names the node."""


@dataclass(frozen=True)
class NodeSpec:
    name: str
    op: str
    inputs: tuple[str, ...] = ()
    conv: ConvParams | None = None
    channels: int = 0  # bn only
    role: str = ""  # "branch_fuse" marks the merge of parallel kernel branches
    section: str = ""

    def __post_init__(self):
        if self.op not in OPS:
            raise GraphError(f"node {self.name!r}: unknown op {self.op!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def param_shapes(self) -> dict[str, tuple[int, int, int, int]]:
        if self.op in ("conv", "deconv"):
            p = self.conv
            out = {f"{self.name}.weight": p.weight_shape(transposed=self.op == "deconv")}
            if p.bias:
                out[f"{self.name}.bias"] = (1, p.out_channels, 1, 1)
            return out
        if self.op == "bn":
            return {f"{self.name}.gamma": (1, self.channels, 1, 1), f"{self.name}.beta": (1, self.channels, 1, 1)}
        return {}


@dataclass(frozen=True)
class Subgraph:
    """A run of nodes with one input port (an external node name) and one output."""

    nodes: tuple[NodeSpec, ...]
    input: str
    output: str

    def count(self, op: str) -> int:
        return sum(n.op == op for n in self.nodes)


@dataclass(frozen=True)
class NetworkGraph:
    nodes: tuple[NodeSpec, ...]
    output: str
    taps: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for node in self.nodes:
            if node.name in seen:
                raise GraphError(f"node {node.name!r}: duplicate name")
            for src in node.inputs:
                if src not in seen:
                    raise GraphError(f"node {node.name!r}: input {src!r} is not defined before it")
            seen.add(node.name)
        if self.output not in seen:
            raise GraphError(f"output {self.output!r} is not a node")
        inputs = [n.name for n in self.nodes if n.op == "input"]
        if len(inputs) != 1:
            raise GraphError(f"graph needs exactly one input node, found {inputs}")

    @property
    def input(self) -> str:
        return next(n.name for n in self.nodes if n.op == "input")

    @property
    def edges(self) -> list[tuple[str, str]]:
        return [(src, n.name) for n in self.nodes for src in n.inputs]

    def node(self, name: str) -> NodeSpec:
        for n in self.nodes:
            if n.name == name:
                return n
        raise KeyError(name)

    def param_shapes(self) -> dict[str, tuple[int, int, int, int]]:
        out: dict[str, tuple[int, int, int, int]] = {}
        for n in self.nodes:
            out.update(n.param_shapes())
        return out

    def bn_nodes(self) -> list[NodeSpec]:
        return [n for n in self.nodes if n.op == "bn"]

    def count(self, op: str) -> int:
        return sum(n.op == op for n in self.nodes)


def _shape_of(node: NodeSpec, ins: list[tuple[int, ...]]) -> tuple[int, int, int, int]:
    if node.op in ("conv", "deconv"):
        n, c, h, w = ins[0]
        p = node.conv
        if c != p.in_channels:
            raise GraphError(f"node {node.name!r}: receives {c} channels, expects {p.in_channels}")
        try:
            oh, ow = p.conv_out(h, w) if node.op == "conv" else p.deconv_out(h, w)
        except ValueError as exc:
            raise GraphError(f"node {node.name!r}: {exc}") from exc
        return (n, p.out_channels, oh, ow)
    if node.op == "bn":
        if ins[0][1] != node.channels:
            raise GraphError(f"node {node.name!r}: receives {ins[0][1]} channels, expects {node.channels}")
        return ins[0]
    if node.op == "relu":
        return ins[0]
    if node.op == "maxpool":
        n, c, h, w = ins[0]
        if h < 2 or w < 2:
            raise GraphError(f"node {node.name!r}: pool window exceeds input {(h, w)}")
        return (n, c, h // 2, w // 2)
    if node.op == "add":
        if len(ins) < 2:
            raise GraphError(f"node {node.name!r}: add needs >= 2 inputs")
        if len(set(ins)) != 1:
            raise GraphError(f"node {node.name!r}: add input shapes differ {ins}")
        return ins[0]
    raise GraphError(f"node {node.name!r}: cannot infer shape for op {node.op!r}")


def infer_shapes(graph: NetworkGraph | Iterable[NodeSpec], input_shape,
                 known: Mapping[str, tuple[int, ...]] | None = None) -> dict[str, tuple[int, int, int, int]]:
    """Shape of every node for a given input shape ((c, h, w) or (n, c, h, w)).

    ``known`` seeds shapes of external nodes when checking a fragment.
    """
    shape = tuple(input_shape)
    if len(shape) == 3:
        shape = (1,) + shape
    nodes = graph.nodes if isinstance(graph, NetworkGraph) else tuple(graph)
    table: dict[str, tuple[int, int, int, int]] = dict(known or {})
    for node in nodes:
        if node.op == "input":
            if node.channels and node.channels != shape[1]:
                raise GraphError(f"node {node.name!r}: input expects {node.channels} channels, got {shape[1]}")
            table[node.name] = shape
            continue
        missing = [s for s in node.inputs if s not in table]
        if missing:
            raise GraphError(f"node {node.name!r}: unknown inputs {missing}")
        table[node.name] = _shape_of(node, [table[s] for s in node.inputs])
    return table


# ---------------------------------------------------------------------------
# parameters and execution


def _feeds_relu(graph: NetworkGraph) -> set[str]:
    """Conv/deconv nodes whose output reaches a ReLU directly or through one BN."""
    users: dict[str, list[NodeSpec]] = {}
    for n in graph.nodes:
        for s in n.inputs:
            users.setdefault(s, []).append(n)
    out = set()
    for n in graph.nodes:
        nxt = users.get(n.name, [])
        if len(nxt) == 1 and nxt[0].op == "bn":
            nxt = users.get(nxt[0].name, [])
        if nxt and all(u.op == "relu" for u in nxt):
            out.add(n.name)
    return out


def init_params(graph: NetworkGraph, seed: int = 0, dtype=np.float64) -> dict[str, Tensor]:
    """Kaiming fan-in normal init for conv/deconv, zero bias, BN gamma=1 beta=0.

    The variance gain is 2 for layers followed by a ReLU and 1 for linear
    ones (projections, post-branch 1x1s, deconvolutions), so activations keep
    roughly unit scale in both cases.
    """
    rng = np.random.default_rng(seed)
    rectified = _feeds_relu(graph)
    params: dict[str, Tensor] = {}
    for node in graph.nodes:
        for pname, shape in node.param_shapes().items():
            kind = pname.rsplit(".", 1)[1]
            if kind == "weight":
                fan_in = node.conv.in_channels * node.conv.kernel[0] * node.conv.kernel[1]
                if node.op == "deconv":
                    fan_in //= node.conv.stride[0] * node.conv.stride[1]
                gain = 2.0 if node.name in rectified else 1.0
                arr = rng.standard_normal(shape) * np.sqrt(gain / max(fan_in, 1))
            elif kind == "gamma":
                arr = np.ones(shape)
            else:
                arr = np.zeros(shape)
            params[pname] = Tensor(arr.astype(dtype), name=pname, dtype=dtype)
    return params


def init_buffers(graph: NetworkGraph, dtype=np.float64) -> dict[str, RunningStats]:
    return {n.name: RunningStats.fresh(n.channels, dtype) for n in graph.bn_nodes()}


def forward(graph: NetworkGraph, params: Mapping[str, Tensor], x: Tensor, mode: str = "train",
            buffers: Mapping[str, RunningStats] | None = None, keep: bool = False):
    """Evaluate the graph. Returns the output tensor, or every node's tensor if ``keep``."""
    values: dict[str, Tensor] = {}
    for node in graph.nodes:
        args = [values[s] for s in node.inputs]
        if node.op == "input":
            out = x
        elif node.op == "conv":
            out = ops.conv2d(args[0], params[f"{node.name}.weight"], node.conv, params.get(f"{node.name}.bias"))
        elif node.op == "deconv":
            out = ops.transposed_conv2d(args[0], params[f"{node.name}.weight"], node.conv,
                                        params.get(f"{node.name}.bias"))
        elif node.op == "bn":
            stats = buffers.get(node.name) if buffers is not None else None
            out = ops.batch_norm(args[0], params[f"{node.name}.gamma"], params[f"{node.name}.beta"], stats,
                                 mode=mode)
        elif node.op == "relu":
            out = ops.relu(args[0])
        elif node.op == "maxpool":
            out = ops.maxpool2d(args[0])
        else:
            out = ops.fuse_add(args)
        values[node.name] = out
    return values if keep else values[graph.output]


def standalone(sub: Subgraph, channels: int) -> NetworkGraph:
    """Wrap a block subgraph into a runnable graph whose input feeds the block's port."""
    head = NodeSpec(sub.input, "input", channels=channels)
    return NetworkGraph((head,) + tuple(sub.nodes), sub.output)
