"""Graph IR for plain SR networks: nodes, validation and the float executor."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field, replace
from typing import Iterable

from . import ops, parallel
from .errors import (
    ArityError,
    ChannelMismatchError,
    CycleError,
    DanglingInputError,
    DuplicateIdError,
    GraphDivisibilityError,
    GraphError,
    NpuSrError,
    ScaleMismatchError,
    UnreachableNodeError,
)
from .ops import NONE, Activation, ConvSpec
from .tensor import Shape, TensorF32, add_elementwise, clamp, concat_channels

OP_KINDS = ("conv2d", "add", "concat", "clip", "depth_to_space", "input_repeat")


class SpatialMismatchError(GraphError):
    pass


@dataclass(frozen=True, eq=False)
class OpNode:
    id: str
    op: str
    inputs: tuple[str, ...]
    spec: ConvSpec | None = None
    # ``add`` may carry a fused activation, mirroring NPU ADD kernels
    activation: Activation = NONE
    lo: float | None = None
    hi: float | None = None
    block: int | None = None
    times: int | None = None

    def __post_init__(self):
        if self.op not in OP_KINDS:
            raise NpuSrError(f"node {self.id!r}: unknown op {self.op!r}")
        object.__setattr__(self, "inputs", tuple(self.inputs))

    def with_inputs(self, *inputs: str) -> "OpNode":
        return replace(self, inputs=tuple(inputs))

    def same_as(self, other: "OpNode") -> bool:
        if (self.id, self.op, self.inputs, self.activation, self.lo, self.hi, self.block, self.times) != (
            other.id, other.op, other.inputs, other.activation, other.lo, other.hi, other.block, other.times
        ):
            return False
        if (self.spec is None) != (other.spec is None):
            return False
        return self.spec is None or self.spec.same_as(other.spec)

    def __repr__(self):
        extra = ""
        if self.op == "conv2d":
            extra = f" {self.spec!r}"
        elif self.op == "clip":
            extra = f" [{self.lo}, {self.hi}]"
        elif self.op == "depth_to_space":
            extra = f" block={self.block}"
        elif self.op == "input_repeat":
            extra = f" times={self.times}"
        elif self.op == "add" and self.activation.kind != "none":
            extra = f" act={self.activation.kind}"
        return f"<{self.op} {self.id!r} <- {list(self.inputs)}{extra}>"


def conv(id: str, src: str, spec: ConvSpec) -> OpNode:
    return OpNode(id, "conv2d", (src,), spec=spec)


def add(id: str, a: str, b: str, activation: Activation = NONE) -> OpNode:
    return OpNode(id, "add", (a, b), activation=activation)


def concat(id: str, *srcs: str) -> OpNode:
    return OpNode(id, "concat", srcs)


def clip(id: str, src: str, lo: float = 0.0, hi: float = 255.0) -> OpNode:
    return OpNode(id, "clip", (src,), lo=float(lo), hi=float(hi))


def depth_to_space(id: str, src: str, block: int = 3) -> OpNode:
    return OpNode(id, "depth_to_space", (src,), block=int(block))


def input_repeat(id: str, src: str, times: int = 9) -> OpNode:
    return OpNode(id, "input_repeat", (src,), times=int(times))


@dataclass(frozen=True, eq=False)
class Graph:
    nodes: tuple[OpNode, ...]
    output_id: str
    input_id: str = "input"
    scale: int = 3
    in_channels: int = 3
    _index: dict = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "nodes", tuple(self.nodes))
        object.__setattr__(self, "_index", {n.id: n for n in self.nodes})

    def __getitem__(self, node_id: str) -> OpNode:
        return self._index[node_id]

    def __contains__(self, node_id: str) -> bool:
        return node_id in self._index

    def __len__(self) -> int:
        return len(self.nodes)

    def consumers(self, node_id: str) -> list[OpNode]:
        return [n for n in self.nodes if node_id in n.inputs]

    def convs(self) -> list[OpNode]:
        return [n for n in self.nodes if n.op == "conv2d"]

    def n_params(self) -> int:
        return sum(n.spec.n_params for n in self.convs())

    def with_nodes(self, nodes: Iterable[OpNode], output_id: str | None = None) -> "Graph":
        return Graph(
            tuple(nodes),
            self.output_id if output_id is None else output_id,
            self.input_id,
            self.scale,
            self.in_channels,
        )

    def topo_order(self) -> list[OpNode]:
        """Nodes in dependency order (stable w.r.t. list order); raises on cycles."""
        order, state = [], {}

        def visit(nid, stack):
            s = state.get(nid)
            if s == "done":
                return
            if s == "active":
                raise CycleError(nid, f"cycle through {' -> '.join(stack + [nid])}")
            state[nid] = "active"
            node = self._index[nid]
            for src in node.inputs:
                if src != self.input_id and src in self._index:
                    visit(src, stack + [nid])
            state[nid] = "done"
            order.append(node)

        for n in self.nodes:
            visit(n.id, [])
        return order

    def summary(self) -> str:
        return "\n".join(repr(n) for n in self.topo_order())


def graphs_equal(a: Graph, b: Graph) -> bool:
    """Structural equality with bit-exact weights."""
    if (a.output_id, a.input_id, a.scale, a.in_channels, len(a)) != (
        b.output_id, b.input_id, b.scale, b.in_channels, len(b)
    ):
        return False
    return all(x.same_as(y) for x, y in zip(a.nodes, b.nodes))


_ARITY = {
    "conv2d": (1, 1),
    "clip": (1, 1),
    "depth_to_space": (1, 1),
    "input_repeat": (1, 1),
    "add": (2, 2),
    "concat": (2, None),
}


def validate(g: Graph, height: int = 1, width: int = 1) -> dict[str, Shape]:
    """Shape table for an ``height x width`` input.

    The default 1x1 input gives a symbolic table: every spatial size is the
    multiplier applied to the input size.
    """
    seen = {g.input_id}
    for n in g.nodes:
        if n.id in seen:
            raise DuplicateIdError(n.id, "duplicate node id")
        seen.add(n.id)
    for n in g.nodes:
        lo, hi = _ARITY[n.op]
        k = len(n.inputs)
        if k < lo or (hi is not None and k > hi):
            want = f"exactly {lo}" if lo == hi else f"at least {lo}"
            raise ArityError(n.id, f"{n.op} takes {want} input(s), got {k}")
        for src in n.inputs:
            if src not in seen:
                raise DanglingInputError(n.id, f"input {src!r} does not exist")
        if n.op == "conv2d" and n.spec is None:
            raise NpuSrError(f"node {n.id!r}: conv2d without a ConvSpec")
    if g.output_id not in g:
        raise DanglingInputError(g.output_id, "graph output does not exist")

    order = g.topo_order()

    # every node must feed the output
    live, stack = set(), [g.output_id]
    while stack:
        nid = stack.pop()
        if nid in live or nid == g.input_id:
            continue
        live.add(nid)
        stack.extend(g[nid].inputs)
    for n in g.nodes:
        if n.id not in live:
            raise UnreachableNodeError(n.id, "node does not contribute to the output")

    shapes = {g.input_id: Shape(height, width, g.in_channels).check()}
    for n in order:
        ins = [shapes[s] for s in n.inputs]
        shapes[n.id] = _infer(n, ins)
    out = shapes[g.output_id]
    want = Shape(height * g.scale, width * g.scale, g.in_channels)
    if out != want:
        raise ScaleMismatchError(
            g.output_id, f"output shape {tuple(out)} != expected {tuple(want)}"
        )
    del shapes[g.input_id]
    return shapes


def _infer(n: OpNode, ins: list[Shape]) -> Shape:
    if n.op == "conv2d":
        (s,) = ins
        if s.channels != n.spec.in_channels:
            raise ChannelMismatchError(
                n.id, f"conv expects {n.spec.in_channels} channels, input has {s.channels}"
            )
        return Shape(s.height, s.width, n.spec.out_channels)
    if n.op == "add":
        a, b = ins
        if a.channels != b.channels:
            raise ChannelMismatchError(n.id, f"add of {a.channels} and {b.channels} channels")
        if a[:2] != b[:2]:
            raise SpatialMismatchError(n.id, f"add of {a[:2]} and {b[:2]}")
        return a
    if n.op == "concat":
        hw = ins[0][:2]
        for s in ins[1:]:
            if s[:2] != hw:
                raise SpatialMismatchError(n.id, f"concat of {hw} and {s[:2]}")
        return Shape(hw[0], hw[1], sum(s.channels for s in ins))
    if n.op == "clip":
        if n.lo > n.hi:
            raise NpuSrError(f"node {n.id!r}: clip bounds inverted")
        return ins[0]
    if n.op == "depth_to_space":
        (s,) = ins
        b = n.block
        if b < 1 or s.channels % (b * b):
            raise GraphDivisibilityError(
                n.id, f"{s.channels} channels not divisible by block^2 = {b * b}"
            )
        return Shape(s.height * b, s.width * b, s.channels // (b * b))
    if n.op == "input_repeat":
        (s,) = ins
        return Shape(s.height, s.width, s.channels * n.times)
    raise AssertionError(n.op)


def run_node(n: OpNode, args: list[TensorF32]) -> TensorF32:
    if n.op == "conv2d":
        return ops.conv2d(args[0], n.spec)
    if n.op == "add":
        return ops.apply_activation(add_elementwise(*args), n.activation)
    if n.op == "concat":
        return concat_channels(args)
    if n.op == "clip":
        return clamp(args[0], n.lo, n.hi)
    if n.op == "depth_to_space":
        return ops.depth_to_space(args[0], n.block)
    if n.op == "input_repeat":
        return ops.input_repeat(args[0], n.times)
    raise AssertionError(n.op)


def last_uses(g: Graph, order: list[OpNode]) -> dict[str, int]:
    last = {}
    for i, n in enumerate(order):
        for src in n.inputs:
            last[src] = i
    return last


def execute(g: Graph, x: TensorF32, workers: int | None = None) -> TensorF32:
    """Evaluate ``g`` on ``x``; intermediate buffers are dropped after their last use."""
    h, w, c = x.shape
    if c != g.in_channels:
        raise NpuSrError(f"graph expects {g.in_channels} input channels, got {c}")
    validate(g, h, w)
    order = g.topo_order()
    last = last_uses(g, order)
    env = {g.input_id: x}
    ctx = parallel.workers(workers) if workers else contextlib.nullcontext()
    with ctx:
        for i, n in enumerate(order):
            env[n.id] = run_node(n, [env[s] for s in n.inputs])
            for src in set(n.inputs):
                if last[src] == i and src != g.output_id:
                    del env[src]
    return env[g.output_id]
