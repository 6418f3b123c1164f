"""Structural re-parametrization: algebraic conv fusions and graph rewrite passes.

Spec-level fusions work on :class:`ConvSpec` objects; graph passes find the
matching patterns and splice fused nodes in.  A fused node always takes the id
of the most downstream node it replaces, so consumers never need rewiring.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import graph as G
from .errors import FusionError
from .graph import Graph, OpNode
from .ops import NONE, Activation, ConvSpec
from .tensor import TensorF32

# -- spec algebra -------------------------------------------------------------------


def _require_linear(spec: ConvSpec, what: str):
    if spec.activation.kind != "none":
        raise FusionError(f"{what} has a {spec.activation.kind} activation; block is not linear")


def fuse_conv_then_1x1(c1: ConvSpec, c2: ConvSpec) -> ConvSpec:
    """Fold a 1x1 conv applied after ``c1`` into ``c1``.  Exact for any input."""
    _require_linear(c1, "first conv")
    if c2.kernel != 1:
        raise FusionError(f"second conv must be 1x1, got {c2.kernel}x{c2.kernel}")
    if c1.out_channels != c2.in_channels:
        raise FusionError(f"channel mismatch: {c1.out_channels} -> {c2.in_channels}")
    p = c2.weights[:, 0, 0, :].astype(np.float64)  # (O, M)
    w = np.einsum("om,muvi->ouvi", p, c1.weights.astype(np.float64))
    b = c2.bias.astype(np.float64) + p @ c1.bias.astype(np.float64)
    return ConvSpec(w, b, c2.activation)


def fuse_1x1_then_conv(c1: ConvSpec, c2: ConvSpec) -> ConvSpec:
    """Fold a 1x1 conv applied before ``c2`` into ``c2``.

    With SAME zero padding the unfused net pads the *intermediate* map while
    the fused one pads the input, so a nonzero ``c1`` bias would leak into the
    border taps of a k > 1 conv.  That case is refused.
    """
    _require_linear(c1, "first conv")
    if c1.kernel != 1:
        raise FusionError(f"first conv must be 1x1, got {c1.kernel}x{c1.kernel}")
    if c1.out_channels != c2.in_channels:
        raise FusionError(f"channel mismatch: {c1.out_channels} -> {c2.in_channels}")
    has_bias = bool(np.any(c1.bias))
    if has_bias and c2.kernel > 1:
        raise FusionError(
            "first conv has a nonzero bias: zero padding of the intermediate map "
            "makes the fused conv differ at image borders"
        )
    e = c1.weights[:, 0, 0, :].astype(np.float64)  # (M, I)
    w2 = c2.weights.astype(np.float64)
    w = np.einsum("ouvm,mi->ouvi", w2, e)
    b = c2.bias.astype(np.float64)
    if has_bias:
        b = b + w2[:, 0, 0, :] @ c1.bias.astype(np.float64)
    return ConvSpec(w, b, c2.activation)


def pad_kernel(spec: ConvSpec, k: int) -> np.ndarray:
    """Weights of ``spec`` zero-padded (centred) to a k x k kernel."""
    d = (k - spec.kernel) // 2
    if d < 0 or (k - spec.kernel) % 2:
        raise FusionError(f"cannot pad a {spec.kernel}x{spec.kernel} kernel to {k}x{k}")
    w = np.zeros((spec.out_channels, k, k, spec.in_channels), np.float64)
    w[:, d : d + spec.kernel, d : d + spec.kernel, :] = spec.weights
    return w


def merge_parallel_branches(specs, activation: Activation = NONE) -> ConvSpec:
    """Sum of parallel linear convs reading the same input, as one conv."""
    specs = list(specs)
    if not specs:
        raise FusionError("no branches to merge")
    cin, cout = specs[0].in_channels, specs[0].out_channels
    for s in specs:
        _require_linear(s, "branch")
        if (s.in_channels, s.out_channels) != (cin, cout):
            raise FusionError(
                f"branch channels {s.in_channels}->{s.out_channels} differ from {cin}->{cout}"
            )
    k = max(s.kernel for s in specs)
    w = sum(pad_kernel(s, k) for s in specs)
    b = sum(s.bias.astype(np.float64) for s in specs)
    return ConvSpec(w, b, activation)


def skip_to_identity_conv(c: ConvSpec, activation: Activation = NONE) -> ConvSpec:
    """Absorb a residual ``conv(x) + x`` into the conv's centre tap."""
    _require_linear(c, "conv")
    if c.in_channels != c.out_channels:
        raise FusionError(f"identity skip needs in == out channels, got {c.in_channels}->{c.out_channels}")
    w = c.weights.astype(np.float64)
    m = c.kernel // 2
    idx = np.arange(c.out_channels)
    w[idx, m, m, idx] += 1.0
    return ConvSpec(w, c.bias, activation)


def anchor_to_conv(times: int = 9, channels: int = 3) -> ConvSpec:
    """Frozen 1x1 conv equal to ``input_repeat(times)`` on ``channels`` channels.

    Output channel ``g * channels + c`` copies input channel ``c``, which is
    what depth_to_space needs to turn the stack into nearest upsampling.
    """
    block = int(round(np.sqrt(times)))
    if times < 1 or block * block != times:
        raise FusionError(
            f"anchor repeat {times} is not a square; depth_to_space cannot reorder it"
        )
    w = np.zeros((times * channels, 1, 1, channels), np.float32)
    for g in range(times):
        w[g * channels + np.arange(channels), 0, 0, np.arange(channels)] = 1.0
    return ConvSpec(w)


# -- graph surgery -----------------------------------------------------------------


def _single_use(g: Graph, nid: str, consumer: str) -> bool:
    if nid == g.output_id or nid == g.input_id:
        return False
    users = g.consumers(nid)
    return len(users) == 1 and users[0].id == consumer and users[0].inputs.count(nid) == 1


def _splice(g: Graph, remove: set[str], new: OpNode) -> Graph:
    """Drop ``remove`` nodes and put ``new`` where the node with its id was."""
    nodes = []
    for n in g.nodes:
        if n.id == new.id:
            nodes.append(new)
        elif n.id not in remove:
            nodes.append(n)
    return g.with_nodes(nodes)


def _insert_before(g: Graph, anchor_id: str, extra: list[OpNode]) -> Graph:
    nodes = []
    for n in g.nodes:
        if n.id == anchor_id:
            nodes.extend(extra)
        nodes.append(n)
    return g.with_nodes(nodes)


def _pass_anchor(g: Graph):
    applied = []
    for n in g.nodes:
        if n.op == "input_repeat":
            shapes = G.validate(g)
            src = n.inputs[0]
            ch = shapes[src].channels if src in shapes else g.in_channels
            g = _splice(g, set(), G.conv(n.id, src, anchor_to_conv(n.times, ch)))
            applied.append(n.id)
    return g, applied


def _pass_reorder_clip(g: Graph):
    applied = []
    changed = True
    while changed:
        changed = False
        for c in g.nodes:
            if c.op != "clip":
                continue
            src = c.inputs[0]
            if src == g.input_id or g[src].op != "depth_to_space" or not _single_use(g, src, c.id):
                continue
            d = g[src]
            # clip takes over d2s's input; d2s moves downstream under its own id
            new_clip = G.clip(c.id, d.inputs[0], c.lo, c.hi)
            new_d2s = G.depth_to_space(d.id, c.id, d.block)
            nodes = []
            for n in g.nodes:
                if n.id == d.id:
                    nodes.append(new_clip)
                elif n.id == c.id:
                    nodes.append(new_d2s)
                else:
                    if c.id in n.inputs:
                        n = n.with_inputs(*(d.id if s == c.id else s for s in n.inputs))
                    nodes.append(n)
            out = d.id if g.output_id == c.id else g.output_id
            g = g.with_nodes(nodes, out)
            applied.append(c.id)
            changed = True
            break
    return g, applied


def _pass_concat_conv(g: Graph):
    applied = []
    for cat in list(g.nodes):
        if cat.op != "concat" or cat.id not in g:
            continue
        users = g.consumers(cat.id)
        if len(users) != 1 or cat.id == g.output_id:
            continue
        cv = users[0]
        if cv.op != "conv2d" or cv.spec.kernel != 1 or cv.inputs.count(cat.id) != 1:
            continue
        shapes = G.validate(g)
        parts, off = [], 0
        for i, src in enumerate(cat.inputs):
            ch = shapes[src].channels if src != g.input_id else g.in_channels
            w = cv.spec.weights[:, :, :, off : off + ch]
            b = cv.spec.bias if i == 0 else np.zeros_like(cv.spec.bias)
            parts.append(G.conv(f"{cv.id}.part{i}", src, ConvSpec(w, b)))
            off += ch
        acts = [NONE] * (len(parts) - 2) + [cv.spec.activation]
        adds, prev = [], parts[0].id
        for i, part in enumerate(parts[1:], start=1):
            nid = cv.id if i == len(parts) - 1 else f"{cv.id}.sum{i}"
            adds.append(G.add(nid, prev, part.id, acts[i - 1]))
            prev = nid
        g = _splice(g, {cat.id}, adds[-1])
        g = _insert_before(g, cv.id, parts + adds[:-1])
        applied.append(cv.id)
    return g, applied


def _pass_fuse_chains(g: Graph):
    applied = []
    changed = True
    while changed:
        changed = False
        for q in g.nodes:
            if q.op != "conv2d" or q.inputs[0] == g.input_id:
                continue
            p = g[q.inputs[0]]
            if p.op != "conv2d" or p.spec.activation.kind != "none" or not _single_use(g, p.id, q.id):
                continue
            if q.spec.kernel == 1:
                spec = fuse_conv_then_1x1(p.spec, q.spec)
            elif p.spec.kernel == 1 and not np.any(p.spec.bias):
                spec = fuse_1x1_then_conv(p.spec, q.spec)
            else:
                continue
            g = _splice(g, {p.id}, G.conv(q.id, p.inputs[0], spec))
            applied.append(q.id)
            changed = True
            break
    return g, applied


def _pass_merge_branches(g: Graph):
    applied = []
    changed = True
    while changed:
        changed = False
        for a in g.nodes:
            if a.op != "add":
                continue
            x, y = a.inputs
            nx = g[x] if x in g else None
            ny = g[y] if y in g else None

            def linear_conv(n):
                return (n is not None and n.op == "conv2d" and n.spec.activation.kind == "none"
                        and _single_use(g, n.id, a.id))

            new = None
            if linear_conv(nx) and linear_conv(ny) and nx.inputs == ny.inputs \
                    and (nx.spec.in_channels, nx.spec.out_channels) == (ny.spec.in_channels, ny.spec.out_channels):
                new = G.conv(a.id, nx.inputs[0], merge_parallel_branches([nx.spec, ny.spec], a.activation))
                drop = {nx.id, ny.id}
            else:
                for conv_n, other in ((nx, y), (ny, x)):
                    if linear_conv(conv_n) and conv_n.inputs[0] == other \
                            and conv_n.spec.in_channels == conv_n.spec.out_channels:
                        new = G.conv(a.id, other, skip_to_identity_conv(conv_n.spec, a.activation))
                        drop = {conv_n.id}
                        break
            if new is None:
                continue
            g = _splice(g, drop, new)
            applied.append(a.id)
            changed = True
            break
    return g, applied


def rewrite_anchors(g: Graph) -> Graph:
    """Replace every ``input_repeat`` node with its frozen 1x1 conv."""
    return _pass_anchor(g)[0]


def reorder_clip_before_d2s(g: Graph) -> Graph:
    """Rewrite ``depth_to_space -> clip`` as ``clip -> depth_to_space``."""
    return _pass_reorder_clip(g)[0]


def concat_conv_to_sum(g: Graph) -> Graph:
    """Rewrite ``concat(a, b, ...) -> conv1x1`` as a sum of per-part 1x1 convs."""
    return _pass_concat_conv(g)[0]


def fuse_linear_chains(g: Graph) -> Graph:
    return _pass_fuse_chains(g)[0]


def merge_branches(g: Graph) -> Graph:
    return _pass_merge_branches(g)[0]


PASSES = {
    "anchor_to_conv": _pass_anchor,
    "reorder_clip_before_d2s": _pass_reorder_clip,
    "fuse_linear_chains": _pass_fuse_chains,
    "merge_branches": _pass_merge_branches,
    "concat_conv_to_sum": _pass_concat_conv,
}

# concat_conv_to_sum grows the node count, so it is opt-in
DEFAULT_PASSES = ("anchor_to_conv", "reorder_clip_before_d2s", "fuse_linear_chains", "merge_branches")


# -- equivalence probing ----------------------------------------------------------------


def probe_inputs(n: int = 10, height: int = 12, width: int = 12, channels: int = 3,
                 seed: int = 0) -> list[TensorF32]:
    """Corner delta images followed by uniform noise images in [0, 255)."""
    rng = np.random.default_rng(seed)
    corners = [(0, 0), (0, width - 1), (height - 1, 0), (height - 1, width - 1)]
    out = []
    for i in range(n):
        if i < len(corners):
            a = np.zeros((height, width, channels), np.float32)
            a[corners[i]] = 255.0
        else:
            a = rng.uniform(0, 255, size=(height, width, channels)).astype(np.float32)
        out.append(TensorF32(a))
    return out


def divergence(a: Graph, b: Graph, inputs) -> tuple[float, float]:
    """(max abs, max relative) output difference of two graphs over ``inputs``.

    Relative divergence is normalised by the largest reference magnitude.
    """
    max_abs, max_rel = 0.0, 0.0
    for x in inputs:
        ya = G.execute(a, x).data.astype(np.float64)
        yb = G.execute(b, x).data.astype(np.float64)
        d = float(np.max(np.abs(ya - yb)))
        ref = float(np.max(np.abs(ya)))
        max_abs = max(max_abs, d)
        max_rel = max(max_rel, d / ref if ref > 0 else d)
    return max_abs, max_rel


@dataclass
class RewriteReport:
    passes_applied: list = field(default_factory=list)  # [(pass name, [node ids])]
    node_count_before: int = 0
    node_count_after: int = 0
    max_abs_divergence: float = 0.0
    max_rel_divergence: float = 0.0
    n_probes: int = 0
    unfused: list = field(default_factory=list)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["passes_applied"] = [{"pass": p, "nodes": list(ids)} for p, ids in self.passes_applied]
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"


def collapse_graph(g: Graph, passes=DEFAULT_PASSES, n_probes: int = 10,
                   seed: int = 0) -> tuple[Graph, RewriteReport]:
    """Run ``passes`` to a fixed point and measure the output divergence."""
    G.validate(g)
    report = RewriteReport(node_count_before=len(g))
    out = g
    progress = True
    while progress:
        progress = False
        for name in passes:
            out, ids = PASSES[name](out)
            if ids:
                report.passes_applied.append((name, ids))
                progress = True
    G.validate(out)
    report.node_count_after = len(out)
    report.unfused = [n.id for n in out.nodes if n.op in ("add", "concat", "input_repeat")]
    if n_probes:
        probes = probe_inputs(n_probes, channels=g.in_channels, seed=seed)
        report.max_abs_divergence, report.max_rel_divergence = divergence(g, out, probes)
        report.n_probes = n_probes
    return out, report
