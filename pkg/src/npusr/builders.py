"""Builders for the challenge architectures in inference (and some training) form.

Trained weights are not available, so every builder fills its trainable
convolutions from a seeded He-normal draw with small uniform biases.  The same
seed always yields bit-identical weights.
"""

from __future__ import annotations

import numpy as np

from . import graph as G
from .graph import Graph, OpNode
from .ops import NONE, RELU, Activation, ConvSpec

SCALE = 3
OUT_CHANNELS = 3 * SCALE * SCALE  # 27


def he_conv(rng, k: int, cin: int, cout: int, activation: Activation = NONE,
            bias: bool = True) -> ConvSpec:
    std = np.sqrt(2.0 / (k * k * cin))
    w = rng.normal(0.0, std, size=(cout, k, k, cin))
    b = rng.uniform(-1.0, 1.0, size=cout) if bias else np.zeros(cout)
    return ConvSpec(w, b, activation)


def anchor_weights(times: int = SCALE * SCALE, channels: int = 3) -> np.ndarray:
    """OHWI weights of the frozen 1x1 anchor conv: ``times`` stacked identities."""
    w = np.zeros((times * channels, 1, 1, channels), np.float32)
    for g in range(times):
        for c in range(channels):
            w[g * channels + c, 0, 0, c] = 1.0
    return w


def _tail(nodes: list[OpNode], src: str) -> Graph:
    nodes.append(G.clip("clip", src, 0.0, 255.0))
    nodes.append(G.depth_to_space("d2s", "clip", SCALE))
    g = Graph(tuple(nodes), "d2s", scale=SCALE)
    G.validate(g)
    return g


def build_abpn(channels: int = 28, seed: int = 0) -> Graph:
    """Anchor-based plain net: 7 convs, residual over the 9x input anchor."""
    if channels < 1:
        raise ValueError("channels must be >= 1")
    rng = np.random.default_rng(seed)
    nodes = [G.conv("conv0", "input", he_conv(rng, 3, 3, channels, RELU))]
    prev = "conv0"
    for i in range(1, 5):
        nodes.append(G.conv(f"conv{i}", prev, he_conv(rng, 3, channels, channels, RELU)))
        prev = f"conv{i}"
    nodes.append(G.conv("conv5", prev, he_conv(rng, 3, channels, OUT_CHANNELS, RELU)))
    nodes.append(G.conv("conv6", "conv5", he_conv(rng, 3, OUT_CHANNELS, OUT_CHANNELS)))
    nodes.append(G.input_repeat("anchor", "input", SCALE * SCALE))
    nodes.append(G.add("residual", "conv6", "anchor"))
    return _tail(nodes, "residual")


def _rep_block(rng, nid: str, src: str, cin: int, cout: int, act: Activation) -> list[OpNode]:
    """Training-time Rep_Block: 3x3 + 1x1 (+ identity when cin == cout), summed."""
    nodes = [
        G.conv(f"{nid}.k3", src, he_conv(rng, 3, cin, cout)),
        G.conv(f"{nid}.k1", src, he_conv(rng, 1, cin, cout)),
    ]
    if cin == cout:
        nodes.append(G.add(f"{nid}.sum", f"{nid}.k3", f"{nid}.k1"))
        nodes.append(G.add(nid, f"{nid}.sum", src, act))
    else:
        nodes.append(G.add(nid, f"{nid}.k3", f"{nid}.k1", act))
    return nodes


def _scsrn(channels: int, body_layers: int, seed: int, expanded: bool) -> Graph:
    rng = np.random.default_rng(seed)
    nodes = [G.conv("head", "input", he_conv(rng, 3, 3, channels, RELU))]
    prev, cin = "head", channels
    middle = body_layers // 2
    for i in range(body_layers):
        nid = f"body{i}"
        if expanded:
            nodes.extend(_rep_block(rng, nid, prev, cin, channels, RELU))
        else:
            nodes.append(G.conv(nid, prev, he_conv(rng, 3, cin, channels, RELU)))
        prev, cin = nid, channels
        if i == middle:
            nodes.append(G.concat("skip", "input", prev))
            prev, cin = "skip", channels + 3
    nodes.append(G.conv("tail", prev, he_conv(rng, 3, cin, OUT_CHANNELS)))
    return _tail(nodes, "tail")


def build_scsrn_inference(channels: int = 32, body_layers: int = 7, seed: int = 0) -> Graph:
    """Skip-concatenated SR net with Rep_Blocks already collapsed.

    The input image is concatenated in front of the output of body layer
    ``body_layers // 2`` (0-based); the next conv therefore reads
    ``channels + 3`` channels.
    """
    return _scsrn(channels, body_layers, seed, expanded=False)


def build_scsrn_training(channels: int = 32, body_layers: int = 7, seed: int = 0) -> Graph:
    """Same topology as :func:`build_scsrn_inference`, body convs as Rep_Blocks."""
    return _scsrn(channels, body_layers, seed, expanded=True)


def build_ncnet(channels: int = 32, body_layers: int = 7, seed: int = 0) -> Graph:
    """Nearest-convolution net: trainable branch plus a frozen 1x1 anchor conv."""
    rng = np.random.default_rng(seed)
    nodes = [G.conv("conv0", "input", he_conv(rng, 3, 3, channels, RELU))]
    prev = "conv0"
    for i in range(1, body_layers - 1):
        nodes.append(G.conv(f"conv{i}", prev, he_conv(rng, 3, channels, channels, RELU)))
        prev = f"conv{i}"
    last = f"conv{body_layers - 1}"
    nodes.append(G.conv(last, prev, he_conv(rng, 3, channels, OUT_CHANNELS)))
    nodes.append(G.conv("nearest", "input", ConvSpec(anchor_weights())))
    nodes.append(G.add("residual", last, "nearest"))
    return _tail(nodes, "residual")


def build_plainnet(layers: int = 5, channels: int = 32, seed: int = 0) -> Graph:
    """Conv/ReLU chain without skips, ending in 27 channels."""
    if layers < 2:
        raise ValueError("plain net needs at least 2 layers")
    rng = np.random.default_rng(seed)
    nodes = [G.conv("conv0", "input", he_conv(rng, 3, 3, channels, RELU))]
    prev = "conv0"
    for i in range(1, layers - 1):
        nodes.append(G.conv(f"conv{i}", prev, he_conv(rng, 3, channels, channels, RELU)))
        prev = f"conv{i}"
    nodes.append(G.conv(f"conv{layers - 1}", prev, he_conv(rng, 3, channels, OUT_CHANNELS)))
    return _tail(nodes, f"conv{layers - 1}")


def build_dual_branch(channels: int = 32, seed: int = 0) -> Graph:
    """Stem conv, two 2-conv branches merged by add, reconstruction conv."""
    rng = np.random.default_rng(seed)
    c = channels
    nodes = [
        G.conv("stem", "input", he_conv(rng, 3, 3, c, RELU)),
        G.conv("left0", "stem", he_conv(rng, 3, c, c, RELU)),
        G.conv("left1", "left0", he_conv(rng, 3, c, c, RELU)),
        G.conv("right0", "stem", he_conv(rng, 3, c, c, RELU)),
        G.conv("right1", "right0", he_conv(rng, 3, c, c)),
        G.add("merge", "left1", "right1"),
        G.conv("recon", "merge", he_conv(rng, 3, c, OUT_CHANNELS)),
    ]
    return _tail(nodes, "recon")


def build_genmedia(channels: int = 28, seed: int = 0) -> Graph:
    """ABPN variant that joins branch and anchor by concat + 1x1 conv."""
    rng = np.random.default_rng(seed)
    nodes = [G.conv("conv0", "input", he_conv(rng, 3, 3, channels, RELU))]
    prev = "conv0"
    for i in range(1, 5):
        nodes.append(G.conv(f"conv{i}", prev, he_conv(rng, 3, channels, channels, RELU)))
        prev = f"conv{i}"
    nodes.append(G.conv("conv5", prev, he_conv(rng, 3, channels, OUT_CHANNELS)))
    nodes.append(G.input_repeat("anchor", "input", SCALE * SCALE))
    nodes.append(G.concat("join", "conv5", "anchor"))
    nodes.append(G.conv("fuse", "join", he_conv(rng, 1, 2 * OUT_CHANNELS, OUT_CHANNELS)))
    return _tail(nodes, "fuse")


def _clb(rng, nid: str, src: str, cin: int, cout: int, expand: int, act: Activation) -> list[OpNode]:
    """Collapsible linear block: 1x1 expand -> 3x3 -> 1x1 project (+ skip)."""
    mid = cin * expand
    skip = cin == cout
    nodes = [
        G.conv(f"{nid}.expand", src, he_conv(rng, 1, cin, mid, bias=False)),
        G.conv(f"{nid}.k3", f"{nid}.expand", he_conv(rng, 3, mid, mid)),
    ]
    if skip:
        nodes.append(G.conv(f"{nid}.project", f"{nid}.k3", he_conv(rng, 1, mid, cout)))
        nodes.append(G.add(nid, f"{nid}.project", src, act))
    else:
        nodes.append(G.conv(nid, f"{nid}.k3", he_conv(rng, 1, mid, cout, act)))
    return nodes


def build_clb_net(channels: int = 16, blocks: int = 3, expand: int = 4, seed: int = 0) -> Graph:
    """Training-form network made of collapsible linear blocks.

    After collapsing, every block becomes one plain 3x3 conv.
    """
    rng = np.random.default_rng(seed)
    nodes = _clb(rng, "clb0", "input", 3, channels, expand, RELU)
    prev = "clb0"
    for i in range(1, blocks):
        nodes.extend(_clb(rng, f"clb{i}", prev, channels, channels, expand, RELU))
        prev = f"clb{i}"
    nodes.extend(_clb(rng, "recon", prev, channels, OUT_CHANNELS, expand, NONE))
    return _tail(nodes, "recon")


BUILDERS = {
    "abpn": build_abpn,
    "scsrn": build_scsrn_inference,
    "scsrn-training": build_scsrn_training,
    "ncnet": build_ncnet,
    "plainnet": build_plainnet,
    "dual-branch": build_dual_branch,
    "genmedia": build_genmedia,
    "clb": build_clb_net,
}
