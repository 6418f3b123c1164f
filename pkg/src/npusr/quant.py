"""Post-training INT8 quantization and the integer execution engine.

Conventions
-----------
* Activations: asymmetric int8, ``real = scale * (q - zero_point)``, with the
  calibrated range widened to contain 0 and mapped onto [-128, 127].
* Weights: symmetric int8 in [-127, 127], zero point 0, one scale per output
  channel (default) or per tensor.
* Bias: int32 at scale ``s_in * s_w``.
* Requantization multiplier ``M = s_in * s_w / s_out`` is held as an int32
  mantissa and a shift, ``M ~= mantissa * 2**(shift - 31)``.
* Every rounding step is round-half-to-even.
"""

from __future__ import annotations

import contextlib
import json
import math
from dataclasses import dataclass, field

import numpy as np

from . import graph as G
from . import modelio, parallel
from .errors import AccumulatorOverflowError, ManifestFormatError, QuantizationError
from .graph import Graph, OpNode
from .metrics import psnr, to_uint8
from .ops import Activation, ConvSpec
from .tensor import QMAX, QMIN, QuantParams, TensorF32, TensorI8

INT32_MIN, INT32_MAX = -(2**31), 2**31 - 1
WEIGHT_QMAX = 127
MODES = ("per_channel", "per_tensor")


# -- calibration --------------------------------------------------------------------


@dataclass
class CalibrationRange:
    ranges: dict[str, tuple[float, float]] = field(default_factory=dict)

    def __getitem__(self, edge: str) -> tuple[float, float]:
        return self.ranges[edge]

    def params(self, edge: str) -> QuantParams:
        return params_from_range(*self.ranges[edge])


def params_from_range(lo: float, hi: float) -> QuantParams:
    """Asymmetric int8 params covering ``[lo, hi]`` (widened to include 0)."""
    lo, hi = min(float(lo), 0.0), max(float(hi), 0.0)
    if hi == lo:
        return QuantParams(1.0, QMIN)
    scale = (hi - lo) / (QMAX - QMIN)
    zp = int(np.clip(np.rint(QMIN - lo / scale), QMIN, QMAX))
    return QuantParams(scale, zp)


def _all_outputs(g: Graph, x: TensorF32) -> dict[str, TensorF32]:
    env = {g.input_id: x}
    for n in g.topo_order():
        env[n.id] = G.run_node(n, [env[s] for s in n.inputs])
    return env


def calibrate(g: Graph, images, input_range: tuple[float, float] | None = None) -> CalibrationRange:
    """Running per-edge min/max over float executions of ``images``.

    Clip outputs take the clip bounds; depth_to_space and input_repeat
    inherit their input's range since they only move values around.
    ``input_range`` pins the graph input edge instead of observing it.
    """
    images = list(images)
    if not images:
        raise QuantizationError("calibration set is empty")
    lo: dict[str, float] = {}
    hi: dict[str, float] = {}
    for img in images:
        x = img if isinstance(img, TensorF32) else TensorF32(img)
        for nid, t in _all_outputs(g, x).items():
            lo[nid] = min(lo.get(nid, math.inf), float(t.data.min()))
            hi[nid] = max(hi.get(nid, -math.inf), float(t.data.max()))
    if input_range is not None:
        lo[g.input_id], hi[g.input_id] = map(float, input_range)
    for n in g.topo_order():
        if n.op == "clip":
            lo[n.id], hi[n.id] = n.lo, n.hi
        elif n.op in ("depth_to_space", "input_repeat"):
            lo[n.id], hi[n.id] = lo[n.inputs[0]], hi[n.inputs[0]]
    return CalibrationRange({k: (min(lo[k], 0.0), max(hi[k], 0.0)) for k in lo})


# -- fixed point helpers ---------------------------------------------------------------


def quantize_multiplier(m: float) -> tuple[int, int]:
    """``m -> (mantissa, shift)`` with ``m ~= mantissa * 2**(shift - 31)``."""
    if m <= 0 or not math.isfinite(m):
        raise QuantizationError(f"multiplier must be positive, got {m}")
    frac, exp = math.frexp(m)  # m = frac * 2**exp, frac in [0.5, 1)
    mant = round(frac * (1 << 31))
    if mant == 1 << 31:
        mant //= 2
        exp += 1
    return mant, exp


def rounding_rshift(v: np.ndarray, n) -> np.ndarray:
    """``round_half_even(v / 2**n)`` on int64 arrays; ``n`` may broadcast."""
    v = np.asarray(v, np.int64)
    n = np.broadcast_to(np.asarray(n, np.int64), v.shape)
    left = n <= 0
    ns = np.where(left, 1, n)
    q = v >> ns
    r = v - (q << ns)
    half = np.int64(1) << (ns - 1)
    up = (r > half) | ((r == half) & ((q & 1) == 1))
    out = q + up
    if left.any():
        out = np.where(left, v << np.where(left, -n, 0), out)
    return out


def _requantize(diff: np.ndarray, mant, shift) -> np.ndarray:
    """``round(diff * M)`` for an integer ``diff`` and fixed point ``M``."""
    return rounding_rshift(diff.astype(np.int64) * np.asarray(mant, np.int64), 31 - np.asarray(shift, np.int64))


def _shared_multipliers(ms: list[float]) -> tuple[list[int], int]:
    """Mantissas for several multipliers over one common power of two.

    Returns ``(mantissas, n)`` with ``m_i ~= mantissa_i / 2**n``.
    """
    _, exp = math.frexp(max(ms))
    n = 31 - exp
    mants = [int(round(m * 2.0**n)) for m in ms]
    if max(mants) >= 1 << 31:
        n -= 1
        mants = [int(round(m * 2.0**n)) for m in ms]
    return mants, n


# -- weights ---------------------------------------------------------------------------


@dataclass(eq=False)
class QuantizedConvSpec:
    weights: np.ndarray  # int8 OHWI, symmetric
    weight_scales: np.ndarray  # float64 (O,)
    bias: np.ndarray  # int32 (O,)
    input_qp: QuantParams
    output_qp: QuantParams
    mantissas: np.ndarray  # int64 (O,), each < 2**31
    shifts: np.ndarray  # int64 (O,)
    activation: Activation
    mode: str = "per_channel"

    weight_zero_point = 0

    @property
    def kernel(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    def dequantized_weights(self) -> np.ndarray:
        return self.weights.astype(np.float64) * self.weight_scales[:, None, None, None]

    def dequantized_bias(self) -> np.ndarray:
        return self.bias.astype(np.float64) * self.input_qp.scale * self.weight_scales

    def to_float_spec(self) -> ConvSpec:
        return ConvSpec(self.dequantized_weights(), self.dequantized_bias(), self.activation)


def weight_scales(w: np.ndarray, mode: str = "per_channel") -> np.ndarray:
    """Symmetric scales ``max|w| / 127``; an all-zero channel gets scale 1."""
    if mode not in MODES:
        raise QuantizationError(f"unknown mode {mode!r}, expected one of {MODES}")
    w = np.asarray(w, np.float64)
    if mode == "per_channel":
        amax = np.abs(w.reshape(w.shape[0], -1)).max(axis=1)
    else:
        amax = np.full(w.shape[0], np.abs(w).max())
    s = amax / WEIGHT_QMAX
    return np.where(s > 0, s, 1.0)


def quantize_weights(spec: ConvSpec, mode: str = "per_channel",
                     input_qp: QuantParams | None = None,
                     output_qp: QuantParams | None = None) -> QuantizedConvSpec:
    input_qp = input_qp or QuantParams(1.0, 0)
    output_qp = output_qp or QuantParams(1.0, 0)
    w = spec.weights.astype(np.float64)
    s = weight_scales(w, mode)
    q = np.clip(np.rint(w / s[:, None, None, None]), -WEIGHT_QMAX, WEIGHT_QMAX).astype(np.int8)
    bias = np.clip(np.rint(spec.bias.astype(np.float64) / (input_qp.scale * s)), INT32_MIN, INT32_MAX)
    mults = [quantize_multiplier(input_qp.scale * sc / output_qp.scale) for sc in s]
    return QuantizedConvSpec(
        weights=q,
        weight_scales=s,
        bias=bias.astype(np.int32),
        input_qp=input_qp,
        output_qp=output_qp,
        mantissas=np.array([m for m, _ in mults], np.int64),
        shifts=np.array([e for _, e in mults], np.int64),
        activation=spec.activation,
        mode=mode,
    )


# -- graph ------------------------------------------------------------------------------


@dataclass(eq=False)
class QuantizedGraph:
    """Topology of the float graph plus int8 convs and per-edge params.

    ``graph`` holds the dequantized float weights, so it doubles as the
    float view of the quantized model.
    """

    graph: Graph
    convs: dict[str, QuantizedConvSpec]
    edges: dict[str, QuantParams]
    mode: str = "per_channel"

    @property
    def input_qp(self) -> QuantParams:
        return self.edges[self.graph.input_id]

    @property
    def output_qp(self) -> QuantParams:
        return self.edges[self.graph.output_id]

    def quantize_input(self, x: TensorF32) -> TensorI8:
        return TensorI8.from_float(x, self.input_qp)

    def check(self):
        """Producer and consumer of every edge must agree on its params."""
        for n in self.graph.nodes:
            if n.op == "conv2d":
                qc = self.convs[n.id]
                if qc.input_qp != self.edges[n.inputs[0]] or qc.output_qp != self.edges[n.id]:
                    raise QuantizationError(f"node {n.id!r}: conv params disagree with edge params")
                if np.any(np.abs(qc.weights.astype(np.int16)) > WEIGHT_QMAX):
                    raise QuantizationError(f"node {n.id!r}: weight outside [-127, 127]")
            elif n.op in ("depth_to_space", "input_repeat"):
                if self.edges[n.id] != self.edges[n.inputs[0]]:
                    raise QuantizationError(f"node {n.id!r}: permutation op must keep params")


def quantize_graph(g: Graph, calib: CalibrationRange, mode: str = "per_channel") -> QuantizedGraph:
    G.validate(g)
    edges = {g.input_id: calib.params(g.input_id)}
    for n in g.topo_order():
        if n.op in ("depth_to_space", "input_repeat"):
            edges[n.id] = edges[n.inputs[0]]
        else:
            edges[n.id] = calib.params(n.id)
    convs, nodes = {}, []
    for n in g.nodes:
        if n.op == "conv2d":
            qc = quantize_weights(n.spec, mode, edges[n.inputs[0]], edges[n.id])
            convs[n.id] = qc
            n = G.conv(n.id, n.inputs[0], qc.to_float_spec())
        nodes.append(n)
    qg = QuantizedGraph(g.with_nodes(nodes), convs, edges, mode)
    qg.check()
    return qg


def quantize_model(g: Graph, images, mode: str = "per_channel",
                   input_range: tuple[float, float] | None = (0.0, 255.0)) -> QuantizedGraph:
    """Calibrate on ``images`` and quantize.  Image inputs are pinned to [0, 255]."""
    return quantize_graph(g, calibrate(g, images, input_range), mode)


# -- integer execution --------------------------------------------------------------------


def _int_conv(n: OpNode, qc: QuantizedConvSpec, x: np.ndarray, debug: bool) -> np.ndarray:
    h, w, _ = x.shape
    k = qc.kernel
    p = k // 2
    # integer-valued float64: every product and partial sum stays far below
    # 2**53, so BLAS summation is exact and order independent
    diff = x.astype(np.float64) - qc.input_qp.zero_point
    xp = np.pad(diff, ((p, p), (p, p), (0, 0)))
    taps = np.ascontiguousarray(qc.weights.astype(np.float64).transpose(1, 2, 3, 0))
    out = np.empty((h, w, qc.out_channels), np.int8)
    lo, hi = _act_bounds(qc.activation, qc.output_qp)
    overflow = []

    def work(r0, r1):
        acc = np.zeros((r1 - r0, w, qc.out_channels), np.float64)
        for u in range(k):
            for v in range(k):
                acc += xp[r0 + u : r1 + u, v : v + w, :] @ taps[u, v]
        acc = acc.astype(np.int64) + qc.bias.astype(np.int64)
        if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
            if debug:
                overflow.append((r0, int(np.abs(acc).max())))
            acc = np.clip(acc, INT32_MIN, INT32_MAX)
        q = _requantize(acc, qc.mantissas, qc.shifts) + qc.output_qp.zero_point
        out[r0:r1] = np.clip(q, lo, hi)

    parallel.for_each_chunk(h, work)
    if overflow:
        r0, mag = overflow[0]
        raise AccumulatorOverflowError(n.id, f"int32 accumulator overflow (|acc| = {mag}) near row {r0}")
    return out


def _act_bounds(act: Activation, qp: QuantParams) -> tuple[int, int]:
    lo, hi = QMIN, QMAX
    if act.kind == "relu":
        lo = max(lo, qp.zero_point)
    elif act.kind == "clip":
        lo = max(lo, int(qp.quantize(act.lo)))
        hi = min(hi, int(qp.quantize(act.hi)))
    return lo, hi


def _rescale_sum(parts: list[tuple[np.ndarray, QuantParams]], out_qp: QuantParams,
                 act: Activation) -> np.ndarray:
    mants, nshift = _shared_multipliers([qp.scale / out_qp.scale for _, qp in parts])
    total = None
    for (q, qp), m in zip(parts, mants):
        term = (q.astype(np.int64) - qp.zero_point) * m
        total = term if total is None else total + term
    r = rounding_rshift(total, nshift) + out_qp.zero_point
    lo, hi = _act_bounds(act, out_qp)
    return np.clip(r, lo, hi).astype(np.int8)


def _int_node(qg: QuantizedGraph, n: OpNode, args: list[np.ndarray], debug: bool) -> np.ndarray:
    e = qg.edges
    if n.op == "conv2d":
        return _int_conv(n, qg.convs[n.id], args[0], debug)
    if n.op == "add":
        return _rescale_sum([(a, e[s]) for a, s in zip(args, n.inputs)], e[n.id], n.activation)
    if n.op == "concat":
        out_qp = e[n.id]
        return np.concatenate(
            [_rescale_sum([(a, e[s])], out_qp, Activation()) for a, s in zip(args, n.inputs)], axis=2
        )
    if n.op == "clip":
        return _rescale_sum([(args[0], e[n.inputs[0]])], e[n.id], Activation.clip(n.lo, n.hi))
    if n.op == "depth_to_space":
        h, w, c = args[0].shape
        b = n.block
        a = args[0].reshape(h, w, b, b, c // (b * b)).transpose(0, 2, 1, 3, 4)
        return np.ascontiguousarray(a.reshape(h * b, w * b, c // (b * b)))
    if n.op == "input_repeat":
        return np.tile(args[0], (1, 1, n.times))
    raise AssertionError(n.op)


def execute_int8(qg: QuantizedGraph, x: TensorI8, debug: bool = False,
                 workers: int | None = None) -> TensorI8:
    """Integer-only evaluation; bit-deterministic for any worker count."""
    g = qg.graph
    if x.qp != qg.input_qp:
        raise QuantizationError(f"input params {x.qp} do not match graph input {qg.input_qp}")
    h, w, _ = x.shape
    G.validate(g, h, w)
    order = g.topo_order()
    last = G.last_uses(g, order)
    env = {g.input_id: x.data}
    ctx = parallel.workers(workers) if workers else contextlib.nullcontext()
    with ctx:
        for i, n in enumerate(order):
            env[n.id] = _int_node(qg, n, [env[s] for s in n.inputs], debug)
            for src in set(n.inputs):
                if last[src] == i and src != g.output_id:
                    del env[src]
    return TensorI8(env[g.output_id], qg.output_qp)


# -- simulated quantization (float reference) ---------------------------------------------


def _fq(y: np.ndarray, qp: QuantParams, lo=QMIN, hi=QMAX) -> np.ndarray:
    return np.clip(np.rint(y / qp.scale) + qp.zero_point, lo, hi)


def _conv_f64(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    k = w.shape[1]
    p = k // 2
    h, wd, _ = x.shape
    xp = np.pad(x, ((p, p), (p, p), (0, 0)))
    out = np.zeros((h, wd, w.shape[0]))
    for u in range(k):
        for v in range(k):
            out += xp[u : u + h, v : v + wd, :] @ w[:, u, v, :].T
    return out + b


def simulate(qg: QuantizedGraph, x: TensorI8) -> TensorI8:
    """Fake-quant reference: dequantize, compute in float64, quantize, per op."""
    g, e = qg.graph, qg.edges
    env = {g.input_id: x.data.astype(np.float64)}
    for n in g.topo_order():
        ins = [env[s] for s in n.inputs]
        real = [e[s].dequantize(a) for s, a in zip(n.inputs, ins)]
        out_qp = e[n.id]
        if n.op == "conv2d":
            qc = qg.convs[n.id]
            y = _conv_f64(real[0], qc.dequantized_weights(), qc.dequantized_bias())
            q = _fq(y, out_qp, *_act_bounds(qc.activation, out_qp))
        elif n.op == "add":
            q = _fq(real[0] + real[1], out_qp, *_act_bounds(n.activation, out_qp))
        elif n.op == "concat":
            q = np.concatenate([_fq(r, out_qp) for r in real], axis=2)
        elif n.op == "clip":
            q = _fq(real[0], out_qp, *_act_bounds(Activation.clip(n.lo, n.hi), out_qp))
        elif n.op == "depth_to_space":
            h, w, c = ins[0].shape
            b = n.block
            q = ins[0].reshape(h, w, b, b, c // (b * b)).transpose(0, 2, 1, 3, 4).reshape(h * b, w * b, -1)
        else:
            q = np.tile(ins[0], (1, 1, n.times))
        env[n.id] = q
    return TensorI8(env[g.output_id].astype(np.int8), e[g.output_id])


# -- fidelity ------------------------------------------------------------------------------


def run_float(g: Graph, lr: np.ndarray) -> np.ndarray:
    return to_uint8(G.execute(g, TensorF32(lr)).data)


def run_int8(qg: QuantizedGraph, lr: np.ndarray) -> np.ndarray:
    y = execute_int8(qg, qg.quantize_input(TensorF32(lr)))
    return to_uint8(y.to_float().data)


def measure_psnr_drop(g: Graph, qg: QuantizedGraph, lr_images, hr_images) -> tuple[float, float, float]:
    """Mean PSNR of the float and int8 paths against ``hr_images``, and the drop."""
    pf, pq = [], []
    for lr, hr in zip(lr_images, hr_images, strict=True):
        lr = np.asarray(lr, np.float32)
        pf.append(psnr(run_float(g, lr), hr))
        pq.append(psnr(run_int8(qg, lr), hr))
    f, q = float(np.mean(pf)), float(np.mean(pq))
    return f, q, f - q


# -- files ---------------------------------------------------------------------------------


def _qp_dict(qp: QuantParams) -> dict:
    return {"scale": repr(float(qp.scale)), "zero_point": int(qp.zero_point)}


def _qp_from(d: dict) -> QuantParams:
    return QuantParams(float(d["scale"]), int(d["zero_point"]))


def save_quantized(qg: QuantizedGraph, path):
    """Same manifest layout as float models, int8 weights and int32 biases in the blob."""
    g = qg.graph
    w = modelio.BlobWriter()
    nodes = []
    for n in g.nodes:
        d = modelio.node_header(n)
        if n.op == "conv2d":
            qc = qg.convs[n.id]
            d["weights"] = w.put(qc.weights, "i1")
            d["bias"] = w.put(qc.bias, "i4")
            d["weight_scales"] = [repr(float(s)) for s in qc.weight_scales]
            d["multipliers"] = [[int(m), int(s)] for m, s in zip(qc.mantissas, qc.shifts)]
        nodes.append(d)
    manifest = modelio.graph_header(g)
    manifest.update(quantized=True, dtype="int8", mode=qg.mode, nodes=nodes)
    manifest["quant"] = {"edges": {k: _qp_dict(v) for k, v in qg.edges.items()}}
    return modelio.write_pair(path, manifest, w.getvalue())


def load_quantized(path) -> QuantizedGraph:
    manifest, blob = modelio.read_pair(path)
    if not manifest.get("quantized"):
        raise ManifestFormatError("manifest describes a float model; use modelio.load_model")
    r = modelio.BlobReader(blob)
    try:
        edges = {k: _qp_from(v) for k, v in manifest["quant"]["edges"].items()}
        mode = manifest.get("mode", "per_channel")
        convs, nodes = {}, []
        for d in manifest["nodes"]:
            spec = None
            if d["op"] == "conv2d":
                shape = modelio.conv_shape(d)
                mults = np.array(d["multipliers"], np.int64).reshape(-1, 2)
                qc = QuantizedConvSpec(
                    weights=r.get(d["weights"], "i1", shape, f"{d['id']}.weights").astype(np.int8),
                    weight_scales=np.array([float(s) for s in d["weight_scales"]]),
                    bias=r.get(d["bias"], "i4", (shape[0],), f"{d['id']}.bias").astype(np.int32),
                    input_qp=edges[d["inputs"][0]],
                    output_qp=edges[d["id"]],
                    mantissas=mults[:, 0].copy(),
                    shifts=mults[:, 1].copy(),
                    activation=Activation.from_dict(d.get("activation", {"kind": "none"})),
                    mode=mode,
                )
                convs[d["id"]] = qc
                spec = qc.to_float_spec()
            nodes.append(modelio.node_from_header(d, spec))
        g = modelio.graph_from_manifest(manifest, nodes)
    except (KeyError, TypeError, ValueError) as e:
        raise ManifestFormatError(f"missing or malformed quantized manifest field: {e}") from e
    G.validate(g)
    qg = QuantizedGraph(g, convs, edges, mode)
    qg.check()
    return qg


def load_any(path) -> Graph | QuantizedGraph:
    manifest_path, _ = modelio.model_paths(path)
    try:
        quantized = bool(json.loads(manifest_path.read_text()).get("quantized"))
    except json.JSONDecodeError as e:
        raise ManifestFormatError(f"{manifest_path}: invalid JSON ({e})") from e
    return load_quantized(path) if quantized else modelio.load_model(path)
