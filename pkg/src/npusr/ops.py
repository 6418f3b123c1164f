"""Float reference kernels for the operators used by the SR networks.

All convolutions are stride 1 with SAME zero padding.  Weights are stored
OHWI: ``weights[o, u, v, i]``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from fractions import Fraction

import numpy as np

from . import parallel
from .errors import DivisibilityError, NpuSrError, ShapeMismatchError
from .tensor import TensorF32, clamp

ALLOWED_KERNELS = (1, 3, 5)


@dataclass(frozen=True)
class Activation:
    kind: str = "none"
    lo: float | None = None
    hi: float | None = None

    def __post_init__(self):
        if self.kind not in ("none", "relu", "clip"):
            raise NpuSrError(f"unknown activation {self.kind!r}")
        if self.kind == "clip":
            if self.lo is None or self.hi is None:
                raise NpuSrError("clip activation needs lo and hi")
            if not (math.isfinite(self.lo) and math.isfinite(self.hi)):
                raise NpuSrError("clip bounds must be finite")
            if self.lo > self.hi:
                raise NpuSrError(f"clip bounds inverted: {self.lo} > {self.hi}")

    @classmethod
    def clip(cls, lo: float, hi: float) -> "Activation":
        return cls("clip", float(lo), float(hi))

    def to_dict(self) -> dict:
        if self.kind == "clip":
            return {"kind": "clip", "lo": self.lo, "hi": self.hi}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d: dict) -> "Activation":
        return cls(d["kind"], d.get("lo"), d.get("hi"))


NONE = Activation()
RELU = Activation("relu")


class ConvSpec:
    """A k x k convolution: OHWI weights, per-output bias and a fused activation."""

    __slots__ = ("weights", "bias", "activation")

    def __init__(self, weights, bias=None, activation: Activation = NONE):
        w = np.array(weights, dtype=np.float32, copy=True)
        if w.ndim != 4 or w.shape[1] != w.shape[2]:
            raise NpuSrError(f"weights must be OHWI with square kernel, got {w.shape}")
        if w.shape[1] not in ALLOWED_KERNELS:
            raise NpuSrError(f"kernel size must be one of {ALLOWED_KERNELS}, got {w.shape[1]}")
        if bias is None:
            b = np.zeros(w.shape[0], np.float32)
        else:
            b = np.array(bias, dtype=np.float32, copy=True).reshape(-1)
        if b.shape != (w.shape[0],):
            raise NpuSrError(f"bias length {b.size} != out_channels {w.shape[0]}")
        w.flags.writeable = False
        b.flags.writeable = False
        self.weights = w
        self.bias = b
        self.activation = activation

    @property
    def kernel(self) -> int:
        return self.weights.shape[1]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[3]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[0]

    @property
    def n_params(self) -> int:
        return self.weights.size + self.bias.size

    def replace(self, weights=None, bias=None, activation=None) -> "ConvSpec":
        return ConvSpec(
            self.weights if weights is None else weights,
            self.bias if bias is None else bias,
            self.activation if activation is None else activation,
        )

    def same_as(self, other: "ConvSpec") -> bool:
        """Bit-level equality of weights, bias and activation."""
        return (
            self.weights.shape == other.weights.shape
            and self.activation == other.activation
            and self.weights.tobytes() == other.weights.tobytes()
            and self.bias.tobytes() == other.bias.tobytes()
        )

    def __repr__(self):
        return (
            f"ConvSpec({self.kernel}x{self.kernel}, {self.in_channels}->"
            f"{self.out_channels}, act={self.activation.kind})"
        )


def _activate(a: np.ndarray, act: Activation) -> np.ndarray:
    if act.kind == "relu":
        return np.maximum(a, np.float32(0))
    if act.kind == "clip":
        return np.clip(a, np.float32(act.lo), np.float32(act.hi))
    return a


def apply_activation(x: TensorF32, act: Activation) -> TensorF32:
    if act.kind == "clip":
        return clamp(x, act.lo, act.hi)
    if act.kind == "relu":
        return TensorF32._wrap(_activate(x.data, act))
    return x


def conv2d(x: TensorF32, spec: ConvSpec) -> TensorF32:
    h, w, c = x.shape
    if c != spec.in_channels:
        raise ShapeMismatchError(
            f"conv2d: input has {c} channels, spec expects {spec.in_channels}"
        )
    k = spec.kernel
    p = (k - 1) // 2
    xp = np.pad(x.data, ((p, p), (p, p), (0, 0)))
    taps = np.ascontiguousarray(spec.weights.transpose(1, 2, 3, 0))  # (k, k, I, O)
    out = np.empty((h, w, spec.out_channels), np.float32)

    def work(r0, r1):
        acc = np.zeros((r1 - r0, w, spec.out_channels), np.float32)
        for u in range(k):
            for v in range(k):
                acc += xp[r0 + u : r1 + u, v : v + w, :] @ taps[u, v]
        acc += spec.bias
        out[r0:r1] = _activate(acc, spec.activation)

    parallel.for_each_chunk(h, work)
    return TensorF32._wrap(out)


def depth_to_space(x: TensorF32, block: int) -> TensorF32:
    """Pixel shuffle; output channel ``c`` of sub-pixel ``(dy, dx)`` is read from
    input channel ``(dy * block + dx) * c_out + c``."""
    h, w, c = x.shape
    if block < 1 or c % (block * block):
        raise DivisibilityError(f"depth_to_space: {c} channels not divisible by {block}^2")
    co = c // (block * block)
    a = x.data.reshape(h, w, block, block, co).transpose(0, 2, 1, 3, 4)
    return TensorF32._wrap(a.reshape(h * block, w * block, co))


def space_to_depth(x: TensorF32, block: int) -> TensorF32:
    h, w, c = x.shape
    if block < 1 or h % block or w % block:
        raise DivisibilityError(f"space_to_depth: {h}x{w} not divisible by {block}")
    a = x.data.reshape(h // block, block, w // block, block, c).transpose(0, 2, 1, 3, 4)
    return TensorF32._wrap(a.reshape(h // block, w // block, block * block * c))


def input_repeat(x: TensorF32, times: int) -> TensorF32:
    """Stack the input ``times`` times along channels (the anchor)."""
    if times < 1:
        raise NpuSrError(f"input_repeat times must be >= 1, got {times}")
    return TensorF32._wrap(np.tile(x.data, (1, 1, times)))


def resize_nearest(x: TensorF32, scale: int) -> TensorF32:
    if scale < 1:
        raise NpuSrError(f"scale must be >= 1, got {scale}")
    return TensorF32._wrap(np.repeat(np.repeat(x.data, scale, axis=0), scale, axis=1))


# -- bicubic ------------------------------------------------------------------------

CUBIC_A = -0.5


def cubic(x):
    """Keys cubic convolution kernel with a = -0.5."""
    ax = np.abs(np.asarray(x, np.float64))
    ax2, ax3 = ax * ax, ax * ax * ax
    a = CUBIC_A
    return np.where(
        ax <= 1,
        (a + 2) * ax3 - (a + 3) * ax2 + 1,
        np.where(ax <= 2, a * ax3 - 5 * a * ax2 + 8 * a * ax - 4 * a, 0.0),
    )


def resize_weights(in_len: int, out_len: int, scale: float, antialias: bool) -> np.ndarray:
    """Dense ``(out_len, in_len)`` interpolation matrix for one axis.

    Pixel centres are aligned as in MATLAB's ``imresize``; out-of-range taps
    are clamped to the edge pixel.
    """
    width = 4.0
    if scale < 1 and antialias:
        kernel = lambda d: scale * cubic(scale * d)  # noqa: E731
        width /= scale
    else:
        kernel = cubic
    x = np.arange(1, out_len + 1, dtype=np.float64)
    u = x / scale + 0.5 * (1 - 1 / scale)
    left = np.floor(u - width / 2)
    taps = int(math.ceil(width)) + 2
    idx = left[:, None] + np.arange(taps)[None, :]
    wts = kernel(u[:, None] - idx)
    wts /= wts.sum(axis=1, keepdims=True)
    idx = np.clip(idx, 1, in_len).astype(np.intp) - 1
    m = np.zeros((out_len, in_len))
    np.add.at(m, (np.repeat(np.arange(out_len), taps), idx.ravel()), wts.ravel())
    return m


def resize_bicubic(x: TensorF32, scale, antialias: bool = True, size=None) -> TensorF32:
    """Separable bicubic resize by ``scale`` (int, float or Fraction).

    ``size`` overrides the output ``(height, width)``, which otherwise is
    ``ceil(dim * scale)``.
    """
    scale = Fraction(scale).limit_denominator(10_000)
    if scale <= 0:
        raise NpuSrError(f"scale must be positive, got {scale}")
    h, w, _ = x.shape
    if size is None:
        size = (math.ceil(h * scale), math.ceil(w * scale))
    oh, ow = size
    mh = resize_weights(h, oh, float(scale), antialias)
    mw = resize_weights(w, ow, float(scale), antialias)
    c = x.shape.channels
    a = (mh @ x.data.astype(np.float64).reshape(h, w * c)).reshape(oh, w, c)
    a = np.matmul(mw, a)
    return TensorF32._wrap(a.astype(np.float32))
