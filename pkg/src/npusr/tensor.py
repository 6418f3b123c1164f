"""Dense single-image tensors in HWC layout and elementwise primitives."""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from .errors import NpuSrError, ShapeMismatchError

QMIN, QMAX = -128, 127


class Shape(NamedTuple):
    height: int
    width: int
    channels: int

    def check(self) -> "Shape":
        if min(self) < 1:
            raise NpuSrError(f"all dimensions must be >= 1, got {tuple(self)}")
        return self

    @property
    def size(self) -> int:
        return self.height * self.width * self.channels


def _frozen(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


class TensorF32:
    """Immutable float32 feature map of shape ``(h, w, c)``.

    The backing array is row-major H -> W -> C and read-only; operations
    always allocate fresh outputs.
    """

    __slots__ = ("data",)

    def __init__(self, data, *, check_finite: bool = True):
        a = np.array(data, dtype=np.float32, copy=True)
        if a.ndim != 3:
            raise NpuSrError(f"expected an (h, w, c) array, got ndim={a.ndim}")
        Shape(*a.shape).check()
        if check_finite and not np.isfinite(a).all():
            raise NpuSrError("tensor contains non-finite values")
        self.data = _frozen(a)

    @classmethod
    def _wrap(cls, a: np.ndarray) -> "TensorF32":
        # internal fast path: caller guarantees a fresh float32 (h, w, c) array
        t = object.__new__(cls)
        t.data = _frozen(np.ascontiguousarray(a, dtype=np.float32))
        return t

    @classmethod
    def zeros(cls, h: int, w: int, c: int) -> "TensorF32":
        return cls._wrap(np.zeros((h, w, c), np.float32))

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def __repr__(self):
        return f"TensorF32{tuple(self.shape)}"


@dataclass(frozen=True)
class QuantParams:
    """Affine int8 mapping: ``real = scale * (q - zero_point)``."""

    scale: float
    zero_point: int = 0

    def __post_init__(self):
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise NpuSrError(f"scale must be positive and finite, got {self.scale}")
        if not QMIN <= self.zero_point <= QMAX:
            raise NpuSrError(f"zero_point {self.zero_point} outside [-128, 127]")

    def quantize(self, x) -> np.ndarray:
        q = np.rint(np.asarray(x, np.float64) / self.scale) + self.zero_point
        return np.clip(q, QMIN, QMAX).astype(np.int8)

    def dequantize(self, q) -> np.ndarray:
        return (np.asarray(q, np.float64) - self.zero_point) * self.scale


class TensorI8:
    """Immutable int8 tensor of shape ``(h, w, c)`` with its quantization params."""

    __slots__ = ("data", "qp")

    def __init__(self, data, qp: QuantParams):
        a = np.asarray(data)
        if a.ndim != 3:
            raise NpuSrError(f"expected an (h, w, c) array, got ndim={a.ndim}")
        Shape(*a.shape).check()
        if a.dtype != np.int8:
            if a.size and (a.min() < QMIN or a.max() > QMAX):
                raise NpuSrError("int8 tensor values outside [-128, 127]")
            a = a.astype(np.int8)
        self.data = _frozen(np.array(a, copy=True))
        self.qp = qp

    @classmethod
    def from_float(cls, x: TensorF32, qp: QuantParams) -> "TensorI8":
        return cls(qp.quantize(x.data), qp)

    def to_float(self) -> TensorF32:
        return TensorF32._wrap(self.qp.dequantize(self.data).astype(np.float32))

    @property
    def shape(self) -> Shape:
        return Shape(*self.data.shape)

    def __repr__(self):
        return f"TensorI8{tuple(self.shape)}(scale={self.qp.scale}, zp={self.qp.zero_point})"


def add_elementwise(a: TensorF32, b: TensorF32) -> TensorF32:
    if a.shape != b.shape:
        raise ShapeMismatchError(f"add: shape mismatch {tuple(a.shape)} vs {tuple(b.shape)}")
    return TensorF32._wrap(a.data + b.data)


def concat_channels(parts: Sequence[TensorF32]) -> TensorF32:
    if not parts:
        raise NpuSrError("concat of zero tensors")
    hw = parts[0].shape[:2]
    for p in parts[1:]:
        if p.shape[:2] != hw:
            raise ShapeMismatchError(
                f"concat: spatial mismatch {tuple(hw)} vs {tuple(p.shape[:2])}"
            )
    return TensorF32._wrap(np.concatenate([p.data for p in parts], axis=2))


def clamp(a: TensorF32, lo: float, hi: float) -> TensorF32:
    if lo > hi:
        raise NpuSrError(f"clamp bounds inverted: lo={lo} > hi={hi}")
    return TensorF32._wrap(np.clip(a.data, np.float32(lo), np.float32(hi)))
