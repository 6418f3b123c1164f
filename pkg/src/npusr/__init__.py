"""Quantized 3x image super-resolution toolkit for mobile-NPU style networks.

Float and INT8 execution of plain convolutional SR graphs, structural
re-parametrization passes, post-training quantization, and the challenge
evaluation protocol (PSNR, SSIM, Final Score, bicubic baseline).
"""

from .errors import NpuSrError
from .graph import Graph, OpNode, execute, validate
from .modelio import load_model, save_model
from .ops import Activation, ConvSpec
from .quant import QuantizedGraph, execute_int8, quantize_model
from .reparam import collapse_graph
from .scoring import final_score, fit_score_constant
from .tensor import QuantParams, Shape, TensorF32, TensorI8

__version__ = "0.1.0"

__all__ = [
    "Activation",
    "ConvSpec",
    "Graph",
    "NpuSrError",
    "OpNode",
    "QuantParams",
    "QuantizedGraph",
    "Shape",
    "TensorF32",
    "TensorI8",
    "collapse_graph",
    "execute",
    "execute_int8",
    "final_score",
    "fit_score_constant",
    "load_model",
    "quantize_model",
    "save_model",
    "validate",
]
