"""Dataset ingestion, evaluation reports and wall-clock benchmarking."""

from __future__ import annotations

import hashlib
import json
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Callable

import numpy as np
from PIL import Image

from . import graph as G
from . import ops, quant, scoring
from .errors import DatasetError
from .graph import Graph
from .metrics import psnr, ssim, to_uint8
from .quant import QuantizedGraph
from .tensor import TensorF32

SCALE = 3
HR_NAME = re.compile(r"^(\d{4})\.png$")

PROTOCOL = {
    "color": "RGB",
    "border_crop": 0,
    "psnr_cap_db": 100.0,
    "aggregation": "arithmetic mean of per-image values",
    "ssim": "11x11 Gaussian window, sigma 1.5, K1=0.01, K2=0.03, valid region",
    "note": "the challenge did not publish whether PSNR used RGB or luma, nor its border handling",
}
HOST_NOTE = "host-CPU wall clock; not comparable to NPU milliseconds"


# -- image files ---------------------------------------------------------------------


def read_png(path) -> np.ndarray:
    """8-bit RGB image as an (h, w, 3) uint8 array."""
    with Image.open(path) as im:
        if im.mode in ("I", "I;16", "I;16B", "F"):
            raise DatasetError(f"{path}: {im.mode} images are not 8-bit")
        if im.mode != "RGB":
            im = im.convert("RGB")
        return np.asarray(im, dtype=np.uint8).copy()


def write_png(path, img: np.ndarray) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(img)).save(path)


def crop_to_multiple(img: np.ndarray, scale: int = SCALE) -> np.ndarray:
    h, w = img.shape[:2]
    return img[: h - h % scale, : w - w % scale]


def downscale(hr: np.ndarray, scale: int = SCALE) -> np.ndarray:
    """Antialiased bicubic LR image of ``hr`` (cropped to a multiple of ``scale``)."""
    hr = crop_to_multiple(hr, scale)
    h, w = hr.shape[:2]
    lr = ops.resize_bicubic(TensorF32(hr), 1 / scale, antialias=True, size=(h // scale, w // scale))
    return to_uint8(lr.data)


@dataclass(frozen=True)
class DatasetPair:
    name: str
    lr_path: Path
    hr_path: Path

    def load(self, scale: int = SCALE) -> tuple[np.ndarray, np.ndarray]:
        lr = read_png(self.lr_path)
        hr = crop_to_multiple(read_png(self.hr_path), scale)
        want = (hr.shape[0] // scale, hr.shape[1] // scale)
        if lr.shape[:2] != want:
            raise DatasetError(
                f"{self.lr_path.name}: LR size {lr.shape[:2]} does not match HR "
                f"{hr.shape[:2]} / {scale} = {want}"
            )
        return lr, hr


def hr_files(hr_dir) -> list[Path]:
    hr_dir = Path(hr_dir)
    if not hr_dir.is_dir():
        raise DatasetError(f"{hr_dir}: not a directory")
    files = sorted(p for p in hr_dir.iterdir() if HR_NAME.match(p.name))
    if not files:
        raise DatasetError(f"{hr_dir}: no NNNN.png images found")
    return files


def find_pairs(lr_dir, hr_dir, scale: int = SCALE) -> list[DatasetPair]:
    """Pair ``NNNN.png`` in ``hr_dir`` with ``NNNNx{scale}.png`` in ``lr_dir``."""
    lr_dir = Path(lr_dir)
    pairs, missing = [], []
    for hr in hr_files(hr_dir):
        lr = lr_dir / f"{hr.stem}x{scale}.png"
        if lr.is_file():
            pairs.append(DatasetPair(hr.stem, lr, hr))
        else:
            missing.append(lr.name)
    if missing:
        raise DatasetError(f"{lr_dir}: missing LR image(s) for: {', '.join(missing)}")
    return pairs


def mini_set_dir() -> Path:
    """Bundled 5-image HR/LR set for pipeline checks (no numeric target)."""
    return Path(str(resources.files("npusr") / "data" / "mini"))


# -- models ------------------------------------------------------------------------------

Upscaler = Callable[[np.ndarray], np.ndarray]


def as_upscaler(model, int8: bool = False) -> Upscaler:
    """Wrap a Graph, QuantizedGraph or callable as ``lr uint8 -> sr uint8``."""
    if isinstance(model, QuantizedGraph):
        if int8:
            return lambda lr: quant.run_int8(model, lr)
        return lambda lr: quant.run_float(model.graph, lr)
    if isinstance(model, Graph):
        if int8:
            raise DatasetError("int8 evaluation needs a quantized model (run `quantize` first)")
        return lambda lr: quant.run_float(model, lr)
    if callable(model):
        return lambda lr: to_uint8(model(lr))
    raise TypeError(f"cannot evaluate a {type(model).__name__}")


def upscale_bicubic(lr: np.ndarray, scale: int = SCALE) -> np.ndarray:
    return ops.resize_bicubic(TensorF32(lr), scale, antialias=True).data


def upscale_nearest(lr: np.ndarray, scale: int = SCALE) -> np.ndarray:
    return ops.resize_nearest(TensorF32(lr), scale).data


BASELINES = {"bicubic": upscale_bicubic, "nearest": upscale_nearest}


# -- reports -------------------------------------------------------------------------------


@dataclass
class RuntimeStats:
    median_ms: float
    p10_ms: float
    p90_ms: float
    n: int
    note: str = HOST_NOTE

    @classmethod
    def from_samples(cls, samples_ms) -> "RuntimeStats":
        s = np.asarray(samples_ms, np.float64)
        return cls(float(np.median(s)), float(np.percentile(s, 10)), float(np.percentile(s, 90)), len(s))


@dataclass
class ImageResult:
    name: str
    psnr: float
    ssim: float
    runtime_ms: float = 0.0


@dataclass
class EvalReport:
    model: str
    int8: bool
    images: list[ImageResult]
    mean_psnr: float
    mean_ssim: float
    runtime: RuntimeStats | None = None
    final_score: float | None = None
    score_constant: float = scoring.DEFAULT_C
    protocol: dict = field(default_factory=lambda: dict(PROTOCOL))

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "schema": "npusr.eval/1",
            "model": self.model,
            "int8": self.int8,
            "n_images": len(self.images),
            "mean_psnr": self.mean_psnr,
            "mean_ssim": self.mean_ssim,
            "images": [
                {"name": r.name, "psnr": r.psnr, "ssim": r.ssim}
                | ({"runtime_ms": r.runtime_ms} if include_timing else {})
                for r in self.images
            ],
            "protocol": self.protocol,
        }
        if include_timing and self.runtime is not None:
            d["runtime_ms"] = asdict(self.runtime)
            d["final_score"] = self.final_score
            d["score_constant"] = self.score_constant
        return d

    def to_json(self, include_timing: bool = True) -> str:
        return json.dumps(self.to_dict(include_timing), indent=2) + "\n"

    def write_csv(self, path) -> None:
        lines = ["name,psnr,ssim,runtime_ms"]
        lines += [f"{r.name},{r.psnr:.6f},{r.ssim:.6f},{r.runtime_ms:.3f}" for r in self.images]
        Path(path).write_text("\n".join(lines) + "\n")


def _score_one(upscale: Upscaler, name: str, lr: np.ndarray, hr: np.ndarray) -> ImageResult:
    t0 = time.perf_counter()
    sr = upscale(lr)
    dt = (time.perf_counter() - t0) * 1e3
    if sr.shape != hr.shape:
        raise DatasetError(f"{name}: model output {sr.shape} != HR {hr.shape}")
    return ImageResult(name, psnr(sr, hr), ssim(sr, hr), dt)


def evaluate_items(upscale: Upscaler, items, model_name: str = "", int8: bool = False,
                   workers: int = 1) -> EvalReport:
    """Score ``items`` (callables returning ``(name, lr, hr)``), results in item order."""
    def one(item):
        name, lr, hr = item()
        return _score_one(upscale, name, lr, hr)

    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, items))
    else:
        results = [one(it) for it in items]
    if not results:
        raise DatasetError("nothing to evaluate")
    mean_p = float(np.mean([r.psnr for r in results]))
    mean_s = float(np.mean([r.ssim for r in results]))
    rt = RuntimeStats.from_samples([r.runtime_ms for r in results])
    return EvalReport(model_name, int8, results, mean_p, mean_s, rt,
                      scoring.final_score(mean_p, max(rt.median_ms, 1e-9)))


def eval_dataset(model, lr_dir, hr_dir, int8: bool = False, workers: int = 1,
                 scale: int = SCALE, model_name: str = "") -> EvalReport:
    pairs = find_pairs(lr_dir, hr_dir, scale)
    items = [lambda p=p: (p.name, *p.load(scale)) for p in pairs]
    return evaluate_items(as_upscaler(model, int8), items, model_name, int8, workers)


def baseline(hr_dir, scale: int = SCALE, method: str = "bicubic", lr_dir=None,
             workers: int = 1) -> EvalReport:
    """Interpolation baseline.  Without ``lr_dir`` the LR inputs are regenerated
    from HR by antialiased bicubic downscaling and rounding to 8 bits."""
    if method not in BASELINES:
        raise ValueError(f"unknown method {method!r}, expected one of {sorted(BASELINES)}")
    up = BASELINES[method]
    upscale = lambda lr: up(lr, scale)  # noqa: E731
    if lr_dir is not None:
        pairs = find_pairs(lr_dir, hr_dir, scale)
        items = [lambda p=p: (p.name, *p.load(scale)) for p in pairs]
    else:
        def item(path):
            hr = crop_to_multiple(read_png(path), scale)
            return path.stem, downscale(hr, scale), hr

        items = [lambda p=p: item(p) for p in hr_files(hr_dir)]
    return evaluate_items(upscale, items, f"baseline:{method}", False, workers)


# -- benchmark -------------------------------------------------------------------------------


@dataclass
class BenchStats:
    runtime: RuntimeStats
    samples_ms: list[float]
    checksum: str
    checksum_stable: bool
    height: int
    width: int
    int8: bool

    def to_dict(self) -> dict:
        return {
            "schema": "npusr.bench/1",
            "input": {"height": self.height, "width": self.width, "channels": 3},
            "int8": self.int8,
            "runtime_ms": asdict(self.runtime),
            "samples_ms": self.samples_ms,
            "output_sha256": self.checksum,
            "checksum_stable": self.checksum_stable,
        }


def bench(model, height: int = 360, width: int = 640, warmup: int = 5, iters: int = 50,
          int8: bool = False, seed: int = 0) -> BenchStats:
    """Time single-image executions on a fixed random input."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    rng = np.random.default_rng(seed)
    x = TensorF32(rng.integers(0, 256, size=(height, width, 3)).astype(np.float32))
    if isinstance(model, QuantizedGraph) and int8:
        xq = model.quantize_input(x)
        run = lambda: quant.execute_int8(model, xq).data  # noqa: E731
    else:
        if int8:
            raise ValueError("int8 benchmarking needs a quantized model")
        g = model.graph if isinstance(model, QuantizedGraph) else model
        run = lambda: G.execute(g, x).data  # noqa: E731
    for _ in range(warmup):
        run()
    samples, digests = [], set()
    for _ in range(iters):
        t0 = time.perf_counter()
        y = run()
        samples.append((time.perf_counter() - t0) * 1e3)
        digests.add(hashlib.sha256(y.tobytes()).hexdigest())
    first = hashlib.sha256(run().tobytes()).hexdigest()
    digests.add(first)
    return BenchStats(RuntimeStats.from_samples(samples), samples, first, len(digests) == 1,
                      height, width, int8)
