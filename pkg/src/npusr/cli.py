"""Command-line interface: ``npusr <command> ...`` (or ``python -m npusr``)."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import builders, evaluate, modelio, parallel, quant, reparam, scoring
from .errors import NpuSrError


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2) + "\n")


def _write_report(path, payload: dict) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2) + "\n")
    return path


def _figures(args) -> bool:
    return not getattr(args, "no_figures", False)


def cmd_build(args):
    fn = builders.BUILDERS[args.arch]
    kw = {"seed": args.seed}
    if args.channels:
        kw["channels"] = args.channels
    g = fn(**kw)
    path = modelio.save_model(g, args.out)
    _emit({"model": str(path), "arch": args.arch, "nodes": len(g), "params": g.n_params()})


def cmd_run(args):
    model = quant.load_any(args.model)
    lr = evaluate.read_png(args.input)
    sr = evaluate.as_upscaler(model, args.int8)(lr)
    evaluate.write_png(args.output, sr)
    _emit({"input": args.input, "output": args.output, "shape": list(sr.shape), "int8": args.int8})


def cmd_collapse(args):
    g = modelio.load_model(args.model)
    passes = list(reparam.DEFAULT_PASSES)
    if args.concat_to_sum:
        passes.append("concat_conv_to_sum")
    out, report = reparam.collapse_graph(g, passes=passes)
    path = modelio.save_model(out, args.out)
    d = report.to_dict()
    d["model"] = str(path)
    if args.report:
        rp = _write_report(args.report, d)
        if _figures(args):
            from .plotting import plot_rewrite

            plot_rewrite(report, rp.with_suffix(".png"))
    _emit(d)


def _calib_images(directory, limit):
    files = sorted(Path(directory).glob("*.png"))
    if not files:
        raise NpuSrError(f"{directory}: no PNG calibration images")
    return [evaluate.read_png(p).astype(np.float32) for p in files[:limit]]


def cmd_quantize(args):
    g = modelio.load_model(args.model)
    mode = args.scheme.replace("-", "_")
    qg = quant.quantize_model(g, _calib_images(args.calib, args.max_images), mode)
    path = quant.save_quantized(qg, args.out)
    _emit({
        "model": str(path),
        "scheme": mode,
        "input": {"scale": qg.input_qp.scale, "zero_point": qg.input_qp.zero_point},
        "output": {"scale": qg.output_qp.scale, "zero_point": qg.output_qp.zero_point},
    })


def _save_eval(report, args):
    if not args.report:
        return
    rp = _write_report(args.report, report.to_dict(include_timing=not args.no_timing))
    report.write_csv(rp.with_suffix(".csv"))
    if _figures(args):
        from .plotting import plot_eval

        plot_eval(report, rp.with_suffix(".png"))


def cmd_eval(args):
    model = quant.load_any(args.model)
    report = evaluate.eval_dataset(model, args.lr_dir, args.hr_dir, int8=args.int8,
                                   workers=args.workers, scale=args.scale, model_name=str(args.model))
    _save_eval(report, args)
    _emit(report.to_dict(include_timing=not args.no_timing))


def cmd_baseline(args):
    hr_dir = args.hr_dir
    if hr_dir is None:
        hr_dir = evaluate.mini_set_dir() / "HR"
    report = evaluate.baseline(hr_dir, args.scale, args.method, lr_dir=args.lr_dir, workers=args.workers)
    _save_eval(report, args)
    d = report.to_dict(include_timing=False)
    if args.method == "bicubic":
        d["reference"] = {"psnr": scoring.BICUBIC_PSNR, "ssim": scoring.BICUBIC_SSIM}
    _emit(d)


def cmd_score(args):
    c = args.c if args.c is not None else scoring.DEFAULT_C
    _emit({"psnr": args.psnr, "runtime_ms": args.runtime_ms, "c": c,
           "final_score": scoring.final_score(args.psnr, args.runtime_ms, c)})


def cmd_fit_c(args):
    rows = scoring.read_rows_csv(args.table) if args.table else list(scoring.TABLE1)
    c, spread = scoring.fit_score_constant(rows)
    d = {
        "c": c,
        "max_rel_spread": spread,
        "rows": [
            {"team": r.team, "psnr": r.psnr, "runtime_ms": r.runtime_ms, "score": r.score,
             "recomputed": scoring.final_score(r.psnr, r.runtime_ms, c)}
            for r in rows
        ],
    }
    if args.report:
        rp = _write_report(args.report, d)
        scoring.write_rows_csv(rows, rp.with_suffix(".csv"))
        if _figures(args):
            from .plotting import plot_score_fit

            plot_score_fit(rows, c, rp.with_suffix(".png"))
    _emit(d)


def cmd_bench(args):
    model = quant.load_any(args.model)
    stats = evaluate.bench(model, args.height, args.width, args.warmup, args.iters, args.int8, args.seed)
    d = stats.to_dict()
    d["model"] = str(args.model)
    d["note"] = evaluate.HOST_NOTE
    if args.report:
        rp = _write_report(args.report, d)
        if _figures(args):
            from .plotting import plot_bench

            plot_bench(stats, rp.with_suffix(".png"))
    _emit({k: v for k, v in d.items() if k != "samples_ms"})


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="npusr", description="Quantized 3x SR runtime and evaluation toolkit")
    p.add_argument("--workers", type=int, default=1, help="worker threads for kernels / images")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("build", help="write a seeded architecture to a model file")
    s.add_argument("--arch", choices=sorted(builders.BUILDERS), required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--channels", type=int)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_build)

    s = sub.add_parser("run", help="upscale one PNG")
    s.add_argument("--model", required=True)
    s.add_argument("--input", required=True)
    s.add_argument("--output", required=True)
    s.add_argument("--int8", action="store_true")
    s.set_defaults(func=cmd_run)

    s = sub.add_parser("collapse", help="apply re-parametrization passes")
    s.add_argument("--model", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--report")
    s.add_argument("--concat-to-sum", action="store_true", help="also split concat+1x1 into a sum")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_collapse)

    s = sub.add_parser("quantize", help="post-training INT8 quantization")
    s.add_argument("--model", required=True)
    s.add_argument("--calib", required=True, help="directory of PNG calibration images")
    s.add_argument("--scheme", choices=["per-channel", "per-tensor"], default="per-channel")
    s.add_argument("--out", required=True)
    s.add_argument("--max-images", type=int, default=None)
    s.set_defaults(func=cmd_quantize)

    s = sub.add_parser("eval", help="PSNR/SSIM over an LR/HR dataset")
    s.add_argument("--model", required=True)
    s.add_argument("--lr-dir", required=True)
    s.add_argument("--hr-dir", required=True)
    s.add_argument("--scale", type=int, default=3)
    s.add_argument("--int8", action="store_true")
    s.add_argument("--report")
    s.add_argument("--no-timing", action="store_true", help="omit runtimes (byte-stable report)")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("baseline", help="interpolation baseline over HR images")
    s.add_argument("--hr-dir", help="defaults to the bundled mini set")
    s.add_argument("--lr-dir", help="use these LR images instead of regenerating them")
    s.add_argument("--scale", type=int, default=3)
    s.add_argument("--method", choices=sorted(evaluate.BASELINES), default="bicubic")
    s.add_argument("--report")
    s.add_argument("--no-timing", action="store_true")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_baseline)

    s = sub.add_parser("score", help="challenge Final Score")
    s.add_argument("--psnr", type=float, required=True)
    s.add_argument("--runtime-ms", type=float, required=True)
    s.add_argument("--c", type=float)
    s.set_defaults(func=cmd_score)

    s = sub.add_parser("fit-c", help="fit the score normaliser from result rows")
    s.add_argument("--table", help="CSV with psnr,runtime_ms,score (default: built-in results table)")
    s.add_argument("--report")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_fit_c)

    s = sub.add_parser("bench", help="wall-clock benchmark on a random input")
    s.add_argument("--model", required=True)
    s.add_argument("--width", type=int, default=640)
    s.add_argument("--height", type=int, default=360)
    s.add_argument("--iters", type=int, default=50)
    s.add_argument("--warmup", type=int, default=5)
    s.add_argument("--int8", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--report")
    s.add_argument("--no-figures", action="store_true")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    parallel.set_num_workers(args.workers)
    try:
        args.func(args)
    except (NpuSrError, FileNotFoundError) as e:
        print(f"npusr {args.command}: error: {e}", file=sys.stderr)
        return 2
    return 0
