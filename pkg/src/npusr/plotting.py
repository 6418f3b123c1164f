"""Report figures, written next to the JSON/CSV outputs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

STYLE = {
    "font.size": 9,
    "axes.titlesize": 10,
    "axes.labelsize": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "savefig.dpi": 150,
    "savefig.bbox": "tight",
}
GOLDEN = (np.sqrt(5) - 1) / 2


def _figure(width=6.0, nrows=1):
    return plt.subplots(nrows, 1, figsize=(width, width * GOLDEN * (0.7 if nrows > 1 else 1) * nrows))


def plot_eval(report, path) -> Path:
    """Per-image PSNR and SSIM bars with the dataset means."""
    with plt.rc_context(STYLE):
        fig, (ax1, ax2) = _figure(nrows=2)
        names = [r.name for r in report.images]
        x = np.arange(len(names))
        ax1.bar(x, [r.psnr for r in report.images], color="C0")
        ax1.axhline(report.mean_psnr, color="k", lw=0.8, ls="--", label=f"mean {report.mean_psnr:.2f} dB")
        ax1.set_ylabel("PSNR, dB")
        ax1.legend(loc="lower right")
        ax2.bar(x, [r.ssim for r in report.images], color="C1")
        ax2.axhline(report.mean_ssim, color="k", lw=0.8, ls="--", label=f"mean {report.mean_ssim:.4f}")
        ax2.set_ylabel("SSIM")
        ax2.legend(loc="lower right")
        step = max(1, len(names) // 20)
        for ax in (ax1, ax2):
            ax.set_xticks(x[::step])
            ax.set_xticklabels(names[::step], rotation=90)
        ax1.set_title(report.model + (" (int8)" if report.int8 else ""))
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_bench(stats, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _figure()
        ax.hist(stats.samples_ms, bins=min(30, max(5, len(stats.samples_ms) // 2)), color="C2")
        rt = stats.runtime
        for v, ls in ((rt.p10_ms, ":"), (rt.median_ms, "-"), (rt.p90_ms, ":")):
            ax.axvline(v, color="k", lw=0.8, ls=ls)
        ax.set_xlabel("runtime, ms (host CPU)")
        ax.set_ylabel("count")
        ax.set_title(f"{stats.width}x{stats.height}{' int8' if stats.int8 else ''}: median {rt.median_ms:.1f} ms")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_score_fit(rows, c_mean, path) -> Path:
    """Implied normalisation constant per row relative to the fitted value."""
    from .scoring import row_constant

    with plt.rc_context(STYLE):
        fig, ax = _figure()
        rel = [row_constant(r.psnr, r.runtime_ms, r.score) / c_mean - 1 for r in rows]
        y = np.arange(len(rows))
        ax.barh(y, np.array(rel) * 100, color="C0")
        ax.set_yticks(y)
        ax.set_yticklabels([r.team for r in rows])
        ax.invert_yaxis()
        ax.axvline(0, color="k", lw=0.8)
        ax.set_xlabel(f"deviation from C = {c_mean:.4g}, %")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)


def plot_rewrite(report, path) -> Path:
    with plt.rc_context(STYLE):
        fig, ax = _figure(width=4.0)
        ax.bar(["before", "after"], [report.node_count_before, report.node_count_after], color=["C7", "C0"])
        ax.set_ylabel("graph nodes")
        ax.set_title(f"max rel. divergence {report.max_rel_divergence:.2e}")
        fig.savefig(path)
        plt.close(fig)
    return Path(path)
