"""Challenge scoring: ``score = 2**(2 * psnr) / (C * runtime_ms)``.

The normaliser ``C`` was never published; it is recovered from the reported
results table, where every row must yield the same value.
"""

from __future__ import annotations

import csv
import math
from typing import NamedTuple


class ResultRow(NamedTuple):
    team: str
    psnr: float
    runtime_ms: float  # NPU runtime
    score: float


# INT8 PSNR, NPU runtime (ms) and Final Score as reported for the challenge
TABLE1 = (
    ResultRow("Z6", 30.03, 19.2, 22.22),
    ResultRow("TCLResearchEurope", 29.88, 15.9, 21.84),
    ResultRow("ECNUSR", 29.82, 15.1, 21.08),
    ResultRow("LCVG", 29.76, 15.0, 19.59),
    ResultRow("BOE-IOT-AIBD", 29.80, 16.1, 19.27),
    ResultRow("NJUST", 29.76, 15.8, 18.56),
    ResultRow("Antins_cv", 29.58, 15.2, 15.02),
    ResultRow("GenMedia Group", 29.90, 25.6, 13.91),
    ResultRow("Vccip", 29.98, 30.5, 13.07),
    ResultRow("MegSR", 29.94, 29.8, 12.65),
    ResultRow("DoubleZ", 29.94, 30.1, 12.54),
    ResultRow("Jeremy Kwon", 29.80, 25.7, 12.09),
    ResultRow("Lab216", 29.94, 31.8, 11.85),
    ResultRow("TOVB", 30.01, 43.3, 9.60),
    ResultRow("ABPN (baseline)", 29.87, 36.9, 9.27),
    ResultRow("Samsung Research", 29.95, 43.2, 8.84),
    ResultRow("Rtsisr2022", 30.00, 46.4, 8.83),
    ResultRow("Aselsan Research", 29.67, 30.2, 8.59),
    ResultRow("Klab_SR", 29.88, 43.1, 8.05),
    ResultRow("TCL Research HK", 30.10, 60.2, 7.81),
    ResultRow("RepGSR", 30.06, 61.3, 7.26),
    ResultRow("ICL", 29.76, 43.2, 6.79),
    ResultRow("Just A try", 29.75, 42.9, 6.76),
    ResultRow("Bilibili AI", 29.99, 68.2, 5.92),
    ResultRow("MobileSR", 30.02, 72.4, 5.82),
)

BICUBIC_PSNR = 28.26
BICUBIC_SSIM = 0.8277


def table_row(team: str) -> ResultRow:
    for r in TABLE1:
        if r.team == team:
            return r
    raise KeyError(team)


def row_constant(psnr: float, runtime_ms: float, score: float) -> float:
    """The ``C`` implied by one (psnr, runtime, score) triple."""
    if runtime_ms <= 0 or score <= 0:
        raise ValueError(f"runtime and score must be positive, got {runtime_ms}, {score}")
    return 2.0 ** (2.0 * psnr) / (score * runtime_ms)


def final_score(psnr: float, runtime_ms: float, c: float | None = None) -> float:
    """Final score; ``c`` defaults to the constant fitted on the winning row.

    Evaluated in double precision: ``2**(2 * psnr)`` is around 1e18 for
    typical PSNRs and would lose everything in single precision.
    """
    if runtime_ms <= 0:
        raise ValueError(f"runtime must be positive, got {runtime_ms}")
    if c is None:
        c = DEFAULT_C
    if c <= 0:
        raise ValueError(f"normalisation constant must be positive, got {c}")
    return 2.0 ** (2.0 * psnr) / (c * runtime_ms)


def fit_score_constant(rows) -> tuple[float, float]:
    """Geometric-mean ``C`` over ``rows`` and the largest relative deviation from it."""
    rows = list(rows)
    if len(rows) < 2:
        raise ValueError("need at least two rows to fit the score constant")
    cs = []
    for r in rows:
        psnr, runtime, score = (float(v) for v in (r[-3], r[-2], r[-1]))
        if not all(math.isfinite(v) for v in (psnr, runtime, score)):
            raise ValueError(f"degenerate row {r!r}")
        cs.append(row_constant(psnr, runtime, score))
    c_mean = math.exp(sum(math.log(c) for c in cs) / len(cs))
    spread = max(abs(c / c_mean - 1.0) for c in cs)
    return c_mean, spread


def read_rows_csv(path) -> list[ResultRow]:
    """Rows from a CSV with ``psnr``, ``runtime_ms`` and ``score`` columns (``team`` optional)."""
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"psnr", "runtime_ms", "score"} - set(reader.fieldnames or ())
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        return [
            ResultRow(r.get("team", f"row{i}"), float(r["psnr"]), float(r["runtime_ms"]), float(r["score"]))
            for i, r in enumerate(reader)
        ]


def write_rows_csv(rows, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["team", "psnr", "runtime_ms", "score"])
        for r in rows:
            w.writerow(list(r))


DEFAULT_C = row_constant(*table_row("Z6")[1:])
