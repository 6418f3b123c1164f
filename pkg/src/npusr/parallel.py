"""Worker-thread configuration shared by the kernels.

Kernels split their output into fixed-size row chunks.  The chunking never
depends on the worker count, so every chunk is computed by exactly the same
sequence of floating point operations whether it runs on one thread or eight.
"""

from __future__ import annotations

import contextlib
import threading
from concurrent.futures import ThreadPoolExecutor

ROW_CHUNK = 8

_state = threading.local()
_default_workers = 1


def num_workers() -> int:
    return getattr(_state, "workers", _default_workers)


def set_num_workers(n: int) -> None:
    global _default_workers
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    _default_workers = n


@contextlib.contextmanager
def workers(n: int):
    """Temporarily run kernels on the calling thread with ``n`` workers."""
    if n < 1:
        raise ValueError(f"worker count must be >= 1, got {n}")
    prev = getattr(_state, "workers", None)
    _state.workers = n
    try:
        yield
    finally:
        if prev is None:
            del _state.workers
        else:
            _state.workers = prev


def row_chunks(height: int) -> list[tuple[int, int]]:
    return [(r, min(r + ROW_CHUNK, height)) for r in range(0, height, ROW_CHUNK)]


def for_each_chunk(height: int, fn) -> None:
    """Call ``fn(r0, r1)`` for every row chunk, possibly concurrently.

    ``fn`` must only write rows ``[r0, r1)`` of its output.
    """
    chunks = row_chunks(height)
    n = min(num_workers(), len(chunks))
    if n <= 1:
        for r0, r1 in chunks:
            fn(r0, r1)
        return
    with ThreadPoolExecutor(max_workers=n) as pool:
        for fut in [pool.submit(fn, r0, r1) for r0, r1 in chunks]:
            fut.result()
