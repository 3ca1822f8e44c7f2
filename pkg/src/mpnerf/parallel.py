"""Ordered, thread-count independent chunk scheduling."""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

from threadpoolctl import threadpool_limits


def resolve_threads(threads: int | None = None) -> int:
    """Explicit value, else ``MPNERF_THREADS``, else the number of cores."""
    if threads is None:
        env = os.environ.get("MPNERF_THREADS", "").strip()
        threads = int(env) if env else (os.cpu_count() or 1)
    return max(1, int(threads))


def chunk_bounds(total: int, chunk: int) -> list[tuple[int, int]]:
    chunk = max(1, int(chunk))
    return [(lo, min(lo + chunk, total)) for lo in range(0, total, chunk)]


def map_chunks(fn, total: int, chunk: int, threads: int | None = None) -> list:
    """Apply ``fn(lo, hi)`` to fixed-size chunks, returning results in chunk order.

    Chunk boundaries depend only on ``chunk``, and BLAS is pinned to one
    thread, so results are bit-identical for every ``threads`` value.
    """
    bounds = chunk_bounds(total, chunk)
    threads = min(resolve_threads(threads), max(1, len(bounds)))
    with threadpool_limits(limits=1):
        if threads == 1:
            return [fn(lo, hi) for lo, hi in bounds]
        with ThreadPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(lambda b: fn(*b), bounds))
