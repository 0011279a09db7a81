"""Worker-pool helpers.

Kernels are numba functions compiled with ``nogil=True`` that write into
disjoint slices of preallocated output arrays, so results never depend on the
number of workers or on scheduling.
"""

from __future__ import annotations

__all__ = ["default_workers", "resolve_workers", "run_chunked"]

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional

ENV_THREADS = "FORESTSEG_THREADS"

_MIN_CHUNK = 4096


def default_workers() -> int:
    value = os.environ.get(ENV_THREADS)
    if value:
        try:
            workers = int(value)
        except ValueError:
            raise ValueError(f"{ENV_THREADS} must be an integer, got {value!r}") from None
        if workers < 1:
            raise ValueError(f"{ENV_THREADS} must be positive, got {workers}")
        return workers
    return 1


def resolve_workers(workers: Optional[int]) -> int:
    if workers is None:
        return default_workers()
    if workers < 1:
        raise ValueError(f"workers must be positive, got {workers}")
    return workers


def run_chunked(kernel: Callable, n: int, workers: Optional[int], *args) -> None:
    """Call ``kernel(start, stop, *args)`` over contiguous ranges covering ``range(n)``."""
    workers = resolve_workers(workers)
    if workers == 1 or n <= _MIN_CHUNK:
        kernel(0, n, *args)
        return
    n_chunks = min(workers * 4, max(1, n // _MIN_CHUNK))
    bounds = [n * k // n_chunks for k in range(n_chunks + 1)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(kernel, bounds[k], bounds[k + 1], *args) for k in range(n_chunks)]
        for future in futures:
            future.result()
