"""Fixed-chunk thread parallelism.

Work is always split into the same chunks regardless of the thread count and
results are concatenated in chunk order, so outputs are bit-identical for any
number of threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, TypeVar

T = TypeVar("T")

_threads = max(1, int(os.environ.get("SEMID_THREADS", "1") or 1))


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("thread count must be >= 1")
    _threads = int(n)


def get_threads() -> int:
    return _threads


def map_chunks(fn: Callable[[int, int], T], n: int, chunk: int) -> list[T]:
    """Apply ``fn(start, stop)`` over ``[0, n)`` in fixed-size chunks."""
    bounds = [(s, min(s + chunk, n)) for s in range(0, n, chunk)]
    if _threads == 1 or len(bounds) < 2:
        return [fn(s, e) for s, e in bounds]
    with ThreadPoolExecutor(max_workers=_threads) as ex:
        return list(ex.map(lambda b: fn(*b), bounds))
