"""Fixed-chunk data parallelism.

Work is always split into the same chunks regardless of the thread count,
and chunk results are concatenated in order, so outputs are bit-identical
for any ``threads`` setting.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, Sequence

CHUNK_ROWS = 1024

_threads = 1


def set_threads(n: int) -> None:
    global _threads
    if n < 1:
        raise ValueError("threads must be >= 1")
    _threads = n


def get_threads() -> int:
    return _threads


def chunk_bounds(n: int, chunk: int = CHUNK_ROWS) -> List[tuple]:
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)] or [(0, 0)]


def map_chunks(fn: Callable[[int, int], object], n: int, chunk: int = CHUNK_ROWS) -> Sequence[object]:
    bounds = chunk_bounds(n, chunk)
    if _threads == 1 or len(bounds) == 1:
        return [fn(s, e) for s, e in bounds]
    with ThreadPoolExecutor(max_workers=_threads) as ex:
        return list(ex.map(lambda b: fn(*b), bounds))
