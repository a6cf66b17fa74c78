"""Shared worker pool for concurrent branch evaluation.

Results never depend on execution order: tasks are independent reads of a
shared field and the caller reduces them in fixed index order, so the
parallel and serial paths are bitwise identical.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

T = TypeVar("T")
R = TypeVar("R")

ENV_THREADS = "EPDLAB_THREADS"

_pool: ThreadPoolExecutor | None = None
_pool_size: int | None = None


def default_worker_count() -> int:
    """Worker count from the environment, falling back to the CPU count."""
    env = os.environ.get(ENV_THREADS)
    if env is not None:
        try:
            n = int(env)
        except ValueError:
            n = 0
        if n >= 1:
            return n
    return max(1, os.cpu_count() or 1)


def set_worker_count(n: int | None) -> None:
    """Resize the shared pool. None resets to the environment default."""
    global _pool, _pool_size
    if _pool is not None:
        _pool.shutdown(wait=True)
        _pool = None
    _pool_size = None if n is None else max(1, int(n))


def get_pool() -> ThreadPoolExecutor:
    """The shared pool, created lazily at the configured size."""
    global _pool, _pool_size
    if _pool is None:
        size = _pool_size if _pool_size is not None else default_worker_count()
        _pool_size = size
        _pool = ThreadPoolExecutor(max_workers=size, thread_name_prefix="epdlab")
    return _pool


def pool_size() -> int:
    get_pool()
    assert _pool_size is not None
    return _pool_size


def parallel_map(fn: Callable[[T], R], items: Sequence[T],
                 pool: ThreadPoolExecutor | None) -> list[R]:
    """Map fn over items, preserving order.

    With pool=None (or a single item) this is a plain loop. Either way the
    returned list is ordered by item index, so downstream reductions are
    deterministic.
    """
    if pool is None or len(items) <= 1:
        return [fn(it) for it in items]
    return list(pool.map(fn, items))
