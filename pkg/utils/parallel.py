"""Seeded parallel execution with joblib.

Every task receives its own random stream (derived from its index, never from the
worker it lands on), so results are identical for any worker count.
"""
from typing import Callable, List, Sequence, TypeVar

from joblib import Parallel, delayed

T = TypeVar("T")
R = TypeVar("R")


def run_parallel(fn: Callable[..., R], tasks: Sequence[tuple], workers: int = 1) -> List[R]:
    """Run ``fn(*task)`` for every task, returning results in task order."""
    if workers <= 1 or len(tasks) <= 1:
        return [fn(*task) for task in tasks]
    return Parallel(n_jobs=workers)(delayed(fn)(*task) for task in tasks)


def chunked(items: Sequence[T], chunks: int) -> List[Sequence[T]]:
    """Split ``items`` into at most ``chunks`` contiguous, order-preserving slices."""
    chunks = max(1, min(chunks, len(items)))
    size, extra = divmod(len(items), chunks)
    out = []
    start = 0
    for i in range(chunks):
        stop = start + size + (1 if i < extra else 0)
        if stop > start:
            out.append(items[start:stop])
        start = stop
    return out
