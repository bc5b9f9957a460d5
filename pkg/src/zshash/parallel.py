"""Deterministic block-parallel helpers.

Work is always split into fixed-size index blocks, independent of the
worker count; workers only decide how many blocks run concurrently.
Results are assembled in block order, so output is bit-identical for any
number of workers.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable

from .errors import ValidationError

# Columns per block. Fixed so the arithmetic inside a block never depends
# on how many workers are running.
BLOCK_SIZE = 2048

WORKERS_ENV_VAR = "ZSH_WORKERS"


def resolve_workers(workers: int | None) -> int:
    """Return the effective worker count: explicit value, else the
    ZSH_WORKERS environment variable, else 1."""
    if workers is None:
        raw = os.environ.get(WORKERS_ENV_VAR, "1")
        try:
            workers = int(raw)
        except ValueError:
            raise ValidationError(
                f"{WORKERS_ENV_VAR} must be an integer, got {raw!r}"
            ) from None
    if workers < 1:
        raise ValidationError(f"worker count must be >= 1, got {workers}")
    return workers


def iter_blocks(n: int, block_size: int = BLOCK_SIZE):
    """Yield (start, stop) index pairs covering range(n)."""
    for start in range(0, n, block_size):
        yield start, min(start + block_size, n)


def run_blocks(n: int, workers: int, fn: Callable[[int, int], None],
               block_size: int = BLOCK_SIZE) -> None:
    """Run fn(start, stop) over every block of range(n).

    fn must write only to disjoint slices of shared output arrays (or be
    otherwise independent per block). With workers == 1 the blocks run
    inline; otherwise on a thread pool. Either way every block sees the
    same (start, stop) boundaries.
    """
    blocks = list(iter_blocks(n, block_size))
    if workers == 1 or len(blocks) <= 1:
        for start, stop in blocks:
            fn(start, stop)
        return
    with ThreadPoolExecutor(max_workers=workers) as pool:
        futures = [pool.submit(fn, start, stop) for start, stop in blocks]
        for fut in futures:
            fut.result()
