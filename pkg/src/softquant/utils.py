"""Small shared helpers: worker-count resolution and ordered parallel maps."""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count() -> int:
    """Resolve the worker cap from SOFTQUANT_THREADS (0 or unset = auto)."""
    raw = os.environ.get("SOFTQUANT_THREADS", "0")
    try:
        n = int(raw)
    except ValueError:
        n = 0
    if n <= 0:
        n = os.cpu_count() or 1
    return max(1, n)


def map_ordered(fn, items):
    """Apply ``fn`` over ``items``, preserving order.

    Runs serially when only one worker is configured, otherwise on a thread
    pool.  Results are returned in input order either way, so callers see the
    same output regardless of the level of concurrency.
    """
    items = list(items)
    workers = min(worker_count(), len(items)) or 1
    if workers == 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def chunk_slices(total: int, chunks: int):
    """Split range(total) into at most ``chunks`` contiguous slices."""
    chunks = max(1, min(chunks, total))
    step = (total + chunks - 1) // chunks
    return [slice(i, min(i + step, total)) for i in range(0, total, step)]
