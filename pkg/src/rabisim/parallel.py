"""Optional thread-level parallelism.

Work is always split into deterministic chunks whose results merge
associatively (integer histogram addition, index-placed rows), so the
outputs are bit-identical for any worker count. RABI_THREADS caps the
worker pool; unset means serial.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence


def worker_count() -> int:
    raw = os.environ.get("RABI_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def map_indexed(fn: Callable, items: Sequence, threads: int | None = None) -> list:
    """Apply ``fn`` to items, preserving order; threaded when allowed."""
    if threads is None:
        threads = worker_count()
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))
