"""Process-wide worker cap and an order-preserving parallel map."""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor

_threads = 1


def set_threads(n):
    """Cap worker threads; 0 or None means one per CPU."""
    global _threads
    _threads = max(1, int(n)) if n else (os.cpu_count() or 1)
    return _threads


def get_threads():
    return _threads


def pmap(fn, items):
    """``list(map(fn, items))`` across up to `get_threads()` threads, results in input order."""
    items = list(items)
    if _threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(_threads, len(items))) as pool:
        return list(pool.map(fn, items))
