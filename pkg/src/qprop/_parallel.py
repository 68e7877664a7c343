"""Order-preserving parallel map capped by the QPROP_THREADS variable."""

import os
from concurrent.futures import ThreadPoolExecutor


def worker_count():
    """Number of worker threads: QPROP_THREADS if set, else 1."""
    raw = os.environ.get("QPROP_THREADS", "").strip()
    if not raw:
        return 1
    try:
        return max(1, int(raw))
    except ValueError:
        return 1


def pmap(fn, items, workers=None):
    """``[fn(x) for x in items]``, possibly evaluated on a thread pool.

    Results come back in input order, so the output does not depend on the
    number of workers.
    """
    items = list(items)
    workers = worker_count() if workers is None else max(1, int(workers))
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=min(workers, len(items))) as pool:
        return list(pool.map(fn, items))
