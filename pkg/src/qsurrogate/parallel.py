"""Order-preserving parallel map over a process pool."""

from __future__ import annotations

from concurrent.futures import ProcessPoolExecutor


def pmap(fn, items, workers: int = 1, chunksize: int | None = None) -> list:
    """``[fn(x) for x in items]``, fanned out to ``workers`` processes.

    ``fn`` and the items must be picklable when ``workers > 1``.  Results come
    back in input order, so reductions over them do not depend on scheduling.
    """
    items = list(items)
    if workers <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    if chunksize is None:
        chunksize = max(1, len(items) // (4 * workers))
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=chunksize))
