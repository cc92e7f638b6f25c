from concurrent.futures import ThreadPoolExecutor
import logging
from typing import Callable, Sequence, TypeVar


log = logging.getLogger(__name__)

T = TypeVar("T")


def run_ordered(tasks: Sequence[Callable[[], T]], jobs: int = 1) -> list[T]:
    """Run independent tasks and return their results in submission order.

    jobs <= 1 runs inline on the calling thread. The first exception raised
    by a task (in submission order) propagates after the pool drains.
    """
    jobs = max(1, int(jobs))
    if jobs == 1 or len(tasks) <= 1:
        return [task() for task in tasks]

    workers = min(jobs, len(tasks))
    log.debug("work queue tasks=%d workers=%d", len(tasks), workers)
    with ThreadPoolExecutor(max_workers=workers, thread_name_prefix="anytime-job") as pool:
        futures = [pool.submit(task) for task in tasks]
        return [f.result() for f in futures]


def split_evenly(count: int, parts: int) -> list[range]:
    parts = max(1, min(int(parts), int(count))) if count > 0 else 1
    base, extra = divmod(int(count), parts)
    out = []
    start = 0
    for i in range(parts):
        size = base + (1 if i < extra else 0)
        out.append(range(start, start + size))
        start += size
    return out
