import asyncio
from typing import Callable, Sequence, TypeVar

import structlog

log = structlog.get_logger(__name__)

T = TypeVar("T")


async def run_jobs_async(jobs: Sequence[Callable[[], T]], workers: int = 2) -> list[T]:
    """
    Runs independent blocking jobs (retrainings, evaluations) on worker threads,
    at most `workers` at a time, with asyncio.gather.
    Results come back in job order whatever order the jobs finish in.
    The first job exception is re-raised after every job has settled.
    """
    if workers < 1:
        raise ValueError("workers must be >= 1")
    semaphore = asyncio.Semaphore(workers)

    async def _run(index: int, job: Callable[[], T]) -> T:
        async with semaphore:
            log.debug("[async_retrain] job started", job=index)
            result = await asyncio.to_thread(job)
            log.debug("[async_retrain] job finished", job=index)
            return result

    results = await asyncio.gather(*(_run(i, job) for i, job in enumerate(jobs)), return_exceptions=True)
    for index, output in enumerate(results):
        if isinstance(output, BaseException):
            log.error("[async_retrain] job failed", job=index, error=str(output))
            raise output
    return list(results)


def run_jobs(jobs: Sequence[Callable[[], T]], workers: int = 2) -> list[T]:
    """Blocking entry point for callers outside an event loop."""
    if workers == 1:
        return [job() for job in jobs]
    return asyncio.run(run_jobs_async(jobs, workers))
