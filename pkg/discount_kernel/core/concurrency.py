import asyncio
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, List, TypeVar

T = TypeVar("T")
R = TypeVar("R")


def map_in_threads(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """Apply func to every item, results in input order"""
    items = list(items)
    if jobs <= 1 or len(items) <= 1:
        return [func(item) for item in items]

    with ThreadPoolExecutor(max_workers=min(jobs, len(items))) as pool:
        return list(pool.map(func, items))


async def gather_in_threads(func: Callable[[T], R], items: Iterable[T], jobs: int = 1) -> List[R]:
    """Run func over items in worker threads, at most `jobs` at a time"""
    semaphore = asyncio.Semaphore(max(1, jobs))

    async def run(item: T) -> R:
        async with semaphore:
            return await asyncio.to_thread(func, item)

    return list(await asyncio.gather(*(run(item) for item in items)))
