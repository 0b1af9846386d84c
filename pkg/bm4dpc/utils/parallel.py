"""
Ordered parallel map used by the volume traversals
"""
import logging
from typing import Callable, Iterable, Iterator, Sequence, TypeVar

from joblib import Parallel, delayed
from tqdm import tqdm

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def ordered_map(func: Callable[..., R],
                items: Sequence[T],
                n_jobs: int = 1,
                desc: str = "",
                progress: bool = False) -> Iterator[R]:
    """
    Apply func to every item and yield the results in item order

    The partition of the work is the item list itself, so the caller gets the
    same sequence of results (and can merge them in the same order) whatever
    the number of workers.

    Args:
        func: picklable callable applied to each item
        items: work items
        n_jobs: number of worker processes, 1 runs in-process
        desc: label of the progress bar
        progress: show a tqdm progress bar

    Returns:
        Iterator over func(item), in the order of items
    """
    items = list(items)
    bar: Iterable[T] = tqdm(items, desc=desc, disable=not progress, leave=False)
    if n_jobs <= 1 or len(items) <= 1:
        for item in bar:
            yield func(item)
        return

    logger.debug(f"Dispatching {len(items)} work items to {n_jobs} workers ({desc})")
    runner = Parallel(n_jobs=n_jobs, return_as="generator")
    yield from runner(delayed(func)(item) for item in bar)
