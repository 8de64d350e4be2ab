"""Order-preserving example-level parallelism."""

from __future__ import annotations

import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Callable, Iterable, List, Optional, TypeVar

from tqdm import tqdm

# Add parent directory for config import
sys.path.insert(0, str(Path(__file__).parent.parent.parent))
from config import SystemConfig

logger = logging.getLogger(__name__)

T = TypeVar("T")
R = TypeVar("R")


def resolve_threads(configured: int = SystemConfig.THREADS) -> int:
    """Worker count: XFERLAB_THREADS > configured value; 0 means all cores."""
    raw = os.getenv(SystemConfig.THREADS_ENV)
    if raw:
        try:
            configured = int(raw)
        except ValueError:
            logger.warning("ignoring non-integer %s=%r", SystemConfig.THREADS_ENV, raw)
    if configured <= 0:
        configured = os.cpu_count() or 1
    return configured


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1,
                 desc: Optional[str] = None, progress: bool = False) -> List[R]:
    """map(fn, items) over worker processes; results keep input order.

    ``fn`` must be picklable (a module-level function or a functools.partial of one).
    """
    items = list(items)
    disable = not (progress and SystemConfig.PROGRESS)
    if threads <= 1 or len(items) <= 1:
        return [fn(item) for item in tqdm(items, desc=desc, disable=disable)]
    chunksize = max(1, len(items) // (threads * 4))
    with ProcessPoolExecutor(max_workers=threads) as pool:
        return list(tqdm(pool.map(fn, items, chunksize=chunksize), total=len(items), desc=desc, disable=disable))
