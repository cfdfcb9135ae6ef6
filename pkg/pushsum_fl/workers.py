from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Optional, Sequence, TypeVar

logger = logging.getLogger(__name__)

T = TypeVar("T")


class ClientPool:
    """
    Runs per-client work on background threads and hands results back in
    client-id order, so the caller's reductions never depend on scheduling.
    workers <= 1 runs inline.
    """

    def __init__(self, workers: int = 1) -> None:
        self.workers = max(1, int(workers))
        self._executor: Optional[ThreadPoolExecutor] = None

    def start(self) -> None:
        if self.workers > 1 and self._executor is None:
            self._executor = ThreadPoolExecutor(
                max_workers=self.workers, thread_name_prefix="client"
            )
            logger.debug("client pool started with %d workers", self.workers)

    def stop(self) -> None:
        if self._executor is not None:
            self._executor.shutdown(wait=True)
            self._executor = None

    def map(self, fn: Callable[[int], T], client_ids: Sequence[int]) -> list[T]:
        if self._executor is None:
            return [fn(i) for i in client_ids]
        return list(self._executor.map(fn, client_ids))

    def __enter__(self) -> ClientPool:
        self.start()
        return self

    def __exit__(self, *exc: object) -> None:
        self.stop()
