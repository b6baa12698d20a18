"""noduleagent/backend/fanout.py.

Concurrent calls to a list of backends, with results collected in backend
order regardless of completion order.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Any, Callable, List, Optional, Sequence

from noduleagent.backend.backend_abc import Backend
from noduleagent.exceptions import BackendError, FanoutError

logger = logging.getLogger(__name__)

DEFAULT_WORKERS = 4


@dataclass
class Outcome:
    """The slot of one backend in a fan-out: a response or an error."""

    index: int
    backend_id: str
    response: Optional[Any] = None
    error: Optional[BackendError] = None

    @property
    def ok(self):
        return self.error is None


def fanout(
    backends: Sequence[Backend],
    build_request: Callable[[int], dict],
    workers: Optional[int] = DEFAULT_WORKERS,
) -> List[Outcome]:
    """Calls `backends[i]` with `build_request(i)` for every i.

    Backend failures are captured in their slot; callers choose between
    `raise_for_failures` and skipping.  Errors raised by `build_request`
    itself propagate.
    """
    if not backends:
        raise ValueError("fan-out needs at least one backend")
    requests = [build_request(index) for index in range(len(backends))]

    def run(index):
        backend = backends[index]
        try:
            return Outcome(index, backend.backend_id, response=backend.call(requests[index]))
        except BackendError as err:
            logger.info("%s failed: %s", backend.backend_id, err)
            return Outcome(index, backend.backend_id, error=err)

    if workers is None or workers <= 1 or len(backends) == 1:
        return [run(index) for index in range(len(backends))]

    with ThreadPoolExecutor(max_workers=min(workers, len(backends))) as pool:
        futures = [pool.submit(run, index) for index in range(len(backends))]
        return [future.result() for future in futures]


def raise_for_failures(outcomes: Sequence[Outcome]):
    failures = {o.index: o.error for o in outcomes if not o.ok}
    if failures:
        raise FanoutError(failures)


def responses(outcomes: Sequence[Outcome]) -> List[Any]:
    """The responses of a fully successful fan-out, in backend order."""
    raise_for_failures(outcomes)
    return [o.response for o in outcomes]
