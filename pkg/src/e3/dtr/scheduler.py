"""Run independent work units in parallel threads.

Work units are turned into a DAG without edges and executed with the e3
job scheduler. Results are returned in the order of the input units, so the
outcome never depends on the number of workers.
"""

from __future__ import annotations

from dataclasses import dataclass
import logging
import os
from typing import (
    Any,
    Callable,
    Dict,
    FrozenSet,
    List,
    Optional,
    Sequence,
    TYPE_CHECKING,
)

from e3.collection.dag import DAG
from e3.job import Job
from e3.job.scheduler import Scheduler

from e3.dtr import DTRError

if TYPE_CHECKING:
    from e3.dtr.running_status import RunningStatus


logger = logging.getLogger("dtr.scheduler")


@dataclass
class WorkUnit:
    """Independent piece of work."""

    uid: str
    """Unique identifier for this unit."""

    callback: Callable[[], Any]
    """Function that does the work and returns its result."""


class WorkJob(Job):
    """Job running one work unit in a thread."""

    def __init__(
        self,
        uid: str,
        unit: WorkUnit,
        notify_end: Callable[[str], None],
        running_status: Optional[RunningStatus] = None,
    ):
        super().__init__(uid, unit, notify_end)
        self.unit = unit
        self.running_status = running_status
        self.return_value: Any = None
        self.error: Optional[BaseException] = None

    def run(self) -> None:
        if self.running_status is not None:
            self.running_status.start(self.uid)
        try:
            self.return_value = self.unit.callback()
        except Exception as exc:
            self.error = exc
            logger.debug("%s failed: %s", self.uid, exc)
        finally:
            if self.running_status is not None:
                self.running_status.complete(self.uid, self.error is None)


def run_work_units(
    units: Sequence[WorkUnit],
    jobs: int = 1,
    status: Optional[RunningStatus] = None,
) -> List[Any]:
    """Run all work units and return their results in input order.

    :param units: Units to run. Their UIDs must be unique.
    :param jobs: Number of workers. Zero or less means one per CPU.
    :param status: Optional status file to keep updated.
    :raise: The error of the first failing unit (in input order), if any.
    """
    if not units:
        return []
    uids = [unit.uid for unit in units]
    if len(set(uids)) != len(uids):
        raise DTRError("duplicate work unit identifiers", origin="scheduler")

    dag = DAG()
    for unit in units:
        dag.update_vertex(vertex_id=unit.uid, data=unit, enable_checks=False)
    dag.check()

    if status is not None:
        status.set_units(uids)

    finished: Dict[str, WorkJob] = {}

    def job_factory(
        uid: str,
        data: Any,
        predecessors: FrozenSet[str],
        notify_end: Callable[[str], None],
    ) -> WorkJob:
        """Turn a DAG item into a WorkJob instance."""
        assert isinstance(data, WorkUnit)
        return WorkJob(uid, data, notify_end, status)

    def collect_result(job: Job) -> bool:
        assert isinstance(job, WorkJob)
        finished[job.uid] = job

        # In the e3.job.scheduler API, collect returning "True" means
        # "requeue the job". We never want to do that.
        return False

    if jobs <= 0:
        jobs = os.cpu_count() or 1

    scheduler = Scheduler(
        job_provider=job_factory,
        tokens=jobs,
        collect=collect_result,
    )
    scheduler.run(dag)

    for uid in uids:
        error = finished[uid].error
        if error is not None:
            raise error
    return [finished[uid].return_value for uid in uids]
