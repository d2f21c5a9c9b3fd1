"""
RunningStatus keeps users informed about the progress of long computations
(model fits, per-patient solves, sensitivity grid points) through a status
file.
"""

from __future__ import annotations

import threading
import time
from typing import Dict, List, Sequence


class RunningStatus:
    def __init__(self, filename: str, update_interval: float = 1.0):
        """RunningStatus constructor.

        :param filename: Name of the status file to write.
        :param update_interval: Minimum number of seconds between status file
            updates.
        """
        self.filename = filename
        self.lock = threading.Lock()

        self.units: List[str] = []
        """Identifiers of all work units in the current batch."""

        self.running: Dict[str, float] = {}
        """Start time of the work units currently running, indexed by UID."""

        self.completed: Dict[str, bool] = {}
        """Whether each completed work unit succeeded, indexed by UID."""

        self.update_interval = update_interval
        self.no_update_before = 0.0

    def set_units(self, uids: Sequence[str]) -> None:
        """Start tracking a new batch of work units."""
        with self.lock:
            self.units = list(uids)
            self.running = {}
            self.completed = {}
            self.no_update_before = 0.0
        self.dump()

    def start(self, uid: str) -> None:
        """Put a work unit in the "running" set."""
        with self.lock:
            assert uid in self.units
            assert uid not in self.running
            assert uid not in self.completed
            self.running[uid] = time.time()
        self.dump()

    def complete(self, uid: str, success: bool) -> None:
        """Move a work unit from the "running" set to the "completed" set."""
        with self.lock:
            assert uid not in self.completed
            self.running.pop(uid)
            self.completed[uid] = success
        self.dump(force=len(self.completed) == len(self.units))

    def dump(self, force: bool = False) -> None:
        """Write the status as human-readable text in the status file."""
        # Do not update the status file more than once per second
        now = time.time()
        if not force and self.update_interval and now < self.no_update_before:
            return
        self.no_update_before = now + self.update_interval

        lines = []
        with self.lock:
            lines.append(
                f"Work units: {len(self.completed)} / {len(self.units)}"
                " completed"
            )
            lines.append("Currently running:")
            if self.running:
                lines.extend(f"  {uid}" for uid in sorted(self.running))
            else:
                lines.append("  <none>")

            succeeded = sum(1 for ok in self.completed.values() if ok)
            failed = len(self.completed) - succeeded
            lines.append("Partial results:")
            if self.completed:
                if succeeded:
                    lines.append(f"  {'SUCCESS'.ljust(12)} {succeeded}")
                if failed:
                    lines.append(f"  {'ERROR'.ljust(12)} {failed}")
            else:
                lines.append("  <none>")

        text = "\n".join(lines)
        with open(self.filename, "w") as f:
            f.write(text)
