"""
Audit trail for adaptive density control.

Every split, clone and prune is appended as an ``AuditEvent``. The log is
append-only; its event counts reconcile with the cloud-size trajectory.
"""

import csv
import io
from collections import Counter
from typing import Iterable, Optional

from models.records import AdcOp, AuditEvent, format_float

AUDIT_COLUMNS = ("iteration", "op", "parent_id", "child_ids", "grad", "tau")


class AuditLog:
    """Append-only log of densification and pruning events."""

    def __init__(self, events: Optional[Iterable[AuditEvent]] = None):
        self._events: list[AuditEvent] = list(events or [])

    def __len__(self) -> int:
        return len(self._events)

    @property
    def events(self) -> tuple[AuditEvent, ...]:
        return tuple(self._events)

    def record_split(self, iteration: int, parent_id: int, child_ids: tuple[int, int], grad: float, tau: float) -> None:
        """
        Record a split: the parent is retired and replaced by two children.

        Args:
            iteration: Training iteration of the ADC step
            parent_id: Stable id of the split Gaussian
            child_ids: Ids of the two children
            grad: Parent's mean view-space gradient
            tau: Threshold in force
        """
        self._events.append(
            AuditEvent(iteration=iteration, op=AdcOp.SPLIT, parent_id=parent_id, child_ids=child_ids, grad=grad, tau=tau)
        )

    def record_clone(self, iteration: int, parent_id: int, child_id: int, grad: float, tau: float) -> None:
        """Record a clone: the parent stays and gains one shifted duplicate."""
        self._events.append(
            AuditEvent(iteration=iteration, op=AdcOp.CLONE, parent_id=parent_id, child_ids=(child_id,), grad=grad, tau=tau)
        )

    def record_prune(self, iteration: int, gaussian_id: int) -> None:
        """Record removal of a low-opacity Gaussian."""
        self._events.append(AuditEvent(iteration=iteration, op=AdcOp.PRUNE, parent_id=gaussian_id))

    def counts(self) -> dict[str, int]:
        tally = Counter(event.op.value for event in self._events)
        return {op.value: tally.get(op.value, 0) for op in AdcOp}

    def net_growth(self) -> int:
        """Cloud-size change implied by the log (a split is a net +1)."""
        counts = self.counts()
        return counts["split"] + counts["clone"] - counts["prune"]

    def reconciles(self, initial_count: int, final_count: int) -> bool:
        return initial_count + self.net_growth() == final_count

    def summary(self) -> dict[str, int]:
        return {**self.counts(), "events": len(self._events), "net_growth": self.net_growth()}

    def to_csv(self) -> str:
        """CSV export: iteration, op, parent id, child ids (';'-joined), grad, tau."""
        buffer = io.StringIO()
        writer = csv.writer(buffer, lineterminator="\n")
        writer.writerow(AUDIT_COLUMNS)
        for event in self._events:
            writer.writerow(
                [
                    event.iteration,
                    event.op.value,
                    event.parent_id,
                    ";".join(str(c) for c in event.child_ids),
                    format_float(event.grad),
                    format_float(event.tau),
                ]
            )
        return buffer.getvalue()
