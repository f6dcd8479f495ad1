import csv
import io
import logging
from abc import ABC, abstractmethod
from pathlib import Path
from typing import Any, List, Sequence

from .evaluation import MetricsReport
from .trainer import EpochRecord
from .utils import atomic_write_lines


class BaseTracker(ABC):
    """Abstract base class for tab-separated run artifacts rewritten atomically on every record."""

    def __init__(self, path: Path, logger: logging.Logger):
        self.path = Path(path)
        self.logger = logger
        self.rows: List[List[str]] = []

    @abstractmethod
    def to_row(self, record: Any) -> Sequence[str]:
        """Fields of one record, in file order."""
        pass

    def add(self, record: Any):
        self.rows.append([str(field) for field in self.to_row(record)])
        self.flush()

    def flush(self):
        atomic_write_lines(self.path, ("\t".join(row) for row in self.rows))
        self.logger.debug(f"Wrote {len(self.rows)} row(s) to {self.path}")

    def read(self) -> List[List[str]]:
        if not self.path.exists():
            return []
        with open(self.path, "r", newline="", encoding="utf-8") as f:
            return [row for row in csv.reader(f, delimiter="\t") if row]


class EpochLogTracker(BaseTracker):
    """`epoch<TAB>loss<TAB>val_hr10` per training epoch."""

    def to_row(self, record: EpochRecord) -> Sequence[str]:
        return record.line().split("\t")


class ReportTracker(BaseTracker):
    """`task<TAB>domain<TAB>HR<TAB>NDCG<TAB>n_users` per evaluated (task, domain)."""

    def to_row(self, report: MetricsReport) -> Sequence[str]:
        return report.line().split("\t")

    def has_report(self, task: str, domain: int) -> bool:
        return any(row[0] == task and row[1] == str(domain) for row in self.rows)

    def table(self) -> str:
        buffer = io.StringIO()
        writer = csv.writer(buffer, delimiter="\t", lineterminator="\n")
        writer.writerow(["task", "domain", "HR", "NDCG", "users"])
        writer.writerows(self.rows)
        return buffer.getvalue()
