import logging
import os
from contextlib import nullcontext
from typing import Any, Optional, Sequence

from rich.console import Console
from rich.progress import (
    BarColumn,
    MofNCompleteColumn,
    Progress,
    SpinnerColumn,
    TextColumn,
    TimeElapsedColumn,
)
from rich.table import Table
from rich.text import Text

from .evaluation import MetricsReport
from .trainer import EpochRecord

CONTAINER_MARKERS = ("/.dockerenv", "/run/.containerenv")


def in_container() -> bool:
    """Docker and Podman leave a marker file at the filesystem root."""
    return any(os.path.exists(marker) for marker in CONTAINER_MARKERS)


def plain_text(markup: str) -> str:
    return Text.from_markup(markup).plain


class DisplayManager:
    """
    One progress row per pipeline stage (sampling, pre-training, each tuning
    job, evaluation). Rows show the epoch count and the latest loss and
    validation HR. Inside containers or with progress disabled every update
    becomes a log line instead.
    """

    def __init__(self, enabled: bool = True):
        self.console = Console(stderr=True)
        self._rich = enabled and not in_container()
        self._logger = logging.getLogger(__name__)

        if self._rich:
            self.progress = Progress(
                SpinnerColumn(),
                TextColumn("[bold blue]{task.fields[stage]}", justify="right"),
                BarColumn(),
                MofNCompleteColumn(),
                TextColumn("{task.fields[metrics]}"),
                TextColumn("{task.fields[status]}"),
                TimeElapsedColumn(),
                console=self.console,
                expand=True,
            )
        else:
            self.progress = None

    def start(self):
        """Context manager for a whole run: the live progress table, or nothing in plain mode."""
        return self.progress if self.progress is not None else nullcontext()

    def add_stage_task(self, stage: str, total: int = 0) -> Any:
        if self._rich:
            return self.progress.add_task(stage, stage=stage, metrics="", status="", total=total)
        return stage

    def record_epoch(self, task_id: Any, record: EpochRecord):
        """Advance a training row by one epoch."""
        metrics = f"loss {record.loss:.3f}  val {record.val_hr10:.3f}"
        if self._rich:
            self.progress.update(task_id, advance=1, metrics=metrics)
        else:
            self._logger.debug("%s: epoch %d, %s", task_id, record.epoch, metrics)

    def update_progress(self, task_id: Any, advance: int = 0, status: Optional[str] = None):
        if self._rich:
            fields = {} if status is None else {"status": status}
            self.progress.update(task_id, advance=advance, **fields)
        elif status is not None:
            self._logger.info("%s: %s", task_id, plain_text(status))

    def finish(self, task_id: Any, status: str = "[green]Done"):
        """Close a row; early-stopped training fills the rest of its bar."""
        if self._rich:
            total = next(task.total for task in self.progress.tasks if task.id == task_id)
            self.progress.update(task_id, completed=total, status=status)
        else:
            self._logger.info("%s: %s", task_id, plain_text(status))

    def print_reports(self, reports: Sequence[MetricsReport], baseline: Sequence[MetricsReport] = ()):
        """Metrics per (task, domain), next to the untuned baseline when there is one."""
        before = {(r.task, r.domain): r for r in baseline}
        table = Table(title="Evaluation Summary", show_lines=False)
        for column in ("task", "domain", "protocol", f"HR@{reports[0].k}" if reports else "HR",
                       f"NDCG@{reports[0].k}" if reports else "NDCG", "users", "pretrained HR"):
            table.add_column(column, justify="left" if column in ("task", "protocol") else "right")
        for r in reports:
            base = before.get((r.task, r.domain))
            table.add_row(r.task, str(r.domain), r.protocol, f"{r.hr:.4f}", f"{r.ndcg:.4f}",
                          f"{r.n_users} ({r.skipped} skipped)" if r.skipped else str(r.n_users),
                          f"{base.hr:.4f}" if base else "-")
        Console().print(table)
