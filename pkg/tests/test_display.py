import logging
from contextlib import nullcontext

import pytest

from motif_cdr.display import DisplayManager, in_container, plain_text
from motif_cdr.evaluation import MetricsReport
from motif_cdr.trainer import EpochRecord


@pytest.fixture
def plain():
    return DisplayManager(enabled=False)


class TestPlainDisplay:
    def test_stage_task_is_its_name(self, plain):
        assert plain.add_stage_task("pretrain", total=3) == "pretrain"
        assert plain.progress is None

    def test_start_is_noop(self, plain):
        assert isinstance(plain.start(), nullcontext)

    def test_finish_logged_without_markup(self, plain, caplog):
        with caplog.at_level(logging.INFO, logger="motif_cdr.display"):
            task = plain.add_stage_task("evaluate")
            plain.update_progress(task, advance=1)
            plain.finish(task)
        assert [r.getMessage() for r in caplog.records] == ["evaluate: Done"]

    def test_epochs_logged_at_debug(self, plain, caplog):
        with caplog.at_level(logging.DEBUG, logger="motif_cdr.display"):
            plain.record_epoch("tune d0_intra", EpochRecord(2, 1.25, 0.5))
        assert caplog.records[0].getMessage() == "tune d0_intra: epoch 2, loss 1.250  val 0.500"


class TestRichDisplay:
    def test_early_stop_fills_bar(self, monkeypatch):
        monkeypatch.setattr("motif_cdr.display.in_container", lambda: False)
        display = DisplayManager(enabled=True)
        task = display.add_stage_task("tune d1_inter", total=5)
        display.record_epoch(task, EpochRecord(0, 2.0, 0.1))
        display.finish(task)
        row = display.progress.tasks[0]
        assert row.completed == 5
        assert row.fields["metrics"] == "loss 2.000  val 0.100"


def test_print_reports(plain, capsys, monkeypatch):
    monkeypatch.setenv("COLUMNS", "200")
    reports = [MetricsReport("intra", 0, 0.5, 0.25, 40), MetricsReport("inter", 1, 0.2, 0.1, 6, skipped=1)]
    plain.print_reports(reports, [MetricsReport("intra", 0, 0.3, 0.2, 40)])
    out = capsys.readouterr().out
    assert "0.5000" in out and "0.3000" in out
    assert "6 (1 skipped)" in out


def test_plain_text():
    assert plain_text("[bold red]loss[/bold red] 0.5") == "loss 0.5"
    assert plain_text("[green]Done") == "Done"


def test_container_markers(tmp_path, monkeypatch):
    monkeypatch.setattr("motif_cdr.display.CONTAINER_MARKERS", ("/nonexistent/.dockerenv", str(tmp_path)))
    assert in_container()
    assert DisplayManager(enabled=True).progress is None
