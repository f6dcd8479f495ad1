import logging
from concurrent.futures import ThreadPoolExecutor, as_completed
from contextlib import contextmanager
from functools import partial
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from rich.logging import RichHandler

from .checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from .config import ConfigManager, PipelineConfig
from .display import DisplayManager
from .encoder import Task
from .errors import MotifCDRError, StageError, TrainingDiverged
from .evaluation import MetricsReport, evaluate, recommend, recommendation_lines
from .graph import Dataset, load_dataset
from .hypergraph import build_incidence, dump_incidence
from .motifs import MotifSampler, write_motifs
from .splits import DataSplit, split_dataset
from .tracker import EpochLogTracker, ReportTracker
from .trainer import EpochRecord, Trainer
from .utils import atomic_write_lines

Job = Tuple[int, Task]


class MotifCDR:
    """Main application controller: every pipeline stage, alone or chained."""

    def __init__(self, config_path: Optional[str] = None, debug: bool = False,
                 threads: Optional[int] = None, progress: bool = True):
        # Initialize display first to get the shared console
        self.display = DisplayManager(enabled=progress)

        logging.basicConfig(
            level=logging.DEBUG if debug else logging.INFO,
            format="%(message)s",
            datefmt="[%X]",
            handlers=[RichHandler(console=self.display.console, rich_tracebacks=True, show_path=False)],
            force=True
        )
        self.logger = logging.getLogger(__name__)

        with self._stage("config"):
            self.config_manager = ConfigManager(config_path)
            self.config: PipelineConfig = self.config_manager.load().with_overrides(
                threads=threads, debug=debug or None
            )
        if self.config.debug:
            logging.getLogger().setLevel(logging.DEBUG)

        self.output_dir = Path(self.config.data.output_dir)
        self.logger.debug(f"Using config {self.config_manager.config_path}, output in {self.output_dir}")

    @contextmanager
    def _stage(self, name: str):
        """Re-raise library errors tagged with the stage they broke."""
        try:
            yield
        except StageError:
            raise
        except (MotifCDRError, OSError) as e:
            raise StageError(name, str(e)) from e

    def _path(self, *parts: str) -> Path:
        return self.output_dir.joinpath(*parts)

    def tuned_path(self, domain_id: int, task: Task) -> Path:
        return self._path("checkpoints", f"tuned_d{domain_id}_{Task(task).value}.ckpt")

    # -- stages -------------------------------------------------------------------

    def ingest(self) -> Dataset:
        with self._stage("ingest"):
            data = self.config.data
            if not data.interactions:
                raise StageError("ingest", "no interaction files configured (data.interactions)")
            dataset = load_dataset(data.interactions, data.overlap, data.overlap_domains)
            rows = dataset.summary()
            atomic_write_lines(self._path("summary.tsv"), (
                "\t".join(str(row[key]) for key in ("domain", "users", "items", "edges", "overlapped"))
                for row in rows
            ))
        for row in rows:
            self.logger.info(f"Domain {row['domain']}: {row['users']} users, {row['items']} items, "
                             f"{row['edges']} edges, {row['overlapped']} overlapped")
        return dataset

    def split(self, dataset: Dataset) -> DataSplit:
        with self._stage("split"):
            split = split_dataset(dataset, self.config.seed, self.config.eval.cold_fraction,
                                  self.config.data.overlap_domains)
        for d, counts in split.summary().items():
            self.logger.info(f"Domain {d}: " + ", ".join(f"{k} {v}" for k, v in counts.items()))
        return split

    def load(self) -> DataSplit:
        return self.split(self.ingest())

    def sample_motifs(self, split: DataSplit) -> Dict[int, Path]:
        """Sample the epoch-0 motifs of every domain and write them out."""
        motifs_cfg = self.config.motifs
        paths: Dict[int, Path] = {}
        task_id = self.display.add_stage_task("sample-motifs", total=len(split.train.graphs))
        with self._stage("sample-motifs"):
            for domain_id, graph in split.train.graphs.items():
                sampler = MotifSampler(
                    graph, self.config.seed, motifs_cfg.budget,
                    is_overlapped=partial(split.train.is_overlapped, domain_id),
                    lambda_f=motifs_cfg.lambda_f, threads=self.config.threads, logger=self.logger,
                )
                motifs = sampler.sample(motifs_cfg.kind, motifs_cfg.walk_length, epoch=0)
                if not motifs:
                    self.logger.warning(f"Domain {domain_id}: no {motifs_cfg.kind} motifs found")
                paths[domain_id] = write_motifs(self._path("motifs", f"domain{domain_id}.tsv"), motifs)
                if self.config.debug and motifs:
                    inc = build_incidence(motifs, graph, motifs_cfg.merge_hyperedges)
                    dump_incidence(self._path("motifs", f"domain{domain_id}.incidence.tsv"), inc)
                self.display.update_progress(task_id, advance=1,
                                             status=f"domain {domain_id}: {len(motifs)} motif(s)")
        self.display.finish(task_id)
        return paths

    def _epoch_callback(self, tracker: EpochLogTracker, task_id, stage: str, record: EpochRecord):
        tracker.add(record)
        self.display.record_epoch(task_id, record)

    def pretrain(self, split: DataSplit) -> Checkpoint:
        tracker = EpochLogTracker(self._path("logs", "pretrain.tsv"), self.logger)
        task_id = self.display.add_stage_task("pretrain", total=self.config.train.pretrain_epochs)
        trainer = Trainer(split, self.config, self.logger, partial(self._epoch_callback, tracker, task_id))
        try:
            with self._stage("pretrain"):
                result = trainer.pretrain()
                save_checkpoint(self._path("checkpoints", "pretrained.ckpt"), result.checkpoint)
        except TrainingDiverged as e:
            if e.last_good is not None:
                save_checkpoint(self._path("checkpoints", "pretrained.last_good.ckpt"), e.last_good)
            raise
        tracker.flush()
        self.display.finish(task_id)
        return result.checkpoint

    def prompt_tune(self, split: DataSplit, pretrained: Checkpoint, domain_id: int, task: Task) -> Checkpoint:
        task = Task(task)
        name = f"d{domain_id}_{task.value}"
        tracker = EpochLogTracker(self._path("logs", f"tune_{name}.tsv"), self.logger)
        task_id = self.display.add_stage_task(f"tune {name}", total=self.config.train.tune_epochs)
        trainer = Trainer(split, self.config, self.logger, partial(self._epoch_callback, tracker, task_id))
        with self._stage("prompt-tune"):
            result = trainer.prompt_tune(pretrained, domain_id, task)
            save_checkpoint(self.tuned_path(domain_id, task), result.checkpoint)
        tracker.flush()
        self.display.finish(task_id)
        return result.checkpoint

    def jobs(self, split: DataSplit) -> List[Job]:
        """Intra-domain tuning for every domain, inter-domain where cold users exist."""
        jobs = [(d, Task.INTRA) for d in split.train.domain_ids]
        jobs += [(d, Task.INTER) for d in split.overlap_domains if d in split.inter and split.inter[d].test]
        return sorted(jobs, key=lambda job: (job[0], job[1].value))

    def tune_all(self, split: DataSplit, pretrained: Checkpoint) -> Dict[Job, Checkpoint]:
        jobs = self.jobs(split)
        self.logger.info(f"Prompt tuning {len(jobs)} job(s) with {self.config.threads} worker(s)...")
        tuned: Dict[Job, Checkpoint] = {}
        with ThreadPoolExecutor(max_workers=self.config.threads) as executor:
            futures = {executor.submit(self.prompt_tune, split, pretrained, d, task): (d, task) for d, task in jobs}
            for future in as_completed(futures):
                tuned[futures[future]] = future.result()
        return dict(sorted(tuned.items(), key=lambda item: (item[0][0], item[0][1].value)))

    def evaluate(self, split: DataSplit, checkpoint: Checkpoint, domain_id: int, task: Task) -> MetricsReport:
        with self._stage("evaluate"):
            return evaluate(checkpoint, split, domain_id, task, self.config, self.logger)

    def evaluate_all(self, split: DataSplit, tuned: Dict[Job, Checkpoint],
                     pretrained: Optional[Checkpoint] = None) -> Tuple[List[MetricsReport], List[MetricsReport]]:
        """Score every tuned checkpoint; with `pretrained`, also score it on the same tasks as a baseline."""
        reports = ReportTracker(self._path("reports", "metrics.tsv"), self.logger)
        baseline = ReportTracker(self._path("reports", "pretrained_metrics.tsv"), self.logger)
        task_id = self.display.add_stage_task("evaluate", total=len(tuned))
        results, before = [], []
        for (domain_id, task), checkpoint in tuned.items():
            report = self.evaluate(split, checkpoint, domain_id, task)
            reports.add(report)
            results.append(report)
            if pretrained is not None:
                before.append(self.evaluate(split, pretrained, domain_id, task))
                baseline.add(before[-1])
            self.display.update_progress(task_id, advance=1, status=f"{task.value} d{domain_id}")
        self.display.finish(task_id)
        return results, before

    def recommend(self, checkpoint_path: Union[str, Path], domain_id: int, user_ids: Sequence[int], k: int,
                  output: Optional[Union[str, Path]] = None) -> Path:
        split = self.load()
        with self._stage("recommend"):
            checkpoint = load_checkpoint(checkpoint_path)
            recs = recommend(checkpoint, split, domain_id, user_ids, k, self.config, self.logger)
            path = Path(output) if output else self._path(f"recommendations_d{domain_id}.tsv")
            atomic_write_lines(path, recommendation_lines(recs))
        failed = sum(1 for r in recs if r.error)
        if failed:
            self.logger.warning(f"{failed} of {len(recs)} user(s) could not be served")
        self.logger.info(f"Wrote recommendations for {len(recs) - failed} user(s) to {path}")
        return path

    def load_checkpoint(self, path: Union[str, Path], stage: str) -> Checkpoint:
        with self._stage(stage):
            return load_checkpoint(path)

    # -- whole run ----------------------------------------------------------------

    def run(self) -> List[MetricsReport]:
        """ingest -> split -> sample -> pretrain -> prompt-tune (each domain, each task) -> evaluate."""
        print("Motif-based cross-domain recommendation")
        print("=" * 60)
        with self.display.start():
            split = self.load()
            self.sample_motifs(split)
            pretrained = self.pretrain(split)
            tuned = self.tune_all(split, pretrained)
            reports, baseline = self.evaluate_all(split, tuned, pretrained)
        self._print_summary(reports, baseline)
        return reports

    def _print_summary(self, reports: List[MetricsReport], baseline: List[MetricsReport]):
        if not reports:
            print("\nNo task was evaluated.")
            return
        print()
        self.display.print_reports(reports, baseline)
        print(f"\n{'=' * 60}")
        self.logger.info(f"Complete! Reports in {self._path('reports')}")
        print(f"{'=' * 60}")
