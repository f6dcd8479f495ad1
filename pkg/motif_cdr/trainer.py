"""
Pre-training and prompt tuning.

Pre-training optimizes the embedding tables, the MoDE layers and the mask
token under a mix of the contrastive and reconstruction losses while every
prompt sits at its identity value. Prompt tuning then freezes all of that and
fits only the target domain's prompts to the recommendation loss.
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

from .autodiff import ParamStore, Tensor, concat, make_optimizer
from .checkpoint import Checkpoint, Stage
from .config import PipelineConfig
from .encoder import ConvolvedTables, EpochStructure, MotifEncoder, NodeEmbedder, Task
from .errors import NumericalError, SamplingError, TrainingDiverged
from .evaluation import choose_protocol, held_out, score_task
from .motifs import Context
from .objectives import (Denominator, ViewPair, cl_loss, er_loss, mask_motif, pretrain_loss, rec_loss,
                         sample_negatives)
from .oracle import GroundTruth, fit_oracle
from .splits import DataSplit
from .utils import STREAM_TRAIN, node_rng

logger = logging.getLogger(__name__)

PPT = "ppt"


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    val_hr10: float

    def line(self) -> str:
        return f"{self.epoch}\t{self.loss:.6f}\t{self.val_hr10:.6f}"


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: List[EpochRecord] = field(default_factory=list)
    warnings: Counter = field(default_factory=Counter)


def check_finite(store: ParamStore):
    for name, tensor in store.trainable():
        if not np.all(np.isfinite(tensor.data)):
            raise NumericalError(f"parameter {name!r} became non-finite")


def _total(terms: List[Tensor]) -> Tensor:
    if not terms:
        return Tensor(0.0)
    total = terms[0]
    for term in terms[1:]:
        total = total + term
    return total


class Trainer:
    """Runs both training stages over one data split."""

    def __init__(self, split: DataSplit, config: PipelineConfig, logger: Optional[logging.Logger] = None,
                 on_epoch: Optional[Callable[[str, EpochRecord], None]] = None):
        self.split = split
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        self.on_epoch = on_epoch
        self._protocols: Dict[int, str] = {}

    def _protocol(self, domain_id: int) -> str:
        if domain_id not in self._protocols:
            graph = self.split.train.graphs[domain_id]
            self._protocols[domain_id] = choose_protocol(
                self.config.eval.protocol, graph.n_items, self.config.eval.negatives, self.logger
            )
        return self._protocols[domain_id]

    def _checkpoint(self, encoder: MotifEncoder, stage: Stage, **meta) -> Checkpoint:
        return Checkpoint.from_store(
            encoder.store, self.config.to_dict(), stage,
            rng_state={"seed": self.config.seed, "epochs": meta.get("epochs", 0)},
            meta=meta,
        )

    def _report(self, stage: str, record: EpochRecord):
        self.logger.info(f"[{stage}] epoch {record.epoch}: loss {record.loss:.4f}, "
                         f"val HR@{self.config.eval.k} {record.val_hr10:.4f}")
        if self.on_epoch:
            self.on_epoch(stage, record)

    # -- pre-training -----------------------------------------------------------------

    def pretrain(self) -> TrainResult:
        cfg = self.config
        train = cfg.train
        encoder = MotifEncoder(self.split.train, cfg, logger=self.logger)
        encoder.store.freeze(encoder.prompt_names())
        result = TrainResult(self._checkpoint(encoder, Stage.PRETRAINED, epochs=0))
        if train.pretrain_epochs == 0:
            self.logger.info("Zero pre-training epochs; checkpoint holds the initialization")
            return result

        truth = None
        if train.lambda1 < 1.0:
            truth = fit_oracle(self.split.train, 2 * cfg.model.d, train.oracle_epochs, train.oracle_lr,
                               train.tau, train.negatives, train.batch_size, cfg.seed, self.logger)
        optimizer = make_optimizer(train.optimizer, encoder.store, train.lr)
        denominator = Denominator(train.denominator)

        inference: Optional[EpochStructure] = None
        for epoch in range(train.pretrain_epochs):
            structure = encoder.build_structure(epoch)
            if inference is None:
                inference = structure
            result.warnings.update(structure.warnings)
            try:
                loss = self._pretrain_epoch(encoder, structure, truth, optimizer, denominator,
                                            result.warnings)
            except NumericalError as e:
                raise TrainingDiverged("pretrain", f"epoch {epoch}: {e}", result.checkpoint) from e

            record = EpochRecord(epoch, loss, self._pretrain_validation(encoder, inference))
            result.history.append(record)
            self._report("pretrain", record)
            result.checkpoint = self._checkpoint(encoder, Stage.PRETRAINED, epochs=epoch + 1)

        if result.warnings:
            self.logger.warning("Pre-training warnings: " + ", ".join(
                f"{key}={count}" for key, count in sorted(result.warnings.items())
            ))
        result.checkpoint.meta["warnings"] = dict(sorted(result.warnings.items()))
        return result

    def _pretrain_epoch(self, encoder: MotifEncoder, structure: EpochStructure,
                        truth: Optional[GroundTruth], optimizer, denominator: Denominator,
                        warnings: Counter) -> float:
        cfg = self.config
        epoch = structure.epoch
        batches: Dict[int, List[np.ndarray]] = {}
        for domain_id in encoder.domains:
            pool = structure.pools[domain_id]
            nodes = np.array(sorted(pool.covered_nodes(2)), dtype=np.int64)
            warnings["nodes_with_one_motif"] += len(pool.covered_nodes(1)) - len(nodes)
            order = node_rng(cfg.seed, STREAM_TRAIN, 1, epoch, domain_id).permutation(nodes)
            size = cfg.train.batch_size
            batches[domain_id] = [order[s:s + size] for s in range(0, len(order), size)]

        total = 0.0
        for step in range(max((len(b) for b in batches.values()), default=0)):
            tables = encoder.convolve(structure)
            cl_terms, er_terms = [], []
            for domain_id in encoder.domains:
                if step < len(batches[domain_id]):
                    cl, er = self._domain_terms(encoder, structure, tables, domain_id, batches[domain_id][step],
                                                truth, denominator, warnings)
                    cl_terms.append(cl)
                    er_terms.append(er)
            loss = pretrain_loss(_total(cl_terms), _total(er_terms), cfg.train.lambda1)
            if not loss.requires_grad:
                continue
            loss.backward()
            optimizer.step()
            check_finite(encoder.store)
            total += loss.item()
        return total

    def _domain_terms(self, encoder: MotifEncoder, structure: EpochStructure, tables: ConvolvedTables,
                      domain_id: int, nodes: np.ndarray, truth: Optional[GroundTruth],
                      denominator: Denominator, warnings: Counter) -> Tuple[Tensor, Tensor]:
        """Contrastive and reconstruction terms of one domain's batch."""
        cfg = self.config
        pool = structure.pools[domain_id]
        by_context: Dict[Context, List[int]] = defaultdict(list)
        for node in nodes:
            by_context[encoder.context_of(domain_id, int(node))].append(int(node))

        views: List[ViewPair] = []
        reconstructed: List[Tensor] = []
        targets: List[int] = []
        for context in Context:
            group = by_context.get(context)
            if not group:
                continue
            firsts, seconds, masks = [], [], []
            for node in group:
                rng = node_rng(cfg.seed, STREAM_TRAIN, 2, structure.epoch, domain_id, node)
                motifs = pool.motifs_for(node)
                a, b = rng.choice(len(motifs), size=2, replace=False)
                firsts.append(motifs[int(a)])
                seconds.append(motifs[int(b)])
                masks.append(mask_motif(motifs[int(a)], rng))
            group_ids = np.array(group, dtype=np.int64)

            if cfg.train.lambda1 > 0.0:
                first = encoder.embed(tables, structure, domain_id, context, group_ids,
                                      motif_sets=[[m] for m in firsts])
                second = encoder.embed(tables, structure, domain_id, context, group_ids,
                                       motif_sets=[[m] for m in seconds])
                views.append(ViewPair(domain_id, context, first, second))

            if truth is not None:
                keep = [k for k, node in enumerate(group) if truth.is_eligible(domain_id, node)]
                if keep:
                    reconstructed.append(encoder.embed(
                        tables, structure, domain_id, context, group_ids[keep],
                        masks=[masks[k] for k in keep],
                    ))
                    targets.extend(group[k] for k in keep)

        cl, skipped = cl_loss(views, cfg.train.tau, denominator)
        warnings["cl_singleton_nodes"] += skipped
        er = Tensor(0.0)
        if truth is not None:
            if targets:
                recon = concat(reconstructed, axis=0) if len(reconstructed) > 1 else reconstructed[0]
                er = er_loss(recon, truth.vectors[domain_id][targets], cfg.train.tau, denominator)
            else:
                warnings["empty_reconstruction_batches"] += 1
        return cl, er

    def _pretrain_validation(self, encoder: MotifEncoder, structure: EpochStructure) -> float:
        """Mean intra-domain validation HR@k with identity prompts."""
        embedder = NodeEmbedder(encoder, structure, cache=True)
        scores = [
            score_task(embedder, self.split, d, Task.INTRA, self.config, validation=True,
                       protocol=self._protocol(d), log=self.logger).hr
            for d in encoder.domains
            if self.split.intra[d].validation
        ]
        return float(np.mean(scores)) if scores else 0.0

    # -- prompt tuning ----------------------------------------------------------------

    def prompt_tune(self, checkpoint: Checkpoint, domain_id: int, task: Task) -> TrainResult:
        checkpoint.require_stage(Stage.PRETRAINED, "prompt-tune")
        cfg = self.config
        train = cfg.train
        task = Task(task)
        source = self.split.source_of(domain_id) if task is Task.INTER else None
        stage = f"prompt-tune d{domain_id} {task.value}"

        encoder = MotifEncoder(self.split.train, cfg, store=checkpoint.to_store(), logger=self.logger)
        store = encoder.store
        ppt = train.paradigm == PPT
        if ppt:
            tunable = set(encoder.prompt_names(domain_id))
            store.freeze_all_except(lambda name: name in tunable)
        else:
            store.unfreeze_all()
        embedder = NodeEmbedder(encoder, encoder.build_structure(0), cache=ppt)

        graph = self.split.train.graphs[domain_id]
        edges = np.array(list(graph.edges()), dtype=np.int64).reshape(-1, 2)
        optimizer = make_optimizer(train.optimizer, store, train.lr)
        denominator = Denominator(train.denominator)
        has_validation = bool(held_out(self.split, domain_id, task).validation)

        result = TrainResult(checkpoint)
        best_val = self._validate(embedder, domain_id, task) if has_validation else 0.0
        best_state = {name: t.data.copy() for name, t in store.trainable()}
        best_epoch, stale = -1, 0
        self.logger.info(f"[{stage}] {len(edges)} training edge(s), starting val HR@{cfg.eval.k} {best_val:.4f}")

        for epoch in range(train.tune_epochs):
            try:
                loss = self._tune_epoch(embedder, domain_id, task, source, edges, epoch, optimizer,
                                        denominator, result.warnings)
            except NumericalError as e:
                last_good = self._checkpoint(encoder, Stage.PRETRAINED, epochs=epoch)
                last_good.params.update(best_state)
                raise TrainingDiverged("prompt-tune", f"epoch {epoch}: {e}", last_good) from e

            val = self._validate(embedder, domain_id, task) if has_validation else 0.0
            record = EpochRecord(epoch, loss, val)
            result.history.append(record)
            self._report(stage, record)
            if not has_validation:
                continue
            if val > best_val:
                best_val, best_epoch, stale = val, epoch, 0
                best_state = {name: t.data.copy() for name, t in store.trainable()}
            else:
                stale += 1
                if stale >= train.patience:
                    self.logger.info(f"[{stage}] early stop after epoch {epoch}; best epoch {best_epoch}")
                    break

        if has_validation:
            for name, value in best_state.items():
                store[name].data = value.copy()

        result.checkpoint = self._checkpoint(
            encoder, Stage.TUNED, epochs=len(result.history), domain=domain_id, task=task.value,
            paradigm=train.paradigm, best_epoch=best_epoch, best_val_hr10=best_val,
        )
        return result

    def _tune_epoch(self, embedder: NodeEmbedder, domain_id: int, task: Task, source: Optional[int],
                    edges: np.ndarray, epoch: int, optimizer, denominator: Denominator,
                    warnings: Counter) -> float:
        cfg = self.config
        graph = self.split.train.graphs[domain_id]
        rng = node_rng(cfg.seed, STREAM_TRAIN, 3, domain_id, epoch)
        order = rng.permutation(len(edges))
        total = 0.0
        for start in range(0, len(order), cfg.train.batch_size):
            batch = edges[order[start:start + cfg.train.batch_size]]
            kept, negatives = [], []
            for k, (user, _) in enumerate(batch):
                seen = {int(i) - graph.n_users for i in graph.neighbor_ids(int(user))}
                try:
                    negatives.append(sample_negatives(graph.n_items, seen, cfg.train.negatives, rng))
                    kept.append(k)
                except SamplingError:
                    warnings["edges_without_negatives"] += 1
            if not kept:
                continue
            batch = batch[kept]
            positives = batch[:, 1] - graph.n_users
            negatives = np.stack(negatives)

            needed = np.unique(np.concatenate([positives, negatives.ravel()]))
            items = embedder.items(domain_id, needed + graph.n_users)
            users = embedder.users(domain_id, task, batch[:, 0], source)
            loss = rec_loss(users, items, np.searchsorted(needed, positives),
                            np.searchsorted(needed, negatives), cfg.train.tau, denominator)
            if not loss.requires_grad:
                continue
            loss.backward()
            optimizer.step()
            check_finite(embedder.encoder.store)
            embedder.refresh()
            total += loss.item()
        return total

    def _validate(self, embedder: NodeEmbedder, domain_id: int, task: Task) -> float:
        return score_task(embedder, self.split, domain_id, task, self.config, validation=True,
                          protocol=self._protocol(domain_id), log=self.logger).hr


def pretrain(split: DataSplit, config: PipelineConfig, logger: Optional[logging.Logger] = None) -> Checkpoint:
    return Trainer(split, config, logger).pretrain().checkpoint


def prompt_tune(checkpoint: Checkpoint, split: DataSplit, domain_id: int, task: Task,
                config: Optional[PipelineConfig] = None, logger: Optional[logging.Logger] = None) -> Checkpoint:
    config = config or PipelineConfig.from_dict(checkpoint.config)
    return Trainer(split, config, logger).prompt_tune(checkpoint, domain_id, task).checkpoint
