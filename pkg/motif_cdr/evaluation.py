import logging
import math
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Set, Tuple

import numpy as np

from .checkpoint import Checkpoint, Stage
from .config import PipelineConfig
from .encoder import MotifEncoder, NodeEmbedder, Task
from .errors import ValidationError
from .graph import DomainGraph, NodeKind
from .splits import DataSplit, HeldOut
from .utils import STREAM_EVAL, node_rng

logger = logging.getLogger(__name__)

SAMPLED = "sampled"
FULL = "full"


def hr_at_k(rank: float, k: int) -> int:
    return int(rank <= k)


def ndcg_at_k(rank: float, k: int) -> float:
    """Single-positive NDCG: 1 / log2(rank + 1) inside the cutoff."""
    return 1.0 / math.log2(rank + 1) if rank <= k else 0.0


def tied_rank(scores: np.ndarray, positive: int) -> float:
    """1-based rank of scores[positive]; ties sit at their mean position."""
    s = scores[positive]
    higher = int(np.sum(scores > s))
    ties = int(np.sum(scores == s)) - 1
    return 1.0 + higher + ties / 2.0


def cosine_scores(user: np.ndarray, items: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(items, axis=1) * np.linalg.norm(user)
    norms[norms == 0] = np.inf
    return items @ user / norms


@dataclass
class RankedEval:
    k: int = 10
    ranks: Dict[int, float] = field(default_factory=dict)
    candidates: Dict[int, int] = field(default_factory=dict)
    skipped: int = 0

    def add(self, user: int, rank: float, n_candidates: int):
        if not 1 <= rank <= n_candidates:
            raise ValidationError(f"rank {rank} outside [1, {n_candidates}]")
        self.ranks[user] = rank
        self.candidates[user] = n_candidates

    @property
    def n_users(self) -> int:
        return len(self.ranks)

    @property
    def hr(self) -> float:
        if not self.ranks:
            return 0.0
        return float(np.mean([hr_at_k(r, self.k) for r in self.ranks.values()]))

    @property
    def ndcg(self) -> float:
        if not self.ranks:
            return 0.0
        return float(np.mean([ndcg_at_k(r, self.k) for r in self.ranks.values()]))


@dataclass
class MetricsReport:
    task: str
    domain: int
    hr: float
    ndcg: float
    n_users: int
    k: int = 10
    protocol: str = SAMPLED
    skipped: int = 0

    def line(self) -> str:
        return f"{self.task}\t{self.domain}\t{self.hr:.6f}\t{self.ndcg:.6f}\t{self.n_users}"

    def table(self) -> str:
        return (f"task={self.task} domain={self.domain} protocol={self.protocol}\n"
                f"  HR@{self.k:<3d} {self.hr:.4f}\n"
                f"  NDCG@{self.k:<3d} {self.ndcg:.4f}\n"
                f"  users {self.n_users} (skipped {self.skipped})")


def choose_protocol(protocol: str, n_items: int, negatives: int, log: logging.Logger = logger) -> str:
    if protocol == SAMPLED and n_items < negatives + 1:
        log.warning(f"Catalog of {n_items} item(s) is smaller than {negatives} negatives + 1; "
                    f"falling back to full ranking")
        return FULL
    return protocol


def candidate_items(n_items: int, positive: int, excluded: Set[int], protocol: str, negatives: int,
                    rng: np.random.Generator) -> np.ndarray:
    """Positive first, then the negatives (item offsets within the domain catalog)."""
    allowed = np.setdiff1d(np.arange(n_items), np.array(sorted(excluded | {positive}), dtype=np.int64))
    if protocol == SAMPLED and allowed.size > negatives:
        allowed = np.sort(rng.choice(allowed, size=negatives, replace=False))
    return np.concatenate([[positive], allowed]).astype(np.int64)


def rank_cases(user_vectors: np.ndarray, item_vectors: np.ndarray, cases: Dict[int, int],
               held: HeldOut, graph: DomainGraph, protocol: str, negatives: int, k: int, seed: int,
               stream_key: int = 0, log: logging.Logger = logger) -> RankedEval:
    """
    Rank each case's positive among its candidates by cosine score.

    `cases` maps user per_domain_id to a positive item per_domain_id; items the
    user trained on or had held out are never drawn as negatives.
    """
    protocol = choose_protocol(protocol, graph.n_items, negatives, log)
    result = RankedEval(k=k)
    for user in sorted(cases):
        if not 0 <= user < user_vectors.shape[0] or not np.any(user_vectors[user]):
            result.skipped += 1
            continue
        positive = cases[user] - graph.n_users
        train_items = {int(i) - graph.n_users for i in graph.neighbor_ids(user)}
        hidden = {i - graph.n_users for i in held.hidden.get(user, set())}
        excluded = (train_items | hidden) - {positive}
        rng = node_rng(seed, STREAM_EVAL, graph.domain_id, stream_key, user)
        candidates = candidate_items(graph.n_items, positive, excluded, protocol, negatives, rng)
        scores = cosine_scores(user_vectors[user], item_vectors[candidates])
        result.add(user, tied_rank(scores, 0), len(candidates))
    if result.skipped:
        log.warning(f"Domain {graph.domain_id}: skipped {result.skipped} test user(s) without embeddings")
    return result


def held_out(split: DataSplit, domain_id: int, task: Task) -> HeldOut:
    return (split.intra if Task(task) is Task.INTRA else split.inter)[domain_id]


def score_task(embedder: NodeEmbedder, split: DataSplit, domain_id: int, task: Task,
               config: PipelineConfig, validation: bool = False, protocol: Optional[str] = None,
               log: logging.Logger = logger) -> RankedEval:
    """
    Rank the test (or validation) positives of one domain and task.

    Inter-domain users borrow their shared half from the other domain of the
    overlapped pair. A resolved `protocol` skips the catalog-size check.
    """
    task = Task(task)
    held = held_out(split, domain_id, task)
    source = split.source_of(domain_id) if task is Task.INTER else None
    graph = split.train.graphs[domain_id]
    if protocol is None:
        protocol = choose_protocol(config.eval.protocol, graph.n_items, config.eval.negatives, log)
    users, items = embedder.domain_arrays(domain_id, task, source)
    return rank_cases(users, items, held.validation if validation else held.test, held, graph, protocol,
                      config.eval.negatives, config.eval.k, config.seed,
                      stream_key=1 if validation else 0, log=log)


def evaluate(checkpoint: Checkpoint, split: DataSplit, domain_id: int, task: Task,
             config: Optional[PipelineConfig] = None, log: logging.Logger = logger) -> MetricsReport:
    """HR@k and NDCG@k of a checkpoint on the held-out test positives."""
    config = config or PipelineConfig.from_dict(checkpoint.config)
    task = Task(task)
    encoder = MotifEncoder(split.train, config, store=checkpoint.to_store(), logger=log)
    embedder = NodeEmbedder(encoder, encoder.build_structure(0))
    graph = split.train.graphs[domain_id]
    protocol = choose_protocol(config.eval.protocol, graph.n_items, config.eval.negatives, log)
    ranked = score_task(embedder, split, domain_id, task, config, protocol=protocol, log=log)
    log.info(f"Evaluated {task.value} task on domain {domain_id}: HR@{ranked.k} {ranked.hr:.4f}, "
             f"NDCG@{ranked.k} {ranked.ndcg:.4f} over {ranked.n_users} user(s)")
    return MetricsReport(task.value, domain_id, ranked.hr, ranked.ndcg, ranked.n_users, ranked.k, protocol,
                         ranked.skipped)


@dataclass
class Recommendation:
    user: int
    items: List[Tuple[int, float]] = field(default_factory=list)
    error: Optional[str] = None
    reason: Optional[str] = None


def recommend_top_k(user_vectors: np.ndarray, item_vectors: np.ndarray, graph: DomainGraph,
                    user_ids: Sequence[int], k: int) -> List[Recommendation]:
    """
    Top-k items by cosine for each requested user (local ids), excluding items
    the user already interacted with. Unknown users get an error entry.
    """
    out = []
    for local_id in user_ids:
        try:
            user = graph.node(NodeKind.USER, int(local_id)).per_domain_id
        except KeyError:
            out.append(Recommendation(int(local_id), error=f"unknown user {local_id} in domain {graph.domain_id}"))
            continue
        if k <= 0:
            out.append(Recommendation(int(local_id)))
            continue
        seen = {int(i) - graph.n_users for i in graph.neighbor_ids(user)}
        eligible = np.array([i for i in range(graph.n_items) if i not in seen], dtype=np.int64)
        if eligible.size == 0:
            out.append(Recommendation(int(local_id), reason="user has interacted with every item"))
            continue
        scores = cosine_scores(user_vectors[user], item_vectors[eligible])
        order = np.lexsort((eligible, -scores))[:k]
        out.append(Recommendation(
            int(local_id),
            [(graph.items[int(eligible[j])].local_id, float(scores[j])) for j in order],
        ))
    return out


def recommendation_lines(recs: Sequence[Recommendation]) -> List[str]:
    lines = []
    for rec in recs:
        if rec.error or rec.reason:
            lines.append(f"{rec.user}\t-\t-\t{rec.error or rec.reason}")
            continue
        for rank, (item, score) in enumerate(rec.items, start=1):
            lines.append(f"{rec.user}\t{rank}\t{item}\t{score:.6f}")
    return lines


def recommend(checkpoint: Checkpoint, split: DataSplit, domain_id: int, user_ids: Sequence[int], k: int,
              config: Optional[PipelineConfig] = None, log: logging.Logger = logger) -> List[Recommendation]:
    """Top-k lists from a tuned checkpoint; every item the user ever interacted with is excluded."""
    checkpoint.require_stage(Stage.TUNED, "recommend")
    config = config or PipelineConfig.from_dict(checkpoint.config)
    task = Task(checkpoint.meta.get("task", Task.INTRA.value))
    tuned_for = checkpoint.meta.get("domain")
    if tuned_for is not None and int(tuned_for) != domain_id:
        log.warning(f"Checkpoint was tuned for domain {tuned_for}; domain {domain_id} uses untuned prompts")
    source = split.source_of(domain_id) if task is Task.INTER else None
    encoder = MotifEncoder(split.train, config, store=checkpoint.to_store(), logger=log)
    users, items = NodeEmbedder(encoder, encoder.build_structure(0)).domain_arrays(domain_id, task, source)
    return recommend_top_k(users, items, split.full.graphs[domain_id], user_ids, k)
