import logging
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Set, Tuple

import numpy as np

from .errors import ConfigError, ValidationError
from .graph import Dataset, DomainGraph, NodeKind
from .utils import STREAM_SPLIT, node_rng

logger = logging.getLogger(__name__)


@dataclass
class HeldOut:
    """Held-out positives of one domain for one task, keyed by user per_domain_id."""

    test: Dict[int, int] = field(default_factory=dict)
    validation: Dict[int, int] = field(default_factory=dict)
    hidden: Dict[int, Set[int]] = field(default_factory=dict)

    def excluded(self, user: int, train_items: Set[int], positive: int) -> Set[int]:
        """Items that may not serve as negatives when ranking `positive` for `user`."""
        return (set(train_items) | self.hidden.get(user, set())) - {positive}


@dataclass
class DataSplit:
    full: Dataset
    train: Dataset
    intra: Dict[int, HeldOut]
    inter: Dict[int, HeldOut]
    cold_users: Dict[int, List[int]]
    overlap_domains: Tuple[int, int]

    def source_of(self, target: int) -> int:
        a, b = self.overlap_domains
        if target not in (a, b):
            raise ValidationError(f"domain {target} is not part of the overlapped pair {self.overlap_domains}")
        return b if target == a else a

    def summary(self) -> Dict[int, Dict[str, int]]:
        return {
            d: {
                "train_edges": self.train.graphs[d].num_edges,
                "intra_test": len(self.intra[d].test),
                "validation": len(self.intra[d].validation),
                "cold_users": len(self.cold_users.get(d, [])),
            }
            for d in self.train.domain_ids
        }


def _pick(rng: np.random.Generator, items: np.ndarray) -> int:
    return int(items[rng.integers(len(items))])


def leave_one_out(graph: DomainGraph, seed: int, users: Optional[List[int]] = None
                  ) -> Tuple[Set[Tuple[int, int]], HeldOut]:
    """
    Hold out one test item per user with at least two interactions, and one
    validation item when the user has at least three.
    """
    held = HeldOut()
    removed: Set[Tuple[int, int]] = set()
    for u in (range(graph.n_users) if users is None else users):
        items = graph.neighbor_ids(u)
        if len(items) < 2:
            continue
        rng = node_rng(seed, STREAM_SPLIT, graph.domain_id, 0, u)
        order = rng.permutation(items)
        held.test[u] = int(order[0])
        held.hidden[u] = {int(order[0])}
        if len(items) >= 3:
            held.validation[u] = int(order[1])
            held.hidden[u].add(int(order[1]))
        removed.update((u, i) for i in held.hidden[u])
    return removed, held


def choose_cold_users(dataset: Dataset, overlap_domains: Tuple[int, int], fraction: float,
                      seed: int) -> Dict[int, List[int]]:
    """
    Pick disjoint sets of overlapped users to go cold in each domain of the pair.

    Returns per-domain lists of user per_domain_ids.
    """
    if not 0.0 <= fraction <= 0.5:
        raise ConfigError(f"cold-start fraction must lie in [0, 0.5], got {fraction}")
    a, b = overlap_domains
    ids = sorted(dataset.overlap.shared(a, b))
    rng = node_rng(seed, STREAM_SPLIT, 1)
    order = [ids[k] for k in rng.permutation(len(ids))]
    n = int(round(fraction * len(ids)))
    picked = {a: order[:n], b: order[n:2 * n]}
    return {
        d: sorted(dataset.graphs[d].node_by_global(NodeKind.USER, gid).per_domain_id for gid in gids)
        for d, gids in picked.items()
    }


def split_dataset(dataset: Dataset, seed: int, cold_fraction: float = 0.2,
                  overlap_domains: Tuple[int, int] = (0, 1)) -> DataSplit:
    """
    Deterministic train / validation / test split.

    Cold users lose every interaction in their cold domain; one of those items
    becomes their inter-domain test positive. Every other user is split
    leave-one-out for the intra-domain task.
    """
    has_overlap = len(dataset.overlap.shared(*overlap_domains)) > 0
    cold = choose_cold_users(dataset, overlap_domains, cold_fraction, seed) if has_overlap else {}

    train_graphs: Dict[int, DomainGraph] = {}
    intra: Dict[int, HeldOut] = {}
    inter: Dict[int, HeldOut] = {}
    for d, graph in dataset.graphs.items():
        cold_users = cold.get(d, [])
        cold_set = set(cold_users)
        removed: Set[Tuple[int, int]] = set()

        inter_held = HeldOut()
        for u in cold_users:
            items = graph.neighbor_ids(u)
            if len(items) == 0:
                continue
            rng = node_rng(seed, STREAM_SPLIT, d, 1, u)
            inter_held.test[u] = _pick(rng, items)
            inter_held.hidden[u] = {int(i) for i in items}
            removed.update((u, int(i)) for i in items)

        warm = [u for u in range(graph.n_users) if u not in cold_set]
        loo_removed, held = leave_one_out(graph, seed, warm)
        removed |= loo_removed
        overlapped = dataset.overlap.overlapped_ids(d)
        inter_held.validation = {
            u: i for u, i in held.validation.items() if graph.nodes[u].global_id in overlapped
        }
        for u in inter_held.validation:
            inter_held.hidden.setdefault(u, set()).update(held.hidden.get(u, set()))

        train_graphs[d] = graph.without_edges(removed)
        intra[d] = held
        inter[d] = inter_held
        logger.debug(f"Domain {d}: {len(held.test)} intra test user(s), {len(inter_held.test)} cold user(s), "
                     f"{len(removed)} edge(s) held out")

    return DataSplit(dataset, dataset.replace_graphs(train_graphs), intra, inter,
                     {d: list(u) for d, u in cold.items()}, tuple(overlap_domains))
