"""
Ground-truth node embeddings for the reconstruction task.

A plain matrix-factorization model per domain, trained with the recommendation
InfoNCE loss on raw interactions. Only nodes with abundant interactions
(degree at or above the domain median) are offered as reconstruction targets.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Optional

import numpy as np

from .autodiff import Adam, ParamStore, take
from .errors import SamplingError
from .graph import Dataset, DomainGraph
from .objectives import rec_loss, sample_negatives
from .utils import STREAM_TRAIN, node_rng

logger = logging.getLogger(__name__)


@dataclass
class GroundTruth:
    vectors: Dict[int, np.ndarray]
    eligible: Dict[int, np.ndarray]

    def is_eligible(self, domain_id: int, node_idx: int) -> bool:
        return bool(self.eligible[domain_id][node_idx])

    @property
    def width(self) -> int:
        return next(iter(self.vectors.values())).shape[1]


def degree_threshold(graph: DomainGraph) -> float:
    """Median degree over the nodes that have any interaction."""
    active = graph.degrees[graph.degrees > 0]
    return float(np.median(active)) if active.size else np.inf


def fit_domain(graph: DomainGraph, width: int, epochs: int, lr: float, tau: float, negatives: int,
               batch_size: int, seed: int) -> np.ndarray:
    """Train user and item factors; returns (num_nodes, width) in per_domain order."""
    rng = node_rng(seed, STREAM_TRAIN, 10, graph.domain_id)
    store = ParamStore()
    users = store.add("users", rng.normal(0.0, 0.1, size=(graph.n_users, width)))
    items = store.add("items", rng.normal(0.0, 0.1, size=(graph.n_items, width)))
    edges = np.array(list(graph.edges()), dtype=np.int64).reshape(-1, 2)
    if len(edges) == 0 or graph.n_items < 2:
        return np.concatenate([users.data, items.data])

    optimizer = Adam(store, lr)
    for epoch in range(epochs):
        epoch_rng = node_rng(seed, STREAM_TRAIN, 11, graph.domain_id, epoch)
        order = epoch_rng.permutation(len(edges))
        total = 0.0
        for start in range(0, len(order), batch_size):
            batch = edges[order[start:start + batch_size]]
            kept, negs = [], []
            for k, u in enumerate(batch[:, 0]):
                seen = {int(i) - graph.n_users for i in graph.neighbor_ids(int(u))}
                try:
                    negs.append(sample_negatives(graph.n_items, seen, negatives, epoch_rng))
                    kept.append(k)
                except SamplingError:
                    continue
            if not kept:
                continue
            batch = batch[kept]
            positives = batch[:, 1] - graph.n_users
            negs = np.stack(negs)
            loss = rec_loss(take(users, batch[:, 0]), items, positives, negs, tau)
            loss.backward()
            optimizer.step()
            total += loss.item()
        logger.debug(f"Oracle domain {graph.domain_id} epoch {epoch}: loss {total:.4f}")
    return np.concatenate([users.data, items.data])


def fit_oracle(dataset: Dataset, width: int, epochs: int, lr: float, tau: float, negatives: int,
               batch_size: int, seed: int, log: Optional[logging.Logger] = None) -> GroundTruth:
    log = log or logger
    vectors, eligible = {}, {}
    for domain_id, graph in dataset.graphs.items():
        vectors[domain_id] = fit_domain(graph, width, epochs, lr, tau, negatives, batch_size, seed)
        eligible[domain_id] = graph.degrees >= degree_threshold(graph)
        log.info(f"Ground-truth oracle for domain {domain_id}: "
                 f"{int(eligible[domain_id].sum())} reconstruction target(s)")
    return GroundTruth(vectors, eligible)
