"""
Similarity-learning losses.

Every objective here is InfoNCE over cosine similarities divided by a
temperature; the contrastive, reconstruction and recommendation losses differ
only in how anchors, positives and negatives are chosen. Losses are summed over
anchors.
"""
import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, Optional, Sequence, Set, Tuple

import numpy as np

from .autodiff import (Tensor, as_tensor, concat, cosine_similarity, logsumexp, mul, reshape, take,
                       tsum)
from .errors import ConfigError, DimensionError, SamplingError, ValidationError
from .motifs import Context, MotifInstance

logger = logging.getLogger(__name__)


class Denominator(str, Enum):
    WITH_POS = "with_pos"
    WITHOUT_POS = "without_pos"


@dataclass
class MSLBatch:
    """Anchors (N, w), aligned positives (N, w) and per-anchor negatives (N, K, w)."""

    anchors: Tensor
    positives: Tensor
    negatives: Tensor
    tau: float

    def __post_init__(self):
        self.anchors = as_tensor(self.anchors)
        self.positives = as_tensor(self.positives)
        self.negatives = as_tensor(self.negatives)
        if self.tau <= 0:
            raise ConfigError(f"temperature must be positive, got {self.tau}")
        n, w = self.anchors.shape
        if self.positives.shape != (n, w):
            raise DimensionError(f"positives {self.positives.shape} do not align with anchors {(n, w)}")
        if self.negatives.ndim != 3 or self.negatives.shape[0] != n or self.negatives.shape[2] != w:
            raise DimensionError(f"negatives must be (N, K, w) = ({n}, K, {w}), got {self.negatives.shape}")
        if self.negatives.shape[1] < 1:
            raise ValidationError("every anchor needs at least one negative")

    @property
    def size(self) -> int:
        return self.anchors.shape[0]


def infonce(batch: MSLBatch, denominator: Denominator = Denominator.WITH_POS) -> Tensor:
    n, w = batch.anchors.shape
    positive = cosine_similarity(batch.anchors, batch.positives) * (1.0 / batch.tau)
    negative = cosine_similarity(reshape(batch.anchors, (n, 1, w)), batch.negatives) * (1.0 / batch.tau)
    if Denominator(denominator) is Denominator.WITH_POS:
        logits = concat([reshape(positive, (n, 1)), negative], axis=-1)
    else:
        logits = negative
    return tsum(logsumexp(logits, axis=-1) - positive)


def in_batch_negatives(n: int) -> np.ndarray:
    """Row a lists every other index of the batch, shape (n, n-1)."""
    if n < 2:
        raise ValidationError("in-batch negatives need at least two anchors")
    grid = np.tile(np.arange(n), (n, 1))
    return grid[~np.eye(n, dtype=bool)].reshape(n, n - 1)


def in_batch(anchors: Tensor, positives: Tensor, tau: float,
             negative_pool: Optional[Tensor] = None) -> MSLBatch:
    """Negatives of anchor a are the pool rows of every other anchor (the positives by default)."""
    pool = positives if negative_pool is None else as_tensor(negative_pool)
    return MSLBatch(anchors, positives, take(pool, in_batch_negatives(as_tensor(anchors).shape[0])), tau)


@dataclass
class ViewPair:
    """Two independently sampled views of the same nodes, in one domain and context."""

    domain_id: int
    context: Context
    first: Tensor
    second: Tensor

    @property
    def size(self) -> int:
        return self.first.shape[0]


def cl_loss(views: Iterable[ViewPair], tau: float,
            denominator: Denominator = Denominator.WITH_POS) -> Tuple[Tensor, int]:
    """
    Contrastive loss over view pairs, summed over domains and contexts.

    The first view is the anchor, the second view of the same node the
    positive, and second views of the other nodes in the group the negatives.
    Groups with fewer than two nodes have no negatives and are skipped; the
    number of nodes skipped that way is returned alongside the loss.
    """
    total: Optional[Tensor] = None
    skipped = 0
    for pair in views:
        if pair.size < 2:
            skipped += pair.size
            continue
        term = infonce(in_batch(pair.first, pair.second, tau), denominator)
        total = term if total is None else total + term
    if total is None:
        total = Tensor(0.0)
    return total, skipped


@dataclass(frozen=True)
class MaskedMotif:
    motif: MotifInstance
    masked: Tuple[int, ...]
    mask_token: str = "mask_token"

    def __post_init__(self):
        if not self.masked:
            raise ValidationError("a masked motif must mask at least one node")
        central = self.motif.central_node
        for position in self.masked:
            if not 0 <= position < self.motif.size:
                raise ValidationError(f"mask position {position} outside motif of size {self.motif.size}")
            if self.motif.nodes[position] == central:
                raise ValidationError("the central node of a motif is never masked")

    def keep_mask(self) -> np.ndarray:
        """(m, 1) column with 0 at masked rows and 1 elsewhere."""
        keep = np.ones((self.motif.size, 1))
        keep[list(self.masked)] = 0.0
        return keep


def mask_motif(motif: MotifInstance, rng: np.random.Generator) -> MaskedMotif:
    """Mask exactly one uniformly chosen non-central position."""
    central = motif.central_node
    candidates = [k for k, node in enumerate(motif.nodes) if node != central]
    if not candidates:
        raise ValidationError(f"motif {motif} has no non-central node to mask")
    return MaskedMotif(motif, (candidates[int(rng.integers(len(candidates)))],))


def er_loss(reconstructed: Tensor, ground_truth: np.ndarray, tau: float,
            denominator: Denominator = Denominator.WITH_POS) -> Tensor:
    """
    Reconstruction loss: each reconstructed embedding is pulled toward its own
    ground truth against the ground truths of the other nodes in the batch.
    """
    reconstructed = as_tensor(reconstructed)
    if reconstructed.shape[0] < 2:
        logger.warning("Embedding reconstruction batch has fewer than two nodes; contributing 0")
        return Tensor(0.0)
    truth = Tensor(ground_truth)
    return infonce(in_batch(reconstructed, truth, tau), denominator)


def pretrain_loss(cl, er, lambda1: float) -> Tensor:
    """lambda1 * cl + (1 - lambda1) * er; the unused term is dropped at the endpoints."""
    if not 0.0 <= lambda1 <= 1.0:
        raise ConfigError(f"lambda1 must lie in [0, 1], got {lambda1}")
    if lambda1 == 1.0:
        return as_tensor(cl)
    if lambda1 == 0.0:
        return as_tensor(er)
    return mul(cl, lambda1) + mul(er, 1.0 - lambda1)


def sample_negatives(n_candidates: int, exclude: Set[int], count: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Draw `count` indices (with replacement) from range(n_candidates) minus `exclude`."""
    if len(exclude) < n_candidates / 2:
        draws = rng.integers(n_candidates, size=count)
        for _ in range(16):
            bad = np.fromiter((int(x) in exclude for x in draws), dtype=bool, count=count)
            if not bad.any():
                return draws
            draws[bad] = rng.integers(n_candidates, size=int(bad.sum()))
    allowed = np.setdiff1d(np.arange(n_candidates), np.fromiter(exclude, dtype=np.int64, count=len(exclude)))
    if allowed.size == 0:
        raise SamplingError("no negative candidates left: every item is already interacted")
    return allowed[rng.integers(allowed.size, size=count)]


def rec_loss(users: Tensor, item_table: Tensor, positives: Sequence[int], negatives: np.ndarray,
             tau: float, denominator: Denominator = Denominator.WITH_POS) -> Tensor:
    """
    Recommendation loss over observed (user, item) edges.

    Row k of `users` pairs with item row `positives[k]` of `item_table` and
    competes against item rows `negatives[k]`.
    """
    positives = np.asarray(positives, dtype=np.int64)
    negatives = np.asarray(negatives, dtype=np.int64)
    if negatives.ndim != 2 or negatives.shape[0] != len(positives):
        raise DimensionError(f"negatives must be (N, K) with N = {len(positives)}, got {negatives.shape}")
    batch = MSLBatch(users, take(item_table, positives), take(item_table, negatives), tau)
    return infonce(batch, denominator)
