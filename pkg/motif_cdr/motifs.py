import logging
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor, as_completed
from dataclasses import dataclass, replace
from enum import Enum
from itertools import combinations
from pathlib import Path
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .errors import NodeLookupError, NumericalError, ParseError, SamplingError, ValidationError
from .graph import DomainGraph, NodeKind, NodeRef
from .utils import STREAM_BUDGET, STREAM_WALK, atomic_write_lines, node_rng

logger = logging.getLogger(__name__)


class MotifKind(str, Enum):
    WALK = "walk"
    BUTTERFLY = "butterfly"
    T1 = "T1"
    T2 = "T2"
    T3 = "T3"

    @property
    def is_triangle(self) -> bool:
        return self in (MotifKind.T1, MotifKind.T2, MotifKind.T3)


TRIANGLE_KINDS = (MotifKind.T1, MotifKind.T2, MotifKind.T3)

# Values accepted by the `motifs.kind` setting
SAMPLING_CHOICES = ("walk", "butterfly", "triangle", "T1", "T2", "T3", "all")


class Context(str, Enum):
    SHARED = "shared"
    SPECIFIC = "specific"


@dataclass(frozen=True)
class MotifInstance:
    kind: MotifKind
    nodes: Tuple[NodeRef, ...]
    central: int
    domain_id: int
    context: Context = Context.SPECIFIC

    def __post_init__(self):
        if not 0 <= self.central < len(self.nodes):
            raise ValidationError(f"central index {self.central} outside motif of size {len(self.nodes)}")

    @property
    def size(self) -> int:
        return len(self.nodes)

    @property
    def central_node(self) -> NodeRef:
        return self.nodes[self.central]

    @property
    def indices(self) -> Tuple[int, ...]:
        return tuple(n.per_domain_id for n in self.nodes)

    def recentered(self, position: int, context: Context) -> "MotifInstance":
        return replace(self, central=position, context=context)


@dataclass(frozen=True)
class ItemSimMatrix:
    """EASE^R item-item weights for one domain; row/column k is the k-th item of the graph."""

    B: np.ndarray
    lambda_f: float
    item_offset: int = 0

    def sim(self, item_a: int, item_b: int) -> float:
        """Larger of the two directed weights between items given by per_domain_id."""
        a, b = item_a - self.item_offset, item_b - self.item_offset
        return float(max(self.B[a, b], self.B[b, a]))


@dataclass(frozen=True)
class TriangleThresholds:
    a1: int
    a2: int
    a3: float = 0.0

    def __post_init__(self):
        if self.a1 < 0 or self.a2 < 0:
            raise ValidationError(f"triangle thresholds must be non-negative, got a1={self.a1}, a2={self.a2}")


# -- random walks -------------------------------------------------------------

def sample_random_walks(graph: DomainGraph, start: NodeRef, length: int,
                        rng_seed: Union[int, np.random.Generator, None] = None,
                        context: Context = Context.SPECIFIC) -> MotifInstance:
    """Uniform random walk of `length` nodes beginning at `start`."""
    if length < 2:
        raise ValidationError(f"walk length must be at least 2, got {length}")
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    current = graph.index_of(start)
    if graph.degrees[current] == 0:
        raise SamplingError(f"cannot start a walk at isolated node {start} in domain {graph.domain_id}")

    path = [current]
    for _ in range(length - 1):
        neighbors = graph.neighbor_ids(current)
        current = int(neighbors[rng.integers(len(neighbors))])
        path.append(current)
    return MotifInstance(MotifKind.WALK, tuple(graph.nodes[i] for i in path), 0, graph.domain_id, context)


# -- butterflies ----------------------------------------------------------------

def sample_butterflies(graph: DomainGraph) -> Dict[frozenset, List[Tuple[NodeRef, NodeRef]]]:
    """
    Priority-based butterfly enumeration.

    Nodes are visited in descending priority. A butterfly is attributed to its
    highest-priority node n: n'' is the same-side node reached through a wedge
    n - n' - n'' with p(n'), p(n'') < p(n), and the dictionary value lists every
    2-subset of the common neighbors of n and n'' ranked below n. Each butterfly
    therefore appears exactly once.
    """
    pri = graph.priorities
    butterflies: Dict[frozenset, List[Tuple[NodeRef, NodeRef]]] = {}

    for n in np.argsort(-pri, kind="stable"):
        n = int(n)
        p_n = pri[n]
        second_order = set()
        for mid in graph.neighbor_ids(n):
            if pri[mid] >= p_n:
                continue
            for far in graph.neighbor_ids(int(mid)):
                if far != n and pri[far] < p_n:
                    second_order.add(int(far))

        for far in sorted(second_order):
            far_neighbors = graph.neighbor_set(far)
            common = [int(w) for w in graph.neighbor_ids(n) if pri[w] < p_n and int(w) in far_neighbors]
            if len(common) < 2:
                continue
            key = frozenset((graph.nodes[n], graph.nodes[far]))
            butterflies[key] = [(graph.nodes[a], graph.nodes[b]) for a, b in combinations(common, 2)]
    return butterflies


def butterfly_instances(graph: DomainGraph,
                        butterflies: Dict[frozenset, List[Tuple[NodeRef, NodeRef]]]) -> List[MotifInstance]:
    """Flatten the PBS dictionary; the higher-priority key node is the central node."""
    pri = graph.priorities
    motifs = []
    for key, wedges in butterflies.items():
        anchor, partner = sorted(key, key=lambda node: -pri[node.per_domain_id])
        for a, b in wedges:
            motifs.append(MotifInstance(MotifKind.BUTTERFLY, (anchor, partner, a, b), 0, graph.domain_id))
    return motifs


# -- EASE^R and triangle thresholds -------------------------------------------------

def ease_item_matrix(graph: DomainGraph, lambda_f: float) -> ItemSimMatrix:
    """Closed-form EASE^R: B = I - P diag(1 / diag(P)), P = (A^T A + lambda_f I)^-1."""
    if lambda_f <= 0:
        raise ValidationError(f"lambda_f must be positive, got {lambda_f}")
    if graph.n_items < 1:
        raise ValidationError(f"domain {graph.domain_id} has no items")

    A = graph.biadjacency().toarray()
    gram = A.T @ A + lambda_f * np.eye(graph.n_items)
    try:
        P = np.linalg.inv(gram)
    except np.linalg.LinAlgError as e:
        raise NumericalError(f"EASE^R system is singular for domain {graph.domain_id}: {e}") from e

    B = np.eye(graph.n_items) - P / np.diag(P)[np.newaxis, :]
    np.fill_diagonal(B, 0.0)
    return ItemSimMatrix(B, float(lambda_f), graph.n_users)


def compute_thresholds(graph: DomainGraph) -> TriangleThresholds:
    """a1 = a2 = lower median of user degrees (users with at least one item); a3 = 0."""
    if graph.n_users < 1:
        raise ValidationError(f"domain {graph.domain_id} has no users")
    degrees = graph.degrees[:graph.n_users]
    active = degrees[degrees > 0]
    if active.size == 0:
        active = degrees
    ordered = np.sort(active)
    median = int(ordered[(len(ordered) - 1) // 2])
    return TriangleThresholds(a1=median, a2=median, a3=0.0)


# -- triangles --------------------------------------------------------------------

def _common_item_counts(graph: DomainGraph) -> np.ndarray:
    A = graph.biadjacency()
    return np.asarray((A @ A.T).todense(), dtype=np.int64)


def _friend_lists(counts: np.ndarray, threshold: int) -> List[List[int]]:
    """For every user, the higher-indexed users sharing at least `threshold` items."""
    # friendship needs at least one shared item even when the threshold is 0
    limit = max(threshold, 1)
    n = counts.shape[0]
    return [[int(v) for v in np.nonzero(counts[u, u + 1:] >= limit)[0] + u + 1] for u in range(n)]


def sample_triangles(graph: DomainGraph, kind: MotifKind, thresholds: TriangleThresholds,
                     sim: Optional[ItemSimMatrix] = None) -> List[MotifInstance]:
    kind = MotifKind(kind)
    if not kind.is_triangle:
        raise ValidationError(f"{kind.value} is not a triangle family")
    nodes = graph.nodes
    motifs: List[MotifInstance] = []

    if kind is MotifKind.T1:
        friends = _friend_lists(_common_item_counts(graph), thresholds.a1)
        friend_sets = [set(f) for f in friends]
        for u in range(graph.n_users):
            for v in friends[u]:
                for w in friends[v]:
                    if w in friend_sets[u]:
                        motifs.append(MotifInstance(kind, (nodes[u], nodes[v], nodes[w]), 0, graph.domain_id))

    elif kind is MotifKind.T2:
        friends = _friend_lists(_common_item_counts(graph), thresholds.a2)
        for u in range(graph.n_users):
            for v in friends[u]:
                shared_items = sorted(graph.neighbor_set(u) & graph.neighbor_set(v))
                for i in shared_items:
                    motifs.append(MotifInstance(kind, (nodes[u], nodes[v], nodes[i]), 0, graph.domain_id))

    else:
        if sim is None:
            raise ValidationError("T3 sampling needs an item similarity matrix")
        for u in range(graph.n_users):
            for i, j in combinations(graph.neighbor_ids(u), 2):
                if sim.sim(int(i), int(j)) > thresholds.a3:
                    motifs.append(MotifInstance(kind, (nodes[u], nodes[int(i)], nodes[int(j)]), 0, graph.domain_id))
    return motifs


# -- validation -------------------------------------------------------------------

def validate_motif(graph: DomainGraph, motif: MotifInstance, walk_length: Optional[int] = None,
                   thresholds: Optional[TriangleThresholds] = None,
                   sim: Optional[ItemSimMatrix] = None):
    """Check a motif's structural invariant using only the graph's adjacency."""
    for node in motif.nodes:
        if node not in graph:
            raise ValidationError(f"motif node {node} is not part of domain {graph.domain_id}")
    idx = motif.indices
    kinds = [n.kind for n in motif.nodes]

    if motif.kind is MotifKind.WALK:
        if walk_length is not None and len(idx) != walk_length:
            raise ValidationError(f"walk has {len(idx)} nodes, expected {walk_length}")
        for a, b in zip(idx, idx[1:]):
            if not graph.has_edge(a, b):
                raise ValidationError(f"walk step {a} -> {b} is not an edge")
        if motif.central != 0:
            raise ValidationError("walk central node must be its start")

    elif motif.kind is MotifKind.BUTTERFLY:
        if len(set(idx)) != 4:
            raise ValidationError("butterfly needs 4 distinct nodes")
        users = [i for i, k in zip(idx, kinds) if k is NodeKind.USER]
        items = [i for i, k in zip(idx, kinds) if k is NodeKind.ITEM]
        if len(users) != 2 or len(items) != 2:
            raise ValidationError("butterfly needs two users and two items")
        for u in users:
            for i in items:
                if not graph.has_edge(u, i):
                    raise ValidationError(f"butterfly edge ({u}, {i}) is missing")

    else:
        if len(set(idx)) != 3:
            raise ValidationError("triangle needs 3 distinct nodes")
        common = lambda a, b: len(graph.neighbor_set(a) & graph.neighbor_set(b))  # noqa: E731
        if motif.kind is MotifKind.T1:
            if any(k is not NodeKind.USER for k in kinds):
                raise ValidationError("T1 triangle must consist of three users")
            limit = max(thresholds.a1, 1) if thresholds else 1
            for a, b in combinations(idx, 2):
                if common(a, b) < limit:
                    raise ValidationError(f"T1 users {a}, {b} share fewer than {limit} items")
        elif motif.kind is MotifKind.T2:
            u, v, i = idx
            if kinds != [NodeKind.USER, NodeKind.USER, NodeKind.ITEM]:
                raise ValidationError("T2 triangle is (user, user, item)")
            if not (graph.has_edge(u, i) and graph.has_edge(v, i)):
                raise ValidationError("T2 item must be interacted by both users")
            limit = max(thresholds.a2, 1) if thresholds else 1
            if common(u, v) < limit:
                raise ValidationError(f"T2 users share fewer than {limit} items")
        else:
            u, i, j = idx
            if kinds != [NodeKind.USER, NodeKind.ITEM, NodeKind.ITEM]:
                raise ValidationError("T3 triangle is (user, item, item)")
            if not (graph.has_edge(u, i) and graph.has_edge(u, j)):
                raise ValidationError("T3 items must both be interacted by the user")
            if sim is not None:
                a3 = thresholds.a3 if thresholds else 0.0
                if sim.sim(i, j) <= a3:
                    raise ValidationError(f"T3 item similarity does not exceed {a3}")


def is_valid_motif(graph: DomainGraph, motif: MotifInstance, **kwargs) -> bool:
    try:
        validate_motif(graph, motif, **kwargs)
    except ValidationError:
        return False
    return True


# -- budgeted sampling over a domain -----------------------------------------------

class MotifSampler:
    """Samples one domain's motifs with a per-central-node budget and context tags."""

    def __init__(self, graph: DomainGraph, seed: int, budget: int = 8,
                 is_overlapped: Optional[Callable[[NodeRef], bool]] = None,
                 lambda_f: float = 100.0, threads: int = 1,
                 logger: Optional[logging.Logger] = None):
        if budget < 1:
            raise ValidationError(f"motif budget must be positive, got {budget}")
        self.graph = graph
        self.seed = seed
        self.budget = budget
        self.is_overlapped = is_overlapped or (lambda node: False)
        self.lambda_f = lambda_f
        self.threads = max(1, threads)
        self.logger = logger or logging.getLogger(__name__)
        self._thresholds: Optional[TriangleThresholds] = None
        self._sim: Optional[ItemSimMatrix] = None
        self._enumerated: Dict[MotifKind, List[MotifInstance]] = {}

    @property
    def thresholds(self) -> TriangleThresholds:
        if self._thresholds is None:
            self._thresholds = compute_thresholds(self.graph)
        return self._thresholds

    @property
    def sim(self) -> ItemSimMatrix:
        if self._sim is None:
            self._sim = ease_item_matrix(self.graph, self.lambda_f)
        return self._sim

    def context_of(self, node: NodeRef) -> Context:
        return Context.SHARED if self.is_overlapped(node) else Context.SPECIFIC

    def _tag(self, motifs: Iterable[MotifInstance]) -> List[MotifInstance]:
        return [replace(m, context=self.context_of(m.central_node)) for m in motifs]

    def walks(self, length: int, epoch: int = 0) -> List[MotifInstance]:
        starts = [n for n in self.graph.nodes if self.graph.degrees[n.per_domain_id] > 0]

        def walk_from(node: NodeRef) -> List[MotifInstance]:
            rng = node_rng(self.seed, STREAM_WALK, self.graph.domain_id, epoch, node.per_domain_id)
            return [sample_random_walks(self.graph, node, length, rng) for _ in range(self.budget)]

        results: Dict[int, List[MotifInstance]] = {}
        with ThreadPoolExecutor(max_workers=self.threads) as executor:
            futures = {executor.submit(walk_from, n): n.per_domain_id for n in starts}
            for future in as_completed(futures):
                results[futures[future]] = future.result()
        motifs = [m for idx in sorted(results) for m in results[idx]]
        return self._tag(motifs)

    def _enumerate(self, kind: MotifKind) -> List[MotifInstance]:
        """Budget-free enumeration, cached per kind."""
        if kind not in self._enumerated:
            if kind is MotifKind.BUTTERFLY:
                motifs = butterfly_instances(self.graph, sample_butterflies(self.graph))
            else:
                sim = self.sim if kind is MotifKind.T3 else None
                motifs = sample_triangles(self.graph, kind, self.thresholds, sim)
            self._enumerated[kind] = motifs
        return self._enumerated[kind]

    def butterflies(self, epoch: int = 0) -> List[MotifInstance]:
        return self._tag(self.apply_budget(self._enumerate(MotifKind.BUTTERFLY), epoch))

    def triangles(self, kind: MotifKind, epoch: int = 0) -> List[MotifInstance]:
        return self._tag(self.apply_budget(self._enumerate(MotifKind(kind)), epoch))

    def sample(self, kind: str, walk_length: int = 6, epoch: int = 0) -> List[MotifInstance]:
        if kind not in SAMPLING_CHOICES:
            raise ValidationError(f"unknown motif kind {kind!r}; expected one of {SAMPLING_CHOICES}")
        if kind == "walk":
            motifs = self.walks(walk_length, epoch)
        elif kind == "butterfly":
            motifs = self.butterflies(epoch)
        elif kind == "triangle":
            motifs = [m for t in TRIANGLE_KINDS for m in self.triangles(t, epoch)]
        elif kind == "all":
            motifs = self.butterflies(epoch) + self.walks(walk_length, epoch)
            motifs += [m for t in TRIANGLE_KINDS for m in self.triangles(t, epoch)]
        else:
            motifs = self.triangles(MotifKind(kind), epoch)
        self.logger.debug(f"Domain {self.graph.domain_id}: sampled {len(motifs)} {kind} motif(s) (epoch {epoch})")
        return motifs

    def apply_budget(self, motifs: Sequence[MotifInstance], epoch: int = 0,
                     budget: Optional[int] = None) -> List[MotifInstance]:
        """Uniformly downsample to at most `budget` motifs per central node."""
        budget = budget or self.budget
        grouped: Dict[int, List[MotifInstance]] = defaultdict(list)
        for m in motifs:
            grouped[m.central_node.per_domain_id].append(m)
        kept = []
        for central in sorted(grouped):
            group = grouped[central]
            if len(group) > budget:
                rng = node_rng(self.seed, STREAM_BUDGET, self.graph.domain_id, epoch, central)
                chosen = np.sort(rng.choice(len(group), size=budget, replace=False))
                group = [group[i] for i in chosen]
            kept.extend(group)
        return kept


class MotifPool:
    """
    Motifs of one domain indexed by the node they describe.

    Every motif is filed under its central node. With `cover_members` it is also
    filed, re-centered, under each of its other distinct members, so that every
    node touched by some motif gets a motif set. Each node keeps at most `budget`.
    """

    def __init__(self, graph: DomainGraph, motifs: Sequence[MotifInstance], budget: int,
                 seed: int, epoch: int = 0, cover_members: bool = True,
                 is_overlapped: Optional[Callable[[NodeRef], bool]] = None):
        self.graph = graph
        self.budget = budget
        is_overlapped = is_overlapped or (lambda node: False)
        by_node: Dict[int, List[MotifInstance]] = defaultdict(list)

        for motif in motifs:
            by_node[motif.central_node.per_domain_id].append(motif)
            if not cover_members:
                continue
            seen = {motif.central_node.per_domain_id}
            for position, node in enumerate(motif.nodes):
                if node.per_domain_id in seen:
                    continue
                seen.add(node.per_domain_id)
                context = Context.SHARED if is_overlapped(node) else Context.SPECIFIC
                by_node[node.per_domain_id].append(motif.recentered(position, context))

        self._by_node: Dict[int, List[MotifInstance]] = {}
        for idx in sorted(by_node):
            group = by_node[idx]
            if len(group) > budget:
                rng = node_rng(seed, STREAM_BUDGET, graph.domain_id, epoch, idx, 1)
                chosen = np.sort(rng.choice(len(group), size=budget, replace=False))
                group = [group[i] for i in chosen]
            self._by_node[idx] = group

    def motifs_for(self, node_idx: int) -> List[MotifInstance]:
        return self._by_node.get(node_idx, [])

    def covered_nodes(self, min_motifs: int = 1) -> List[int]:
        return [idx for idx, group in self._by_node.items() if len(group) >= min_motifs]

    def __len__(self) -> int:
        return sum(len(g) for g in self._by_node.values())

    def items(self):
        return self._by_node.items()


# -- motif files --------------------------------------------------------------------

def _node_token(node: NodeRef) -> str:
    return f"{node.kind.token}{node.local_id}"


def write_motifs(path: Union[str, Path], motifs: Iterable[MotifInstance]) -> Path:
    """Write `kind<TAB>central<TAB>node,node,...` lines."""
    lines = [
        f"{m.kind.value}\t{_node_token(m.central_node)}\t{','.join(_node_token(n) for n in m.nodes)}"
        for m in motifs
    ]
    return atomic_write_lines(path, lines)


def _parse_token(graph: DomainGraph, token: str, path: str, line_no: int) -> NodeRef:
    kinds = {"u": NodeKind.USER, "i": NodeKind.ITEM}
    if len(token) < 2 or token[0] not in kinds or not token[1:].isdigit():
        raise ParseError(f"bad node token {token!r}", path, line_no)
    try:
        return graph.node(kinds[token[0]], int(token[1:]))
    except NodeLookupError as e:
        raise ParseError(str(e), path, line_no) from None


def read_motifs(path: Union[str, Path], graph: DomainGraph,
                is_overlapped: Optional[Callable[[NodeRef], bool]] = None) -> List[MotifInstance]:
    is_overlapped = is_overlapped or (lambda node: False)
    motifs = []
    path = str(path)
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 3:
                raise ParseError("expected 'kind<TAB>central<TAB>nodes'", path, line_no)
            try:
                kind = MotifKind(parts[0])
            except ValueError:
                raise ParseError(f"unknown motif kind {parts[0]!r}", path, line_no) from None
            nodes = tuple(_parse_token(graph, t, path, line_no) for t in parts[2].split(","))
            central = _parse_token(graph, parts[1], path, line_no)
            if central not in nodes:
                raise ParseError(f"central node {parts[1]} is not a member", path, line_no)
            context = Context.SHARED if is_overlapped(central) else Context.SPECIFIC
            motifs.append(MotifInstance(kind, nodes, nodes.index(central), graph.domain_id, context))
    return motifs
