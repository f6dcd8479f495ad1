import logging
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, Iterator, List, Optional, Sequence, Set, Tuple, Union

import numpy as np
import scipy.sparse as sp

from .errors import NodeLookupError, ParseError, ValidationError

logger = logging.getLogger(__name__)


class NodeKind(str, Enum):
    USER = "user"
    ITEM = "item"

    @property
    def token(self) -> str:
        return "u" if self is NodeKind.USER else "i"


@dataclass(frozen=True)
class NodeRef:
    """
    A user or item as seen from one domain.

    `per_domain_id` is the dense row index inside its domain (users first, then
    items, each sorted by `local_id`); `global_id` is stable across domains and is
    shared by two domains only when the node is registered as overlapped.
    """

    kind: NodeKind
    global_id: int
    per_domain_id: int
    local_id: int

    @property
    def is_user(self) -> bool:
        return self.kind is NodeKind.USER

    def __str__(self) -> str:
        return f"{self.kind.token}{self.local_id}"


class GlobalIdRegistry:
    """Hands out global ids per kind; overlap bindings are declared before ingestion."""

    def __init__(self):
        self._bound: Dict[Tuple[int, NodeKind, int], int] = {}
        self._used: Dict[NodeKind, Set[int]] = {NodeKind.USER: set(), NodeKind.ITEM: set()}
        self._next: Dict[NodeKind, int] = {NodeKind.USER: 0, NodeKind.ITEM: 0}

    def bind(self, kind: NodeKind, domain_id: int, local_id: int, global_id: int):
        key = (domain_id, kind, local_id)
        existing = self._bound.get(key)
        if existing is not None and existing != global_id:
            raise ValidationError(
                f"{kind.value} {local_id} of domain {domain_id} already bound to global id {existing}"
            )
        self._bound[key] = global_id
        self._used[kind].add(global_id)

    def resolve(self, kind: NodeKind, domain_id: int, local_id: int) -> int:
        key = (domain_id, kind, local_id)
        if key not in self._bound:
            while self._next[kind] in self._used[kind]:
                self._next[kind] += 1
            self._bound[key] = self._next[kind]
            self._used[kind].add(self._next[kind])
        return self._bound[key]

    def size(self, kind: NodeKind) -> int:
        """Row count needed to index every global id of `kind`."""
        used = self._used[kind]
        return max(used) + 1 if used else 0


class DomainGraph:
    """One domain's bipartite user-item graph. Immutable after construction."""

    def __init__(self, domain_id: int, users: Sequence[NodeRef], items: Sequence[NodeRef],
                 edges: Iterable[Tuple[int, int]]):
        self.domain_id = domain_id
        self.nodes: List[NodeRef] = list(users) + list(items)
        self.n_users = len(users)
        self.n_items = len(items)
        for idx, node in enumerate(self.nodes):
            if node.per_domain_id != idx:
                raise ValidationError(f"node {node} has per_domain_id {node.per_domain_id}, expected {idx}")
            if node.is_user != (idx < self.n_users):
                raise ValidationError(f"node {node} is out of the user/item block layout")

        neighbor_sets: List[Set[int]] = [set() for _ in self.nodes]
        for u, i in edges:
            if not (0 <= u < self.n_users) or not (self.n_users <= i < len(self.nodes)):
                raise ValidationError(f"edge ({u}, {i}) does not join a user and an item")
            neighbor_sets[u].add(i)
            neighbor_sets[i].add(u)
        self._adj: List[np.ndarray] = [np.array(sorted(s), dtype=np.int64) for s in neighbor_sets]
        self._neighbor_sets = [frozenset(s) for s in neighbor_sets]
        self.degrees = np.array([len(a) for a in self._adj], dtype=np.int64)
        self._by_local = {(n.kind, n.local_id): n for n in self.nodes}
        self._by_global = {(n.kind, n.global_id): n for n in self.nodes}
        self._priorities: Optional[np.ndarray] = None

    # -- membership ---------------------------------------------------------

    @property
    def users(self) -> List[NodeRef]:
        return self.nodes[:self.n_users]

    @property
    def items(self) -> List[NodeRef]:
        return self.nodes[self.n_users:]

    @property
    def num_nodes(self) -> int:
        return len(self.nodes)

    @property
    def num_edges(self) -> int:
        return int(self.degrees[:self.n_users].sum())

    def __contains__(self, node: NodeRef) -> bool:
        idx = node.per_domain_id
        return 0 <= idx < len(self.nodes) and self.nodes[idx] == node

    def index_of(self, node: NodeRef) -> int:
        if node not in self:
            raise NodeLookupError(f"node {node} is not part of domain {self.domain_id}")
        return node.per_domain_id

    def node(self, kind: NodeKind, local_id: int) -> NodeRef:
        try:
            return self._by_local[(kind, local_id)]
        except KeyError:
            raise NodeLookupError(f"unknown {kind.value} {local_id} in domain {self.domain_id}") from None

    def node_by_global(self, kind: NodeKind, global_id: int) -> NodeRef:
        try:
            return self._by_global[(kind, global_id)]
        except KeyError:
            raise NodeLookupError(
                f"global {kind.value} id {global_id} is not part of domain {self.domain_id}"
            ) from None

    def has_global(self, kind: NodeKind, global_id: int) -> bool:
        return (kind, global_id) in self._by_global

    # -- adjacency ----------------------------------------------------------

    def neighbor_ids(self, idx: int) -> np.ndarray:
        return self._adj[idx]

    def neighbor_set(self, idx: int) -> frozenset:
        return self._neighbor_sets[idx]

    def neighbors(self, node: NodeRef) -> List[NodeRef]:
        return [self.nodes[j] for j in self._adj[self.index_of(node)]]

    def degree(self, node: NodeRef) -> int:
        return int(self.degrees[self.index_of(node)])

    def has_edge(self, a: int, b: int) -> bool:
        return b in self._neighbor_sets[a]

    def edges(self) -> Iterator[Tuple[int, int]]:
        """Yield (user_idx, item_idx) pairs in user order."""
        for u in range(self.n_users):
            for i in self._adj[u]:
                yield u, int(i)

    def biadjacency(self) -> sp.csr_matrix:
        """Binary |U| x |I| interaction matrix."""
        rows, cols = [], []
        for u, i in self.edges():
            rows.append(u)
            cols.append(i - self.n_users)
        data = np.ones(len(rows), dtype=np.float64)
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_users, self.n_items))

    def without_edges(self, removed: Iterable[Tuple[int, int]]) -> "DomainGraph":
        """Copy with the given (user_idx, item_idx) edges dropped; the node set is unchanged."""
        removed = set(removed)
        kept = [e for e in self.edges() if e not in removed]
        return DomainGraph(self.domain_id, self.users, self.items, kept)

    # -- priority -----------------------------------------------------------

    @property
    def priorities(self) -> np.ndarray:
        """Rank of every node in [1, N] ordered by (degree, per_domain_id)."""
        if self._priorities is None:
            order = np.lexsort((np.arange(len(self.nodes)), self.degrees))
            ranks = np.empty(len(self.nodes), dtype=np.int64)
            ranks[order] = np.arange(1, len(self.nodes) + 1)
            self._priorities = ranks
        return self._priorities

    def __repr__(self) -> str:
        return (f"DomainGraph(domain={self.domain_id}, users={self.n_users}, "
                f"items={self.n_items}, edges={self.num_edges})")


def priority(graph: DomainGraph, node: NodeRef) -> int:
    return int(graph.priorities[graph.index_of(node)])


def _parse_int(token: str, path: str, line_no: int) -> int:
    try:
        value = int(token)
    except ValueError:
        raise ParseError(f"expected a non-negative integer, got {token!r}", path, line_no) from None
    if value < 0:
        raise ParseError(f"expected a non-negative integer, got {value}", path, line_no)
    return value


def read_interaction_pairs(path: Union[str, Path]) -> List[Tuple[int, int]]:
    """Parse `user<TAB>item` lines; blank lines are ignored."""
    pairs = []
    path = str(path)
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 2:
                raise ParseError(f"expected 'user<TAB>item', got {line!r}", path, line_no)
            pairs.append((_parse_int(parts[0], path, line_no), _parse_int(parts[1], path, line_no)))
    return pairs


def build_domain_graph(pairs: Iterable[Tuple[int, int]], domain_id: int,
                       registry: Optional[GlobalIdRegistry] = None) -> DomainGraph:
    """Build a graph from raw (user, item) local id pairs, deduplicating repeats."""
    registry = registry if registry is not None else GlobalIdRegistry()
    pairs = sorted(set(pairs))
    user_ids = sorted({u for u, _ in pairs})
    item_ids = sorted({i for _, i in pairs})

    users = [
        NodeRef(NodeKind.USER, registry.resolve(NodeKind.USER, domain_id, uid), idx, uid)
        for idx, uid in enumerate(user_ids)
    ]
    offset = len(users)
    items = [
        NodeRef(NodeKind.ITEM, registry.resolve(NodeKind.ITEM, domain_id, iid), offset + idx, iid)
        for idx, iid in enumerate(item_ids)
    ]
    user_index = {uid: idx for idx, uid in enumerate(user_ids)}
    item_index = {iid: offset + idx for idx, iid in enumerate(item_ids)}
    edges = [(user_index[u], item_index[i]) for u, i in pairs]
    return DomainGraph(domain_id, users, items, edges)


def load_interactions(path: Union[str, Path], domain_id: int,
                      registry: Optional[GlobalIdRegistry] = None) -> DomainGraph:
    """Load one domain's interaction file into a DomainGraph."""
    pairs = read_interaction_pairs(path)
    graph = build_domain_graph(pairs, domain_id, registry)
    if len(pairs) != graph.num_edges:
        logger.debug(f"Domain {domain_id}: collapsed {len(pairs) - graph.num_edges} duplicate interaction(s)")
    logger.info(f"Loaded domain {domain_id} from {path}: {graph.n_users} users, "
                f"{graph.n_items} items, {graph.num_edges} edges")
    return graph


class OverlapRegistry:
    """Global ids present in both members of a domain pair, for one node kind."""

    def __init__(self, overlap_role: NodeKind = NodeKind.USER):
        self.overlap_role = NodeKind(overlap_role)
        self._pairs: Dict[frozenset, frozenset] = {}
        self._by_domain: Dict[int, frozenset] = {}

    def register(self, domain_a: DomainGraph, domain_b: DomainGraph, ids: Iterable[int]) -> "OverlapRegistry":
        ids = frozenset(int(g) for g in ids)
        for gid in sorted(ids):
            for domain in (domain_a, domain_b):
                if not domain.has_global(self.overlap_role, gid):
                    raise ValidationError(
                        f"overlapped {self.overlap_role.value} {gid} is missing from domain {domain.domain_id}"
                    )
        key = frozenset((domain_a.domain_id, domain_b.domain_id))
        self._pairs[key] = self._pairs.get(key, frozenset()) | ids
        self._by_domain.clear()
        return self

    def shared(self, domain_a: int, domain_b: int) -> frozenset:
        return self._pairs.get(frozenset((domain_a, domain_b)), frozenset())

    def overlapped_ids(self, domain_id: int) -> frozenset:
        if domain_id not in self._by_domain:
            result: Set[int] = set()
            for key, ids in self._pairs.items():
                if domain_id in key:
                    result |= ids
            self._by_domain[domain_id] = frozenset(result)
        return self._by_domain[domain_id]

    def is_overlapped(self, domain_id: int, node: NodeRef) -> bool:
        return node.kind is self.overlap_role and node.global_id in self.overlapped_ids(domain_id)

    def __len__(self) -> int:
        return sum(len(ids) for ids in self._pairs.values())


def register_overlap(registry: OverlapRegistry, domain_a: DomainGraph, domain_b: DomainGraph,
                     ids: Iterable[int]) -> OverlapRegistry:
    return registry.register(domain_a, domain_b, ids)


@dataclass(frozen=True)
class OverlapEntry:
    kind: NodeKind
    local_a: int
    local_b: int
    global_id: int


def read_overlap_map(path: Union[str, Path]) -> List[OverlapEntry]:
    """Parse `kind<TAB>domain_a_local<TAB>domain_b_local<TAB>global_id` lines."""
    entries = []
    path = str(path)
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, start=1):
            line = line.rstrip("\r\n")
            if not line.strip():
                continue
            parts = line.split("\t")
            if len(parts) != 4:
                raise ParseError(f"expected 4 tab-separated fields, got {len(parts)}", path, line_no)
            try:
                kind = NodeKind(parts[0])
            except ValueError:
                raise ParseError(f"unknown node kind {parts[0]!r}", path, line_no) from None
            local_a, local_b, gid = (_parse_int(p, path, line_no) for p in parts[1:])
            entries.append(OverlapEntry(kind, local_a, local_b, gid))
    return entries


class Dataset:
    """All domains of one scenario plus the id and overlap registries."""

    def __init__(self, graphs: Dict[int, DomainGraph], registry: GlobalIdRegistry,
                 overlap: OverlapRegistry):
        self.graphs = dict(sorted(graphs.items()))
        self.registry = registry
        self.overlap = overlap
        self.n_global_users = registry.size(NodeKind.USER)
        self.n_global_items = registry.size(NodeKind.ITEM)

    @property
    def domain_ids(self) -> List[int]:
        return list(self.graphs)

    @property
    def n_shared_rows(self) -> int:
        return self.n_global_users + self.n_global_items

    def shared_row(self, node: NodeRef) -> int:
        """Row of `node` in the cross-domain (shared) embedding table."""
        return node.global_id if node.is_user else self.n_global_users + node.global_id

    def shared_rows(self, domain_id: int) -> np.ndarray:
        return np.array([self.shared_row(n) for n in self.graphs[domain_id].nodes], dtype=np.int64)

    def is_overlapped(self, domain_id: int, node: NodeRef) -> bool:
        return self.overlap.is_overlapped(domain_id, node)

    def replace_graphs(self, graphs: Dict[int, DomainGraph]) -> "Dataset":
        return Dataset(graphs, self.registry, self.overlap)

    def summary(self) -> List[Dict[str, int]]:
        rows = []
        for domain_id, graph in self.graphs.items():
            rows.append({
                "domain": domain_id,
                "users": graph.n_users,
                "items": graph.n_items,
                "edges": graph.num_edges,
                "overlapped": len(self.overlap.overlapped_ids(domain_id)),
            })
        return rows


def load_dataset(interaction_paths: Dict[int, Union[str, Path]],
                 overlap_path: Optional[Union[str, Path]] = None,
                 overlap_domains: Tuple[int, int] = (0, 1),
                 overlap_role: NodeKind = NodeKind.USER) -> Dataset:
    """Ingest every domain file and the overlap map (bindings first, then interactions)."""
    registry = GlobalIdRegistry()
    overlap = OverlapRegistry(overlap_role)
    entries: List[OverlapEntry] = []
    domain_a, domain_b = overlap_domains

    if overlap_path:
        entries = read_overlap_map(overlap_path)
        for entry in entries:
            if entry.kind is not overlap.overlap_role:
                raise ValidationError(
                    f"overlap map lists a {entry.kind.value} but the overlap role is {overlap.overlap_role.value}"
                )
            registry.bind(entry.kind, domain_a, entry.local_a, entry.global_id)
            registry.bind(entry.kind, domain_b, entry.local_b, entry.global_id)

    graphs = {
        domain_id: load_interactions(path, domain_id, registry)
        for domain_id, path in sorted(interaction_paths.items())
    }

    if entries:
        if domain_a not in graphs or domain_b not in graphs:
            raise ValidationError(f"overlap domains {overlap_domains} are not both loaded")
        overlap.register(graphs[domain_a], graphs[domain_b], [e.global_id for e in entries])
        logger.info(f"Registered {len(entries)} overlapped {overlap.overlap_role.value}(s) "
                    f"between domains {domain_a} and {domain_b}")
    return Dataset(graphs, registry, overlap)
