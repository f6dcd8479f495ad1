import logging
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Callable, Dict, List, Sequence, Union

import numpy as np
import scipy.sparse as sp

from .errors import NodeLookupError, ValidationError
from .graph import DomainGraph, NodeRef
from .motifs import Context, MotifInstance
from .utils import atomic_write_lines

logger = logging.getLogger(__name__)


@dataclass
class HypergraphIncidence:
    """
    Incidence of a motif-induced hypergraph.

    Rows are the nodes that appear in at least one hyperedge (`node_ids` maps a
    row back to its index in the node universe), columns are hyperedges.
    """

    H: sp.csr_matrix
    W: np.ndarray
    node_ids: np.ndarray
    n_universe: int

    @property
    def n_hyperedges(self) -> int:
        return self.H.shape[1]

    @property
    def Dv(self) -> np.ndarray:
        """Node degrees: Dv_ii = sum_e W_ee H_ie."""
        return np.asarray(self.H @ self.W).ravel()

    @property
    def De(self) -> np.ndarray:
        """Hyperedge degrees: De_ee = sum_i H_ie."""
        return np.asarray(self.H.sum(axis=0)).ravel()

    def operator(self) -> sp.csr_matrix:
        """Dv^-1 H W De^-1 H^T over the incidence rows."""
        dv, de = self.Dv, self.De
        if np.any(dv <= 0):
            raise ValidationError("hypergraph has a zero-degree node row; filter such nodes first")
        if np.any(de <= 0):
            raise ValidationError("hypergraph has an empty hyperedge")
        left = sp.diags(1.0 / dv) @ self.H @ sp.diags(self.W / de)
        return sp.csr_matrix(left @ self.H.T)

    def propagation_matrix(self) -> sp.csr_matrix:
        """
        The operator lifted to the whole node universe.

        Nodes outside every hyperedge get an identity row, so they keep their
        layer-0 embedding through any number of layers.
        """
        op = self.operator().tocoo()
        rows = self.node_ids[op.row]
        cols = self.node_ids[op.col]
        uncovered = np.setdiff1d(np.arange(self.n_universe), self.node_ids)
        rows = np.concatenate([rows, uncovered])
        cols = np.concatenate([cols, uncovered])
        data = np.concatenate([op.data, np.ones(len(uncovered))])
        return sp.csr_matrix((data, (rows, cols)), shape=(self.n_universe, self.n_universe))

    def coordinate_lines(self) -> List[str]:
        coo = self.H.tocoo()
        order = np.lexsort((coo.row, coo.col))
        return [f"{int(self.node_ids[coo.row[k]])}\t{int(coo.col[k])}\t{coo.data[k]:g}" for k in order]


def _merge_groups(member_rows: Sequence[Sequence[int]]) -> List[List[int]]:
    """Union motifs that share at least one node pair; returns merged member lists."""
    parent = list(range(len(member_rows)))

    def find(x: int) -> int:
        while parent[x] != x:
            parent[x] = parent[parent[x]]
            x = parent[x]
        return x

    first_owner: Dict[tuple, int] = {}
    for edge_id, members in enumerate(member_rows):
        for pair in combinations(sorted(set(members)), 2):
            owner = first_owner.setdefault(pair, edge_id)
            if owner != edge_id:
                a, b = find(owner), find(edge_id)
                if a != b:
                    parent[max(a, b)] = min(a, b)

    groups: Dict[int, set] = {}
    for edge_id, members in enumerate(member_rows):
        groups.setdefault(find(edge_id), set()).update(members)
    return [sorted(groups[root]) for root in sorted(groups)]


def incidence_from_members(member_rows: Sequence[Sequence[int]], n_universe: int,
                           merge: bool = False) -> HypergraphIncidence:
    """Build an incidence from hyperedge member lists given as universe indices."""
    if not member_rows:
        raise ValidationError("empty hypergraph: no motifs to build hyperedges from")
    hyperedges = _merge_groups(member_rows) if merge else [sorted(set(m)) for m in member_rows]
    for edge_id, members in enumerate(hyperedges):
        if len(members) < 2:
            raise ValidationError(f"hyperedge {edge_id} has fewer than two nodes")

    node_ids = np.array(sorted({i for members in hyperedges for i in members}), dtype=np.int64)
    row_of = {int(node): row for row, node in enumerate(node_ids)}
    rows = [row_of[i] for members in hyperedges for i in members]
    cols = [edge_id for edge_id, members in enumerate(hyperedges) for _ in members]
    H = sp.csr_matrix((np.ones(len(rows)), (rows, cols)), shape=(len(node_ids), len(hyperedges)))
    return HypergraphIncidence(H, np.ones(len(hyperedges)), node_ids, n_universe)


def build_incidence(motifs: Sequence[MotifInstance], domain: DomainGraph,
                    merge: bool = False) -> HypergraphIncidence:
    """One hyperedge per motif over the domain's nodes (H_ie = 1 iff node i is in motif e)."""
    members = []
    for motif in motifs:
        for node in motif.nodes:
            if node not in domain:
                raise ValidationError(f"motif node {node} is not part of domain {domain.domain_id}")
        members.append([n.per_domain_id for n in motif.nodes])
    return incidence_from_members(members, domain.num_nodes, merge)


def build_shared_incidence(motifs_by_domain: Dict[int, Sequence[MotifInstance]],
                           shared_row: Callable[[NodeRef], int], n_shared: int,
                           merge: bool = False) -> HypergraphIncidence:
    """Union of every domain's hyperedges over the cross-domain node universe."""
    members = [
        [shared_row(n) for n in motif.nodes]
        for domain_id in sorted(motifs_by_domain)
        for motif in motifs_by_domain[domain_id]
    ]
    return incidence_from_members(members, n_shared, merge)


def convolve(inc: HypergraphIncidence, X0: np.ndarray, L: int) -> np.ndarray:
    """Layer-averaged hypergraph convolution (1 / (L+1)) * sum_l (Dv^-1 H W De^-1 H^T)^l X0."""
    if L < 0:
        raise ValidationError(f"layer count must be non-negative, got {L}")
    X0 = np.asarray(X0, dtype=np.float64)
    if X0.shape[0] != inc.H.shape[0]:
        raise ValidationError(f"X0 has {X0.shape[0]} rows, incidence has {inc.H.shape[0]}")
    op = inc.operator()
    layer = X0
    total = X0.copy()
    for _ in range(L):
        layer = op @ layer
        total = total + layer
    return total / (L + 1)


def dump_incidence(path: Union[str, Path], inc: HypergraphIncidence) -> Path:
    """Debug dump of H as `node<TAB>hyperedge<TAB>value` coordinates."""
    return atomic_write_lines(path, inc.coordinate_lines())


@dataclass
class EmbeddingTables:
    """Convolved embedding tables: one cross-domain table plus one table per domain."""

    shared_table: np.ndarray
    specific_table: Dict[int, np.ndarray]
    n_global_users: int
    d: int = field(init=False)

    def __post_init__(self):
        self.d = self.shared_table.shape[1]
        for domain_id, table in self.specific_table.items():
            if table.shape[1] != self.d:
                raise ValidationError(
                    f"specific table of domain {domain_id} has width {table.shape[1]}, expected {self.d}"
                )

    def shared_row(self, node: NodeRef) -> int:
        return node.global_id if node.is_user else self.n_global_users + node.global_id


def lookup_motif(tables: EmbeddingTables, motif: MotifInstance,
                 which: Union[Context, str]) -> np.ndarray:
    """Rows of the motif's nodes, in motif order, from the shared or the domain table."""
    which = Context(which)
    if which is Context.SHARED:
        table = tables.shared_table
        rows = [tables.shared_row(n) for n in motif.nodes]
    else:
        if motif.domain_id not in tables.specific_table:
            raise NodeLookupError(f"no specific table for domain {motif.domain_id}")
        table = tables.specific_table[motif.domain_id]
        rows = [n.per_domain_id for n in motif.nodes]
    for row, node in zip(rows, motif.nodes):
        if not 0 <= row < table.shape[0]:
            raise NodeLookupError(f"node {node} is not registered in the {which.value} table")
    return table[rows]
