"""
The Motif-based Encoder assembled from its parts.

Per epoch the sampled motifs define the hypergraphs (one over the shared node
universe, one per domain). Each training step convolves the embedding tables
through those fixed operators, looks motif rows up in the shared or the
domain-specific table, refines them with the MoDE transformer and reads them
out into node embeddings.
"""
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from enum import Enum
from functools import partial
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.sparse as sp

from .autodiff import ParamStore, Tensor, concat, mul, no_grad, spmm, take
from .config import PipelineConfig
from .errors import NodeLookupError, ValidationError
from .graph import Dataset, NodeKind
from .hypergraph import build_incidence, build_shared_incidence
from .motifs import Context, MotifInstance, MotifPool, MotifSampler
from .objectives import MaskedMotif
from .readout import (PromptMode, PromptParams, assemble_node_embedding, build_prompts, prompt_names,
                      readout_prompted)
from .transformer import RouteTag, TransformerVariant, build_layers, encode_motif
from .utils import STREAM_TRAIN, node_rng

logger = logging.getLogger(__name__)

INIT_SCALE = 0.1


class Task(str, Enum):
    INTRA = "intra"
    INTER = "inter"


@dataclass
class EpochStructure:
    """Motif pools and propagation operators of one epoch; None means no hyperedges."""

    epoch: int
    pools: Dict[int, MotifPool]
    shared_op: Optional[sp.csr_matrix]
    specific_ops: Dict[int, Optional[sp.csr_matrix]]
    warnings: Counter = field(default_factory=Counter)


@dataclass
class ConvolvedTables:
    shared: Tensor
    specific: Dict[int, Tensor]


@dataclass
class EncodedNodes:
    """
    Transformer outputs of the motifs of a node list, grouped by motif size.

    `averaging` maps the concatenated group rows back to nodes with weight
    1 / (number of motifs of the node); nodes without motifs get an empty row.
    """

    domain_id: int
    context: Context
    nodes: np.ndarray
    groups: List[Tensor]
    averaging: sp.csr_matrix
    central: Tensor

    @property
    def cold(self) -> np.ndarray:
        return np.asarray(self.averaging.getnnz(axis=1) == 0)

    def detached(self) -> "EncodedNodes":
        return EncodedNodes(self.domain_id, self.context, self.nodes,
                            [Tensor(g.data) for g in self.groups], self.averaging, Tensor(self.central.data))


def layer_average(op: Optional[sp.csr_matrix], X: Tensor, L: int) -> Tensor:
    """(1 / (L+1)) * sum_l op^l X, differentiable in X."""
    if op is None or L == 0:
        return X
    layer, total = X, X
    for _ in range(L):
        layer = spmm(op, layer)
        total = total + layer
    return mul(total, 1.0 / (L + 1))


def compose_user_embedding(task: Task, shared: Optional[Tensor], specific: Optional[Tensor] = None) -> Tensor:
    """Intra: Concat(shared, specific). Inter: Concat(shared, zeros)."""
    if shared is None:
        raise NodeLookupError("no shared embedding for this user")
    if Task(task) is Task.INTRA:
        if specific is None:
            raise ValidationError("the intra-domain task needs the user's domain-specific embedding")
        return concat([shared, specific], axis=-1)
    return concat([shared, Tensor(np.zeros(shared.shape))], axis=-1)


def compose_item_embedding(shared: Tensor, specific: Tensor) -> Tensor:
    return concat([shared, specific], axis=-1)


class MotifEncoder:
    """Parameters and forward pass of the whole encoder."""

    def __init__(self, dataset: Dataset, config: PipelineConfig, store: Optional[ParamStore] = None,
                 logger: Optional[logging.Logger] = None):
        self.dataset = dataset
        self.config = config
        self.logger = logger or logging.getLogger(__name__)
        model = config.model
        self.d = model.d
        self.variant = TransformerVariant(model.transformer)
        self.domains = dataset.domain_ids

        create = store is None
        self.store = store if store is not None else ParamStore()
        rng = node_rng(config.seed, STREAM_TRAIN, 0) if create else None
        if create:
            self.store.add("emb.shared", rng.normal(0.0, INIT_SCALE, size=(dataset.n_shared_rows, self.d)))
            for domain_id, graph in dataset.graphs.items():
                self.store.add(f"emb.specific.d{domain_id}",
                               rng.normal(0.0, INIT_SCALE, size=(graph.num_nodes, self.d)))
            self.store.add("mask_token", rng.normal(0.0, INIT_SCALE, size=self.d))
        self.layers = build_layers(self.store, model.transformer_layers, self.d, model.heads, self.domains, rng)
        self.prompts: Dict[Tuple[int, Context], PromptParams] = build_prompts(
            self.store, self.domains, self.d, PromptMode(config.train.prompt_mode)
        )
        self._check_shapes()

        self.samplers = {
            domain_id: MotifSampler(
                graph, config.seed, config.motifs.budget,
                is_overlapped=partial(dataset.is_overlapped, domain_id),
                lambda_f=config.motifs.lambda_f, threads=config.threads, logger=self.logger,
            )
            for domain_id, graph in dataset.graphs.items()
        }
        self._shared_rows = {domain_id: dataset.shared_rows(domain_id) for domain_id in self.domains}

    def _check_shapes(self):
        expected = {"emb.shared": (self.dataset.n_shared_rows, self.d), "mask_token": (self.d,)}
        for domain_id, graph in self.dataset.graphs.items():
            expected[f"emb.specific.d{domain_id}"] = (graph.num_nodes, self.d)
        for name, shape in expected.items():
            if name not in self.store:
                raise ValidationError(f"parameter {name!r} is missing")
            if self.store[name].shape != shape:
                raise ValidationError(f"parameter {name!r} has shape {self.store[name].shape}, dataset needs {shape}")

    # -- structure ----------------------------------------------------------------

    def context_of(self, domain_id: int, node_idx: int) -> Context:
        node = self.dataset.graphs[domain_id].nodes[node_idx]
        return Context.SHARED if self.dataset.is_overlapped(domain_id, node) else Context.SPECIFIC

    def build_structure(self, epoch: int = 0) -> EpochStructure:
        motif_cfg = self.config.motifs
        warnings: Counter = Counter()
        pools: Dict[int, MotifPool] = {}
        sampled: Dict[int, List[MotifInstance]] = {}
        for domain_id, sampler in self.samplers.items():
            motifs = sampler.sample(motif_cfg.kind, motif_cfg.walk_length, epoch)
            if not motifs:
                warnings["domains_without_motifs"] += 1
                self.logger.warning(f"Domain {domain_id}: no {motif_cfg.kind} motifs; "
                                    f"its nodes fall back to central signals")
            sampled[domain_id] = motifs
            pools[domain_id] = MotifPool(
                sampler.graph, motifs, motif_cfg.budget, self.config.seed, epoch,
                cover_members=motif_cfg.cover_members, is_overlapped=sampler.is_overlapped,
            )
            graph = sampler.graph
            cold = sum(1 for idx in range(graph.num_nodes) if not pools[domain_id].motifs_for(idx))
            warnings["cold_nodes"] += cold

        shared_op = None
        specific_ops: Dict[int, Optional[sp.csr_matrix]] = {d: None for d in self.domains}
        if self.config.model.use_hypergraph:
            merge = motif_cfg.merge_hyperedges
            nonempty = {d: m for d, m in sampled.items() if m}
            if nonempty:
                shared_op = build_shared_incidence(
                    nonempty, self.dataset.shared_row, self.dataset.n_shared_rows, merge
                ).propagation_matrix()
            for domain_id, motifs in nonempty.items():
                inc = build_incidence(motifs, self.dataset.graphs[domain_id], merge)
                specific_ops[domain_id] = inc.propagation_matrix()

        self.logger.debug(f"Epoch {epoch}: " + ", ".join(
            f"domain {d}: {len(pools[d])} pooled motif(s)" for d in self.domains
        ))
        return EpochStructure(epoch, pools, shared_op, specific_ops, warnings)

    def convolve(self, structure: EpochStructure) -> ConvolvedTables:
        L = self.config.model.hypergraph_layers
        shared = layer_average(structure.shared_op, self.store["emb.shared"], L)
        specific = {
            d: layer_average(structure.specific_ops[d], self.store[f"emb.specific.d{d}"], L)
            for d in self.domains
        }
        return ConvolvedTables(shared, specific)

    # -- node embeddings ------------------------------------------------------------

    def _table_and_rows(self, tables: ConvolvedTables, domain_id: int, context: Context):
        if context is Context.SHARED:
            return tables.shared, self._shared_rows[domain_id], RouteTag.shared()
        return tables.specific[domain_id], None, RouteTag.specific(domain_id)

    def encode_nodes(self, tables: ConvolvedTables, structure: EpochStructure, domain_id: int,
                     context: Context, nodes: Sequence[int],
                     motif_sets: Optional[Sequence[Sequence[MotifInstance]]] = None,
                     masks: Optional[Sequence[MaskedMotif]] = None) -> EncodedNodes:
        """
        Encode the motifs of `nodes` (per_domain_ids of `domain_id`).

        Motif sets default to the epoch pool. With `masks`, node k is encoded
        from the single masked motif masks[k], masked rows replaced by the mask
        token.
        """
        context = Context(context)
        nodes = np.asarray(nodes, dtype=np.int64)
        table, row_map, route = self._table_and_rows(tables, domain_id, context)
        if masks is not None:
            if len(masks) != len(nodes):
                raise ValidationError("one masked motif per node is required")
            motif_sets = [[m.motif] for m in masks]
        elif motif_sets is None:
            pool = structure.pools[domain_id]
            motif_sets = [pool.motifs_for(int(n)) for n in nodes]

        by_size: Dict[int, List[Tuple[int, MotifInstance, Optional[MaskedMotif]]]] = defaultdict(list)
        for owner, motifs in enumerate(motif_sets):
            for motif in motifs:
                by_size[motif.size].append((owner, motif, masks[owner] if masks is not None else None))

        groups, owners = [], []
        for size in sorted(by_size):
            entries = by_size[size]
            rows = np.array([[n.per_domain_id for n in m.nodes] for _, m, _ in entries], dtype=np.int64)
            if row_map is not None:
                rows = row_map[rows]
            T0 = take(table, rows)
            if masks is not None:
                keep = np.stack([mm.keep_mask() for _, _, mm in entries])
                T0 = mul(T0, keep) + mul(self.store["mask_token"], 1.0 - keep)
            groups.append(encode_motif(T0, self.layers, route, self.variant))
            owners.extend(owner for owner, _, _ in entries)

        owners = np.asarray(owners, dtype=np.int64)
        counts = np.bincount(owners, minlength=len(nodes))
        weights = 1.0 / counts[owners] if len(owners) else np.zeros(0)
        averaging = sp.csr_matrix((weights, (owners, np.arange(len(owners)))), shape=(len(nodes), len(owners)))
        central_rows = nodes if row_map is None else row_map[nodes]
        return EncodedNodes(domain_id, context, nodes, groups, averaging, take(table, central_rows))

    def readout(self, encoded: EncodedNodes, prompts: PromptParams) -> Tensor:
        """Prompted node embeddings (n, 2d) from encoded motifs."""
        n = len(encoded.nodes)
        if encoded.groups:
            readouts = concat([readout_prompted(T, prompts) for T in encoded.groups], axis=0)
            z = spmm(encoded.averaging, readouts)
        else:
            z = Tensor(np.zeros((n, self.d)))
        return assemble_node_embedding(z, encoded.central, prompts.p_out)

    def embed(self, tables: ConvolvedTables, structure: EpochStructure, domain_id: int, context: Context,
              nodes: Sequence[int], prompt_domain: Optional[int] = None, **kwargs) -> Tensor:
        prompts = self.prompts[(domain_id if prompt_domain is None else prompt_domain, Context(context))]
        return self.readout(self.encode_nodes(tables, structure, domain_id, context, nodes, **kwargs), prompts)

    def prompt_names(self, domain_id: Optional[int] = None) -> List[str]:
        return prompt_names(self.prompts, domain_id)


class NodeEmbedder:
    """
    Composed user and item embeddings of one structure.

    With `cache`, the encoder output is computed once without a graph and only
    the prompted readout stays differentiable; the encoder must then be frozen.
    """

    def __init__(self, encoder: MotifEncoder, structure: EpochStructure, cache: bool = True):
        self.encoder = encoder
        self.structure = structure
        self.cache = cache
        self._tables: Optional[ConvolvedTables] = None
        self._encoded: Dict[Tuple[int, Context], EncodedNodes] = {}

    def refresh(self):
        """Forget live tables; call after every parameter update when not caching."""
        if not self.cache:
            self._tables = None

    def tables(self) -> ConvolvedTables:
        if self._tables is None:
            if self.cache:
                with no_grad():
                    self._tables = self.encoder.convolve(self.structure)
            else:
                self._tables = self.encoder.convolve(self.structure)
        return self._tables

    def vectors(self, pool_domain: int, context: Context, prompt_domain: int,
                nodes: Optional[np.ndarray] = None) -> Tensor:
        """Node embeddings (len(nodes), 2d) from `pool_domain`'s motifs and `prompt_domain`'s prompts."""
        context = Context(context)
        graph = self.encoder.dataset.graphs[pool_domain]
        prompts = self.encoder.prompts[(prompt_domain, context)]
        if not self.cache:
            subset = np.arange(graph.num_nodes) if nodes is None else np.asarray(nodes, dtype=np.int64)
            encoded = self.encoder.encode_nodes(self.tables(), self.structure, pool_domain, context, subset)
            return self.encoder.readout(encoded, prompts)

        key = (pool_domain, context)
        if key not in self._encoded:
            with no_grad():
                encoded = self.encoder.encode_nodes(
                    self.tables(), self.structure, pool_domain, context, np.arange(graph.num_nodes)
                )
            self._encoded[key] = encoded.detached()
        full = self.encoder.readout(self._encoded[key], prompts)
        return full if nodes is None else take(full, np.asarray(nodes, dtype=np.int64))

    def users(self, target: int, task: Task, users: Sequence[int], source: Optional[int] = None) -> Tensor:
        """
        Composed user embeddings (n, 4d) for target-domain users.

        For the inter-domain task, a user also present in `source` takes the
        shared half from the source-domain motifs (read out with the target
        domain's prompts).
        """
        users = np.asarray(users, dtype=np.int64)
        task = Task(task)
        if task is Task.INTRA:
            shared = self.vectors(target, Context.SHARED, target, users)
            specific = self.vectors(target, Context.SPECIFIC, target, users)
            return compose_user_embedding(task, shared, specific)

        if source is None:
            return compose_user_embedding(task, self.vectors(target, Context.SHARED, target, users))
        target_graph = self.encoder.dataset.graphs[target]
        source_graph = self.encoder.dataset.graphs[source]
        from_source, from_target = [], []
        for k, u in enumerate(users):
            gid = target_graph.nodes[int(u)].global_id
            if source_graph.has_global(NodeKind.USER, gid):
                from_source.append((k, source_graph.node_by_global(NodeKind.USER, gid).per_domain_id))
            else:
                from_target.append((k, int(u)))

        parts, order = [], []
        if from_target:
            parts.append(self.vectors(target, Context.SHARED, target, np.array([u for _, u in from_target])))
            order.extend(k for k, _ in from_target)
        if from_source:
            parts.append(self.vectors(source, Context.SHARED, target, np.array([u for _, u in from_source])))
            order.extend(k for k, _ in from_source)
        stacked = concat(parts, axis=0) if len(parts) > 1 else parts[0]
        shared = take(stacked, np.argsort(np.asarray(order), kind="stable"))
        return compose_user_embedding(task, shared)

    def items(self, target: int, items: Sequence[int]) -> Tensor:
        """Composed item embeddings (n, 4d); `items` are per_domain_ids."""
        items = np.asarray(items, dtype=np.int64)
        shared = self.vectors(target, Context.SHARED, target, items)
        specific = self.vectors(target, Context.SPECIFIC, target, items)
        return compose_item_embedding(shared, specific)

    def domain_arrays(self, target: int, task: Task, source: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
        """Plain arrays of every user and item embedding of `target`, for ranking."""
        graph = self.encoder.dataset.graphs[target]
        with no_grad():
            users = self.users(target, task, np.arange(graph.n_users), source).data
            items = self.items(target, np.arange(graph.n_users, graph.num_nodes)).data
        return users, items
