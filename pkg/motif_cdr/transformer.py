import logging
from dataclasses import dataclass
from enum import Enum
from typing import Optional, Sequence, Tuple

import numpy as np

from .autodiff import (ParamStore, Tensor, gelu, layer_norm, matmul, permute, reshape, softmax,
                       transpose)
from .errors import DimensionError, RoutingError
from .motifs import Context

logger = logging.getLogger(__name__)

SHARED_EXPERT = "shared"


class TransformerVariant(str, Enum):
    MODE = "mode"
    VANILLA = "vanilla"
    NONE = "none"


@dataclass(frozen=True)
class RouteTag:
    context: Context
    domain_id: Optional[int] = None

    def __post_init__(self):
        if self.context is Context.SPECIFIC and self.domain_id is None:
            raise RoutingError("a specific route must name a domain")

    @classmethod
    def shared(cls) -> "RouteTag":
        return cls(Context.SHARED)

    @classmethod
    def specific(cls, domain_id: int) -> "RouteTag":
        return cls(Context.SPECIFIC, domain_id)

    @property
    def expert(self) -> str:
        return SHARED_EXPERT if self.context is Context.SHARED else f"d{self.domain_id}"


class MoDELayer:
    """
    One Mixture-of-Domain-Experts layer.

    Attention and layer norms are shared by every route; the feed-forward block
    has one expert for the shared route and one per domain. All tensors live in
    the ParamStore under `prefix`.
    """

    def __init__(self, store: ParamStore, prefix: str, d: int, heads: int, domains: Sequence[int]):
        if heads < 1 or d % heads:
            raise DimensionError(f"head count {heads} must divide d = {d}")
        self.store = store
        self.prefix = prefix
        self.d = d
        self.heads = heads
        self.domains = tuple(domains)

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d: int, heads: int, domains: Sequence[int],
               rng: np.random.Generator) -> "MoDELayer":
        layer = cls(store, prefix, d, heads, domains)
        scale = 1.0 / np.sqrt(d)
        for name in ("wq", "wk", "wv", "wo"):
            store.add(f"{prefix}.attn.{name}", rng.normal(0.0, scale, size=(d, d)))
        for ln in ("ln1", "ln2"):
            store.add(f"{prefix}.{ln}.gain", np.ones(d))
            store.add(f"{prefix}.{ln}.bias", np.zeros(d))
        for expert in layer.expert_names():
            base = f"{prefix}.expert.{expert}"
            store.add(f"{base}.w1", rng.normal(0.0, scale, size=(d, 2 * d)))
            store.add(f"{base}.b1", np.zeros(2 * d))
            store.add(f"{base}.w2", rng.normal(0.0, 1.0 / np.sqrt(2 * d), size=(2 * d, d)))
            store.add(f"{base}.b2", np.zeros(d))
        return layer

    def expert_names(self) -> Tuple[str, ...]:
        return (SHARED_EXPERT,) + tuple(f"d{dom}" for dom in self.domains)

    def param(self, name: str) -> Tensor:
        return self.store[f"{self.prefix}.{name}"]

    def expert(self, route: RouteTag, variant: TransformerVariant = TransformerVariant.MODE) -> str:
        if route.context is Context.SPECIFIC and route.domain_id not in self.domains:
            raise RoutingError(f"no expert for domain {route.domain_id} in {self.prefix}")
        if variant is TransformerVariant.VANILLA:
            return SHARED_EXPERT
        return route.expert


def _split_heads(x: Tensor, heads: int) -> Tensor:
    lead, (m, d) = x.shape[:-2], x.shape[-2:]
    p = len(lead)
    x = reshape(x, lead + (m, heads, d // heads))
    return permute(x, tuple(range(p)) + (p + 1, p, p + 2))


def _merge_heads(x: Tensor) -> Tensor:
    lead, (heads, m, dh) = x.shape[:-3], x.shape[-3:]
    p = len(lead)
    x = permute(x, tuple(range(p)) + (p + 1, p, p + 2))
    return reshape(x, lead + (m, heads * dh))


def multi_head_attention(x: Tensor, layer: MoDELayer) -> Tensor:
    q = _split_heads(matmul(x, layer.param("attn.wq")), layer.heads)
    k = _split_heads(matmul(x, layer.param("attn.wk")), layer.heads)
    v = _split_heads(matmul(x, layer.param("attn.wv")), layer.heads)
    scale = 1.0 / np.sqrt(layer.d // layer.heads)
    weights = softmax(matmul(q, transpose(k)) * scale, axis=-1)
    return matmul(_merge_heads(matmul(weights, v)), layer.param("attn.wo"))


def expert_ffn(x: Tensor, layer: MoDELayer, expert: str) -> Tensor:
    base = f"expert.{expert}"
    hidden = gelu(matmul(x, layer.param(f"{base}.w1")) + layer.param(f"{base}.b1"))
    return matmul(hidden, layer.param(f"{base}.w2")) + layer.param(f"{base}.b2")


def mode_layer_forward(T_in: Tensor, layer: MoDELayer, route: RouteTag,
                       variant: TransformerVariant = TransformerVariant.MODE) -> Tensor:
    """
    Pre-norm residual layer over the last two axes (motif rows x d).

    T' = MSA(LN(T)) + T, then T_out = FFN_route(LN(T')) + T'. Leading axes are
    treated as a batch of motifs of equal size.
    """
    if T_in.ndim < 2 or T_in.shape[-2] < 1:
        raise DimensionError(f"motif matrix needs at least one row, got shape {T_in.shape}")
    if T_in.shape[-1] != layer.d:
        raise DimensionError(f"motif rows have width {T_in.shape[-1]}, layer expects {layer.d}")
    expert = layer.expert(route, variant)

    normed = layer_norm(T_in, layer.param("ln1.gain"), layer.param("ln1.bias"))
    attended = multi_head_attention(normed, layer) + T_in
    normed = layer_norm(attended, layer.param("ln2.gain"), layer.param("ln2.bias"))
    return expert_ffn(normed, layer, expert) + attended


def encode_motif(T0: Tensor, layers: Sequence[MoDELayer], route: RouteTag,
                 variant: TransformerVariant = TransformerVariant.MODE) -> Tensor:
    if variant is TransformerVariant.NONE:
        return T0
    if not layers:
        raise DimensionError("encode_motif needs at least one layer")
    T = T0
    for layer in layers:
        T = mode_layer_forward(T, layer, route, variant)
    return T


def build_layers(store: ParamStore, n_layers: int, d: int, heads: int, domains: Sequence[int],
                 rng: Optional[np.random.Generator] = None) -> list:
    """Create (when `rng` is given) or attach to `n_layers` stacked layers named `mode.<l>`."""
    if rng is None:
        return [MoDELayer(store, f"mode.{l}", d, heads, domains) for l in range(n_layers)]
    return [MoDELayer.create(store, f"mode.{l}", d, heads, domains, rng) for l in range(n_layers)]
