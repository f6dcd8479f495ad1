import logging
from dataclasses import dataclass
from enum import Enum
from typing import List, Optional, Sequence

import numpy as np

from .autodiff import (ParamStore, Tensor, as_tensor, concat, matmul, mean_rows, mul, softmax,
                       stack, transpose, tsum)
from .errors import DimensionError
from .motifs import Context

logger = logging.getLogger(__name__)


class PromptMode(str, Enum):
    ELEMENTWISE = "elementwise"
    MATRIX = "matrix"
    ATTENTION = "attention"


def prompt_prefix(domain_id: int, context: Context) -> str:
    return f"prompt.d{domain_id}.{Context(context).value}"


class PromptParams:
    """
    Learnable ReadOut prompts of one (domain, context).

    Only the tensors of the configured mode exist. Every mode starts at its
    identity value, where the prompted readout equals the plain mean and the
    output gate passes the concatenation through unchanged.
    """

    def __init__(self, store: ParamStore, prefix: str, d: int, mode: PromptMode):
        self.store = store
        self.prefix = prefix
        self.d = d
        self.mode = PromptMode(mode)

    @classmethod
    def create(cls, store: ParamStore, prefix: str, d: int, mode: PromptMode) -> "PromptParams":
        """Add the mode's tensors at identity; tensors already in the store are kept."""
        prompts = cls(store, prefix, d, mode)
        identity = {
            PromptMode.ELEMENTWISE: np.ones(d),
            PromptMode.MATRIX: np.eye(d),
            PromptMode.ATTENTION: np.zeros((1, d)),
        }[prompts.mode]
        for name, value in zip(prompts.names, (identity, np.ones(2 * d))):
            if name not in store:
                store.add(name, value)
        return prompts

    @property
    def names(self) -> List[str]:
        mode_param = {
            PromptMode.ELEMENTWISE: "p_vec",
            PromptMode.MATRIX: "p_mat",
            PromptMode.ATTENTION: "attn_w",
        }[self.mode]
        return [f"{self.prefix}.{mode_param}", f"{self.prefix}.p_out"]

    @property
    def p_vec(self) -> Tensor:
        return self.store[f"{self.prefix}.p_vec"]

    @property
    def p_mat(self) -> Tensor:
        return self.store[f"{self.prefix}.p_mat"]

    @property
    def attn_w(self) -> Tensor:
        return self.store[f"{self.prefix}.attn_w"]

    @property
    def p_out(self) -> Tensor:
        return self.store[f"{self.prefix}.p_out"]


def readout_plain(T) -> Tensor:
    """Column-wise mean of the motif rows."""
    return mean_rows(as_tensor(T))


def attention_weights(T, prompts: PromptParams) -> Tensor:
    """softmax_j(W t_j) over the rows of each motif, shape (..., m, 1)."""
    return softmax(matmul(as_tensor(T), transpose(prompts.attn_w)), axis=-2)


def readout_prompted(T, prompts: PromptParams) -> Tensor:
    T = as_tensor(T)
    if T.shape[-1] != prompts.d:
        raise DimensionError(f"motif rows have width {T.shape[-1]}, prompts expect {prompts.d}")
    if prompts.mode is PromptMode.ELEMENTWISE:
        return mean_rows(mul(T, prompts.p_vec))
    if prompts.mode is PromptMode.MATRIX:
        return mean_rows(matmul(T, transpose(prompts.p_mat)))
    return tsum(mul(T, attention_weights(T, prompts)), axis=-2)


def assemble_node_embedding(z, central, p_out) -> Tensor:
    """p_out * Concat(z, central); works row-wise on batches."""
    z, central, p_out = as_tensor(z), as_tensor(central), as_tensor(p_out)
    d = z.shape[-1]
    if central.shape[-1] != d or p_out.shape[-1] != 2 * d:
        raise DimensionError(
            f"embedding parts have widths {d}, {central.shape[-1]} and gate {p_out.shape[-1]}; "
            f"expected d, d and 2d"
        )
    return mul(concat([z, central], axis=-1), p_out)


@dataclass
class NodeEmbedding:
    vector: Tensor
    context: Context
    domain_id: int
    cold: bool = False

    @property
    def provenance(self) -> str:
        if self.context is Context.SHARED:
            return "M-shared"
        return f"M-specific({self.domain_id})"


def node_embedding(encoded_motifs: Sequence[Tensor], central, prompts: PromptParams,
                   context: Context, domain_id: int) -> NodeEmbedding:
    """
    Mean of the prompted readouts of a node's encoded motifs, gated together
    with its central signal. A node without motifs keeps only the central half.
    """
    central = as_tensor(central)
    if encoded_motifs:
        z = mean_rows(stack([readout_prompted(T, prompts) for T in encoded_motifs], axis=0))
        cold = False
    else:
        z = Tensor(np.zeros(prompts.d))
        cold = True
    vector = assemble_node_embedding(z, central, prompts.p_out)
    return NodeEmbedding(vector, Context(context), domain_id, cold)


def build_prompts(store: ParamStore, domains: Sequence[int], d: int, mode: PromptMode) -> dict:
    """PromptParams for every (domain, context); missing tensors start at identity."""
    return {
        (domain_id, context): PromptParams.create(store, prompt_prefix(domain_id, context), d, mode)
        for domain_id in domains
        for context in Context
    }


def prompt_names(prompts: dict, domain_id: Optional[int] = None) -> List[str]:
    return sorted(
        name
        for (dom, _), params in prompts.items()
        if domain_id is None or dom == domain_id
        for name in params.names
    )
