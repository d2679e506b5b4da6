"""Similarity attention filtration: significance-weighted aggregation of alignment nodes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from . import tensor as T
from .nn import INFERENCE, TRAINING, BatchNormState, batch_norm, uniform_init
from .simrep import SimilarityNodes
from .tensor import Tensor


@dataclass
class SafParams:
    w_f: Tensor  # [m]
    bn_gamma: Tensor  # [1]
    bn_beta: Tensor  # [1]
    head_w: Tensor  # [m]
    head_b: Tensor  # []
    bn: BatchNormState = field(default_factory=lambda: BatchNormState(1))
    bn_scope: str = "batch"

    @classmethod
    def init(cls, rng, m: int, momentum: float = 0.1, eps: float = 1e-8, bn_scope: str = "batch") -> "SafParams":
        return cls(
            w_f=uniform_init(rng, (m,), m),
            bn_gamma=Tensor(np.ones(1), requires_grad=True),
            bn_beta=Tensor(np.zeros(1), requires_grad=True),
            head_w=uniform_init(rng, (m,), m),
            head_b=uniform_init(rng, (), m),
            bn=BatchNormState(1, momentum=momentum, epsilon=eps),
            bn_scope=bn_scope,
        )

    def named(self, prefix: str = "") -> Dict[str, Tensor]:
        return {f"{prefix}{k}": getattr(self, k) for k in ("w_f", "bn_gamma", "bn_beta", "head_w", "head_b")}


@dataclass
class SafWeights:
    beta: Tensor  # [..., P]
    aggregated: Tensor  # [..., m]


def preactivations(nodes: Tensor, params: SafParams) -> Tensor:
    """``W_f s_p`` for every node, shaped [..., P, 1] for the one-channel BN."""
    return T.expand_dims(T.matmul(nodes, params.w_f), -1)


def _normalize(pre: Tensor, params: SafParams, mode: str) -> Tensor:
    axes = (-2,) if params.bn_scope == "pair" else None
    return batch_norm(pre, params.bn, params.bn_gamma, params.bn_beta, axes=axes, mode=mode)


def _aggregate(nodes: Tensor, normed: Tensor) -> SafWeights:
    # sigmoid(x_p) / sum_q sigmoid(x_q), evaluated as a softmax of log-sigmoids so
    # that gates which all underflow still give a proper distribution
    beta = T.softmax(T.log_sigmoid(T.reshape(normed, normed.shape[:-1])), axis=-1)
    aggregated = T.tsum(T.mul(T.expand_dims(beta, -1), nodes), axis=-2)
    return SafWeights(beta, aggregated)


def saf_weights(nodes, params: SafParams, mode: str = INFERENCE) -> SafWeights:
    """Per-node weights and the weighted node sum.

    In training mode every node in ``nodes`` (all leading batch entries)
    enters one BN batch, unless ``params.bn_scope == "pair"``.
    """
    stacked = nodes.stacked if isinstance(nodes, SimilarityNodes) else nodes
    if stacked.shape[-2] < 1:
        raise ValueError("saf_weights needs at least one node")
    return _aggregate(stacked, _normalize(preactivations(stacked, params), params, mode))


def saf_weights_grouped(groups: Sequence[Tensor], params: SafParams, mode: str = INFERENCE) -> List[SafWeights]:
    """``saf_weights`` over node sets of different sizes sharing one BN batch."""
    if mode == INFERENCE or params.bn_scope == "pair" or len(groups) == 1:
        return [saf_weights(g, params, mode) for g in groups]
    pres = [preactivations(g, params) for g in groups]
    flat = T.concat([T.reshape(p, (-1, 1)) for p in pres], axis=0)
    normed = _normalize(flat, params, mode)
    out, start = [], 0
    for g, p in zip(groups, pres):
        n = p.size
        out.append(_aggregate(g, T.reshape(normed[start:start + n], p.shape)))
        start += n
    return out


def head(aggregated: Tensor, params: SafParams) -> Tensor:
    return T.sigmoid(T.add(T.matmul(aggregated, params.head_w), params.head_b))


def saf_score(nodes, params: SafParams, mode: str = INFERENCE) -> Tensor:
    return head(saf_weights(nodes, params, mode).aggregated, params)
