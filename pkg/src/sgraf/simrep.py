"""Vector similarity representations between image and text features.

A similarity representation is ``W |x - y|^2`` rescaled to unit length. One
global representation compares the pooled image and sentence vectors; local
representations compare each word (or region) with the feature it attends to
on the other side. The stacked set of them is the node set consumed by the
graph reasoning and filtration heads.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import tensor as T
from .encoders import TextualFeatures, VisualFeatures, _ParamGroup
from .nn import uniform_init
from .tensor import EPS, Tensor

T2I = "t2i"
I2T = "i2t"


@dataclass
class SimilarityParams(_ParamGroup):
    w_global: Tensor  # [m, d]
    w_local: Tensor  # [m, d]
    lam: float = 9.0

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError("temperature must be non-negative")

    @classmethod
    def init(cls, rng, d: int, m: int, lam: float = 9.0) -> "SimilarityParams":
        return cls(uniform_init(rng, (m, d), d), uniform_init(rng, (m, d), d), lam)


@dataclass
class AttentionMap:
    cosines: Tensor  # [..., n_context, n_query]
    normalized: Tensor
    weights: Tensor  # softmax over the context axis
    attended: Tensor  # [..., n_query, d]
    direction: str = T2I


@dataclass
class SimilarityNodes:
    locals_: Optional[Tensor]  # [..., n, m] or None
    global_: Optional[Tensor]  # [..., m] or None
    stacked: Tensor  # [..., n (+1), m]

    @property
    def count(self) -> int:
        return self.stacked.shape[-2]

    @property
    def has_global(self) -> bool:
        return self.global_ is not None


def similarity_vector(x, y, weight: Tensor, eps: float = EPS) -> Tensor:
    x, y = T.as_tensor(x), T.as_tensor(y)
    if x.shape[-1] != weight.shape[1] or y.shape[-1] != weight.shape[1]:
        raise ValueError("feature width does not match the similarity weight")
    projected = T.linear(T.square(T.sub(x, y)), weight)
    return T.l2_normalize(projected, axis=-1, eps=eps)


def cosine(x, y, eps: float = EPS) -> Tensor:
    """Cosine along the last axis, keeping it as a width-1 axis."""
    x, y = T.as_tensor(x), T.as_tensor(y)
    return T.tsum(T.mul(T.l2_normalize(x, eps=eps), T.l2_normalize(y, eps=eps)), axis=-1, keepdims=True)


def global_similarity(v_global, t_global, params: SimilarityParams, eps: float = EPS) -> Tensor:
    return similarity_vector(v_global, t_global, params.w_global, eps)


def _attend(context: Tensor, queries: Tensor, lam: float, norm_axis: str, eps: float) -> tuple:
    c = T.matmul(T.l2_normalize(context, eps=eps), T.swap_last(T.l2_normalize(queries, eps=eps)))
    axis = -1 if norm_axis == "query" else -2
    c_hat = T.l2_normalize(T.relu(c), axis=axis, eps=eps)
    alpha = T.softmax(T.mul(c_hat, lam), axis=-2)
    attended = T.matmul(T.swap_last(alpha), context)
    return c, c_hat, alpha, attended


def cross_attend(
    regions,
    words,
    lam: float,
    direction: str = T2I,
    norm_axis: str = "query",
    eps: float = EPS,
) -> AttentionMap:
    """Cross-modal attention between regions [..., K, d] and words [..., L, d].

    ``t2i``: every word attends over the regions; weights are [K, L] with
    columns summing to one and ``attended`` holds one visual vector per word.
    ``i2t`` is the same construction with the modalities swapped.

    ``norm_axis="query"`` rescales the clipped cosines across the attending
    items (words for t2i) before the softmax; ``"context"`` rescales across the
    attended items instead.
    """
    regions, words = T.as_tensor(regions), T.as_tensor(words)
    if regions.shape[-2] < 1 or words.shape[-2] < 1:
        raise ValueError("cross_attend needs at least one region and one word")
    if direction == T2I:
        context, queries = regions, words
    elif direction == I2T:
        context, queries = words, regions
    else:
        raise ValueError(f"unknown attention direction {direction!r}")
    if norm_axis not in ("query", "context"):
        raise ValueError(f"unknown normalization axis {norm_axis!r}")
    return AttentionMap(*_attend(context, queries, lam, norm_axis, eps), direction=direction)


def local_similarities(attended, anchors, w_local: Tensor, eps: float = EPS) -> Tensor:
    attended, anchors = T.as_tensor(attended), T.as_tensor(anchors)
    if attended.shape[-2] != anchors.shape[-2]:
        raise ValueError(f"row counts differ: {attended.shape[-2]} attended vs {anchors.shape[-2]} anchors")
    return similarity_vector(attended, anchors, w_local, eps)


def build_nodes(locals_: Optional[Tensor], global_: Optional[Tensor]) -> SimilarityNodes:
    """Stack local nodes first and the global node last."""
    if locals_ is None and global_ is None:
        raise ValueError("a node set needs local or global alignments")
    if locals_ is not None and locals_.shape[-2] == 0:
        locals_ = None
    if global_ is None:
        return SimilarityNodes(locals_, None, locals_)
    g = T.expand_dims(global_, -2)
    if locals_ is None:
        return SimilarityNodes(None, global_, g)
    if locals_.shape[-1] != global_.shape[-1]:
        raise ValueError("local and global node widths differ")
    if locals_.shape[:-2] != global_.shape[:-1]:
        g = T.add(g, Tensor(np.zeros(locals_.shape[:-2] + (1, 1))))
    return SimilarityNodes(locals_, global_, T.concat([locals_, g], axis=-2))


def unstack_nodes(nodes: SimilarityNodes):
    """Split the stacked view back into (locals, global)."""
    if not nodes.has_global:
        return nodes.stacked, None
    n = nodes.count - 1
    locals_ = nodes.stacked[..., :n, :] if n else None
    return locals_, nodes.stacked[..., n, :]


def compute_nodes(
    visual: VisualFeatures,
    textual: TextualFeatures,
    params: SimilarityParams,
    direction: str = T2I,
    similarity: str = "vector",
    use_global: bool = True,
    use_local: bool = True,
    norm_axis: str = "query",
    eps: float = EPS,
) -> SimilarityNodes:
    """Full node set for (possibly broadcast-batched) image/text features."""
    local_nodes = global_node = None
    if use_local:
        amap = cross_attend(visual.regions, textual.words, params.lam, direction, norm_axis, eps)
        anchors = textual.words if direction == T2I else visual.regions
        if similarity == "vector":
            local_nodes = local_similarities(amap.attended, anchors, params.w_local, eps)
        else:
            local_nodes = cosine(amap.attended, anchors, eps)
    if use_global:
        if similarity == "vector":
            global_node = global_similarity(visual.global_, textual.global_, params, eps)
        else:
            global_node = cosine(visual.global_, textual.global_, eps)
    return build_nodes(local_nodes, global_node)
