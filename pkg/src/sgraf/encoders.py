"""Region projection, self-attention pooling and the bi-directional GRU text encoder."""
from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Dict, Optional, Sequence

import numpy as np

from . import tensor as T
from .nn import uniform_init
from .tensor import Tensor

UNK_ID = 0
PAD_ID = 1


class _ParamGroup:
    """Dataclass mixin exposing fields as a flat ``{prefix.name: Tensor}`` map."""

    def named(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {}
        for f in fields(self):
            value = getattr(self, f.name)
            key = f"{prefix}{f.name}"
            if isinstance(value, _ParamGroup):
                out.update(value.named(key + "."))
            elif isinstance(value, Tensor):
                out[key] = value
        return out


@dataclass
class VisualFeatures:
    regions: Tensor  # [..., K, d]
    global_: Tensor  # [..., d]
    pool_weights: Optional[Tensor] = None


@dataclass
class TextualFeatures:
    words: Tensor  # [..., L, d]
    global_: Tensor  # [..., d]
    length: int = 0
    pool_weights: Optional[Tensor] = None

    def __post_init__(self):
        if not self.length:
            self.length = self.words.shape[-2]


@dataclass
class PoolParams(_ParamGroup):
    w_local: Tensor  # [h, d]
    w_query: Tensor  # [h, d]
    w_score: Tensor  # [h]

    @classmethod
    def init(cls, rng, d: int, hidden: int) -> "PoolParams":
        return cls(uniform_init(rng, (hidden, d), d), uniform_init(rng, (hidden, d), d), uniform_init(rng, (hidden,), hidden))


@dataclass
class GruParams(_ParamGroup):
    # gate order along the first axis: reset, update, candidate
    w_x: Tensor  # [3d, e]
    w_h: Tensor  # [3d, d]
    b_x: Tensor  # [3d]
    b_h: Tensor  # [3d]

    @classmethod
    def init(cls, rng, embed_dim: int, d: int) -> "GruParams":
        return cls(
            uniform_init(rng, (3 * d, embed_dim), d),
            uniform_init(rng, (3 * d, d), d),
            uniform_init(rng, (3 * d,), d),
            uniform_init(rng, (3 * d,), d),
        )

    @property
    def hidden(self) -> int:
        return self.w_h.shape[1]


@dataclass
class EncoderParams(_ParamGroup):
    region_w: Tensor  # [d, d_raw]
    region_b: Tensor  # [d]
    embedding: Tensor  # [vocab, embed_dim]
    gru_fwd: GruParams
    gru_bwd: GruParams
    img_pool: PoolParams
    txt_pool: PoolParams

    @classmethod
    def init(cls, rng: np.random.Generator, d_raw: int, d: int, vocab_size: int, embed_dim: int, attn_hidden: int):
        if vocab_size < 1:
            raise ValueError("vocabulary must hold at least one token")
        return cls(
            region_w=uniform_init(rng, (d, d_raw), d_raw),
            region_b=uniform_init(rng, (d,), d_raw),
            embedding=Tensor(rng.uniform(-0.1, 0.1, size=(vocab_size, embed_dim)), requires_grad=True),
            gru_fwd=GruParams.init(rng, embed_dim, d),
            gru_bwd=GruParams.init(rng, embed_dim, d),
            img_pool=PoolParams.init(rng, d, attn_hidden),
            txt_pool=PoolParams.init(rng, d, attn_hidden),
        )


def project_regions(raw, weight: Tensor, bias: Tensor) -> Tensor:
    """Map raw region features [..., K, d_raw] to [..., K, d]."""
    raw = T.as_tensor(raw)
    if raw.shape[-1] != weight.shape[1]:
        raise ValueError(f"region features have width {raw.shape[-1]}, projection expects {weight.shape[1]}")
    return T.linear(raw, weight, bias)


def attention_pool(locals_: Tensor, params: PoolParams):
    """Additive self-attention with the mean of ``locals_`` as the query.

    Returns the pooled vector [..., d] and the attention weights [..., n].
    """
    if locals_.shape[-2] < 1:
        raise ValueError("attention_pool needs at least one local feature")
    if locals_.shape[-1] != params.w_local.shape[1]:
        raise ValueError("feature width does not match pooling parameters")
    query = T.mean(locals_, axis=-2, keepdims=True)
    hidden = T.tanh(T.add(T.linear(locals_, params.w_local), T.linear(query, params.w_query)))
    weights = T.softmax(T.matmul(hidden, params.w_score), axis=-1)
    pooled = T.tsum(T.mul(T.expand_dims(weights, -1), locals_), axis=-2)
    return pooled, weights


def embed_tokens(ids: Sequence[int], table: Tensor, unk_id: Optional[int] = UNK_ID) -> Tensor:
    """Look up rows of ``table``; ids beyond the vocabulary map to ``unk_id``."""
    ids = np.asarray(ids, dtype=np.intp)
    vocab = table.shape[0]
    bad = (ids < 0) | (ids >= vocab)
    if bad.any():
        if unk_id is None:
            raise IndexError(f"token id {int(ids[bad][0])} outside vocabulary of size {vocab}")
        ids = np.where(bad, unk_id, ids)
    return T.getitem(table, ids)


def gru_cell(x_proj: Tensor, h: Tensor, p: GruParams) -> Tensor:
    """One GRU update given the precomputed input projection ``W_x x + b_x``."""
    d = p.hidden
    h_proj = T.linear(h, p.w_h, p.b_h)
    r = T.sigmoid(T.add(x_proj[..., :d], h_proj[..., :d]))
    z = T.sigmoid(T.add(x_proj[..., d:2 * d], h_proj[..., d:2 * d]))
    n = T.tanh(T.add(x_proj[..., 2 * d:], T.mul(r, h_proj[..., 2 * d:])))
    # h' = (1 - z) * n + z * h
    return T.add(n, T.mul(z, T.sub(h, n)))


def _run_gru(x_proj: Tensor, p: GruParams, reverse: bool) -> list:
    steps = x_proj.shape[-2]
    h = Tensor(np.zeros(x_proj.shape[:-2] + (p.hidden,)))
    states = [None] * steps
    order = range(steps - 1, -1, -1) if reverse else range(steps)
    for t in order:
        h = gru_cell(x_proj[..., t, :], h, p)
        states[t] = h
    return states


def bigru_encode(embeddings: Tensor, fwd: GruParams, bwd: GruParams) -> Tensor:
    """Encode [..., L, e] into [..., L, d] as the mean of forward and backward states."""
    if embeddings.shape[-2] < 1:
        raise ValueError("bigru_encode needs at least one time step")
    if embeddings.shape[-1] != fwd.w_x.shape[1] or embeddings.shape[-1] != bwd.w_x.shape[1]:
        raise ValueError("embedding width does not match GRU input weights")
    hf = _run_gru(T.linear(embeddings, fwd.w_x, fwd.b_x), fwd, reverse=False)
    hb = _run_gru(T.linear(embeddings, bwd.w_x, bwd.b_x), bwd, reverse=True)
    return T.mul(T.add(T.stack(hf, axis=-2), T.stack(hb, axis=-2)), 0.5)


def encode_images(raw, params: EncoderParams) -> VisualFeatures:
    regions = project_regions(raw, params.region_w, params.region_b)
    pooled, weights = attention_pool(regions, params.img_pool)
    return VisualFeatures(regions, pooled, weights)


def encode_texts(token_ids, params: EncoderParams, unk_id: Optional[int] = UNK_ID) -> TextualFeatures:
    """Encode one caption ``[L]`` or an equal-length batch ``[B, L]``."""
    ids = np.asarray(token_ids, dtype=np.intp)
    emb = embed_tokens(ids.reshape(-1), params.embedding, unk_id)
    emb = T.reshape(emb, ids.shape + (emb.shape[-1],))
    words = bigru_encode(emb, params.gru_fwd, params.gru_bwd)
    pooled, weights = attention_pool(words, params.txt_pool)
    return TextualFeatures(words, pooled, ids.shape[-1], weights)
