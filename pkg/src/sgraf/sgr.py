"""Similarity graph reasoning over alignment nodes."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List

from . import tensor as T
from .encoders import _ParamGroup
from .nn import uniform_init
from .simrep import SimilarityNodes
from .tensor import Tensor


@dataclass
class StepParams(_ParamGroup):
    w_in: Tensor  # [m, m]
    w_out: Tensor  # [m, m]
    w_r: Tensor  # [m, m]

    @classmethod
    def init(cls, rng, m: int) -> "StepParams":
        return cls(uniform_init(rng, (m, m), m), uniform_init(rng, (m, m), m), uniform_init(rng, (m, m), m))


@dataclass
class SgrParams:
    steps: List[StepParams]
    head_w: Tensor  # [m]
    head_b: Tensor  # []

    @classmethod
    def init(cls, rng, m: int, steps: int) -> "SgrParams":
        if steps < 1:
            raise ValueError("graph reasoning needs at least one step")
        return cls([StepParams.init(rng, m) for _ in range(steps)], uniform_init(rng, (m,), m), uniform_init(rng, (), m))

    def named(self, prefix: str = "") -> Dict[str, Tensor]:
        out = {}
        for i, step in enumerate(self.steps):
            out.update(step.named(f"{prefix}step{i}."))
        out[f"{prefix}head_w"] = self.head_w
        out[f"{prefix}head_b"] = self.head_b
        return out


@dataclass
class GraphState:
    nodes: Tensor  # [..., P, m]
    step: int = 0
    edges: List[Tensor] = field(default_factory=list)


def edge_weights(nodes: Tensor, w_in: Tensor, w_out: Tensor) -> Tensor:
    """Row-stochastic [..., P, P]; entry (p, q) weighs the message from q into p."""
    if nodes.shape[-2] < 1:
        raise ValueError("edge_weights needs at least one node")
    if nodes.shape[-1] != w_in.shape[1] or nodes.shape[-1] != w_out.shape[1]:
        raise ValueError("node width does not match edge projections")
    incoming = T.linear(nodes, w_in)
    outgoing = T.linear(nodes, w_out)
    return T.softmax(T.matmul(incoming, T.swap_last(outgoing)), axis=-1)


def graph_step(state: GraphState, params: SgrParams) -> GraphState:
    if state.step >= len(params.steps):
        raise IndexError(f"step {state.step} exceeds the configured {len(params.steps)} reasoning steps")
    p = params.steps[state.step]
    edges = edge_weights(state.nodes, p.w_in, p.w_out)
    aggregated = T.matmul(edges, state.nodes)
    nodes = T.relu(T.linear(aggregated, p.w_r))
    return GraphState(nodes, state.step + 1, state.edges + [edges])


def reason(nodes: SimilarityNodes, params: SgrParams) -> GraphState:
    state = GraphState(nodes.stacked)
    for _ in params.steps:
        state = graph_step(state, params)
    return state


def readout(final: Tensor, has_global: bool) -> Tensor:
    """Global node of the last step, or the node mean when no global node exists."""
    if has_global:
        return final[..., -1, :]
    return T.mean(final, axis=-2)


def sgr_score(nodes: SimilarityNodes, params: SgrParams) -> Tensor:
    """Similarity in (0, 1) after all reasoning steps."""
    if nodes.count < 1:
        raise ValueError("sgr_score needs at least one node")
    state = reason(nodes, params)
    reasoned = readout(state.nodes, nodes.has_global)
    return T.sigmoid(T.add(T.matmul(reasoned, params.head_w), params.head_b))
