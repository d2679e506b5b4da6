"""Batch normalization, Adam, and parameter initialization."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, Mapping, Optional, Sequence

import numpy as np

from .tensor import EPS, Tensor

TRAINING = "training"
INFERENCE = "inference"


@dataclass
class BatchNormState:
    channel_count: int
    momentum: float = 0.1
    epsilon: float = EPS
    mode: str = TRAINING
    running_mean: np.ndarray = None
    running_var: np.ndarray = None

    def __post_init__(self):
        if self.channel_count < 1:
            raise ValueError("channel_count must be positive")
        if not 0.0 < self.momentum < 1.0:
            raise ValueError("momentum must lie in (0, 1)")
        if self.mode not in (TRAINING, INFERENCE):
            raise ValueError(f"unknown batch-norm mode {self.mode!r}")
        if self.running_mean is None:
            self.running_mean = np.zeros(self.channel_count)
        if self.running_var is None:
            self.running_var = np.ones(self.channel_count)


def batch_norm(
    x: Tensor,
    state: BatchNormState,
    gamma: Tensor,
    beta: Tensor,
    axes: Optional[Sequence[int]] = None,
    mode: Optional[str] = None,
) -> Tensor:
    """Normalize the trailing channel axis of ``x``.

    In training mode statistics are taken over ``axes`` (default: every axis
    except the last) with population variance, and the running statistics are
    moved towards the batch statistics by ``state.momentum``. Inference mode
    uses the running statistics only.
    """
    mode = mode or state.mode
    channels = x.shape[-1]
    if channels != state.channel_count:
        raise ValueError(f"expected {state.channel_count} channels, got {channels}")
    param_axes = tuple(range(x.ndim - 1))
    g_, b_ = gamma.data, beta.data

    if mode == INFERENCE:
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x.data - state.running_mean) * inv_std

        def backward(g):
            return g * g_ * inv_std, (g * xhat).sum(axis=param_axes), g.sum(axis=param_axes)

        return Tensor.node(g_ * xhat + b_, (x, gamma, beta), backward, "batch_norm")

    axes = param_axes if axes is None else tuple(a % x.ndim for a in axes)
    n = int(np.prod([x.shape[a] for a in axes]))
    if n < 2:
        raise ValueError("batch_norm in training mode needs at least 2 samples per statistic")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered * centered).mean(axis=axes, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)
    xhat = centered * inv_std

    # running stats are per channel regardless of the statistic grouping
    m = state.momentum
    batch_mu = mu.reshape(-1, channels).mean(axis=0)
    batch_var = var.reshape(-1, channels).mean(axis=0)
    state.running_mean = (1.0 - m) * state.running_mean + m * batch_mu
    state.running_var = (1.0 - m) * state.running_var + m * batch_var

    def backward(g):
        dxhat = g * g_
        dx = inv_std * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=param_axes), g.sum(axis=param_axes)

    return Tensor.node(g_ * xhat + b_, (x, gamma, beta), backward, "batch_norm")


@dataclass
class AdamState:
    learning_rate: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    first_moment: Dict[str, np.ndarray] = field(default_factory=dict)
    second_moment: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Optional[np.ndarray]], state: AdamState) -> None:
    """Apply one bias-corrected Adam update to ``params`` in place.

    A missing or ``None`` gradient is treated as zero.
    """
    for name, p in params.items():
        g = grads.get(name)
        if g is not None and np.shape(g) != p.shape:
            raise ValueError(f"gradient shape {np.shape(g)} does not match parameter {name!r} {p.shape}")
    state.step += 1
    t = state.step
    b1, b2 = state.beta1, state.beta2
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        m = state.first_moment.get(name)
        v = state.second_moment.get(name)
        if m is None:
            m = np.zeros_like(p.data)
            v = np.zeros_like(p.data)
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * g * g
        state.first_moment[name] = m
        state.second_moment[name] = v
        m_hat = m / (1.0 - b1 ** t)
        v_hat = v / (1.0 - b2 ** t)
        p.data -= state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def piecewise_lr(base: float, epoch: int, decay_epochs: Sequence[int], factor: float = 0.1) -> float:
    """Learning rate for a zero-based ``epoch`` under step decay."""
    return base * factor ** sum(1 for e in decay_epochs if epoch >= e)
