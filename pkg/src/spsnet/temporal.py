"""Temporal aggregation: self-attention over frame features, next-step feature
forecasting, two-way fusion, and a gated recurrent baseline.

Feature tensors are (..., N, d). Forecast outputs keep the input layout: row
``i`` holds the prediction made from frame ``i`` for frame ``i + 1``.
"""

from __future__ import annotations

from . import autograd as ag
from .autograd import Tensor
from .nn import Dense, two_layer
from .optim import ParameterStore


class AttentionModule:
    """Separate query and key networks, each two leaky-ReLU dense layers d -> d."""

    def __init__(self, store: ParameterStore, name: str, d: int, seed: int, hidden: int | None = None):
        hidden = hidden or d
        self.Q = two_layer(store, f"{name}.Q", d, hidden, d, seed)
        self.K = two_layer(store, f"{name}.K", d, hidden, d, seed)
        self.d = d


def attention_weights(att: AttentionModule, features) -> Tensor:
    """Row-stochastic (..., N, N): softmax over l of the raw inner products q_i . k_l."""
    f = ag._lift(features)
    q = att.Q(f)
    k = att.K(f)
    return ag.softmax(ag.matmul(q, k.swapaxes(-1, -2)), axis=-1)


def self_attention(att: AttentionModule, features, return_weights: bool = False):
    """h_i = f_i + sum_l a_i^l f_l."""
    f = ag._lift(features)
    a = attention_weights(att, f)
    h = f + ag.matmul(a, f)
    return (h, a) if return_weights else h


class ForecastModule:
    def __init__(self, store: ParameterStore, name: str, d: int, seed: int, hidden: int | None = None):
        self.net = two_layer(store, name, d, hidden or d, d, seed)


def forecast(fm: ForecastModule, features) -> Tensor:
    return fm.net(ag._lift(features))


def feature_loss(features, predicted) -> Tensor:
    """Sum over i = 1..N-1 of ||f_{i+1} - f'_{i+1}||; the last prediction is unused.

    Reduces the frame axis only, so batched inputs give one value per sequence.
    """
    f, fp = ag._lift(features), ag._lift(predicted)
    if f.shape[-2] < 2:
        return ag.zeros(f.shape[:-2])
    resid = f[..., 1:, :] - fp[..., :-1, :]
    return ag.norm(resid, axis=-1).sum(-1)


class FusionModule:
    def __init__(self, store: ParameterStore, name: str, d: int, seed: int):
        self.head = Dense(store, f"{name}.head", d, 1, seed)


def fuse(fu: FusionModule, h, predicted, return_weights: bool = False):
    """F_1 = h_1; F_i = a_h h_i + a_f f'_i with (a_h, a_f) a softmax of the shared head."""
    h, fp = ag._lift(h), ag._lift(predicted)
    if h.shape[-2] == 1:
        return (h, None) if return_weights else h
    hr = h[..., 1:, :]
    fr = fp[..., :-1, :]
    logits = ag.concat([fu.head(hr), fu.head(fr)], axis=-1)      # (..., N-1, 2)
    w = ag.softmax(logits, axis=-1)
    fused = w[..., 0:1] * hr + w[..., 1:2] * fr
    out = ag.concat([h[..., :1, :], fused], axis=-2)
    return (out, w) if return_weights else out


class GRULayer:
    def __init__(self, store: ParameterStore, name: str, d_in: int, d_hidden: int, seed: int):
        self.x_gates = Dense(store, f"{name}.x", d_in, 3 * d_hidden, seed)
        self.h_gates = Dense(store, f"{name}.h", d_hidden, 3 * d_hidden, seed)
        self.d_hidden = d_hidden

    def __call__(self, x: Tensor) -> Tensor:
        """x: (B, N, d_in) -> hidden states (B, N, d_hidden)."""
        H = self.d_hidden
        xg = self.x_gates(x)
        state = ag.zeros(x.shape[:-2] + (H,))
        outs = []
        for i in range(x.shape[-2]):
            xi = xg[..., i, :]
            hg = self.h_gates(state)
            z = ag.sigmoid(xi[..., :H] + hg[..., :H])
            r = ag.sigmoid(xi[..., H:2 * H] + hg[..., H:2 * H])
            n = ag.tanh(xi[..., 2 * H:] + r * hg[..., 2 * H:])
            state = (1.0 - z) * n + z * state
            outs.append(state)
        return ag.stack(outs, axis=-2)


class RecurrentAggregator:
    """Two stacked GRU layers with a residual connection; stands in for attention."""

    def __init__(self, store: ParameterStore, name: str, d: int, seed: int):
        self.layers = [GRULayer(store, f"{name}.gru{i}", d, d, seed) for i in range(2)]

    def __call__(self, features) -> Tensor:
        f = ag._lift(features)
        x = f
        for layer in self.layers:
            x = layer(x)
        return f + x

