"""Small dense building blocks whose weights live in a ParameterStore."""

from __future__ import annotations

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .optim import ParameterStore, seeded_rng

LEAKY_SLOPE = 0.01


class Dense:
    """y = act(x W^T + b); Glorot-style normal init unless ``zero_init``."""

    def __init__(self, store: ParameterStore, name: str, d_in: int, d_out: int,
                 seed: int, activation: str = "none", zero_init: bool = False,
                 gain: float = 1.0):
        rng = seeded_rng(seed, name)
        if zero_init:
            w = np.zeros((d_out, d_in))
        else:
            w = rng.normal(scale=gain * np.sqrt(2.0 / (d_in + d_out)), size=(d_out, d_in))
        self.W = store.add(f"{name}.W", w)
        self.b = store.add(f"{name}.b", np.zeros(d_out))
        self.activation = activation
        self.d_in, self.d_out = d_in, d_out

    def __call__(self, x) -> Tensor:
        return ag.dense_layer(x, self.W, self.b, self.activation, LEAKY_SLOPE)


class MLP:
    def __init__(self, layers: list[Dense]):
        self.layers = layers

    def __call__(self, x) -> Tensor:
        for layer in self.layers:
            x = layer(x)
        return x


def two_layer(store: ParameterStore, name: str, d_in: int, d_hidden: int, d_out: int,
              seed: int) -> MLP:
    """Two fully connected layers, each followed by a leaky ReLU."""
    return MLP([Dense(store, f"{name}.fc1", d_in, d_hidden, seed, "leaky_relu"),
                Dense(store, f"{name}.fc2", d_hidden, d_out, seed, "leaky_relu")])
