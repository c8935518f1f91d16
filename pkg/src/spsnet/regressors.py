"""Iterative error feedback regressors for pose, shape and camera."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .body import Camera
from .nn import MLP, Dense
from .optim import ParameterStore

DEFAULT_ITERS = 3
CAMERA_DIM = 6


class RegressorHead:
    """Two leaky-ReLU hidden layers and a zero-initialised linear output.

    Input is the feature concatenated with the current estimate, so the head
    predicts a correction. ``mean_param`` is the fixed starting estimate.
    """

    def __init__(self, store: ParameterStore, name: str, d_feat: int, out_dim: int,
                 hidden: int, seed: int, mean_param: np.ndarray | None = None):
        d_in = d_feat + out_dim
        self.net = MLP([
            Dense(store, f"{name}.fc1", d_in, hidden, seed, "leaky_relu"),
            Dense(store, f"{name}.fc2", hidden, hidden, seed, "leaky_relu"),
            Dense(store, f"{name}.out", hidden, out_dim, seed, zero_init=True),
        ])
        self.out_dim = out_dim
        self.mean_param = np.zeros(out_dim) if mean_param is None else np.asarray(mean_param, float)


def regress_iterative(head: RegressorHead, feature, iters: int = DEFAULT_ITERS) -> Tensor:
    """p_0 = mean_param; p_{t+1} = p_t + head([feature; p_t])."""
    if iters < 1:
        raise ValueError("iters must be >= 1")
    f = ag._lift(feature)
    p = ag.broadcast_to(Tensor(head.mean_param), f.shape[:-1] + (head.out_dim,))
    for _ in range(iters):
        p = p + head.net(ag.concat([f, p], axis=-1))
    return p


@dataclass
class Heads:
    pose: RegressorHead
    shape: RegressorHead
    camera: RegressorHead

    @classmethod
    def build(cls, store: ParameterStore, d: int, pose_dim: int, hidden: int, seed: int,
              n_shape: int = 10) -> "Heads":
        return cls(RegressorHead(store, "reg_pose", d, pose_dim, hidden, seed),
                   RegressorHead(store, "reg_shape", d, n_shape, hidden, seed),
                   RegressorHead(store, "reg_camera", d, CAMERA_DIM, hidden, seed))


@dataclass
class Estimate:
    pose: Tensor        # (..., N, 3J)
    shape: Tensor       # (..., 10)
    camera_raw: Tensor  # (..., N, 6): [log s, axis-angle, t]

    @property
    def camera(self) -> Camera:
        return Camera.from_raw(self.camera_raw)


def regress_sequence(heads: Heads, fused, iters: int = DEFAULT_ITERS) -> Estimate:
    """Per-frame pose and camera; one shape per sequence from mean-pooled features."""
    F = ag._lift(fused)
    pose = regress_iterative(heads.pose, F, iters)
    cam = regress_iterative(heads.camera, F, iters)
    shape = regress_iterative(heads.shape, F.mean(axis=-2), iters)
    return Estimate(pose, shape, cam)
