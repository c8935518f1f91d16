"""Supervised and self-supervised loss terms plus the weighted total.

Every term sums over the frame axis and keeps any leading batch axes, so a
(B, N, ...) input yields a (B,) tensor; the trainer averages over the batch.
Norms are plain (unsquared) Euclidean norms.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .regressors import Estimate, RegressorHead, regress_iterative


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


@dataclass(frozen=True)
class LossWeights:
    shape: float = 0.06
    pose: float = 60.0
    joint3d: float = 300.0
    joint2d: float = 300.0
    adv: float = 2.0
    feature: float = 1.0
    mask: float = 300.0
    camera: float = 0.1
    param_shape: float = 0.06
    param_pose: float = 60.0
    param_camera: float = 0.1

    def as_dict(self) -> dict[str, float]:
        return asdict(self)


def _frame_norms(diff: Tensor, frame_dims: int) -> Tensor:
    """Norm over the trailing ``frame_dims`` axes, then sum over the frame axis."""
    lead = diff.shape[:diff.ndim - frame_dims]
    flat = diff.reshape(lead + (-1,)) if frame_dims > 1 else diff
    return ag.norm(flat, axis=-1).sum(-1)


def smpl_terms(gt_pose, gt_shape, est_pose, est_shape) -> tuple[Tensor, Tensor]:
    """(||beta - beta_hat||, sum_i ||theta_i - theta_hat_i||)."""
    shape_term = ag.norm(ag._lift(gt_shape) - est_shape, axis=-1)
    pose_term = _frame_norms(ag._lift(gt_pose) - est_pose, 1)
    return shape_term, pose_term


def smpl_loss(gt_pose, gt_shape, est_pose, est_shape) -> Tensor:
    s, p = smpl_terms(gt_pose, gt_shape, est_pose, est_shape)
    return s + p


def joint_loss_3d(gt, pred) -> Tensor:
    """sum_i ||X_i - X_hat_i|| over the flattened (k, 3) block of each frame."""
    return _frame_norms(ag._lift(gt) - pred, 2)


def joint_loss_2d(gt, pred, visibility=None) -> Tensor:
    """Like the 3D term; joints with visibility 0 drop out of the residual."""
    diff = ag._lift(gt) - pred
    if visibility is not None:
        diff = diff * Tensor(np.asarray(visibility, dtype=float)[..., None])
    return _frame_norms(diff, 2)


def mask_loss(pseudo, proj) -> Tensor:
    """-sum over frames and pixels of m_pseudo * log(m_proj) (one-sided, as printed)."""
    proj = ag._lift(proj)
    if np.any(proj.data <= 0.0) or np.any(proj.data >= 1.0):
        raise FloatingPointError("projected mask values must lie strictly inside (0, 1)")
    m = Tensor(np.asarray(ag._lift(pseudo).data, dtype=float))
    return -(m * ag.log(proj)).sum(axis=(-3, -2, -1))


def camera_consistency(cam_a, cam_b) -> Tensor:
    """sum over aligned frames of ||c_a - c_b|| on raw 6-vector camera outputs."""
    cam_a, cam_b = ag._lift(cam_a), ag._lift(cam_b)
    if cam_a.shape[-2] == 0:
        return ag.zeros(cam_a.shape[:-2])
    return _frame_norms(cam_a - cam_b, 1)


def overlap_slices(n_frames: int, shift: int = 1) -> tuple[slice, slice]:
    """Positions of shared frames in S1 = [n, n+N) and S2 = [n+shift, n+shift+N)."""
    size = max(n_frames - shift, 0)
    return slice(shift, shift + size), slice(0, size)


def camera_consistency_loss(cam_head: RegressorHead, fused_s1, fused_s2, shift: int = 1,
                            iters: int = 3) -> Tensor:
    """Camera regressor outputs must agree on the frames the two segments share."""
    f1, f2 = ag._lift(fused_s1), ag._lift(fused_s2)
    a, b = overlap_slices(f1.shape[-2], shift)
    if a.stop <= a.start:
        return ag.zeros(f1.shape[:-2])
    c1 = regress_iterative(cam_head, f1[..., a, :], iters)
    c2 = regress_iterative(cam_head, f2[..., b, :], iters)
    return camera_consistency(c1, c2)


def occlusion_param_terms(original: Estimate, occluded: Estimate) -> dict[str, Tensor]:
    """Occluded-branch predictions regress onto the (constant) clean-branch ones."""
    return {
        "param_shape": ag.norm(original.shape.detach() - occluded.shape, axis=-1),
        "param_pose": _frame_norms(original.pose.detach() - occluded.pose, 1),
        "param_camera": _frame_norms(original.camera_raw.detach() - occluded.camera_raw, 1),
    }


def occlusion_param_loss(original: Estimate, occluded: Estimate) -> Tensor:
    t = occlusion_param_terms(original, occluded)
    return t["param_shape"] + t["param_pose"] + t["param_camera"]


def total_loss(terms: dict[str, Tensor], weights: LossWeights) -> tuple[Tensor, dict[str, float]]:
    """Weighted sum of scalar terms; also returns the unweighted values for logging."""
    w = weights.as_dict()
    values = {}
    total = ag.zeros(())
    for name, term in terms.items():
        if name not in w:
            raise KeyError(f"no weight for loss term {name!r}")
        value = float(term.data)
        if not math.isfinite(value):
            raise NonFiniteLossError(name, value)
        values[name] = value
        if w[name] != 0.0:
            total = total + term * w[name]
    return total, values
