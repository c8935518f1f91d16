"""Motion discriminator: self-attention over [beta, theta_i], mean pooling,
sigmoid classifier, least-squares objectives."""

from __future__ import annotations

from . import autograd as ag
from .autograd import Tensor
from .nn import Dense
from .optim import ParameterStore
from .temporal import AttentionModule, self_attention


class DiscriminatorNet:
    def __init__(self, store: ParameterStore, pose_dim: int, seed: int, n_shape: int = 10):
        width = pose_dim + n_shape
        self.attention = AttentionModule(store, "disc.att", width, seed)
        self.classifier = Dense(store, "disc.cls", width, 1, seed, activation="sigmoid")
        self.width = width


def motion_representation(pose, shape) -> Tensor:
    """J_i = [beta, theta_i]: (..., N, 10 + 3J) from poses (..., N, 3J) and shape (..., 10)."""
    pose, shape = ag._lift(pose), ag._lift(shape)
    beta = ag.broadcast_to(shape.reshape(shape.shape[:-1] + (1, shape.shape[-1])),
                           pose.shape[:-1] + (shape.shape[-1],))
    return ag.concat([beta, pose], axis=-1)


def discriminate(net: DiscriminatorNet, pose, shape) -> Tensor:
    """Realism score in (0, 1) for each sequence in the batch."""
    joint = motion_representation(pose, shape)
    H = self_attention(net.attention, joint)
    M = H.mean(axis=-2)
    return net.classifier(M)[..., 0]


def adversarial_losses(net: DiscriminatorNet, real_pose, real_shape, fake_pose, fake_shape):
    """(d_loss, g_loss), each averaged over the batch.

    d_loss = (D(real) - 1)^2 + D(fake)^2 with the fake branch detached;
    g_loss = (D(fake) - 1)^2 and carries gradients into the estimator.
    """
    fake_pose, fake_shape = ag._lift(fake_pose), ag._lift(fake_shape)
    d_real = discriminate(net, real_pose, real_shape)
    d_fake_det = discriminate(net, fake_pose.detach(), fake_shape.detach())
    d_loss = ((d_real - 1.0) ** 2 + d_fake_det ** 2).mean()
    d_fake = discriminate(net, fake_pose, fake_shape)
    g_loss = ((d_fake - 1.0) ** 2).mean()
    return d_loss, g_loss
