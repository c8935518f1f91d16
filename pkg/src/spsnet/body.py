"""SMPL-lite articulated body: procedural mesh, forward kinematics with linear
blend skinning, weak-perspective projection and soft silhouettes."""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import NamedTuple

import numba
import numpy as np

from . import autograd as ag
from .autograd import Tensor

N_SHAPE = 10
SILHOUETTE_SIGMA = 1.5
SILHOUETTE_EPS = 1e-6
# splat windows are cut where the Gaussian drops below this
SPLAT_TOLERANCE = 1e-6
_SERIES_T = 1e-4


@dataclass(frozen=True)
class BodyModel:
    template_vertices: np.ndarray   # (V, 3)
    shape_basis: np.ndarray         # (10, V, 3)
    parents: np.ndarray             # (J,), root has -1
    rest_joints: np.ndarray         # (J, 3)
    joint_regressor: np.ndarray     # (k, V)
    skinning_weights: np.ndarray    # (V, J)
    faces: np.ndarray               # (F, 3) for mesh dumps only

    @property
    def n_joints(self) -> int:
        return len(self.parents)

    @property
    def n_vertices(self) -> int:
        return len(self.template_vertices)

    @property
    def n_keypoints(self) -> int:
        return len(self.joint_regressor)

    @property
    def pose_dim(self) -> int:
        return 3 * self.n_joints

    def validate(self) -> None:
        J, V = self.n_joints, self.n_vertices
        if self.shape_basis.shape != (N_SHAPE, V, 3):
            raise ValueError(f"shape basis has shape {self.shape_basis.shape}")
        if self.skinning_weights.shape != (V, J) or self.rest_joints.shape != (J, 3):
            raise ValueError("skinning weights / rest joints disagree with J, V")
        if self.joint_regressor.shape[1] != V or self.n_keypoints != J:
            raise ValueError("joint regressor must be J x V (rows double as skeleton joints)")
        if np.any(self.joint_regressor < 0):
            raise ValueError("joint regressor must be nonnegative")
        if not np.allclose(self.joint_regressor.sum(1), 1.0, atol=1e-12):
            raise ValueError("joint regressor rows must sum to 1")
        if not np.allclose(self.skinning_weights.sum(1), 1.0, atol=1e-12):
            raise ValueError("skinning weight rows must sum to 1")
        roots = np.flatnonzero(self.parents < 0)
        if len(roots) != 1 or roots[0] != 0:
            raise ValueError("kinematic tree needs exactly one root at index 0")
        if np.any(self.parents[1:] >= np.arange(1, J)):
            raise ValueError("parents must precede children (acyclic ordering)")


class Camera(NamedTuple):
    """Weak-perspective camera; leading dims broadcast against the points."""
    scale: Tensor   # (...,)
    rot: Tensor     # (..., 3) axis-angle
    trans: Tensor   # (..., 2)

    @staticmethod
    def from_raw(raw: Tensor) -> "Camera":
        """Regressor output (..., 6) = [log s, axis-angle, t]."""
        return Camera(ag.exp(raw[..., 0]), raw[..., 1:4], raw[..., 4:6])

    @staticmethod
    def from_arrays(scale, rot, trans) -> "Camera":
        return Camera(Tensor(scale), Tensor(rot), Tensor(trans))


# ---------------------------------------------------------------------------
# rotations
# ---------------------------------------------------------------------------

def _rodrigues_coeffs(t: Tensor):
    """A = sin(s)/s and B = (1 - cos s)/s^2 as functions of t = s^2."""
    td = t.data
    small = td < _SERIES_T
    tt = np.where(small, 1.0, td)
    s = np.sqrt(tt)
    a = np.where(small, 1 - td / 6 + td * td / 120, np.sin(s) / s)
    b = np.where(small, 0.5 - td / 24 + td * td / 720, (1 - np.cos(s)) / tt)
    da = np.where(small, -1 / 6 + td / 60, (np.cos(s) - a) / (2 * tt))
    db = np.where(small, -1 / 24 + td / 360, (a - 2 * b) / (2 * tt))
    A = ag.make_op(a, (t,), lambda g: (g * da,))
    B = ag.make_op(b, (t,), lambda g: (g * db,))
    return A, B


# maps an axis-angle v to the flattened cross-product matrix [v]_x
_SKEW = np.zeros((3, 9))
_SKEW[2, 1], _SKEW[1, 2] = -1, 1
_SKEW[2, 3], _SKEW[0, 5] = 1, -1
_SKEW[1, 6], _SKEW[0, 7] = -1, 1


def rodrigues(axis_angle) -> Tensor:
    """Axis-angle (..., 3) to rotation matrices (..., 3, 3)."""
    v = ag._lift(axis_angle)
    lead = v.shape[:-1]
    K = ag.matmul(v, Tensor(_SKEW)).reshape(lead + (3, 3))
    A, B = _rodrigues_coeffs((v * v).sum(-1))
    A = A.reshape(lead + (1, 1))
    B = B.reshape(lead + (1, 1))
    return Tensor(np.eye(3)) + A * K + B * ag.matmul(K, K)


def rodrigues_np(axis_angle) -> np.ndarray:
    return rodrigues(np.asarray(axis_angle, dtype=float)).data


# ---------------------------------------------------------------------------
# forward kinematics + skinning
# ---------------------------------------------------------------------------

def body_forward(model: BodyModel, pose, shape):
    """Posed mesh and regressed joints.

    ``pose`` is (..., J, 3) or (..., 3J); ``shape`` is (..., 10). Leading dims
    must agree. Returns ``(vertices (..., V, 3), joints (..., k, 3))``.
    """
    pose, shape = ag._lift(pose), ag._lift(shape)
    J, V = model.n_joints, model.n_vertices
    if shape.shape[-1] != N_SHAPE:
        raise ag.ShapeError(f"shape parameters must end in {N_SHAPE}, got {shape.shape}")
    if pose.shape[-1] == 3 * J and (pose.ndim < 2 or pose.shape[-2:] != (J, 3)):
        lead = pose.shape[:-1]
    elif pose.shape[-2:] == (J, 3):
        lead = pose.shape[:-2]
    else:
        raise ag.ShapeError(f"pose must be (..., {J}, 3) or (..., {3 * J}), got {pose.shape}")
    if shape.shape[:-1] != lead:
        raise ag.ShapeError(f"pose batch {lead} and shape batch {shape.shape[:-1]} differ")
    M = int(np.prod(lead)) if lead else 1

    theta = pose.reshape(M, J, 3)
    beta = shape.reshape(M, N_SHAPE)
    basis = Tensor(model.shape_basis.reshape(N_SHAPE, V * 3))
    shaped = ag.matmul(beta, basis).reshape(M, V, 3) + Tensor(model.template_vertices)
    Wr = Tensor(model.joint_regressor)
    skel = ag.matmul(Wr, shaped)                        # (M, J, 3)

    R = rodrigues(theta)                                 # (M, J, 3, 3)
    rots, trans = [], []
    for j in range(J):
        p = int(model.parents[j])
        Rj = R[:, j]
        if p < 0:
            rots.append(Rj)
            trans.append(skel[:, j])
        else:
            offset = (skel[:, j] - skel[:, p]).reshape(M, 3, 1)
            rots.append(ag.matmul(rots[p], Rj))
            trans.append(trans[p] + ag.matmul(rots[p], offset).reshape(M, 3))
    G_R = ag.stack(rots, axis=1)                         # (M, J, 3, 3)
    G_t = ag.stack(trans, axis=1)                        # (M, J, 3)
    # transforms relative to the rest pose
    rel_t = G_t - ag.matmul(G_R, skel.reshape(M, J, 3, 1)).reshape(M, J, 3)
    packed = ag.concat([G_R.reshape(M, J, 9), rel_t], axis=-1)     # (M, J, 12)
    blended = ag.matmul(Tensor(model.skinning_weights), packed)     # (M, V, 12)
    Rv = blended[..., :9].reshape(M, V, 3, 3)
    verts = (Rv * shaped.reshape(M, V, 1, 3)).sum(-1) + blended[..., 9:]
    joints = ag.matmul(Wr, verts)

    k = model.n_keypoints
    return verts.reshape(lead + (V, 3)), joints.reshape(lead + (k, 3))


def body_forward_np(model: BodyModel, pose, shape):
    v, j = body_forward(model, np.asarray(pose, float), np.asarray(shape, float))
    return v.data, j.data


# ---------------------------------------------------------------------------
# camera
# ---------------------------------------------------------------------------

def project(points, cam: Camera) -> Tensor:
    """x = s * Pi(R X) + t for points (..., P, 3); camera leading dims = (...)."""
    X = ag._lift(points)
    Rc = rodrigues(cam.rot)                              # (..., 3, 3)
    Y = ag.matmul(X, Rc.swapaxes(-1, -2))                # (..., P, 3)
    s = cam.scale.reshape(cam.scale.shape + (1, 1))
    t = cam.trans.reshape(cam.trans.shape[:-1] + (1, 2))
    return s * Y[..., :2] + t


def to_pixels(xy: Tensor, H: int, W: int) -> Tensor:
    """Normalized image coords in [-1, 1] (y up) to (col, row) pixel coords."""
    scale = np.array([W / 2.0, -H / 2.0])
    offset = np.array([W / 2.0 - 0.5, H / 2.0 - 0.5])
    return xy * Tensor(scale) + Tensor(offset)


def pixels_to_normalized(px: np.ndarray, H: int, W: int) -> np.ndarray:
    px = np.asarray(px, dtype=float)
    return np.stack([(px[..., 0] + 0.5) * 2.0 / W - 1.0,
                     1.0 - (px[..., 1] + 0.5) * 2.0 / H], axis=-1)


def splat_radius(sigma: float, tol: float = SPLAT_TOLERANCE) -> int:
    return int(math.ceil(math.sqrt(2.0 * math.log(1.0 / tol)) * sigma))


@numba.njit(cache=True)
def _splat_forward(P, H, W, sigma, r):
    """prod_v (1 - g_v) per pixel, accumulated multiplicatively."""
    M, V = P.shape[0], P.shape[1]
    keep = np.ones((M, H, W))
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    K = 2 * r + 2
    gx = np.empty(K)
    gy = np.empty(K)
    for m in range(M):
        for v in range(V):
            px, py = P[m, v, 0], P[m, v, 1]
            c0, r0 = int(np.floor(px)) - r, int(np.floor(py)) - r
            for i in range(K):
                d = c0 + i - px
                gx[i] = np.exp(-d * d * inv2s2)
                d = r0 + i - py
                gy[i] = np.exp(-d * d * inv2s2)
            for i in range(max(-r0, 0), min(K, H - r0)):
                row = r0 + i
                for jj in range(max(-c0, 0), min(K, W - c0)):
                    g = min(gy[i] * gx[jj], 1.0 - 1e-12)
                    keep[m, row, c0 + jj] *= 1.0 - g
    return keep


@numba.njit(cache=True)
def _splat_backward(P, gL, sigma, r):
    M, V = P.shape[0], P.shape[1]
    H, W = gL.shape[1], gL.shape[2]
    out = np.zeros_like(P)
    inv2s2 = 1.0 / (2.0 * sigma * sigma)
    inv_s2 = 1.0 / (sigma * sigma)
    K = 2 * r + 2
    gx = np.empty(K)
    gy = np.empty(K)
    for m in range(M):
        for v in range(V):
            px, py = P[m, v, 0], P[m, v, 1]
            c0, r0 = int(np.floor(px)) - r, int(np.floor(py)) - r
            for i in range(K):
                d = c0 + i - px
                gx[i] = np.exp(-d * d * inv2s2)
                d = r0 + i - py
                gy[i] = np.exp(-d * d * inv2s2)
            ax = 0.0
            ay = 0.0
            for i in range(max(-r0, 0), min(K, H - r0)):
                row = r0 + i
                dy = row - py
                for jj in range(max(-c0, 0), min(K, W - c0)):
                    g = gy[i] * gx[jj]
                    if g >= 1.0 - 1e-12:
                        continue
                    c = -gL[m, row, c0 + jj] * g * inv_s2 / (1.0 - g)
                    ax += c * (c0 + jj - px)
                    ay += c * dy
            out[m, v, 0] = ax
            out[m, v, 1] = ay
    return out


def gaussian_splat(points_px: Tensor, H: int, W: int, sigma: float = SILHOUETTE_SIGMA) -> Tensor:
    """1 - prod_v (1 - g_v(p)) for isotropic Gaussians centred at ``points_px``.

    ``points_px`` is (M, V, 2) in (col, row) pixel units; returns (M, H, W).
    Each Gaussian is evaluated on a square window outside of which it is below
    ``SPLAT_TOLERANCE``.
    """
    P = np.ascontiguousarray(points_px.data)
    r = splat_radius(sigma)
    keep = _splat_forward(P, H, W, float(sigma), r)

    def bw(gout):
        return (_splat_backward(P, np.ascontiguousarray(-gout * keep), float(sigma), r),)
    return ag.make_op(1.0 - keep, (points_px,), bw)


def soft_silhouette(mesh, cam: Camera, H: int, W: int,
                    sigma: float = SILHOUETTE_SIGMA, eps: float = SILHOUETTE_EPS) -> Tensor:
    """Differentiable silhouettes (..., H, W) in [eps, 1 - eps]."""
    if H < 8 or W < 8:
        raise ValueError(f"silhouette grid must be at least 8x8, got {H}x{W}")
    mesh = ag._lift(mesh)
    lead = mesh.shape[:-2]
    V = mesh.shape[-2]
    px = to_pixels(project(mesh, cam), H, W)
    M = int(np.prod(lead)) if lead else 1
    sil = gaussian_splat(px.reshape(M, V, 2), H, W, sigma)
    return ag.clip(sil, eps, 1.0 - eps).reshape(lead + (H, W))


# ---------------------------------------------------------------------------
# procedural body
# ---------------------------------------------------------------------------

JOINT_NAMES = ("pelvis", "spine", "neck", "head",
               "l_shoulder", "l_elbow", "r_shoulder", "r_elbow",
               "l_hip", "l_knee", "r_hip", "r_knee")
_PARENTS = (-1, 0, 1, 2, 1, 4, 1, 6, 0, 8, 0, 10)
_REST = np.array([
    [0.0, 0.0, 0.0], [0.0, 0.25, 0.0], [0.0, 0.50, 0.0], [0.0, 0.60, 0.0],
    [0.18, 0.47, 0.0], [0.45, 0.47, 0.0], [-0.18, 0.47, 0.0], [-0.45, 0.47, 0.0],
    [0.10, -0.05, 0.0], [0.10, -0.45, 0.0], [-0.10, -0.05, 0.0], [-0.10, -0.45, 0.0],
])
# (joint, end point or None for child joint index, radius)
_BONES = (
    (0, 1, 0.12), (1, 2, 0.13), (2, 3, 0.05), (3, (0.0, 0.82, 0.0), 0.09),
    (4, 5, 0.05), (5, (0.70, 0.47, 0.0), 0.04),
    (6, 7, 0.05), (7, (-0.70, 0.47, 0.0), 0.04),
    (8, 9, 0.07), (9, (0.10, -0.85, 0.0), 0.05),
    (10, 11, 0.07), (11, (-0.10, -0.85, 0.0), 0.05),
)


def _frame(d: np.ndarray):
    d = d / np.linalg.norm(d)
    ref = np.array([0.0, 0.0, 1.0]) if abs(d[2]) < 0.9 else np.array([1.0, 0.0, 0.0])
    a = np.cross(d, ref)
    a /= np.linalg.norm(a)
    return a, np.cross(d, a)


def _ring(center, d, radius, count, phase):
    a, b = _frame(d)
    ang = phase + 2 * np.pi * np.arange(count) / count
    return center + radius * (np.cos(ang)[:, None] * a + np.sin(ang)[:, None] * b)


def _smoothstep(x):
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _strip_faces(r0: list, r1: list) -> list:
    """Triangulate the band between two closed vertex rings by angular merge."""
    faces = []
    n0, n1 = len(r0), len(r1)
    i = j = 0
    while i < n0 or j < n1:
        if j >= n1 or (i < n0 and (i + 1) / n0 <= (j + 1) / n1):
            faces.append((r0[i % n0], r0[(i + 1) % n0], r1[j % n1]))
            i += 1
        else:
            faces.append((r0[i % n0], r1[(j + 1) % n1], r1[j % n1]))
            j += 1
    return faces


def make_default_body(seed: int = 0, n_vertices: int = 200, ring_size: int = 6) -> BodyModel:
    """Deterministic 12-joint procedural body with ellipsoid shells around bones.

    Every joint gets a symmetric ring of ``ring_size`` vertices centred on it;
    the regressor averages that ring, so zero-pose joints equal the rest joints.
    The remaining vertices are spread over bone shells in proportion to length.
    """
    J = len(_PARENTS)
    parents = np.array(_PARENTS, dtype=np.int64)
    rest = _REST.copy()
    budget = n_vertices - J * ring_size
    if budget < len(_BONES):
        raise ValueError(f"need at least {J * ring_size + len(_BONES)} vertices")

    ends, lengths = [], []
    for j, end, _ in _BONES:
        e = rest[end] if isinstance(end, int) else np.array(end)
        ends.append(e)
        lengths.append(np.linalg.norm(e - rest[j]))
    lengths = np.array(lengths)
    share = np.floor(budget * lengths / lengths.sum()).astype(int)
    share = np.maximum(share, 1)
    while share.sum() < budget:
        share[np.argmax(budget * lengths / lengths.sum() - share)] += 1
    while share.sum() > budget:
        share[np.argmax(share)] -= 1

    verts, weights, faces = [], [], []
    ring_of_joint: dict[int, list] = {}

    def add_vertex(pos, w):
        verts.append(pos)
        weights.append(w)
        return len(verts) - 1

    def joint_weights(j, t):
        w = np.zeros(J)
        p = parents[j]
        if p < 0:
            w[j] = 1.0
        else:
            wj = 0.5 + 0.5 * _smoothstep(t / 0.35)
            w[j], w[p] = wj, 1.0 - wj
        return w

    # joint rings, oriented across each joint's first bone
    first_bone = {}
    for b, (j, _, radius) in enumerate(_BONES):
        first_bone.setdefault(j, b)
    for j in range(J):
        b = first_bone[j]
        d = ends[b] - rest[j]
        radius = _BONES[b][2]
        ring = _ring(rest[j], d, radius, ring_size, 0.0)
        ring_of_joint[j] = [add_vertex(v, joint_weights(j, 0.0)) for v in ring]

    for b, (j, end, radius) in enumerate(_BONES):
        d = ends[b] - rest[j]
        count = int(share[b])
        n_rings = max(1, int(round(count / ring_size)))
        sizes = [count // n_rings + (1 if r < count % n_rings else 0) for r in range(n_rings)]
        prev = ring_of_joint[j]
        for r, size in enumerate(sizes):
            t = (r + 1) / (n_rings + 1)
            rad = radius * (0.6 + 0.4 * np.sin(np.pi * t))
            if size < 3:
                ids = [add_vertex(rest[j] + t * d, joint_weights(j, t)) for _ in range(size)]
                continue
            ring = _ring(rest[j] + t * d, d, rad, size, np.pi * (r + 1) / size)
            ids = [add_vertex(v, joint_weights(j, t)) for v in ring]
            faces += _strip_faces(prev, ids)
            prev = ids
        if isinstance(end, int):
            faces += _strip_faces(prev, ring_of_joint[end])

    template = np.array(verts)
    skin = np.array(weights)
    V = len(template)

    regressor = np.zeros((J, V))
    for j, ids in ring_of_joint.items():
        regressor[j, ids] = 1.0 / len(ids)

    rng = np.random.default_rng(seed)
    basis = np.zeros((N_SHAPE, V, 3))
    center = template.mean(0)
    for i in range(N_SHAPE):
        A = rng.normal(size=(3, 3))
        freq = rng.normal(scale=3.0, size=(3, 3))
        phase = rng.uniform(0, 2 * np.pi, size=3)
        amp = rng.normal(size=3)
        x = template - center
        field = x @ A.T + amp * np.sin(x @ freq.T + phase)
        basis[i] = field * (0.02 / np.linalg.norm(field, axis=1).max())

    model = BodyModel(template_vertices=template, shape_basis=basis, parents=parents,
                      rest_joints=regressor @ template, joint_regressor=regressor,
                      skinning_weights=skin, faces=np.array(faces, dtype=np.int64))
    model.validate()
    return model


# ---------------------------------------------------------------------------
# files
# ---------------------------------------------------------------------------

_BODY_MAGIC = "SPSBODY"


def save_body(model: BodyModel, path: str | Path) -> None:
    header = (f"{_BODY_MAGIC} 1 J={model.n_joints} V={model.n_vertices} "
              f"k={model.n_keypoints} S={N_SHAPE} F={len(model.faces)}\n")
    parts = [header.encode()]
    for arr in (model.template_vertices, model.shape_basis, model.rest_joints,
                model.joint_regressor, model.skinning_weights):
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    for arr in (model.parents, model.faces):
        parts.append(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_body(path: str | Path) -> BodyModel:
    raw = Path(path).read_bytes()
    nl = raw.index(b"\n")
    fields = raw[:nl].decode().split()
    if fields[0] != _BODY_MAGIC or fields[1] != "1":
        raise ValueError("not a body model file")
    dims = dict(f.split("=") for f in fields[2:])
    J, V, k, S, F = (int(dims[x]) for x in ("J", "V", "k", "S", "F"))
    pos = nl + 1

    def take(shape, dtype):
        nonlocal pos
        n = int(np.prod(shape))
        arr = np.frombuffer(raw, dtype=dtype, count=n, offset=pos).reshape(shape).copy()
        pos += 8 * n
        return arr

    template = take((V, 3), "<f8")
    basis = take((S, V, 3), "<f8")
    rest = take((J, 3), "<f8")
    regressor = take((k, V), "<f8")
    skin = take((V, J), "<f8")
    parents = take((J,), "<i8").astype(np.int64)
    faces = take((F, 3), "<i8").astype(np.int64)
    return BodyModel(template.astype(float), basis.astype(float), parents, rest.astype(float),
                     regressor.astype(float), skin.astype(float), faces)


def write_obj(path: str | Path, vertices: np.ndarray, faces: np.ndarray) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")
