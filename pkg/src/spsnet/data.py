"""Synthetic motion corpus with exact ground truth.

Sequences are procedural joint-angle trajectories rendered through the body
model and a slowly drifting weak-perspective camera. Observations per frame
are a binary silhouette and 2D keypoints with visibility flags.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .autograd import Tensor
from .body import (BodyModel, Camera, N_SHAPE, body_forward_np, project, soft_silhouette,
                   to_pixels)
from .nn import Dense, MLP
from .optim import ParameterStore

DEFAULT_RES = 64
REFERENCE_RES = 224
OCCLUSION_KEYPOINTS = (3, 5)
OCCLUSION_OFFSET_PX = (25.0, 50.0)


@dataclass
class MotionSequence:
    pose: np.ndarray          # (T, J, 3)
    shape: np.ndarray         # (10,)
    cam_scale: np.ndarray     # (T,)
    cam_rot: np.ndarray       # (T, 3)
    cam_trans: np.ndarray     # (T, 2)
    joints3d: np.ndarray      # (T, k, 3)
    joints2d: np.ndarray      # (T, k, 2)
    silhouettes: np.ndarray   # (T, H, W) uint8 in {0, 1}
    visibility: np.ndarray    # (T, k) uint8 in {0, 1}

    @property
    def length(self) -> int:
        return len(self.pose)

    def frames(self, start: int, stop: int) -> "MotionSequence":
        sl = slice(start, stop)
        return MotionSequence(self.pose[sl], self.shape, self.cam_scale[sl], self.cam_rot[sl],
                              self.cam_trans[sl], self.joints3d[sl], self.joints2d[sl],
                              self.silhouettes[sl], self.visibility[sl])


def render_observations(body: BodyModel, pose, shape, cam_scale, cam_rot, cam_trans,
                        H: int = DEFAULT_RES, W: int = DEFAULT_RES):
    """(joints3d, joints2d, binary silhouettes) for per-frame parameters."""
    pose = np.asarray(pose, dtype=float)
    T = len(pose)
    verts, joints = body_forward_np(body, pose, np.broadcast_to(shape, (T, N_SHAPE)))
    cam = Camera.from_arrays(cam_scale, cam_rot, cam_trans)
    x2d = project(joints, cam).data
    sil = soft_silhouette(verts, cam, H, W).data
    return joints, x2d, (sil > 0.5).astype(np.uint8)


def _moving_average(x: np.ndarray, width: int = 5) -> np.ndarray:
    pad = width // 2
    xp = np.pad(x, [(pad, pad)] + [(0, 0)] * (x.ndim - 1), mode="edge")
    c = np.cumsum(xp, axis=0)
    c = np.concatenate([np.zeros_like(c[:1]), c], axis=0)
    return (c[width:] - c[:-width]) / width


def _keyframe_track(rng: np.random.Generator, T: int, draw) -> np.ndarray:
    n_keys = int(rng.integers(2, 4))
    times = np.sort(np.concatenate([[0, T - 1], rng.choice(np.arange(1, T - 1), n_keys - 2,
                                                            replace=False)]))
    values = np.array([draw() for _ in range(n_keys)])
    t = np.arange(T)
    values = values.reshape(n_keys, -1)
    out = np.stack([np.interp(t, times, values[:, c]) for c in range(values.shape[1])], axis=1)
    return out


def natural_posture(n_joints: int) -> np.ndarray:
    """Mean joint angles (J, 3) around which sampled motion oscillates.

    For the default 12-joint skeleton the spine and neck lean forward, arms
    reach forward, hips flex forward and knees bend backward. One-sided
    flexion is what makes limb depth recoverable from an orthographic view;
    motion symmetric about the T-pose leaves each limb's depth sign ambiguous.
    Other skeletons get the zero posture.
    """
    mu = np.zeros((n_joints, 3))
    if n_joints != 12:
        return mu
    mu[1, 0] = mu[2, 0] = 0.2                  # spine, neck
    mu[4, 1], mu[6, 1] = -0.5, 0.5             # shoulders
    mu[5, 1], mu[7, 1] = -0.6, 0.6             # elbows
    mu[8, 0] = mu[10, 0] = -0.4                # hips
    mu[9, 0] = mu[11, 0] = 0.6                 # knees
    return mu


def generate_sequence(body: BodyModel, seed, T: int, H: int = DEFAULT_RES, W: int = DEFAULT_RES,
                      walk_step: float = 0.005, posture: np.ndarray | None = None) -> MotionSequence:
    """Posture offset plus sinusoids plus a smoothed random walk per joint
    angle; camera interpolated between random keyframes."""
    if T < 2:
        raise ValueError("sequences need at least 2 frames")
    rng = np.random.default_rng(seed)
    J = body.n_joints
    t = np.arange(T, dtype=float)[:, None]
    pose = np.zeros((T, J * 3))
    for c in range(J * 3):
        n_sin = int(rng.integers(2, 5))
        amp = rng.uniform(0.0, 0.6, n_sin) / n_sin
        period = rng.uniform(20.0, 120.0, n_sin)
        phase = rng.uniform(0.0, 2 * np.pi, n_sin)
        pose[:, c] = (amp * np.sin(2 * np.pi * t / period + phase)).sum(1)
    walk = np.cumsum(rng.normal(scale=walk_step, size=(T, J * 3)), axis=0)
    pose += _moving_average(walk, 5)
    pose = pose.reshape(T, J, 3) + (natural_posture(J) if posture is None else posture)
    shape = rng.normal(scale=0.5, size=N_SHAPE)
    cam_scale = _keyframe_track(rng, T, lambda: rng.uniform(0.85, 1.05))[:, 0]
    cam_rot = _keyframe_track(rng, T, lambda: rng.normal(scale=0.1, size=3))
    cam_trans = _keyframe_track(rng, T, lambda: rng.uniform(-0.1, 0.1, size=2))
    joints3d, joints2d, sil = render_observations(body, pose, shape, cam_scale, cam_rot,
                                                  cam_trans, H, W)
    vis = np.ones(joints2d.shape[:2], dtype=np.uint8)
    return MotionSequence(pose, shape, cam_scale, cam_rot, cam_trans, joints3d, joints2d, sil, vis)


def make_corpus(body: BodyModel, seed: int, count: int, T: int,
                H: int = DEFAULT_RES, W: int = DEFAULT_RES) -> list[MotionSequence]:
    return [generate_sequence(body, [seed, i], T, H, W) for i in range(count)]


# ---------------------------------------------------------------------------
# encoder
# ---------------------------------------------------------------------------

class FrameEncoder:
    """Two dense layers over [flattened silhouette, visible keypoints, visibility].

    The first layer's columns are rescaled per input group so that a few dozen
    keypoint coordinates are not drowned out by thousands of pixels at init:
    each group contributes pre-activations of roughly unit scale.
    """

    def __init__(self, store: ParameterStore, H: int, W: int, k: int, d: int, hidden: int, seed: int,
                 active_fraction: float = 0.2):
        self.H, self.W, self.k, self.d = H, W, k, d
        fc1 = Dense(store, "enc.fc1", H * W + 3 * k, hidden, seed, "leaky_relu")
        base = np.sqrt(2.0 / (H * W + 3 * k + hidden))
        n_pix = H * W
        w = fc1.W.data
        w[:, :n_pix] *= np.sqrt(1.0 / (active_fraction * n_pix)) / base
        w[:, n_pix:n_pix + 2 * k] *= np.sqrt(1.0 / (2 * k * active_fraction)) / base
        w[:, n_pix + 2 * k:] *= np.sqrt(1.0 / k) / base
        self.net = MLP([fc1, Dense(store, "enc.fc2", hidden, d, seed, "leaky_relu")])


def encoder_inputs(silhouettes, keypoints, visibility) -> np.ndarray:
    sil = np.asarray(silhouettes, dtype=float)
    vis = np.asarray(visibility, dtype=float)
    kp = np.asarray(keypoints, dtype=float) * vis[..., None]
    lead = sil.shape[:-2]
    return np.concatenate([sil.reshape(lead + (-1,)), kp.reshape(lead + (-1,)),
                           vis.reshape(lead + (-1,))], axis=-1)


def encode_frame(enc: FrameEncoder, silhouettes, keypoints, visibility=None) -> Tensor:
    """Features (..., d) for observations (..., H, W) and (..., k, 2)."""
    sil = np.asarray(silhouettes)
    if sil.shape[-2:] != (enc.H, enc.W):
        raise ValueError(f"silhouette resolution {sil.shape[-2:]} != encoder's {(enc.H, enc.W)}")
    if visibility is None:
        visibility = np.ones(np.shape(keypoints)[:-1])
    return enc.net(Tensor(encoder_inputs(sil, keypoints, visibility)))


# ---------------------------------------------------------------------------
# occlusion
# ---------------------------------------------------------------------------

@dataclass
class OcclusionSpec:
    """Per frame: rows of (keypoint index, half-width px, half-height px)."""
    rects: list = field(default_factory=list)


def sample_occlusion(rng: np.random.Generator, n_frames: int, k: int, H: int = DEFAULT_RES) -> OcclusionSpec:
    """3-5 keypoints per frame, offsets of 25-50 px at 224 px rescaled to ``H``."""
    lo, hi = OCCLUSION_OFFSET_PX
    scale = H / REFERENCE_RES
    rects = []
    for _ in range(n_frames):
        n = int(rng.integers(OCCLUSION_KEYPOINTS[0], OCCLUSION_KEYPOINTS[1] + 1))
        kps = rng.choice(k, size=min(n, k), replace=False)
        offs = rng.uniform(lo, hi, size=(len(kps), 2)) * scale
        rects.append(np.column_stack([kps, offs]))
    return OcclusionSpec(rects)


def _padded_rects(spec: OcclusionSpec, T: int) -> np.ndarray:
    """(T, R, 3) with empty slots as rectangles of negative extent (contain nothing)."""
    R = max((len(np.asarray(r).reshape(-1, 3)) for r in spec.rects), default=0)
    out = np.zeros((T, R, 3))
    out[..., 1:] = -1.0
    for i, r in enumerate(spec.rects[:T]):
        r = np.asarray(r, dtype=float).reshape(-1, 3)
        out[i, :len(r)] = r
    return out


def occlusion_masks(keypoints_px: np.ndarray, rects: np.ndarray, H: int, W: int):
    """Pixel mask (T, H, W) and keypoint mask (T, k) of points inside any rectangle.

    ``keypoints_px`` is (T, k, 2) in (col, row) pixels, ``rects`` (T, R, 3) rows of
    (keypoint index, half-width, half-height); edges are inclusive.
    """
    T = len(keypoints_px)
    c = keypoints_px[np.arange(T)[:, None], rects[..., 0].astype(int)]      # (T, R, 2)
    hw, hh = rects[..., 1], rects[..., 2]
    in_cols = np.abs(np.arange(W) - c[..., :1]) <= hw[..., None]            # (T, R, W)
    in_rows = np.abs(np.arange(H) - c[..., 1:]) <= hh[..., None]            # (T, R, H)
    pix = np.matmul(in_rows.swapaxes(1, 2).astype(np.int32), in_cols.astype(np.int32)) > 0
    d = np.abs(keypoints_px[:, None] - c[:, :, None])                        # (T, R, k, 2)
    kp = ((d[..., 0] <= hw[..., None]) & (d[..., 1] <= hh[..., None])).any(1)
    return pix, kp


def occlude(silhouettes, keypoints, visibility, spec: OcclusionSpec):
    """Zero silhouette pixels inside each rectangle and hide keypoints that fall
    inside any rectangle. Returns new (silhouettes, visibility); inputs untouched."""
    sil = np.array(silhouettes, copy=True)
    vis = np.array(visibility, copy=True)
    T, H, W = sil.shape
    rects = _padded_rects(spec, T)
    if rects.shape[1] == 0:
        return sil, vis
    px = to_pixels(Tensor(np.asarray(keypoints, dtype=float)), H, W).data
    pix, kp = occlusion_masks(px, rects, H, W)
    sil[pix] = 0
    vis[kp] = 0
    return sil, vis


# ---------------------------------------------------------------------------
# segments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Segment:
    seq_id: int
    start: int
    length: int

    @property
    def frame_ids(self) -> np.ndarray:
        return np.arange(self.start, self.start + self.length)


def sample_overlapping_pair(seq_len: int, n: int, N: int, seq_id: int = 0) -> tuple[Segment, Segment]:
    """S1 = [n, n+N) and S2 = [n+1, n+N+1); they share frames n+1 .. n+N-1."""
    if n < 0 or n + N + 1 > seq_len:
        raise IndexError(f"start {n} with length {N} does not fit a {seq_len}-frame sequence")
    return Segment(seq_id, n, N), Segment(seq_id, n + 1, N)


# ---------------------------------------------------------------------------
# dataset file
# ---------------------------------------------------------------------------
# little-endian layout:
#   b"SPSDATA\0" version:u8 J,V,k,H,W,d,count:u32
#   per sequence: T:u32 pose f64[T,J,3] shape f64[10] scale f64[T] rot f64[T,3]
#   trans f64[T,2] joints3d f64[T,k,3] joints2d f64[T,k,2]
#   silhouettes packbits(u8[T,H,W]) visibility u8[T,k]

_DATA_MAGIC = b"SPSDATA\x00"
_DATA_VERSION = 1


@dataclass
class Dataset:
    sequences: list[MotionSequence]
    n_joints: int
    n_vertices: int
    n_keypoints: int
    H: int = DEFAULT_RES
    W: int = DEFAULT_RES
    d: int = 64

    @classmethod
    def from_body(cls, body: BodyModel, sequences, d: int = 64) -> "Dataset":
        H, W = sequences[0].silhouettes.shape[1:] if sequences else (DEFAULT_RES, DEFAULT_RES)
        return cls(list(sequences), body.n_joints, body.n_vertices, body.n_keypoints, H, W, d)


def _f64(a) -> bytes:
    return np.ascontiguousarray(a, dtype="<f8").tobytes()


def encode_dataset(ds: Dataset) -> bytes:
    parts = [_DATA_MAGIC, struct.pack("<B", _DATA_VERSION),
             struct.pack("<7I", ds.n_joints, ds.n_vertices, ds.n_keypoints, ds.H, ds.W, ds.d,
                         len(ds.sequences))]
    for s in ds.sequences:
        parts += [struct.pack("<I", s.length), _f64(s.pose), _f64(s.shape), _f64(s.cam_scale),
                  _f64(s.cam_rot), _f64(s.cam_trans), _f64(s.joints3d), _f64(s.joints2d),
                  np.packbits(s.silhouettes.astype(np.uint8).reshape(-1)).tobytes(),
                  np.ascontiguousarray(s.visibility, dtype=np.uint8).tobytes()]
    return b"".join(parts)


def decode_dataset(raw: bytes) -> Dataset:
    if raw[:8] != _DATA_MAGIC:
        raise ValueError("not a dataset file (bad magic)")
    if raw[8] != _DATA_VERSION:
        raise ValueError(f"unsupported dataset version {raw[8]}")
    J, V, k, H, W, d, count = struct.unpack_from("<7I", raw, 9)
    pos = 9 + 28

    def f64(shape):
        nonlocal pos
        n = int(np.prod(shape))
        a = np.frombuffer(raw, dtype="<f8", count=n, offset=pos).astype(np.float64).reshape(shape)
        pos += 8 * n
        return a

    seqs = []
    for _ in range(count):
        (T,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        pose, shape = f64((T, J, 3)), f64((N_SHAPE,))
        scale, rot, trans = f64((T,)), f64((T, 3)), f64((T, 2))
        j3, j2 = f64((T, k, 3)), f64((T, k, 2))
        nbits = T * H * W
        nbytes = (nbits + 7) // 8
        bits = np.frombuffer(raw, dtype=np.uint8, count=nbytes, offset=pos)
        sil = np.unpackbits(bits)[:nbits].reshape(T, H, W)
        pos += nbytes
        vis = np.frombuffer(raw, dtype=np.uint8, count=T * k, offset=pos).reshape(T, k).copy()
        pos += T * k
        seqs.append(MotionSequence(pose, shape, scale, rot, trans, j3, j2, sil, vis))
    if pos != len(raw):
        raise ValueError("trailing bytes in dataset file")
    return Dataset(seqs, J, V, k, H, W, d)


def save_dataset(ds: Dataset, path: str | Path) -> None:
    Path(path).write_bytes(encode_dataset(ds))


def load_dataset(path: str | Path) -> Dataset:
    return decode_dataset(Path(path).read_bytes())


def with_occlusion(seq: MotionSequence, rng: np.random.Generator) -> MotionSequence:
    """Copy of ``seq`` whose observations carry sampled occlusions; GT untouched."""
    H = seq.silhouettes.shape[1]
    spec = sample_occlusion(rng, seq.length, seq.joints2d.shape[1], H)
    sil, vis = occlude(seq.silhouettes, seq.joints2d, seq.visibility, spec)
    return replace(seq, silhouettes=sil, visibility=vis)
