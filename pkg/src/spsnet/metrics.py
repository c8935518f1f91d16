"""Pose and shape evaluation metrics. Inputs are in meters, outputs in mm."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

DEFAULT_PCK_MM = 150.0
DEFAULT_FPS = 30.0
METRIC_NAMES = ("mpjpe", "pa_mpjpe", "pve", "pck", "accel_err")


class DegenerateAlignmentError(ValueError):
    pass


def similarity_transform(pred: np.ndarray, gt: np.ndarray):
    """(s, R, t) minimizing sum ||s R pred_i + t - gt_i||^2 with det R = +1."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"expected matching (k, 3) arrays, got {pred.shape} and {gt.shape}")
    if len(gt) < 3:
        raise DegenerateAlignmentError("need at least 3 points")
    mu_p, mu_g = pred.mean(0), gt.mean(0)
    P, G = pred - mu_p, gt - mu_g
    sg = np.linalg.svd(G, compute_uv=False)
    if sg[1] <= 1e-12 * max(sg[0], 1.0):
        raise DegenerateAlignmentError("ground truth is collinear or coincident")
    var_p = (P ** 2).sum()
    if var_p == 0.0:
        raise DegenerateAlignmentError("prediction collapses to a point")
    U, S, Vt = np.linalg.svd(G.T @ P)
    d = np.sign(np.linalg.det(U @ Vt))
    D = np.diag([1.0, 1.0, d if d != 0 else 1.0])
    R = U @ D @ Vt
    s = (S * np.diag(D)).sum() / var_p
    t = mu_g - s * R @ mu_p
    return s, R, t


def procrustes_align(pred, gt) -> np.ndarray:
    s, R, t = similarity_transform(pred, gt)
    return s * np.asarray(pred, dtype=float) @ R.T + t


def _mean_dist(a, b) -> float:
    return float(np.linalg.norm(np.asarray(a, float) - np.asarray(b, float), axis=-1).mean()) * 1000.0


def mpjpe(pred, gt) -> float:
    return _mean_dist(pred, gt)


def pve(pred_verts, gt_verts) -> float:
    return _mean_dist(pred_verts, gt_verts)


def pa_mpjpe(pred, gt) -> float:
    """Accepts (k, 3) or (T, k, 3); each frame aligned separately."""
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.ndim == 2:
        return _mean_dist(procrustes_align(pred, gt), gt)
    aligned = np.stack([procrustes_align(p, g) for p, g in zip(pred.reshape((-1,) + pred.shape[-2:]),
                                                               gt.reshape((-1,) + gt.shape[-2:]))])
    return _mean_dist(aligned, gt.reshape(aligned.shape))


def pck(pred, gt, threshold_mm: float = DEFAULT_PCK_MM) -> float:
    if threshold_mm <= 0:
        raise ValueError("threshold must be positive")
    err = np.linalg.norm(np.asarray(pred, float) - np.asarray(gt, float), axis=-1) * 1000.0
    return float((err < threshold_mm).mean())


def acceleration_error(pred, gt, fps: float = DEFAULT_FPS) -> float:
    pred = np.asarray(pred, dtype=float)
    gt = np.asarray(gt, dtype=float)
    if pred.shape[0] < 3:
        raise ValueError("acceleration needs at least 3 frames")
    diff = pred - gt
    acc = (diff[2:] - 2.0 * diff[1:-1] + diff[:-2]) * fps ** 2
    return float(np.linalg.norm(acc, axis=-1).mean()) * 1000.0


def sequence_metrics(pred_joints, gt_joints, pred_verts=None, gt_verts=None,
                     threshold_mm: float = DEFAULT_PCK_MM, fps: float = DEFAULT_FPS) -> dict[str, float]:
    out = {
        "mpjpe": mpjpe(pred_joints, gt_joints),
        "pa_mpjpe": pa_mpjpe(pred_joints, gt_joints),
        "pve": pve(pred_verts, gt_verts) if pred_verts is not None else float("nan"),
        "pck": pck(pred_joints, gt_joints, threshold_mm),
        "accel_err": acceleration_error(pred_joints, gt_joints, fps) if len(gt_joints) >= 3 else float("nan"),
    }
    return out


@dataclass
class EvalReport:
    rows: list[dict[str, float]] = field(default_factory=list)
    names: list[str] = field(default_factory=list)

    def add(self, name: str, values: dict[str, float]) -> None:
        self.names.append(name)
        self.rows.append({k: float(values[k]) for k in METRIC_NAMES})

    def mean(self) -> dict[str, float]:
        if not self.rows:
            return {k: float("nan") for k in METRIC_NAMES}
        return {k: float(np.mean([r[k] for r in self.rows])) for k in METRIC_NAMES}

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(("sequence",) + METRIC_NAMES)
        for name, row in zip(self.names + ["mean"], self.rows + [self.mean()]):
            w.writerow([name] + [repr(row[k]) for k in METRIC_NAMES])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "EvalReport":
        rep = cls()
        for rec in csv.DictReader(io.StringIO(text)):
            if rec["sequence"] == "mean":
                continue
            rep.add(rec["sequence"], {k: float(rec[k]) for k in METRIC_NAMES})
        return rep

    def table(self) -> str:
        header = f"{'sequence':<12}" + "".join(f"{k:>12}" for k in METRIC_NAMES)
        lines = [header, "-" * len(header)]
        for name, row in zip(self.names + ["mean"], self.rows + [self.mean()]):
            lines.append(f"{name:<12}" + "".join(f"{row[k]:>12.3f}" for k in METRIC_NAMES))
        return "\n".join(lines)
