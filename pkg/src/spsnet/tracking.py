"""Box association across frames: constant-velocity prediction, IoU costs,
optimal assignment with a minimum-overlap gate."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

DEFAULT_MIN_IOU = 0.3
DEFAULT_MAX_MISSES = 5


class Box(NamedTuple):
    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def validate(self) -> "Box":
        if not (self.x_min < self.x_max and self.y_min < self.y_max):
            raise ValueError(f"degenerate box {tuple(self)}")
        return self

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


def iou(a: Box, b: Box) -> float:
    w = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    h = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if w <= 0 or h <= 0:
        return 0.0
    inter = w * h
    return inter / (a.area + b.area - inter)


def hungarian(cost) -> list[tuple[int, int]]:
    """Minimum-cost one-to-one assignment of rows to columns.

    Shortest augmenting path with potentials (O(n^3)); rectangular inputs are
    padded to square with zeros and padded pairs are dropped from the result.
    """
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ValueError("cost must be a matrix")
    m, n = cost.shape
    if m == 0 or n == 0:
        return []
    if not np.all(np.isfinite(cost)):
        raise ValueError("costs must be finite")
    size = max(m, n)
    C = np.zeros((size, size))
    C[:m, :n] = cost
    INF = np.inf
    u = np.zeros(size + 1)
    v = np.zeros(size + 1)
    p = np.zeros(size + 1, dtype=int)      # p[j]: row matched to column j (1-based, 0 = free)
    way = np.zeros(size + 1, dtype=int)
    for i in range(1, size + 1):
        p[0] = i
        j0 = 0
        minv = np.full(size + 1, INF)
        used = np.zeros(size + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta, j1 = INF, 0
            for j in range(1, size + 1):
                if not used[j]:
                    cur = C[i0 - 1, j - 1] - u[i0] - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta, j1 = minv[j], j
            for j in range(size + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
    pairs = [(p[j] - 1, j - 1) for j in range(1, size + 1) if p[j] - 1 < m and j - 1 < n]
    return sorted(pairs)


@dataclass
class TrackState:
    id: int
    history: list[Box] = field(default_factory=list)
    velocity: np.ndarray = field(default_factory=lambda: np.zeros(4))
    age: int = 0
    misses: int = 0

    def predict(self) -> Box:
        return Box(*(np.asarray(self.history[-1], dtype=float) + self.velocity))


@dataclass
class Tracker:
    min_iou: float = DEFAULT_MIN_IOU
    max_misses: int = DEFAULT_MAX_MISSES
    tracks: list[TrackState] = field(default_factory=list)
    next_id: int = 0

    def step(self, detections: list[Box]):
        """Returns (assignments as (track id, detection index), new ids)."""
        return step_tracker(self, detections)


def step_tracker(tracker: Tracker, detections: list[Box]):
    if not 0.0 < tracker.min_iou < 1.0:
        raise ValueError("min_iou must lie in (0, 1)")
    tracks = tracker.tracks
    predicted = [t.predict() for t in tracks]
    matched_t, matched_d, assignments = set(), set(), []
    if tracks and detections:
        overlap = np.array([[iou(p, d) for d in detections] for p in predicted])
        for ti, di in hungarian(1.0 - overlap):
            if overlap[ti, di] >= tracker.min_iou:
                matched_t.add(ti)
                matched_d.add(di)
                assignments.append((tracks[ti].id, di))
    for ti, track in enumerate(tracks):
        track.age += 1
        if ti in matched_t:
            di = next(d for tid, d in assignments if tid == track.id)
            box = detections[di]
            track.velocity = np.asarray(box, dtype=float) - np.asarray(track.history[-1], dtype=float)
            track.history.append(box)
            track.misses = 0
        else:
            track.misses += 1
    tracker.tracks = [t for t in tracks if t.misses <= tracker.max_misses]
    new_ids = []
    for di, box in enumerate(detections):
        if di in matched_d:
            continue
        track = TrackState(tracker.next_id, [box])
        tracker.next_id += 1
        tracker.tracks.append(track)
        assignments.append((track.id, di))
        new_ids.append(track.id)
    return sorted(assignments, key=lambda a: a[1]), new_ids


def read_detections(path: str | Path) -> dict[int, list[Box]]:
    """CSV rows (frame, x_min, y_min, x_max, y_max, score) grouped by frame."""
    frames: dict[int, list[Box]] = {}
    with open(path, newline="") as fh:
        for row in csv.reader(fh):
            if not row or row[0].strip().lower() == "frame":
                continue
            frame = int(row[0])
            frames.setdefault(frame, []).append(Box(*map(float, row[1:5])).validate())
    return frames


def track_detections(frames: dict[int, list[Box]], min_iou: float = DEFAULT_MIN_IOU,
                     max_misses: int = DEFAULT_MAX_MISSES) -> list[tuple[int, int, Box]]:
    tracker = Tracker(min_iou, max_misses)
    out = []
    for frame in range(min(frames, default=0), max(frames, default=-1) + 1):
        dets = frames.get(frame, [])
        assignments, _ = tracker.step(dets)
        out.extend((frame, tid, dets[di]) for tid, di in assignments)
    return out


def write_tracks(path: str | Path, rows: list[tuple[int, int, Box]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(("frame", "id", "x_min", "y_min", "x_max", "y_max"))
        for frame, tid, box in rows:
            w.writerow((frame, tid, *box))
