"""Training orchestration: model assembly, the per-step loss suite with
alternating estimator/discriminator updates, checkpoints, windowed
inference, evaluation and ablation grids."""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import time
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .body import BodyModel, Camera, body_forward, make_default_body, project, soft_silhouette, write_obj
from .data import (FrameEncoder, MotionSequence, encode_frame, make_corpus, occlude,
                   sample_occlusion)
from .discriminator import DiscriminatorNet, adversarial_losses
from .losses import (LossWeights, camera_consistency, joint_loss_2d, joint_loss_3d, mask_loss,
                     occlusion_param_terms, overlap_slices, smpl_terms, total_loss)
from .metrics import EvalReport, sequence_metrics
from .optim import (ParameterStore, adam_step, decode_records, encode_records, load_store_records,
                    store_records)
from .regressors import Estimate, Heads, regress_sequence
from .temporal import (AttentionModule, ForecastModule, FusionModule, RecurrentAggregator,
                       feature_loss, forecast, fuse, self_attention)

ABLATION_FLAGS = ("no_camera", "no_mask", "no_param", "no_adv", "no_forecast", "no_attention",
                  "recurrent_baseline")


@dataclass
class TrainConfig:
    N: int = 32
    batch: int = 16
    lr_est: float = 5e-5
    lr_disc: float = 1e-4
    steps: int = 5000
    disc_ratio: int = 1
    d: int = 64
    hidden: int = 128
    enc_hidden: int = 128
    iters: int = 3
    H: int = 64
    W: int = 64
    weights: LossWeights = field(default_factory=LossWeights)
    # "mean" averages the mask term over pixels before summing frames; "sum" is the raw pixel sum
    mask_reduction: str = "mean"
    # frames per segment drawn at random for the mask term (0 = all); the sum is rescaled by N/m
    mask_frames: int = 0
    no_camera: bool = False
    no_mask: bool = False
    no_param: bool = False
    no_adv: bool = False
    no_forecast: bool = False
    no_attention: bool = False
    recurrent_baseline: bool = False
    seed: int = 0
    body_seed: int = 0
    data_seed: int = 1000
    train_sequences: int = 64
    sequence_length: int = 256

    def validate(self) -> "TrainConfig":
        for name in ("N", "batch", "steps", "disc_ratio", "d", "hidden", "enc_hidden", "iters",
                     "train_sequences", "sequence_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.lr_est <= 0 or self.lr_disc <= 0:
            raise ValueError("learning rates must be positive")
        if self.no_attention and self.recurrent_baseline:
            raise ValueError("no_attention and recurrent_baseline are mutually exclusive")
        if self.mask_reduction not in ("mean", "sum"):
            raise ValueError(f"unknown mask_reduction {self.mask_reduction!r}")
        if self.sequence_length < self.N + 1:
            raise ValueError("training sequences must be longer than one segment pair")
        if min(self.weights.as_dict().values()) < 0:
            raise ValueError("loss weights must be nonnegative")
        return self

    def replace(self, **changes) -> "TrainConfig":
        w = {k[8:]: changes.pop(k) for k in list(changes) if k.startswith("weights.")}
        cfg = dataclasses.replace(self, **changes)
        if w:
            cfg = dataclasses.replace(cfg, weights=dataclasses.replace(cfg.weights, **w))
        return cfg

    def items(self) -> list[tuple[str, object]]:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, LossWeights):
                out += [(f"weights.{k}", x) for k, x in v.as_dict().items()]
            else:
                out.append((f.name, v))
        return out

    def to_text(self) -> str:
        return "".join(f"{k}={v!r}\n" if isinstance(v, float) else f"{k}={v}\n"
                       for k, v in self.items())

    @classmethod
    def from_text(cls, text: str) -> "TrainConfig":
        types = dict((k, type(v)) for k, v in cls().items())
        changes = {}
        for lineno, line in enumerate(text.splitlines(), 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, raw = line.partition("=")
            key, raw = key.strip(), raw.strip()
            if not sep or key not in types:
                raise ValueError(f"line {lineno}: unknown or malformed entry {line!r}")
            t = types[key]
            if t is bool:
                if raw.lower() not in ("true", "false", "1", "0"):
                    raise ValueError(f"line {lineno}: {key} expects a boolean")
                changes[key] = raw.lower() in ("true", "1")
            else:
                changes[key] = t(raw)
        return cls().replace(**changes).validate()

    def hash(self) -> str:
        return hashlib.sha256(self.to_text().encode()).hexdigest()[:16]


def load_config(path: str | Path) -> TrainConfig:
    return TrainConfig.from_text(Path(path).read_text())


# ---------------------------------------------------------------------------
# model
# ---------------------------------------------------------------------------

class SPSNet:
    """Estimator (encoder, temporal modules, regressors) plus discriminator,
    each with its own parameter store."""

    def __init__(self, cfg: TrainConfig, body: BodyModel):
        self.cfg, self.body = cfg, body
        self.est = ParameterStore()
        self.disc_store = ParameterStore()
        s, d = cfg.seed, cfg.d
        self.encoder = FrameEncoder(self.est, cfg.H, cfg.W, body.n_keypoints, d, cfg.enc_hidden, s)
        if cfg.recurrent_baseline:
            self.aggregator = RecurrentAggregator(self.est, "gru", d, s)
        elif cfg.no_attention:
            self.aggregator = None
        else:
            self.aggregator = AttentionModule(self.est, "att", d, s)
        if cfg.no_forecast:
            self.forecaster = self.fusion = None
        else:
            self.forecaster = ForecastModule(self.est, "forecast", d, s)
            self.fusion = FusionModule(self.est, "fusion", d, s)
        self.heads = Heads.build(self.est, d, body.pose_dim, cfg.hidden, s)
        self.disc = DiscriminatorNet(self.disc_store, body.pose_dim, s)


@dataclass
class Forward:
    features: Tensor
    predicted: Tensor | None
    fused: Tensor
    estimate: Estimate


def estimator_forward(model: SPSNet, silhouettes, keypoints, visibility) -> "Forward":
    """Observations (B, N, H, W), (B, N, k, 2), (B, N, k) -> features and estimates."""
    return temporal_forward(model, encode_frame(model.encoder, silhouettes, keypoints, visibility))


def estimate_body(model: SPSNet, est: Estimate):
    """(vertices, joints) for per-frame pose and a per-sequence shape."""
    pose = est.pose
    lead = pose.shape[:-1]
    shape = ag.broadcast_to(est.shape.reshape(est.shape.shape[:-1] + (1, est.shape.shape[-1])),
                            lead + (est.shape.shape[-1],))
    return body_forward(model.body, pose, shape)


# ---------------------------------------------------------------------------
# batches
# ---------------------------------------------------------------------------

@dataclass
class Batch:
    """Overlapping segment pairs S1 = [n, n+N) and S2 = [n+1, n+N+1) stored as
    their N+1 frame union, an occluded copy of S1, and real motion samples."""
    sil: np.ndarray            # (B, N+1, H, W) clean observations
    kp: np.ndarray             # (B, N+1, k, 2)
    vis: np.ndarray            # (B, N+1, k)
    occ_sil: np.ndarray        # (B, N, H, W) occluded S1
    occ_vis: np.ndarray        # (B, N, k)
    pose: np.ndarray           # (B, N, J, 3) ground truth for S1
    shape: np.ndarray          # (B, 10)
    joints3d: np.ndarray       # (B, N, k, 3)
    joints2d: np.ndarray       # (B, N, k, 2)
    mask_frames: np.ndarray    # (B, m) S1 positions that enter the mask term
    real_pose: np.ndarray      # (B, N, 3J)
    real_shape: np.ndarray     # (B, 10)

    @property
    def N(self) -> int:
        return self.pose.shape[1]


def step_rng(seed: int, step: int, tag: int) -> np.random.Generator:
    return np.random.default_rng([seed, step, tag])


def make_batch(corpus: list[MotionSequence], cfg: TrainConfig, step: int) -> Batch:
    rng = step_rng(cfg.seed, step, 0)
    N, B = cfg.N, cfg.batch
    pairs, occ = [], []
    for _ in range(B):
        seq = corpus[int(rng.integers(len(corpus)))]
        n = int(rng.integers(seq.length - N))
        u = seq.frames(n, n + N + 1)
        spec = sample_occlusion(rng, N, u.joints2d.shape[1], cfg.H)
        occ.append(occlude(u.silhouettes[:N], u.joints2d[:N], u.visibility[:N], spec))
        pairs.append(u)
    rr = step_rng(cfg.seed, step, 1)
    real = []
    for _ in range(B):
        seq = corpus[int(rr.integers(len(corpus)))]
        n = int(rr.integers(seq.length - N + 1))
        real.append(seq.frames(n, n + N))
    m = cfg.mask_frames if 0 < cfg.mask_frames < N else N
    rm = step_rng(cfg.seed, step, 2)
    mask_idx = np.stack([np.sort(rm.choice(N, m, replace=False)) if m < N else np.arange(N)
                         for _ in range(B)])
    return Batch(
        sil=np.stack([u.silhouettes for u in pairs]),
        kp=np.stack([u.joints2d for u in pairs]),
        vis=np.stack([u.visibility for u in pairs]),
        occ_sil=np.stack([o[0] for o in occ]),
        occ_vis=np.stack([o[1] for o in occ]),
        pose=np.stack([u.pose[:N] for u in pairs]),
        shape=np.stack([u.shape for u in pairs]),
        joints3d=np.stack([u.joints3d[:N] for u in pairs]),
        joints2d=np.stack([u.joints2d[:N] for u in pairs]),
        mask_frames=mask_idx,
        real_pose=np.stack([r.pose.reshape(N, -1) for r in real]),
        real_shape=np.stack([r.shape for r in real]),
    )


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------

@dataclass
class TrainState:
    model: SPSNet
    step: int = 0
    log: list[tuple[int, str, float]] = field(default_factory=list)


def temporal_forward(model: SPSNet, f: Tensor) -> Forward:
    """Aggregation, forecasting, fusion and regression on encoded features (B, N, d)."""
    if isinstance(model.aggregator, AttentionModule):
        h = self_attention(model.aggregator, f)
    elif model.aggregator is not None:
        h = model.aggregator(f)
    else:
        h = f
    if model.forecaster is None:
        fp, F = None, h
    else:
        fp = forecast(model.forecaster, f)
        F = fuse(model.fusion, h, fp)
    return Forward(f, fp, F, regress_sequence(model.heads, F, model.cfg.iters))


def loss_terms(model: SPSNet, batch: Batch):
    """Per-term batch-mean losses and the discriminator objective (or None).

    The encoder works frame by frame, so S1 and S2 features are slices of one
    encoding of their N+1 frame union. Terms whose ablation flag is set are
    never constructed.
    """
    cfg = model.cfg
    B, N = batch.pose.shape[:2]
    f_union = encode_frame(model.encoder, batch.sil, batch.kp, batch.vis)
    branches = [f_union[:, :N]]
    if not cfg.no_camera:
        branches.append(f_union[:, 1:])
    if not cfg.no_param:
        branches.append(encode_frame(model.encoder, batch.occ_sil, batch.kp[:, :N], batch.occ_vis))
    fw = temporal_forward(model, ag.concat(branches, axis=0))

    def part(t: Tensor, j: int) -> Tensor:
        return t[j * B:(j + 1) * B]

    e = fw.estimate
    est = Estimate(part(e.pose, 0), part(e.shape, 0), part(e.camera_raw, 0))
    terms = {}
    terms["shape"], terms["pose"] = smpl_terms(batch.pose.reshape(B, N, -1), batch.shape,
                                               est.pose, est.shape)
    verts, joints = estimate_body(model, est)
    cam = est.camera
    terms["joint3d"] = joint_loss_3d(batch.joints3d, joints)
    terms["joint2d"] = joint_loss_2d(batch.joints2d, project(joints, cam), batch.vis[:, :N])
    if not cfg.no_mask:
        rows = np.arange(B)[:, None]
        idx = batch.mask_frames
        proj = soft_silhouette(verts[rows, idx], Camera.from_raw(est.camera_raw[rows, idx]),
                               cfg.H, cfg.W)
        m = mask_loss(batch.sil[rows, idx], proj) * (N / idx.shape[1])
        terms["mask"] = m / (cfg.H * cfg.W) if cfg.mask_reduction == "mean" else m
    if not cfg.no_forecast:
        terms["feature"] = feature_loss(part(fw.features, 0), part(fw.predicted, 0))
    if not cfg.no_camera:
        a, b = overlap_slices(N, 1)
        terms["camera"] = camera_consistency(part(e.camera_raw, 0)[:, a],
                                             part(e.camera_raw, 1)[:, b])
    if not cfg.no_param:
        j = len(branches) - 1
        occ = Estimate(part(e.pose, j), part(e.shape, j), part(e.camera_raw, j))
        terms.update(occlusion_param_terms(est, occ))
    d_loss = None
    if not cfg.no_adv:
        d_loss, terms["adv"] = adversarial_losses(model.disc, batch.real_pose, batch.real_shape,
                                                  est.pose, est.shape)
    terms = {k: v.mean() if v.ndim else v for k, v in terms.items()}
    return terms, d_loss


def train_step(state: TrainState, batch: Batch) -> dict[str, float]:
    model, cfg = state.model, state.model.cfg
    model.est.zero_grad()
    model.disc_store.zero_grad()
    terms, d_loss = loss_terms(model, batch)
    total, values = total_loss(terms, cfg.weights)
    total.backward()
    adam_step(model.est, model.est.grads(), cfg.lr_est)
    values["total"] = float(total.data)
    if d_loss is not None and state.step % cfg.disc_ratio == 0:
        model.disc_store.zero_grad()
        d_loss.backward()
        adam_step(model.disc_store, model.disc_store.grads(), cfg.lr_disc)
        values["d_loss"] = float(d_loss.data)
    state.step += 1
    state.log.extend((state.step, k, v) for k, v in values.items())
    return values


def build_corpus(cfg: TrainConfig, body: BodyModel) -> list[MotionSequence]:
    return make_corpus(body, cfg.data_seed, cfg.train_sequences, cfg.sequence_length, cfg.H, cfg.W)


def train(cfg: TrainConfig, corpus: list[MotionSequence] | None = None, body: BodyModel | None = None,
          state: TrainState | None = None, until: int | None = None, progress=None) -> TrainState:
    """Run (or resume) training up to ``until`` steps (default ``cfg.steps``)."""
    cfg.validate()
    body = body or make_default_body(cfg.body_seed)
    corpus = corpus if corpus is not None else build_corpus(cfg, body)
    state = state or TrainState(SPSNet(cfg, body))
    until = cfg.steps if until is None else until
    while state.step < until:
        values = train_step(state, make_batch(corpus, cfg, state.step))
        if progress is not None:
            progress(state.step, values)
    return state


def write_loss_log(rows, path: str | Path, append: bool = True) -> None:
    path = Path(path)
    new = not path.exists() or not append
    with open(path, "a" if append else "w", newline="") as fh:
        w = csv.writer(fh)
        if new:
            w.writerow(("step", "term", "value"))
        for step, term, value in rows:
            w.writerow((step, term, repr(value)))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def checkpoint_bytes(state: TrainState) -> bytes:
    cfg = state.model.cfg
    records = store_records(state.model.est, "est/")
    records.update(store_records(state.model.disc_store, "disc/"))
    records["step"] = np.array(float(state.step))
    meta = f"config_hash={cfg.hash()}\n" + cfg.to_text()
    return encode_records(records, meta)


def save_checkpoint(state: TrainState, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(state))


def state_from_bytes(raw: bytes, body: BodyModel | None = None) -> TrainState:
    records, meta = decode_records(raw)
    header, _, text = meta.partition("\n")
    cfg = TrainConfig.from_text(text)
    if header != f"config_hash={cfg.hash()}":
        raise ValueError("checkpoint config hash does not match its config")
    model = SPSNet(cfg, body or make_default_body(cfg.body_seed))
    load_store_records(model.est, records, "est/")
    load_store_records(model.disc_store, records, "disc/")
    return TrainState(model, int(records["step"]))


def load_checkpoint(path: str | Path, body: BodyModel | None = None) -> TrainState:
    return state_from_bytes(Path(path).read_bytes(), body)


# ---------------------------------------------------------------------------
# inference and evaluation
# ---------------------------------------------------------------------------

@dataclass
class Prediction:
    vertices: np.ndarray     # (T, V, 3)
    joints: np.ndarray       # (T, k, 3)
    camera_raw: np.ndarray   # (T, 6)
    pose: np.ndarray         # (T, 3J)
    shape: np.ndarray        # (T, 10), shape of the owning window
    padded: bool = False

    @property
    def camera(self):
        c = Camera.from_raw(Tensor(self.camera_raw))
        return c.scale.data, c.rot.data, c.trans.data


def window_starts(T: int, N: int) -> list[int]:
    """Stride-N windows; a final right-aligned window covers any remainder."""
    if T <= N:
        return [0]
    starts = list(range(0, T - N + 1, N))
    if starts[-1] + N < T:
        starts.append(T - N)
    return starts


def reflect_indices(T: int, N: int) -> np.ndarray:
    """Indices of a length-N window over T < N frames with reflection padding."""
    if T == 1:
        return np.zeros(N, dtype=int)
    period = 2 * (T - 1)
    i = np.arange(N) % period
    return np.where(i < T, i, period - i)


def infer(model: SPSNet, silhouettes, keypoints, visibility=None) -> Prediction:
    sil = np.asarray(silhouettes)
    kp = np.asarray(keypoints, dtype=float)
    T, N = len(sil), model.cfg.N
    vis = np.ones(kp.shape[:-1]) if visibility is None else np.asarray(visibility, dtype=float)
    padded = T < N
    if padded:
        idx = reflect_indices(T, N)[None]
        owner = [(0, np.arange(T), np.arange(T))]
    else:
        starts = window_starts(T, N)
        idx = np.stack([np.arange(s, s + N) for s in starts])
        owner, covered = [], 0
        for w, s in enumerate(starts):
            frames = np.arange(max(s, covered), s + N)
            owner.append((w, frames, frames - s))
            covered = s + N
    fw = estimator_forward(model, sil[idx], kp[idx], vis[idx])
    verts, joints = estimate_body(model, fw.estimate)
    out = {k: [] for k in ("v", "j", "c", "p", "s")}
    for w, frames, local in owner:
        out["v"].append(verts.data[w, local])
        out["j"].append(joints.data[w, local])
        out["c"].append(fw.estimate.camera_raw.data[w, local])
        out["p"].append(fw.estimate.pose.data[w, local])
        out["s"].append(np.repeat(fw.estimate.shape.data[w][None], len(local), 0))
    cat = {k: np.concatenate(v) for k, v in out.items()}
    return Prediction(cat["v"], cat["j"], cat["c"], cat["p"], cat["s"], padded)


def write_prediction(pred: Prediction, body: BodyModel, out_dir: str | Path, obj_every: int = 1) -> None:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "joints.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", "x", "y", "z"])
        for t, frame in enumerate(pred.joints):
            for j, p in enumerate(frame):
                w.writerow([t, j, *map(repr, p.tolist())])
    with open(out / "camera.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "scale", "rx", "ry", "rz", "tx", "ty"])
        s, r, tr = pred.camera
        for t in range(len(s)):
            w.writerow([t, repr(float(s[t])), *map(repr, r[t].tolist()), *map(repr, tr[t].tolist())])
    (out / "meta.txt").write_text(f"frames={len(pred.joints)}\npadded={pred.padded}\n")
    for t in range(0, len(pred.vertices), obj_every):
        write_obj(out / f"mesh_{t:05d}.obj", pred.vertices[t], body.faces)


def evaluate(model: SPSNet, sequences: list[MotionSequence], occluded_seed: int | None = None) -> EvalReport:
    """Metrics on full sequences; with ``occluded_seed`` the observations are
    occluded the same way as in training first."""
    report = EvalReport()
    body = model.body
    for i, seq in enumerate(sequences):
        sil, vis = seq.silhouettes, seq.visibility
        if occluded_seed is not None:
            rng = np.random.default_rng([occluded_seed, i])
            spec = sample_occlusion(rng, seq.length, seq.joints2d.shape[1], sil.shape[1])
            sil, vis = occlude(sil, seq.joints2d, vis, spec)
        pred = infer(model, sil, seq.joints2d, vis)
        gt_verts, _ = body_forward(body, seq.pose, np.broadcast_to(seq.shape, (seq.length, 10)))
        report.add(f"seq{i}", sequence_metrics(pred.joints, seq.joints3d, pred.vertices, gt_verts.data))
    return report


def heldout_corpus(cfg: TrainConfig, body: BodyModel, count: int = 8, length: int = 128,
                   seed: int = 9000) -> list[MotionSequence]:
    return make_corpus(body, seed, count, length, cfg.H, cfg.W)


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

def ablation_cells(base: TrainConfig) -> dict[str, TrainConfig]:
    cells = {"full": base}
    for flag in ("no_camera", "no_mask", "no_param", "no_adv", "no_forecast", "no_attention",
                 "recurrent_baseline"):
        cells[flag] = base.replace(**{flag: True})
    for n in (8, 16):
        cells[f"N={n}"] = base.replace(N=n)
    return cells


@dataclass
class CellResult:
    name: str
    seeds: list[int]
    clean: list[float]
    occluded: list[float]
    seconds: float

    @property
    def mean(self) -> float:
        return float(np.mean(self.clean))

    @property
    def spread(self) -> float:
        return float(np.std(self.clean))


def run_ablation(cells: dict[str, TrainConfig], seeds, heldout: list[MotionSequence],
                 occluded_seed: int = 77, corpus=None, body=None, progress=None) -> list[CellResult]:
    """Trains every cell for every seed on a shared corpus and held-out set."""
    results = []
    for name, cfg in cells.items():
        clean, occl = [], []
        t0 = time.perf_counter()
        for seed in seeds:
            c = cfg.replace(seed=seed)
            body_ = body or make_default_body(c.body_seed)
            state = train(c, corpus, body_)
            clean.append(evaluate(state.model, heldout).mean()["pa_mpjpe"])
            occl.append(evaluate(state.model, heldout, occluded_seed).mean()["pa_mpjpe"])
            if progress is not None:
                progress(name, seed, clean[-1], occl[-1])
        results.append(CellResult(name, list(seeds), clean, occl, time.perf_counter() - t0))
    return results


def ablation_table(results: list[CellResult]) -> str:
    lines = [f"{'cell':<20}{'PA-MPJPE mean':>15}{'spread':>10}{'occluded':>12}"]
    for r in results:
        lines.append(f"{r.name:<20}{r.mean:>15.2f}{r.spread:>10.2f}{np.mean(r.occluded):>12.2f}")
    return "\n".join(lines)

