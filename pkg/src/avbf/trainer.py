"""Modality-dropout training of the audiovisual network."""
from __future__ import annotations

import csv
import enum
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import io
from . import tensor as T
from .blendshape import BlendshapeModel, Camera, rotation_matrix
from .net import NetConfig, NetOutput, forward, init_params, predict
from .tensor import Tensor

log = logging.getLogger(__name__)


class Mode(enum.Enum):
    AUDIO_VISUAL = "av"
    VIDEO_ONLY = "video"
    AUDIO_ONLY = "audio"


@dataclass(frozen=True)
class DropoutPolicy:
    # probability that a batch has its audio zeroed (video-only batch)
    p_audio_drop: float = 0.4
    # probability that a batch has its video zeroed (audio-only batch)
    p_video_drop: float = 0.5

    def __post_init__(self):
        if self.p_audio_drop < 0 or self.p_video_drop < 0 or self.p_audio_drop + self.p_video_drop > 1 + 1e-12:
            raise ValueError("dropout probabilities must be nonnegative and sum to at most 1")


@dataclass(frozen=True)
class LossWeights:
    abs_blend: float = 1.0
    pose_rot_abs: float = 1e-5
    pose_trans_abs: float = 1e-5
    temp_blend: float = 20.0
    temp_rot: float = 10.0
    temp_trans: float = 0.001
    landmark: float = 5.0

    def __post_init__(self):
        if min(asdict(self).values()) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class TrainConfig:
    learning_rate: float = 1e-4
    batch_size: int = 32
    iterations: int = 2000
    seed: int = 0
    dropout: DropoutPolicy = field(default_factory=DropoutPolicy)
    weights: LossWeights = field(default_factory=LossWeights)
    net: NetConfig = field(default_factory=lambda: NetConfig.desk())

    def __post_init__(self):
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.iterations < 0:
            raise ValueError("iterations must be >= 0")
        if isinstance(self.dropout, dict):
            self.dropout = DropoutPolicy(**self.dropout)
        if isinstance(self.weights, dict):
            self.weights = LossWeights(**self.weights)
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["net"] = self.net.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> TrainConfig:
        return cls(**d)

    @classmethod
    def load(cls, path) -> TrainConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------- modality dropout

def sample_modality_mode(policy: DropoutPolicy, rng: np.random.Generator) -> Mode:
    """One categorical draw per batch: video-only, audio-only or audiovisual."""
    u = rng.random()
    if u < policy.p_audio_drop:
        return Mode.VIDEO_ONLY
    if u < policy.p_audio_drop + policy.p_video_drop:
        return Mode.AUDIO_ONLY
    return Mode.AUDIO_VISUAL


@dataclass
class Batch:
    """Consecutive-frame pairs; axis 1 is (t-1, t)."""

    images: np.ndarray  # B x 2 x R x R
    windows: np.ndarray  # B x 2 x 40 x W
    x_av: np.ndarray  # B x 2 x Ks
    x_v: np.ndarray  # B x 2 x Kn
    pose: np.ndarray  # B x 2 x 6
    landmarks: np.ndarray  # B x J x 2, frame t only

    def __len__(self):
        return len(self.images)


def apply_modality_dropout(batch: Batch, mode: Mode) -> Batch:
    """Zero the dropped modality for both frames of every sample."""
    if mode is Mode.AUDIO_VISUAL:
        return batch
    if mode is Mode.AUDIO_ONLY:
        return Batch(np.zeros_like(batch.images), batch.windows, batch.x_av, batch.x_v, batch.pose, batch.landmarks)
    return Batch(batch.images, np.zeros_like(batch.windows), batch.x_av, batch.x_v, batch.pose, batch.landmarks)


# ---------------------------------------------------------------------- losses

@dataclass
class LossBreakdown:
    terms: dict[str, Tensor]
    total: Tensor
    skipped_landmarks: int = 0

    def values(self) -> dict[str, float]:
        out = {k: float(v.data) for k, v in self.terms.items()}
        out["total"] = float(self.total.data)
        return out


LOSS_NAMES = ("L1", "L2", "L3", "L4", "L5", "L6")


class LandmarkProjector:
    """Landmark positions of the rig under given poses, in image-normalized units (pixels / image size)."""

    def __init__(self, model: BlendshapeModel, camera: Camera, k_speech_first: bool = True):
        self.model = model
        self.camera = camera
        self.size = np.asarray(camera.image_size, dtype=np.float64)
        lm = model.landmark_indices
        K = model.n_shapes
        self.B_lm = model.B.reshape(-1, 3, K)[lm]  # J x 3 x K
        self.b0_lm = model.b0[lm]  # J x 3
        # concat(x_av, x_v) column order -> model coefficient order
        order = np.concatenate([model.speech_indices, model.nonspeech_indices])
        self.perm = np.argsort(order)

    def __call__(self, x_av: Tensor, x_v: Tensor, poses: np.ndarray):
        """Return (normalized positions for valid samples, indices of valid samples)."""
        merged = T.take(T.concat([x_av, x_v], axis=-1), self.perm, axis=-1)
        R = np.stack([rotation_matrix(p[:3]) for p in poses])  # N x 3 x 3
        M = np.einsum("nab,jbk->njak", R, self.B_lm).reshape(len(poses), -1, self.model.n_shapes)
        q = (np.einsum("nab,jb->nja", R, self.b0_lm) + poses[:, None, 3:6]).reshape(len(poses), -1)
        pts = T.batched_matvec(M, merged) + T.as_tensor(q.astype(merged.dtype))
        depth = pts.data.reshape(len(poses), -1, 3)[..., 2]
        valid = np.flatnonzero(np.all(depth > 0, axis=1))
        pts = T.reshape(T.take(pts, valid, axis=0), (len(valid), -1, 3))
        f = np.asarray(self.camera.focal) / self.size
        c = np.asarray(self.camera.principal_point) / self.size
        return T.pinhole(pts, f, c), valid

    def normalize(self, pixels: np.ndarray) -> np.ndarray:
        return np.asarray(pixels) / self.size


def compute_losses(out_t: NetOutput, out_tm1: NetOutput, batch: Batch, mode: Mode, w: LossWeights,
                   projector: LandmarkProjector | None) -> LossBreakdown:
    """Six loss terms; with the video dropped, terms 3-6 are exact zeros outside the graph."""
    dt = out_t.x_av.dtype
    tgt = lambda a: a.astype(dt)  # noqa: E731
    L1 = T.mse(out_t.x_av, tgt(batch.x_av[:, 1]))
    L2 = T.mse(out_t.x_av - out_tm1.x_av, tgt(batch.x_av[:, 1] - batch.x_av[:, 0]))
    terms = {"L1": L1, "L2": L2}
    total = w.abs_blend * L1 + w.temp_blend * L2
    skipped = 0
    if mode is Mode.AUDIO_ONLY:
        zero = Tensor(np.zeros((), dt))
        terms.update(L3=zero, L4=zero, L5=zero, L6=zero)
        return LossBreakdown(terms, total, 0)
    L3 = T.mse(out_t.x_v, tgt(batch.x_v[:, 1]))
    L4 = T.mse(out_t.x_v - out_tm1.x_v, tgt(batch.x_v[:, 1] - batch.x_v[:, 0]))
    rot_idx, trans_idx = [0, 1, 2], [3, 4, 5]
    p_t, p_tm1 = out_t.pose, out_tm1.pose
    g_t, g_d = batch.pose[:, 1], batch.pose[:, 1] - batch.pose[:, 0]
    d_pose = p_t - p_tm1
    L5 = (w.pose_rot_abs * T.mse(T.take(p_t, rot_idx), tgt(g_t[:, rot_idx]))
          + w.pose_trans_abs * T.mse(T.take(p_t, trans_idx), tgt(g_t[:, trans_idx]))
          + w.temp_rot * T.mse(T.take(d_pose, rot_idx), tgt(g_d[:, rot_idx]))
          + w.temp_trans * T.mse(T.take(d_pose, trans_idx), tgt(g_d[:, trans_idx])))
    if projector is not None:
        uv, valid = projector(out_t.x_av, out_t.x_v, batch.pose[:, 1])
        skipped = len(batch) - len(valid)
        L6 = T.mse(uv, tgt(projector.normalize(batch.landmarks[valid]))) if len(valid) else Tensor(np.zeros((), dt))
    else:
        L6 = Tensor(np.zeros((), dt))
    terms.update(L3=L3, L4=L4, L5=L5, L6=L6)
    total = total + w.abs_blend * L3 + w.temp_blend * L4 + L5 + w.landmark * L6
    return LossBreakdown(terms, total, skipped)


# ------------------------------------------------------------------------ Adam

@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(p) for k, p in params.items()}, {k: np.zeros_like(p) for k, p in params.items()})


def adam_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update, applied in place to ``params`` and ``state``."""
    state.t += 1
    c1 = 1.0 - beta1 ** state.t
    c2 = 1.0 - beta2 ** state.t
    for k, p in params.items():
        g = grads[k]
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {k} {p.shape}")
        m, v = state.m[k], state.v[k]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(p.dtype)


# --------------------------------------------------------------------- dataset

@dataclass
class SequenceData:
    images: np.ndarray  # T x R x R
    windows: np.ndarray  # T x 40 x W
    x: np.ndarray  # T x K
    pose: np.ndarray  # T x 6
    landmarks: np.ndarray  # T x J x 2


class SequenceDataset:
    """In-memory frames of several sequences, served as (t-1, t) pairs."""

    def __init__(self, sequences: list[SequenceData], model: BlendshapeModel):
        if not sequences:
            raise ValueError("empty dataset")
        self.sequences = sequences
        self.model = model
        self.pairs = np.array([(s, t) for s, seq in enumerate(sequences) for t in range(1, len(seq.x))], dtype=np.int64)
        if len(self.pairs) == 0:
            raise ValueError("sequences too short to form consecutive pairs")

    @classmethod
    def from_synth(cls, seqs, model: BlendshapeModel, net: NetConfig) -> SequenceDataset:
        from .features import context_windows

        data = [SequenceData(s.images.astype(np.float32), context_windows(s.mfb, net.context_mode).astype(np.float32),
                             s.x, s.pose, s.landmarks) for s in seqs]
        return cls(data, model)

    def batch(self, idx: np.ndarray) -> Batch:
        sp, kn = self.model.speech_indices, self.model.nonspeech_indices
        rows = self.pairs[idx]
        imgs, wins, xs, poses, lms = [], [], [], [], []
        for s, t in rows:
            seq = self.sequences[s]
            imgs.append(seq.images[t - 1:t + 1])
            wins.append(seq.windows[t - 1:t + 1])
            xs.append(seq.x[t - 1:t + 1])
            poses.append(seq.pose[t - 1:t + 1])
            lms.append(seq.landmarks[t])
        x = np.array(xs)
        return Batch(np.array(imgs), np.array(wins), x[..., sp], x[..., kn], np.array(poses), np.array(lms))


# ----------------------------------------------------------------------- train

class TrainingDiverged(RuntimeError):
    pass


@dataclass
class TrainResult:
    params: dict[str, np.ndarray]
    log: list[dict]
    config: TrainConfig


def _split(out: NetOutput, n: int) -> tuple[NetOutput, NetOutput]:
    first, second = np.arange(n), np.arange(n, 2 * n)
    pick = lambda t, i: T.take(t, i, axis=0)  # noqa: E731
    return (NetOutput(pick(out.x_av, first), pick(out.x_v, first), pick(out.pose, first)),
            NetOutput(pick(out.x_av, second), pick(out.x_v, second), pick(out.pose, second)))


def step_losses(params: dict[str, Tensor], batch: Batch, mode: Mode, cfg: TrainConfig,
                projector: LandmarkProjector | None) -> LossBreakdown:
    """Forward both frames of every pair under ``mode`` and return the masked losses."""
    batch = apply_modality_dropout(batch, mode)
    n = len(batch)
    images = np.concatenate([batch.images[:, 0], batch.images[:, 1]]).astype(cfg.net.dtype)
    windows = np.concatenate([batch.windows[:, 0], batch.windows[:, 1]]).astype(cfg.net.dtype)
    out_tm1, out_t = _split(forward(images, windows, params, cfg.net), n)
    return compute_losses(out_t, out_tm1, batch, mode, cfg.weights, projector)


def train_step(params: dict[str, Tensor], batch: Batch, mode: Mode, cfg: TrainConfig,
               projector: LandmarkProjector | None) -> LossBreakdown:
    """``step_losses`` followed by backward, leaving gradients on ``params``."""
    losses = step_losses(params, batch, mode, cfg, projector)
    for p in params.values():
        p.zero_grad()
    losses.total.backward()
    return losses


def train(cfg: TrainConfig, dataset: SequenceDataset, camera: Camera | None = None,
          params: dict[str, Tensor] | None = None, progress: bool = False) -> TrainResult:
    """Run ``cfg.iterations`` Adam steps; the RNG draws the batch mode first, then the sample indices."""
    rng = np.random.default_rng(cfg.seed)
    params = params or init_params(cfg.net, cfg.seed)
    projector = LandmarkProjector(dataset.model, camera) if camera is not None else None
    raw = {k: p.data for k, p in params.items()}
    state = AdamState.zeros_like(raw)
    rows = []
    for it in range(cfg.iterations):
        mode = sample_modality_mode(cfg.dropout, rng)
        idx = rng.integers(0, len(dataset.pairs), size=cfg.batch_size)
        losses = train_step(params, dataset.batch(idx), mode, cfg, projector)
        vals = losses.values()
        for name, v in vals.items():
            if not np.isfinite(v):
                raise TrainingDiverged(f"non-finite loss {name} at iteration {it}")
        adam_step(raw, {k: p.grad for k, p in params.items()}, state, cfg.learning_rate)
        rows.append({"iter": it, "mode": mode.value, **vals})
        if progress and it % 100 == 0:
            log.info("iter %d mode %s total %.5f", it, mode.value, vals["total"])
    return TrainResult({k: p.data.copy() for k, p in params.items()}, rows, cfg)


def write_log(path, rows: list[dict]) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["iter", "mode", *LOSS_NAMES, "total"])
        for r in rows:
            wr.writerow([r["iter"], r["mode"]] + [repr(r[k]) for k in (*LOSS_NAMES, "total")])


def save_result(result: TrainResult, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    ckpt, logf = out / "checkpoint.avbf", out / "log.csv"
    io.save_checkpoint(ckpt, result.params, result.config.to_dict())
    write_log(logf, result.log)
    return ckpt, logf


def load_params(path) -> tuple[dict[str, Tensor], TrainConfig]:
    tensors, config = io.load_checkpoint(path)
    cfg = TrainConfig.from_dict(config)
    return {k: Tensor(v, requires_grad=True, name=k) for k, v in tensors.items()}, cfg


def infer_sequence(params, net: NetConfig, images: np.ndarray, windows: np.ndarray, mode: Mode,
                   model: BlendshapeModel) -> dict[str, np.ndarray]:
    """Predicted curves for a whole sequence with the absent modality zeroed."""
    images = np.asarray(images, dtype=net.dtype)
    windows = np.asarray(windows, dtype=net.dtype)
    if mode is Mode.AUDIO_ONLY:
        images = np.zeros_like(images)
    elif mode is Mode.VIDEO_ONLY:
        windows = np.zeros_like(windows)
    out = predict(images, windows, params, net)
    x = np.zeros((len(images), model.n_shapes))
    x[:, model.speech_indices] = out["x_av"]
    x[:, model.nonspeech_indices] = out["x_v"]
    return {"x": x, "pose": out["pose"].astype(np.float64), "x_av": out["x_av"], "x_v": out["x_v"]}
