"""Synthetic corpus with known ground truth: rig, trajectories, renders and MFB features."""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter1d
from scipy.spatial import ConvexHull

from . import io
from .blendshape import (
    NONSPEECH,
    SPEECH,
    BlendshapeModel,
    Camera,
    HeadPose,
    apply_pose,
    evaluate_mesh,
    project,
    save_model,
    vertex_normals,
)
from .features import N_MELS
from .fitting import DepthObservation, LandmarkObservation

JAW = 0
HEAD_DEPTH = 4.0
CLOSURE_ATTENUATION = -2.0
# per-band nuisance amplitude; calibrated so av_redundancy roughly equals the linear R2 of jaw-open from MFB
BAND_NUISANCE = 3.0
# the jaw moves the whole lower face
JAW_RADIUS_SCALE = 1.75
MOUTH = np.array([0.0, -0.45, -0.85])


@dataclass
class SynthConfig:
    seed: int = 0
    V: int = 200
    k_speech: int = 6
    k_nonspeech: int = 4
    J: int = 16
    T: int = 300
    n_sequences: int = 8
    closure_rate: float = 4.0  # expected closures per 100 frames
    av_redundancy: float = 0.8
    sigma_depth: float = 0.0
    sigma_landmark: float = 0.0
    sigma_audio: float = 0.05
    sigma_image: float = 0.02
    nuisance: bool = True
    # MFB at frame t is driven by coefficients at t - audio_lag
    audio_lag: int = 0
    depth_fraction: float = 1.0
    image_resolution: int = 32
    shape_amplitude: float = 0.5
    shape_radius: float = 0.2
    normal_fraction: float = 0.3

    def __post_init__(self):
        counts = (self.V, self.k_speech, self.k_nonspeech, self.J, self.T)
        if min(counts) <= 0 or self.n_sequences < 0:
            raise ValueError("synth counts must be positive")
        if not 0.0 <= self.av_redundancy <= 1.0:
            raise ValueError("av_redundancy must lie in [0, 1]")
        if self.closure_rate < 0:
            raise ValueError("closure_rate must be nonnegative")

    @property
    def K(self) -> int:
        return self.k_speech + self.k_nonspeech

    def to_dict(self) -> dict:
        return asdict(self)


def default_camera() -> Camera:
    return Camera(focal=(600.0, 600.0), principal_point=(240.0, 240.0), image_size=(480, 480))


def _rng(cfg: SynthConfig, *stream: int) -> np.random.Generator:
    return np.random.default_rng([cfg.seed, *stream])


# -------------------------------------------------------------------- the rig

def _fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([np.cos(theta) * np.sin(phi), np.cos(phi), np.sin(theta) * np.sin(phi)], axis=1)


# (direction, amplitude, width) of radial bumps that break the sphere's rotational symmetry
_FEATURES = (
    ((0.0, -0.05, -1.0), 0.7, 0.18),    # nose
    ((0.0, 0.35, -0.94), 0.25, 0.25),   # brow ridge
    ((0.0, -0.75, -0.66), 0.3, 0.25),   # chin
    ((-0.6, -0.3, -0.75), 0.2, 0.2),    # cheeks
    ((0.6, -0.3, -0.75), 0.2, 0.2),
    ((1.0, 0.0, 0.1), 0.45, 0.18),      # ears
    ((-1.0, 0.0, 0.1), 0.45, 0.18),
    ((0.0, 0.6, 0.8), 0.35, 0.4),       # back of the skull
    ((0.7, 0.7, 0.0), 0.25, 0.25),
    ((0.0, 1.0, 0.0), 0.2, 0.3),
)


def _head_radius(dirs: np.ndarray) -> np.ndarray:
    r = np.ones(len(dirs))
    for d, amp, width in _FEATURES:
        d = np.asarray(d) / np.linalg.norm(d)
        ang = np.arccos(np.clip(dirs @ d, -1.0, 1.0))
        r += amp * np.exp(-ang ** 2 / (2 * width ** 2))
    return r


def generate_model(cfg: SynthConfig) -> BlendshapeModel:
    """Ellipsoidal head facing -z (toward the camera) with localized Gaussian-bump blendshapes.

    Shape 0 is jaw-open: a downward (-y) field around the chin. Speech shapes sit on the
    lower face, non-speech shapes on the upper face.
    """
    rng = _rng(cfg, 1)
    sphere = _fibonacci_sphere(cfg.V)
    faces = ConvexHull(sphere).simplices
    # consistent outward winding
    fn = np.cross(sphere[faces[:, 1]] - sphere[faces[:, 0]], sphere[faces[:, 2]] - sphere[faces[:, 0]])
    flip = np.einsum("ij,ij->i", fn, sphere[faces].mean(axis=1)) < 0
    faces[flip] = faces[flip][:, ::-1]
    b0 = sphere * _head_radius(sphere)[:, None] * np.array([0.8, 1.0, 0.9])
    normals = vertex_normals(b0, faces)
    front = b0[:, 2] < -0.2

    chin = np.array([0.0, -0.75, -0.55])
    centres = [chin]

    def centre(lower: bool):
        # farthest-point pick keeps blendshape supports apart
        pool = np.flatnonzero((b0[:, 2] < -0.5) & ((b0[:, 1] < -0.1) if lower else (b0[:, 1] > 0.1)))
        gap = np.min(np.linalg.norm(b0[pool, None] - np.array(centres)[None], axis=2), axis=1)
        best = pool[gap >= np.sort(gap)[-3]]
        c = b0[rng.choice(best)]
        centres.append(c)
        return c

    K = cfg.K
    B = np.zeros((3 * cfg.V, K))
    roles, names = [], []
    for k in range(K):
        speech = k < cfg.k_speech
        c = chin if k == JAW else centre(lower=speech)
        radius = JAW_RADIUS_SCALE * cfg.shape_radius if k == JAW else cfg.shape_radius
        d2 = np.sum((b0 - c) ** 2, axis=1)
        w = np.exp(-d2 / (2 * radius ** 2))
        w[d2 > (2.5 * radius) ** 2] = 0.0
        if k == JAW:
            field_ = np.tile([0.0, -1.0, 0.0], (cfg.V, 1))
        else:
            # mostly image-plane motion with a smaller out-of-surface component
            a = rng.uniform(0, 2 * np.pi)
            field_ = np.array([np.cos(a), np.sin(a), 0.0]) + cfg.normal_fraction * rng.choice([-1.0, 1.0]) * normals
            field_ /= np.linalg.norm(field_, axis=1, keepdims=True)
        delta = cfg.shape_amplitude * w[:, None] * field_
        B[:, k] = delta.reshape(-1)
        roles.append(SPEECH if speech else NONSPEECH)
        names.append("jaw_open" if k == JAW else f"{'speech' if speech else 'face'}_{k}")
    # landmarks: front vertices whose image-plane motion is largest, round-robin over shapes
    energy = np.linalg.norm(B.reshape(cfg.V, 3, K)[:, :2], axis=1)
    energy[~front] = -1.0
    order: list[int] = []
    for k in range(min(K, cfg.J)):
        e = energy[:, k].copy()
        e[order] = -1.0
        order.append(int(np.argmax(e)))
    total_energy = energy.sum(axis=1)
    total_energy[order] = -np.inf
    order += [int(i) for i in np.argsort(-total_energy)[: cfg.J - len(order)]]
    return BlendshapeModel(b0=b0, B=B, roles=tuple(roles), landmark_indices=np.array(order[: cfg.J]),
                           name=f"synth_{cfg.seed}", shape_names=tuple(names), faces=faces)


# ----------------------------------------------------------------- trajectories

@dataclass
class Trajectory:
    x: np.ndarray  # T x K
    pose: np.ndarray  # T x 6
    closures: list[tuple[int, int]] = field(default_factory=list)  # (start, length)

    @property
    def closure_mask(self) -> np.ndarray:
        m = np.zeros(len(self.x), bool)
        for s, n in self.closures:
            m[s:s + n] = True
        return m


def _smooth_noise(rng, T, dims, sigma):
    z = gaussian_filter1d(rng.normal(size=(T + 8 * int(sigma) + 8, dims)), sigma, axis=0, mode="wrap")
    z = z[4 * int(sigma) + 4: 4 * int(sigma) + 4 + T]
    # unit marginal variance: divide by the filter's L2 norm rather than a sample std
    impulse = np.zeros(8 * int(sigma) + 9)
    impulse[len(impulse) // 2] = 1.0
    return z / np.linalg.norm(gaussian_filter1d(impulse, sigma))


def _closure_events(rng, T: int, rate: float) -> list[tuple[int, int]]:
    n = rng.poisson(rate * T / 100.0)
    events = []
    for s in np.sort(rng.integers(0, T, size=n)):
        length = int(rng.integers(3, 9))
        s = int(s)
        if events and s < events[-1][0] + events[-1][1] + 2:
            s = events[-1][0] + events[-1][1] + 2
        length = min(length, T - s)
        if length >= 3:
            events.append((s, length))
    return events


def generate_trajectory(cfg: SynthConfig, rng: np.random.Generator) -> Trajectory:
    T, K = cfg.T, cfg.K
    x = np.empty((T, K))
    zs = _smooth_noise(rng, T, cfg.k_speech, 3.0)
    zn = _smooth_noise(rng, T, max(cfg.k_nonspeech, 1), 8.0)
    x[:, :cfg.k_speech] = 1.0 / (1.0 + np.exp(-1.5 * zs))
    x[:, cfg.k_speech:] = 1.0 / (1.0 + np.exp(-1.5 * zn[:, :cfg.k_nonspeech] + 0.5))
    # jaw stays clear of the closure threshold except during closures
    x[:, JAW] = 0.15 + 0.85 * x[:, JAW]
    closures = _closure_events(rng, T, cfg.closure_rate)
    for s, n in closures:
        x[s:s + n, JAW] = 0.0
    x = np.clip(x, 0.0, 1.0)
    rot = 0.12 * _smooth_noise(rng, T, 3, 20.0)
    norms = np.linalg.norm(rot, axis=1, keepdims=True)
    rot = np.where(norms > 0.3, rot * 0.3 / np.maximum(norms, 1e-12), rot)
    trans = 0.05 * _smooth_noise(rng, T, 3, 20.0) + np.array([0.0, 0.0, HEAD_DEPTH])
    return Trajectory(x=x, pose=np.hstack([rot, trans]), closures=closures)


# --------------------------------------------------------------------- renders

def render_image(posed: np.ndarray, normals: np.ndarray, albedo: np.ndarray, camera: Camera,
                 resolution: int, spacing: float = 0.25) -> np.ndarray:
    """Painter's-order (far to near) Gaussian point splats of the posed mesh, values in [0, 1].

    Splat width follows the projected vertex ``spacing`` so the surface renders without holes.
    """
    cam = camera.scaled(resolution / camera.image_size[0])
    uv = project(posed, cam)
    shade = albedo * np.clip(-normals[:, 2], 0.0, 1.0)
    sigmas = np.maximum(0.6 * spacing * cam.focal[0] / posed[:, 2], 0.5)
    img = np.zeros((resolution, resolution))
    for i in np.argsort(-posed[:, 2]):
        if normals[i, 2] >= 0:
            continue  # back-facing
        u, v = uv[i]
        sigma = sigmas[i]
        rad = int(np.ceil(2.5 * sigma))
        cu, cv = int(round(u)), int(round(v))
        u0, u1 = max(cu - rad, 0), min(cu + rad + 1, resolution)
        v0, v1 = max(cv - rad, 0), min(cv + rad + 1, resolution)
        if u0 >= u1 or v0 >= v1:
            continue
        gu = np.arange(u0, u1) - u
        gv = np.arange(v0, v1) - v
        a = np.exp(-(gv[:, None] ** 2 + gu[None, :] ** 2) / (2 * sigma ** 2))
        patch = img[v0:v1, u0:u1]
        img[v0:v1, u0:u1] = patch * (1 - a) + a * shade[i]
    return np.clip(img, 0.0, 1.0)


def _mean_edge(model: BlendshapeModel) -> float:
    if model.faces is None:
        return float(np.sqrt(4 * np.pi / model.n_vertices))
    f = np.asarray(model.faces)
    e = model.b0[f] - model.b0[np.roll(f, 1, axis=1)]
    return float(np.linalg.norm(e, axis=-1).mean())


def _albedo(model: BlendshapeModel) -> np.ndarray:
    b = model.b0
    base = 0.55 + 0.45 * np.sin(7.0 * b[:, 0]) * np.cos(5.0 * b[:, 1])
    # dark lips, so mouth motion shows in the image
    lips = np.exp(-np.sum(((b - MOUTH) / [0.35, 0.12, 0.35]) ** 2, axis=1))
    return base * (1.0 - 0.9 * lips)


def render_observations(model: BlendshapeModel, x, pose: HeadPose, cfg: SynthConfig, rng: np.random.Generator,
                        camera: Camera | None = None):
    """Depth cloud with normals, projected landmarks and a grayscale image of one frame."""
    camera = camera or default_camera()
    mesh = evaluate_mesh(model, x)
    posed = apply_pose(mesh, pose)
    R = pose.matrix()
    n_neutral = vertex_normals(model.b0, model.faces) @ R.T
    V = model.n_vertices
    if cfg.depth_fraction >= 1.0:
        idx = np.arange(V)
    else:
        idx = np.sort(rng.choice(V, size=max(6, int(round(cfg.depth_fraction * V))), replace=False))
    pts = posed[idx]
    if cfg.sigma_depth > 0:
        pts = pts + cfg.sigma_depth * rng.normal(size=pts.shape)
    depth = DepthObservation(pts, n_neutral[idx], idx)
    uv = project(posed[model.landmark_indices], camera)
    if cfg.sigma_landmark > 0:
        uv = uv + cfg.sigma_landmark * rng.normal(size=uv.shape)
    landmarks = LandmarkObservation(uv)
    n_posed = vertex_normals(mesh, model.faces) @ R.T
    image = render_image(posed, n_posed, _albedo(model), camera, cfg.image_resolution, _mean_edge(model))
    if cfg.sigma_image > 0:
        image = np.clip(image + cfg.sigma_image * rng.normal(size=image.shape), 0.0, 1.0)
    return depth, landmarks, image


# ----------------------------------------------------------------------- audio

def mixing_matrix(cfg: SynthConfig) -> np.ndarray:
    rng = _rng(cfg, 2)
    return rng.normal(size=(N_MELS, cfg.k_speech)) * (1.6 / np.sqrt(cfg.k_speech))


def synth_audio(x_speech, cfg: SynthConfig, rng: np.random.Generator, closure_mask=None) -> np.ndarray:
    """MFB stream: rho * tanh(A x) + (1 - rho) * nuisance + white noise, attenuated at lip closures.

    The nuisance has a loudness component shared by all bands (so it competes with the
    closure attenuation) and a per-band component.
    """
    xs = np.asarray(x_speech, dtype=np.float64)
    T = len(xs)
    mask = np.zeros(T, bool) if closure_mask is None else np.asarray(closure_mask, bool)
    lag = cfg.audio_lag
    if lag:
        src = np.clip(np.arange(T) - lag, 0, T - 1)
        xs, mask = xs[src], mask[src]
    A = mixing_matrix(cfg)
    rho = cfg.av_redundancy
    mfb = rho * np.tanh((xs - 0.5) @ A.T)
    if cfg.nuisance:
        gain = 2.5 * _smooth_noise(rng, T, 1, 6.0)
        bands = BAND_NUISANCE * _smooth_noise(rng, T, N_MELS, 3.0)
        mfb = mfb + (1.0 - rho) * (gain + bands)
    if cfg.sigma_audio > 0:
        mfb = mfb + cfg.sigma_audio * rng.normal(size=mfb.shape)
    mfb[mask] += CLOSURE_ATTENUATION
    return mfb


# ---------------------------------------------------------------------- corpus

@dataclass
class SynthSequence:
    x: np.ndarray  # T x K
    pose: np.ndarray  # T x 6
    depth: list  # DepthObservation per frame
    landmarks: np.ndarray  # T x J x 2
    images: np.ndarray  # T x R x R
    mfb: np.ndarray  # T x 40
    closures: list = field(default_factory=list)

    def frames(self):
        return [(d, LandmarkObservation(u)) for d, u in zip(self.depth, self.landmarks)]


def generate_sequence(model: BlendshapeModel, cfg: SynthConfig, index: int,
                      camera: Camera | None = None) -> SynthSequence:
    rng = _rng(cfg, 100, index)
    traj = generate_trajectory(cfg, rng)
    depth, lms, imgs = [], [], []
    for t in range(cfg.T):
        d, lm, img = render_observations(model, traj.x[t], HeadPose.from_vector(traj.pose[t]), cfg, rng, camera)
        depth.append(d)
        lms.append(lm.uv)
        imgs.append(img)
    speech = traj.x[:, model.speech_indices]
    mfb = synth_audio(speech, cfg, rng, traj.closure_mask)
    return SynthSequence(traj.x, traj.pose, depth, np.array(lms), np.array(imgs), mfb, traj.closures)


def _depth_array(depth: list) -> np.ndarray:
    # pad to a common point count; padding rows carry vertex index -1
    n = max(d.points.shape[0] for d in depth)
    out = np.zeros((len(depth), n, 7))
    out[:, :, 6] = -1
    for t, d in enumerate(depth):
        m = d.points.shape[0]
        out[t, :m, :3] = d.points
        out[t, :m, 3:6] = d.normals
        out[t, :m, 6] = d.vertex_index if d.vertex_index is not None else -1
    return out


def depth_from_array(arr: np.ndarray) -> list:
    frames = []
    for row in arr:
        keep = ~np.all(row[:, 3:6] == 0, axis=1)
        idx = row[keep, 6].astype(np.int64)
        frames.append(DepthObservation(row[keep, :3], row[keep, 3:6], idx if np.all(idx >= 0) else None))
    return frames


SEQ_FILES = ("coeffs", "pose", "depth", "landmarks", "images", "mfb")


def write_sequence(seq: SynthSequence, directory) -> dict[str, str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    arrays = {
        "coeffs": seq.x,
        "pose": seq.pose,
        "depth": _depth_array(seq.depth),
        "landmarks": seq.landmarks,
        "images": seq.images.astype(np.float32),
        "mfb": seq.mfb,
    }
    sums = {}
    for name, arr in arrays.items():
        blob = io.encode_tensor(arr)
        (d / f"{name}.bin").write_bytes(blob)
        sums[name] = hashlib.sha256(blob).hexdigest()
    return sums


def read_sequence(directory) -> SynthSequence:
    d = Path(directory)
    a = {n: io.load_tensor(d / f"{n}.bin") for n in SEQ_FILES}
    jaw = a["coeffs"][:, JAW]
    return SynthSequence(a["coeffs"], a["pose"], depth_from_array(a["depth"]), a["landmarks"],
                         a["images"], a["mfb"], _zero_runs(jaw))


def _zero_runs(curve) -> list[tuple[int, int]]:
    runs, start = [], None
    for t, v in enumerate(np.append(curve, 1.0)):
        if v == 0.0 and start is None:
            start = t
        elif v != 0.0 and start is not None:
            runs.append((start, t - start))
            start = None
    return runs


def generate_dataset(cfg: SynthConfig, out_dir, camera: Camera | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    camera = camera or default_camera()
    model = generate_model(cfg)
    save_model(model, out / "model.json")
    seqs = []
    for i in range(cfg.n_sequences):
        seq = generate_sequence(model, cfg, i, camera)
        sums = write_sequence(seq, out / f"seq_{i:04d}")
        seqs.append({"id": i, "dir": f"seq_{i:04d}", "frames": cfg.T, "closures": [list(c) for c in seq.closures],
                     "sha256": sums})
    manifest = {
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "camera": {"focal": list(camera.focal), "principal_point": list(camera.principal_point),
                   "image_size": list(camera.image_size)},
        "frames": cfg.n_sequences * cfg.T,
        "sequences": seqs,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def load_manifest(directory) -> dict:
    return json.loads((Path(directory) / "manifest.json").read_text())


def camera_from_manifest(manifest: dict) -> Camera:
    c = manifest["camera"]
    return Camera(tuple(c["focal"]), tuple(c["principal_point"]), tuple(c["image_size"]))
