"""Linear blendshape rig, rigid pose, pinhole camera and coefficient partition."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SPEECH = "speech"
NONSPEECH = "nonspeech"


class BehindCameraError(ValueError):
    """A point with non-positive depth was projected."""


@dataclass(frozen=True)
class BlendshapeModel:
    """Neutral mesh ``b0`` (V x 3) plus a (3V x K) matrix of additive deltas."""

    b0: np.ndarray
    B: np.ndarray
    roles: tuple[str, ...]
    landmark_indices: np.ndarray
    name: str = "model"
    shape_names: tuple[str, ...] = ()
    faces: np.ndarray | None = None

    def __post_init__(self):
        b0 = np.asarray(self.b0, dtype=np.float64)
        B = np.asarray(self.B, dtype=np.float64)
        lm = np.asarray(self.landmark_indices, dtype=np.int64)
        object.__setattr__(self, "b0", b0)
        object.__setattr__(self, "B", B)
        object.__setattr__(self, "landmark_indices", lm)
        object.__setattr__(self, "roles", tuple(self.roles))
        if not self.shape_names:
            object.__setattr__(self, "shape_names", tuple(f"shape_{k}" for k in range(B.shape[1] if B.ndim == 2 else 0)))
        for arr in (b0, B):
            arr.setflags(write=False)
        validate_model(self)

    @property
    def n_vertices(self) -> int:
        return self.b0.shape[0]

    @property
    def n_shapes(self) -> int:
        return self.B.shape[1]

    @property
    def speech_indices(self) -> np.ndarray:
        return np.array([k for k, r in enumerate(self.roles) if r == SPEECH], dtype=np.int64)

    @property
    def nonspeech_indices(self) -> np.ndarray:
        return np.array([k for k, r in enumerate(self.roles) if r == NONSPEECH], dtype=np.int64)

    def delta(self, k: int) -> np.ndarray:
        """Blendshape ``k`` as a V x 3 displacement field."""
        return self.B[:, k].reshape(-1, 3)


def validate_model(model: BlendshapeModel) -> None:
    b0, B = model.b0, model.B
    if b0.ndim != 2 or b0.shape[1] != 3:
        raise ValueError(f"b0 must be V x 3, got {b0.shape}")
    V = b0.shape[0]
    if V < 4:
        raise ValueError(f"need at least 4 vertices, got {V}")
    if B.ndim != 2 or B.shape[0] != 3 * V:
        raise ValueError(f"B must be {3 * V} x K, got {B.shape}")
    K = B.shape[1]
    if K < 1:
        raise ValueError("need at least one blendshape")
    if len(model.roles) != K:
        raise ValueError(f"partition covers {len(model.roles)} indices, expected {K}")
    bad = [r for r in model.roles if r not in (SPEECH, NONSPEECH)]
    if bad:
        raise ValueError(f"unknown roles {bad}")
    if K >= 2 and (SPEECH not in model.roles or NONSPEECH not in model.roles):
        raise ValueError("partition needs at least one speech and one nonspeech shape")
    lm = model.landmark_indices
    if lm.ndim != 1 or lm.size < 1:
        raise ValueError("need at least one landmark index")
    if lm.min() < 0 or lm.max() >= V:
        raise ValueError("landmark index out of range")
    if np.unique(lm).size != lm.size:
        raise ValueError("duplicate landmark indices")
    if not (np.all(np.isfinite(b0)) and np.all(np.isfinite(B))):
        raise ValueError("model contains non-finite values")


@dataclass(frozen=True)
class HeadPose:
    """Axis-angle rotation (radians) and translation."""

    rotation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if not (np.all(np.isfinite(r)) and np.all(np.isfinite(t))):
            raise ValueError("pose must be finite")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)

    @classmethod
    def from_vector(cls, v) -> HeadPose:
        v = np.asarray(v, dtype=np.float64)
        return cls(v[:3], v[3:6])

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.rotation, self.translation])

    def matrix(self) -> np.ndarray:
        return rotation_matrix(self.rotation)


@dataclass(frozen=True)
class Camera:
    focal: tuple[float, float]
    principal_point: tuple[float, float]
    image_size: tuple[int, int]

    def __post_init__(self):
        f = np.asarray(self.focal, dtype=np.float64)
        pp = np.asarray(self.principal_point, dtype=np.float64)
        size = np.asarray(self.image_size, dtype=np.float64)
        if np.any(f <= 0):
            raise ValueError("focal lengths must be positive")
        if np.any(pp < 0) or np.any(pp > size):
            raise ValueError("principal point outside the image")

    def scaled(self, factor: float) -> Camera:
        """Same field of view on an image ``factor`` times the size."""
        return Camera(
            tuple(float(f) * factor for f in self.focal),
            tuple(float(p) * factor for p in self.principal_point),
            tuple(int(round(s * factor)) for s in self.image_size),
        )


def rotation_matrix(rotvec) -> np.ndarray:
    """Rodrigues formula for an axis-angle vector."""
    r = np.asarray(rotvec, dtype=np.float64)
    theta = np.linalg.norm(r)
    if theta < 1e-12:
        K = _skew(r)
        return np.eye(3) + K
    k = r / theta
    K = _skew(k)
    return np.eye(3) + np.sin(theta) * K + (1.0 - np.cos(theta)) * (K @ K)


def rotation_vector(R: np.ndarray) -> np.ndarray:
    """Inverse of :func:`rotation_matrix` for angles below pi."""
    cos = np.clip((np.trace(R) - 1.0) / 2.0, -1.0, 1.0)
    theta = np.arccos(cos)
    w = np.array([R[2, 1] - R[1, 2], R[0, 2] - R[2, 0], R[1, 0] - R[0, 1]])
    if theta < 1e-8:
        return 0.5 * w
    return theta / (2.0 * np.sin(theta)) * w


def _skew(v) -> np.ndarray:
    return np.array([[0.0, -v[2], v[1]], [v[2], 0.0, -v[0]], [-v[1], v[0], 0.0]])


def evaluate_mesh(model: BlendshapeModel, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape != (model.n_shapes,):
        raise ValueError(f"expected {model.n_shapes} coefficients, got shape {x.shape}")
    return model.b0 + (model.B @ x).reshape(-1, 3)


def apply_pose(vertices, pose: HeadPose) -> np.ndarray:
    v = np.asarray(vertices, dtype=np.float64)
    if not np.all(np.isfinite(v)):
        raise ValueError("non-finite vertices")
    return v @ pose.matrix().T + pose.translation


def project(point, camera: Camera) -> np.ndarray:
    """Pinhole projection of one point (3,) or many points (N, 3) to pixels."""
    p = np.asarray(point, dtype=np.float64)
    z = p[..., 2]
    if np.any(z <= 0):
        raise BehindCameraError("point behind camera (non-positive depth)")
    return np.asarray(camera.focal) * (p[..., :2] / z[..., None]) + np.asarray(camera.principal_point)


def partition_coefficients(model: BlendshapeModel, x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != model.n_shapes:
        raise ValueError("coefficient length does not match model")
    return x[..., model.speech_indices], x[..., model.nonspeech_indices]


def merge_coefficients(model: BlendshapeModel, x_av, x_v) -> np.ndarray:
    x_av = np.asarray(x_av, dtype=np.float64)
    x_v = np.asarray(x_v, dtype=np.float64)
    out = np.zeros(x_av.shape[:-1] + (model.n_shapes,))
    out[..., model.speech_indices] = x_av
    out[..., model.nonspeech_indices] = x_v
    return out


def vertex_normals(vertices: np.ndarray, faces: np.ndarray | None = None) -> np.ndarray:
    """Area-weighted vertex normals; without faces, radial directions from the centroid."""
    v = np.asarray(vertices, dtype=np.float64)
    if faces is None:
        n = v - v.mean(axis=0)
    else:
        f = np.asarray(faces)
        fn = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
        n = np.zeros_like(v)
        for c in range(3):
            np.add.at(n, f[:, c], fn)
    return n / np.linalg.norm(n, axis=1, keepdims=True)


# ---------------------------------------------------------------- file formats

def model_to_dict(model: BlendshapeModel) -> dict:
    d = {
        "name": model.name,
        "vertices": model.b0.tolist(),
        "blendshapes": [
            {"name": model.shape_names[k], "role": model.roles[k], "delta": model.delta(k).tolist()}
            for k in range(model.n_shapes)
        ],
        "landmark_indices": model.landmark_indices.tolist(),
    }
    if model.faces is not None:
        d["faces"] = np.asarray(model.faces).tolist()
    return d


def model_from_dict(d: dict) -> BlendshapeModel:
    b0 = np.asarray(d["vertices"], dtype=np.float64)
    shapes = d["blendshapes"]
    B = np.stack([np.asarray(s["delta"], dtype=np.float64).reshape(-1) for s in shapes], axis=1)
    faces = np.asarray(d["faces"], dtype=np.int64) if d.get("faces") is not None else None
    return BlendshapeModel(
        b0=b0,
        B=B,
        roles=tuple(s["role"] for s in shapes),
        landmark_indices=np.asarray(d["landmark_indices"], dtype=np.int64),
        name=d.get("name", "model"),
        shape_names=tuple(s.get("name", f"shape_{k}") for k, s in enumerate(shapes)),
        faces=faces,
    )


def save_model(model: BlendshapeModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model)))


def load_model(path) -> BlendshapeModel:
    return model_from_dict(json.loads(Path(path).read_text()))


def write_obj(path, vertices: np.ndarray, faces: np.ndarray | None = None) -> None:
    lines = [f"v {x:.6f} {y:.6f} {z:.6f}" for x, y, z in np.asarray(vertices)]
    if faces is not None:
        lines += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in np.asarray(faces)]
    Path(path).write_text("\n".join(lines) + "\n")


def read_obj(path) -> tuple[np.ndarray, np.ndarray | None]:
    verts, faces = [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(p) for p in parts[1:4]])
        elif parts[0] == "f":
            faces.append([int(p.split("/")[0]) - 1 for p in parts[1:4]])
    return np.array(verts), (np.array(faces) if faces else None)
