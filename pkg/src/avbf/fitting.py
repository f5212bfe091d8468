"""Offline coefficient extraction: point-plane ICP followed by an L1 Gauss-Seidel solve.

The per-frame objective is

    w_d * sum_i (n_i . (v_i(x) - p_i))^2 + w_l * sum_j |proj(v_j(x)) - u_j|^2 + w_r * |x|_1

with ``x`` boxed to [0, 1]. Depth residuals are linear in ``x``; the landmark term is
linearised once per sweep and every sweep is guarded so the true objective never rises.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

from .blendshape import (
    BehindCameraError,
    BlendshapeModel,
    Camera,
    HeadPose,
    apply_pose,
    evaluate_mesh,
    project,
    rotation_matrix,
    rotation_vector,
)

log = logging.getLogger(__name__)


class SingularConfigurationError(ValueError):
    def __init__(self, rank: int):
        super().__init__(f"point-plane system is rank deficient (rank {rank} < 6)")
        self.rank = rank


@dataclass(frozen=True)
class DepthObservation:
    points: np.ndarray
    normals: np.ndarray
    vertex_index: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        n = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
        if p.shape[0] < 1 or p.shape != n.shape:
            raise ValueError("need matching, non-empty point and normal arrays")
        if np.any(np.abs(np.linalg.norm(n, axis=1) - 1.0) > 1e-6):
            raise ValueError("normals must be unit length")
        object.__setattr__(self, "points", p)
        object.__setattr__(self, "normals", n)
        if self.vertex_index is not None:
            idx = np.asarray(self.vertex_index, dtype=np.int64).reshape(-1)
            if idx.shape[0] != p.shape[0]:
                raise ValueError("one correspondence hint per point")
            object.__setattr__(self, "vertex_index", idx)


@dataclass(frozen=True)
class LandmarkObservation:
    uv: np.ndarray
    visibility: np.ndarray | None = None

    def __post_init__(self):
        uv = np.asarray(self.uv, dtype=np.float64).reshape(-1, 2)
        vis = np.ones(uv.shape[0], bool) if self.visibility is None else np.asarray(self.visibility, bool)
        if vis.shape != (uv.shape[0],):
            raise ValueError("one visibility flag per landmark")
        object.__setattr__(self, "uv", uv)
        object.__setattr__(self, "visibility", vis)

    def check_bounds(self, camera: Camera) -> None:
        w, h = camera.image_size
        v = self.uv[self.visibility]
        if np.any(v < 0) or np.any(v[:, 0] > w) or np.any(v[:, 1] > h):
            raise ValueError("visible landmark outside the image")


@dataclass(frozen=True)
class FitWeights:
    w_d: float = 1.0
    w_l: float = 0.001
    w_r: float = 0.05

    def __post_init__(self):
        if min(self.w_d, self.w_l, self.w_r) < 0:
            raise ValueError("fit weights must be nonnegative")
        if self.w_d <= 0 and self.w_l <= 0:
            raise ValueError("one of w_d, w_l must be positive")


@dataclass
class FitResult:
    x: np.ndarray
    pose: HeadPose
    objective: float
    iterations: int
    converged: bool
    history: list[float] = field(default_factory=list)
    error: str | None = None


@dataclass(frozen=True)
class FitSchedule:
    icp_iters: int = 30
    icp_tol: float = 1e-10
    max_sweeps: int = 200
    tol: float = 1e-6
    # max ICP + coefficient passes per frame; stops early once both settle
    alternations: int = 20


def correspondences(vertices: np.ndarray, obs: DepthObservation) -> np.ndarray:
    """Vertex index matched to each observed point (hint if present, else nearest vertex)."""
    if obs.vertex_index is not None:
        return obs.vertex_index
    _, idx = cKDTree(vertices).query(obs.points)
    return np.asarray(idx, dtype=np.int64)


# ------------------------------------------------------------------------ ICP

def rigid_align_icp(
    model: BlendshapeModel,
    x_init,
    obs: DepthObservation,
    pose_init: HeadPose | None = None,
    max_iters: int = 30,
    tol: float = 1e-10,
    history: list | None = None,
) -> HeadPose:
    """Point-plane ICP of the mesh at ``x_init`` onto the observed cloud.

    Each iteration re-matches points to vertices and solves the small-angle 6x6
    normal equations; the update is composed on the left of the current pose.
    """
    if obs.points.shape[0] < 6:
        raise ValueError("ICP needs at least 6 observed points")
    mesh = evaluate_mesh(model, x_init)
    pose = pose_init or HeadPose()
    R, t = pose.matrix(), pose.translation.copy()
    for _ in range(max_iters):
        posed = mesh @ R.T + t
        idx = correspondences(posed, obs)
        q, n, p = posed[idx], obs.normals, obs.points
        A = np.hstack([np.cross(q, n), n])
        b = -np.einsum("ij,ij->i", n, q - p)
        AtA = A.T @ A
        rank = np.linalg.matrix_rank(AtA, tol=1e-10 * max(1.0, np.abs(AtA).max()))
        if rank < 6:
            raise SingularConfigurationError(int(rank))
        delta = np.linalg.solve(AtA, A.T @ b)
        dR = rotation_matrix(delta[:3])
        R = dR @ R
        t = dR @ t + delta[3:]
        if history is not None:
            history.append(HeadPose(_rotvec(R), t.copy()))
        if np.linalg.norm(delta) < tol:
            break
    return HeadPose(_rotvec(R), t)


def _rotvec(R: np.ndarray) -> np.ndarray:
    # re-orthonormalise to keep accumulated round-off out of the angle
    u, _, vt = np.linalg.svd(R)
    return rotation_vector(u @ vt)


# --------------------------------------------------------------------- losses

def depth_loss(model, x, pose: HeadPose, obs: DepthObservation, corr=None) -> float:
    posed = apply_pose(evaluate_mesh(model, x), pose)
    idx = correspondences(posed, obs) if corr is None else corr
    r = np.einsum("ij,ij->i", obs.normals, posed[idx] - obs.points)
    return float(r @ r)


def landmark_loss(model, x, pose: HeadPose, camera: Camera, lm: LandmarkObservation) -> float:
    if not lm.visibility.any():
        return 0.0
    posed = apply_pose(evaluate_mesh(model, x), pose)[model.landmark_indices]
    uv = project(posed, camera)
    d = (uv - lm.uv)[lm.visibility]
    return float(np.sum(d * d))


def fit_objective(model, x, pose, obs, lm, camera, w: FitWeights, corr=None) -> float:
    f = 0.0
    if w.w_d > 0 and obs is not None:
        f += w.w_d * depth_loss(model, x, pose, obs, corr)
    if w.w_l > 0 and lm is not None:
        f += w.w_l * landmark_loss(model, x, pose, camera, lm)
    return f + w.w_r * float(np.sum(np.abs(x)))


# --------------------------------------------------------------------- solver

def _quadratic_model(model, x0, pose, obs, lm, camera, w, corr):
    """Hessian and gradient of the smooth part, exact for depth and Gauss-Newton for landmarks."""
    K = model.n_shapes
    R = pose.matrix()
    H = np.zeros((K, K))
    g = np.zeros(K)
    if w.w_d > 0 and obs is not None:
        Bv = model.B.reshape(-1, 3, K)[corr]                       # N x 3 x K
        A = np.einsum("ni,ij,njk->nk", obs.normals, R, Bv)
        posed = apply_pose(evaluate_mesh(model, x0), pose)[corr]
        r = np.einsum("ij,ij->i", obs.normals, posed - obs.points)
        H += 2 * w.w_d * A.T @ A
        g += 2 * w.w_d * A.T @ r
    if w.w_l > 0 and lm is not None and lm.visibility.any():
        idx = model.landmark_indices[lm.visibility]
        p = apply_pose(evaluate_mesh(model, x0), pose)[idx]
        if np.any(p[:, 2] <= 0):
            raise BehindCameraError("landmark vertex behind camera")
        fx, fy = camera.focal
        z = p[:, 2]
        Jp = np.zeros((len(idx), 2, 3))
        Jp[:, 0, 0] = fx / z
        Jp[:, 0, 2] = -fx * p[:, 0] / z**2
        Jp[:, 1, 1] = fy / z
        Jp[:, 1, 2] = -fy * p[:, 1] / z**2
        dp = np.einsum("ij,njk->nik", R, model.B.reshape(-1, 3, K)[idx])
        J = np.einsum("nab,nbk->nak", Jp, dp).reshape(-1, K)
        e = (project(p, camera) - lm.uv[lm.visibility]).reshape(-1)
        H += 2 * w.w_l * J.T @ J
        g += 2 * w.w_l * J.T @ e
    return H, g


def solve_coefficients(
    model: BlendshapeModel,
    pose: HeadPose,
    obs: DepthObservation | None,
    lm: LandmarkObservation | None,
    camera: Camera | None,
    w: FitWeights = FitWeights(),
    x_init=None,
    max_sweeps: int = 200,
    tol: float = 1e-6,
) -> FitResult:
    """Cyclic coordinate descent with per-coordinate soft-thresholding and box clamping."""
    K = model.n_shapes
    x = np.zeros(K) if x_init is None else np.clip(np.asarray(x_init, dtype=np.float64), 0.0, 1.0).copy()
    if x.shape != (K,):
        raise ValueError("x_init has the wrong length")
    if lm is not None and w.w_l > 0 and camera is None:
        raise ValueError("landmark term needs a camera")
    corr = None
    if obs is not None:
        corr = correspondences(apply_pose(evaluate_mesh(model, x), pose), obs)

    def objective(z):
        return fit_objective(model, z, pose, obs, lm, camera, w, corr)

    f = objective(x)
    history = [f]
    converged = False
    stalled = False
    sweeps = 0
    for sweeps in range(1, max_sweeps + 1):
        H, g0 = _quadratic_model(model, x, pose, obs, lm, camera, w, corr)
        x_old = x.copy()
        z = x.copy()
        grad = g0.copy()
        stalled = False
        for k in range(K):
            hkk = H[k, k]
            if hkk <= 0.0:
                if grad[k] != 0.0:
                    stalled = True
                    continue
                new = 0.0 if w.w_r > 0 else z[k]
            else:
                u = z[k] - grad[k] / hkk
                new = np.sign(u) * max(abs(u) - w.w_r / hkk, 0.0)
                new = min(max(new, 0.0), 1.0)
            step = new - z[k]
            if step != 0.0:
                grad += H[:, k] * step
                z[k] = new
        f_new = objective(z)
        # the landmark term is only locally quadratic: backtrack toward x_old if needed
        alpha = 1.0
        while f_new > f and alpha > 1e-8:
            alpha *= 0.5
            f_new = objective(x_old + alpha * (z - x_old))
        if f_new > f:
            f_new, z = f, x_old
        else:
            z = x_old + alpha * (z - x_old)
        x = z
        f = f_new
        history.append(f)
        if np.max(np.abs(x - x_old)) < tol:
            converged = not stalled
            break
    return FitResult(x=x, pose=pose, objective=float(f), iterations=sweeps,
                     converged=converged, history=history)


def fit_frame(model, obs, lm, camera, w, x_prev, pose_prev, schedule: FitSchedule = FitSchedule()) -> FitResult:
    x, pose = np.asarray(x_prev, dtype=np.float64), pose_prev
    res = None
    for _ in range(max(1, schedule.alternations)):
        new_pose = rigid_align_icp(model, x, obs, pose, schedule.icp_iters, schedule.icp_tol)
        res = solve_coefficients(model, new_pose, obs, lm, camera, w, x, schedule.max_sweeps, schedule.tol)
        settled = (np.max(np.abs(res.x - x)) < schedule.tol
                   and np.max(np.abs(new_pose.as_vector() - pose.as_vector())) < schedule.tol)
        x, pose = res.x, new_pose
        if settled:
            break
    return res


def fit_sequence(
    model: BlendshapeModel,
    frames,
    camera: Camera,
    w: FitWeights = FitWeights(),
    schedule: FitSchedule = FitSchedule(),
) -> list[FitResult]:
    """Fit every (depth, landmarks) frame, warm-starting pose and coefficients from the previous one."""
    frames = list(frames)
    if not frames:
        raise ValueError("need at least one frame")
    x = np.zeros(model.n_shapes)
    pose = HeadPose()
    results = []
    for t, (obs, lm) in enumerate(frames):
        try:
            res = fit_frame(model, obs, lm, camera, w, x, pose, schedule)
        except (ValueError, np.linalg.LinAlgError) as exc:
            log.warning("frame %d failed: %s", t, exc)
            results.append(FitResult(x=x.copy(), pose=pose, objective=float("nan"),
                                     iterations=0, converged=False, error=str(exc)))
            continue
        x, pose = res.x, res.pose
        results.append(res)
    return results


CSV_HEADER = ["frame", "converged", "objective", "rx", "ry", "rz", "tx", "ty", "tz"]


def write_curves_csv(path, results: list[FitResult]) -> None:
    K = len(results[0].x) if results else 0
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(CSV_HEADER + [f"x_{k}" for k in range(K)])
        for t, r in enumerate(results):
            wr.writerow([t, int(r.converged), repr(float(r.objective))]
                        + [repr(float(v)) for v in r.pose.as_vector()]
                        + [repr(float(v)) for v in r.x])


def read_curves_csv(path) -> tuple[np.ndarray, np.ndarray]:
    """Return (coefficients T x K, poses T x 6) from a curves CSV."""
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows:
        return np.zeros((0, 0)), np.zeros((0, 6))
    K = sum(1 for c in rows[0] if c.startswith("x_"))
    x = np.array([[float(r[f"x_{k}"]) for k in range(K)] for r in rows])
    pose = np.array([[float(r[c]) for c in CSV_HEADER[3:9]] for r in rows])
    return x, pose
