"""Acceptance suite: one test per criterion, each recording a PASS/FAIL summary line.

Criteria 5 and 9 train ten desk-scale networks each and take the longest; they are
marked ``slow`` and can be deselected with ``-m "not slow"``.
"""
import json
import time

import numpy as np
import pytest

from avbf.blendshape import BlendshapeModel, HeadPose, NONSPEECH, SPEECH, apply_pose, evaluate_mesh
from avbf.cli import main
from avbf.experiments import (
    ExperimentConfig,
    causal_contrast,
    causal_effect_holds,
    dropout_contrast,
    dropout_effect_holds,
)
from avbf.fitting import DepthObservation, FitWeights, fit_objective, fit_sequence, solve_coefficients
from avbf.net import NetConfig, gradient_check, init_params, predict, trace_shapes
from avbf.synth import SynthConfig, default_camera, generate_model, generate_sequence
from avbf.trainer import (
    DropoutPolicy,
    LandmarkProjector,
    Mode,
    SequenceDataset,
    TrainConfig,
    sample_modality_mode,
    step_losses,
    train_step,
)

SEEDS = range(5)
# the lag contrast separates well before the dropout contrast does
CAUSAL_ITERATIONS = 6000

TABLE_VIDEO = [(63, 63, 64), (31, 31, 128), (15, 15, 128), (7, 7, 256), (3, 3, 256), (1, 1, 256)]
TABLE_AUDIO = [({19, 10}, 32), ({17, 8}, 64), ({15, 6}, 64), ({13, 4}, 64)]


# ------------------------------------------------------------------ 1

def test_criterion_1_architecture_shapes(criterion):
    t0 = time.perf_counter()
    cfg = NetConfig()
    shapes = trace_shapes(cfg)
    out = predict(np.zeros((1, cfg.resolution, cfg.resolution)), np.zeros((1, 40, cfg.context_mode.width)),
                  init_params(cfg, 0), cfg)
    elapsed = time.perf_counter() - t0
    audio = shapes["audio"]
    ok = (shapes["video"] == TABLE_VIDEO
          and all(set(s[:2]) == hw and s[2] == c for s, (hw, c) in zip(audio[:4], TABLE_AUDIO))
          and audio[4] == (256,)
          and out["x_av"].shape == (1, 6)
          and elapsed < 10.0)
    criterion(1, "full-scale tensor extents", ok, f"{elapsed:.2f}s")
    assert ok


# ------------------------------------------------------------------ 2

LAYER_TYPES = {"video conv": "video.conv", "audio conv": "audio.conv", "audio dense": "audio.dense",
               "fusion": "fusion.", "heads": ("nonspeech.", "pose.")}


def test_criterion_2_gradient_check(small_corpus, criterion):
    t0 = time.perf_counter()
    model, cam, seqs = small_corpus
    cfg = TrainConfig(net=NetConfig.desk(dtype="float64"))
    ds = SequenceDataset.from_synth(seqs, model, cfg.net)
    batch = ds.batch(np.array([0, 7, 20, 45]))
    proj = LandmarkProjector(model, cam)
    params = init_params(cfg.net, 3)
    # biases start at zero, which puts every background pixel exactly on a ReLU kink
    rng = np.random.default_rng(1)
    for k, p in params.items():
        if k.endswith(".b"):
            p.data[...] = rng.normal(scale=0.05, size=p.shape)

    def loss(q):
        return step_losses(q, batch, Mode.AUDIO_VISUAL, cfg, proj).total

    stats = {}
    errs = gradient_check(loss, params, epsilon=1e-4, per_tensor=100, stats=stats)
    checked = {t: sum(stats[k]["checked"] for k in params if k.startswith(pre)) for t, pre in LAYER_TYPES.items()}
    kinks = sum(v["kinks"] for v in stats.values())
    worst = max(errs.values())
    # fault injection: a 1% gradient error must be caught
    control = max(gradient_check(loss, params, epsilon=1e-4, per_tensor=5, corrupt=0.01).values())
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-4 and min(checked.values()) >= 100 and control > 1e-3 and elapsed < 120
    criterion(2, "desk-scale finite-difference gradients", ok,
              f"max rel err {worst:.2e}, min checked per layer type {min(checked.values())}, "
              f"{kinks} kink-straddling samples replaced, corrupted control {control:.1e}, {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 3

def random_instance(rng):
    V, K = int(rng.integers(6, 21)), int(rng.integers(1, 6))
    b0 = rng.normal(size=(V, 3)) * 0.5 + [0, 0, 4]
    B = rng.normal(size=(3 * V, K)) * 0.3
    roles = tuple(SPEECH if k % 2 == 0 else NONSPEECH for k in range(K))
    model = BlendshapeModel(b0, B, roles, [0])
    pose = HeadPose(rng.normal(scale=0.2, size=3), rng.normal(scale=0.1, size=3))
    normals = rng.normal(size=(V, 3))
    normals /= np.linalg.norm(normals, axis=1, keepdims=True)
    target = apply_pose(evaluate_mesh(model, rng.uniform(-0.3, 1.3, size=K)), pose)
    obs = DepthObservation(target + 0.05 * rng.normal(size=(V, 3)), normals, np.arange(V))
    return model, pose, obs


def projected_gradient_oracle(model, pose, obs, w: FitWeights, iters=50_000):
    """Accelerated projected gradient on w_d * |A x + c|^2 + w_r * sum(x) over [0, 1]^K."""
    R = pose.matrix()
    K = model.n_shapes
    Bv = model.B.reshape(-1, 3, K)
    A = np.einsum("ni,ij,njk->nk", obs.normals, R, Bv)
    c = np.einsum("ni,ni->n", obs.normals, model.b0 @ R.T + pose.translation - obs.points)
    L = 2 * w.w_d * np.linalg.eigvalsh(A.T @ A).max() + 1e-12
    x = y = np.zeros(K)
    s = 1.0
    for _ in range(iters):
        g = 2 * w.w_d * A.T @ (A @ y + c) + w.w_r
        x_new = np.clip(y - g / L, 0.0, 1.0)
        s_new = 0.5 * (1 + np.sqrt(1 + 4 * s * s))
        y = x_new + (s - 1) / s_new * (x_new - x)
        x, s = x_new, s_new
    return x, w.w_d * float(np.sum((A @ x + c) ** 2)) + w.w_r * float(x.sum())


def test_criterion_3_solver_optimality(criterion):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2024)
    gaps, monotone = [], True
    for _ in range(50):
        model, pose, obs = random_instance(rng)
        w = FitWeights(1.0, 0.0, float(rng.uniform(0.0, 0.5)))
        res = solve_coefficients(model, pose, obs, None, None, w, max_sweeps=5000, tol=1e-12)
        monotone &= bool(np.all(np.diff(res.history) <= 0.0))
        _, f_star = projected_gradient_oracle(model, pose, obs, w)
        f_gs = fit_objective(model, res.x, pose, obs, None, None, w)
        gaps.append(abs(f_gs - f_star))
    elapsed = time.perf_counter() - t0
    ok = max(gaps) <= 1e-6 and monotone and elapsed < 60
    criterion(3, "Gauss-Seidel vs projected-gradient oracle", ok,
              f"max |gap| {max(gaps):.1e} over 50 instances, monotone={monotone}, {elapsed:.1f}s")
    assert ok


# ------------------------------------------------------------------ 4

def _geodesic(a: HeadPose, b: HeadPose) -> float:
    M = a.matrix() @ b.matrix().T
    return float(np.arccos(np.clip((np.trace(M) - 1) / 2, -1.0, 1.0)))


def _round_trip(sigma_depth):
    cfg = SynthConfig(seed=21, T=100, n_sequences=1, sigma_depth=sigma_depth)
    model, cam = generate_model(cfg), default_camera()
    seq = generate_sequence(model, cfg, 0, cam)
    res = fit_sequence(model, seq.frames(), cam)
    mae = float(np.abs(np.array([r.x for r in res]) - seq.x).mean())
    rot = float(np.mean([_geodesic(r.pose, HeadPose.from_vector(p)) for r, p in zip(res, seq.pose)]))
    return mae, rot


def test_criterion_4_ground_truth_round_trip(criterion):
    t0 = time.perf_counter()
    mae, rot = _round_trip(0.0)
    mae_noisy, _ = _round_trip(0.005)
    elapsed = time.perf_counter() - t0
    ok = mae <= 0.02 and rot <= 1e-3 and mae_noisy <= 0.05 and elapsed < 120
    criterion(4, "fit_sequence round trip over 100 frames", ok,
              f"MAE {mae:.4f}, rotation {rot:.1e} rad, noisy MAE {mae_noisy:.4f}, {elapsed:.0f}s")
    assert ok


# ------------------------------------------------------------------ 5

@pytest.mark.slow
def test_criterion_5_modality_dropout_effect(criterion):
    exp = ExperimentConfig()
    passes, details = 0, []
    for seed in SEEDS:
        t0 = time.perf_counter()
        c = dropout_contrast(seed, exp)
        d, n = c.reports["dropout"]["audio"], c.reports["no_dropout"]["audio"]
        held = dropout_effect_holds(c)
        passes += held
        details.append(f"seed {seed}: energy {d.energy[0]:.2f} vs {n.energy[0]:.2f}, "
                       f"recall {d.closure_recall:.2f} vs {n.closure_recall:.2f}, {time.perf_counter() - t0:.0f}s")
        print(details[-1], flush=True)
    ok = passes >= 4
    criterion(5, "dropout raises audio-only jaw energy x2 and closure recall", ok,
              f"{passes}/5 seeds; " + "; ".join(details))
    assert ok


# ------------------------------------------------------------------ 6

def test_criterion_6_audio_only_masking(small_corpus, criterion):
    model, cam, seqs = small_corpus
    cfg = TrainConfig(net=NetConfig.desk(dtype="float64"))
    ds = SequenceDataset.from_synth(seqs, model, cfg.net)
    proj = LandmarkProjector(model, cam)
    rng = np.random.default_rng(0)
    ok = True
    for trial in range(10):
        params = init_params(cfg.net, trial)
        loss = train_step(params, ds.batch(rng.integers(0, len(ds.pairs), size=8)), Mode.AUDIO_ONLY, cfg, proj)
        vals = loss.values()
        ok &= all(vals[k] == 0.0 for k in ("L3", "L4", "L5", "L6"))
        ok &= all(np.all(params[k].grad == 0.0) for k in ("nonspeech.w", "nonspeech.b", "pose.w", "pose.b"))
        ok &= vals["L1"] > 0.0
    criterion(6, "AudioOnly losses 3-6 and video-head gradients bitwise zero", ok, "10 random batches")
    assert ok


# ------------------------------------------------------------------ 7

def _max_z(policy, n, seed):
    """Largest binomial z-score over the three modes, and the raw counts."""
    rng = np.random.default_rng(seed)
    counts = {m: 0 for m in Mode}
    for _ in range(n):
        counts[sample_modality_mode(policy, rng)] += 1
    probs = {Mode.VIDEO_ONLY: policy.p_audio_drop, Mode.AUDIO_ONLY: policy.p_video_drop,
             Mode.AUDIO_VISUAL: 1 - policy.p_audio_drop - policy.p_video_drop}
    z = 0.0
    for m, p in probs.items():
        if 0 < p < 1:
            z = max(z, abs(counts[m] - n * p) / np.sqrt(n * p * (1 - p)))
        elif counts[m] != round(n * p):
            z = np.inf  # a degenerate mode must be hit never or always
    return z, counts


def test_criterion_7_dropout_sampling(criterion):
    n = 100_000
    worst, av_at_half = 0.0, None
    for seed, pa in enumerate((0.25, 0.4, 0.5)):
        z, counts = _max_z(DropoutPolicy(pa, 0.5), n, seed)
        worst = max(worst, z)
        if pa == 0.5:
            av_at_half = counts[Mode.AUDIO_VISUAL]
    ok = worst <= 3.0 and av_at_half == 0
    criterion(7, "mode frequencies within 3 sigma", ok, f"max |z| {worst:.2f}, AV batches at (0.5, 0.5): {av_at_half}")
    assert ok


# ------------------------------------------------------------------ 8

def test_criterion_8_determinism(tmp_path, criterion):
    (tmp_path / "synth.json").write_text(json.dumps({"T": 30, "n_sequences": 3}))
    (tmp_path / "train.json").write_text(json.dumps({"iterations": 25, "batch_size": 8}))
    assert main(["synth", "--config", str(tmp_path / "synth.json"), "--seed", "3", "--out", str(tmp_path / "d")]) == 0
    for run in ("a", "b"):
        assert main(["train", "--config", str(tmp_path / "train.json"), "--seed", "7", "--data", str(tmp_path / "d"),
                     "--out", str(tmp_path / run)]) == 0
    same = {f: (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
            for f in ("log.csv", "checkpoint.avbf")}
    ok = all(same.values())
    criterion(8, "identical train runs are bit-identical", ok, ", ".join(f"{k} {'same' if v else 'differs'}"
                                                                       for k, v in same.items()))
    assert ok


# ------------------------------------------------------------------ 9

@pytest.mark.slow
def test_criterion_9_causal_context(criterion):
    exp = ExperimentConfig(iterations=CAUSAL_ITERATIONS)
    passes, details = 0, []
    for seed in SEEDS:
        t0 = time.perf_counter()
        c = causal_contrast(seed, exp)
        nc, ca = c.reports["noncausal"]["av"].speech_mse, c.reports["causal"]["av"].speech_mse
        passes += causal_effect_holds(c)
        details.append(f"seed {seed}: {nc:.4f} vs {ca:.4f}, {time.perf_counter() - t0:.0f}s")
        print(details[-1], flush=True)
    ok = passes >= 4
    criterion(9, "non-causal speech MSE <= causal with audio leading by 2 frames", ok,
              f"{passes}/5 seeds; " + "; ".join(details))
    assert ok
