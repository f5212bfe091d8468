"""Dataset loading, checkpoint evaluation and curve export shared by the CLI and scripts."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .blendshape import BlendshapeModel, Camera, HeadPose, apply_pose, evaluate_mesh, load_model, write_obj
from .features import context_windows
from .metrics import EvalReport, evaluate_curves, summarize, write_report_csv
from .net import NetConfig
from .synth import SynthSequence, camera_from_manifest, load_manifest, read_sequence
from .tensor import Tensor
from .trainer import Mode, SequenceData, SequenceDataset, infer_sequence, load_params


@dataclass
class Dataset:
    root: Path
    model: BlendshapeModel
    camera: Camera
    manifest: dict
    sequences: list[SynthSequence]

    def split(self, holdout: int) -> tuple[list[SynthSequence], list[SynthSequence]]:
        """Training sequences and the last ``holdout`` sequences for evaluation."""
        if holdout < 0 or holdout >= len(self.sequences):
            raise ValueError(f"holdout {holdout} leaves no training sequences out of {len(self.sequences)}")
        cut = len(self.sequences) - holdout
        return self.sequences[:cut], self.sequences[cut:]


def load_dataset(root) -> Dataset:
    root = Path(root)
    if not (root / "manifest.json").exists():
        raise FileNotFoundError(f"{root / 'manifest.json'}")
    manifest = load_manifest(root)
    seqs = [read_sequence(root / s["dir"]) for s in manifest["sequences"]]
    return Dataset(root, load_model(root / "model.json"), camera_from_manifest(manifest), manifest, seqs)


def as_training_data(seqs: list[SynthSequence], net: NetConfig) -> list[SequenceData]:
    return [SequenceData(s.images.astype(np.float32), context_windows(s.mfb, net.context_mode).astype(np.float32),
                         s.x, s.pose, s.landmarks) for s in seqs]


def predict_curves(params, net: NetConfig, seq: SynthSequence, mode: Mode, model: BlendshapeModel) -> dict:
    windows = context_windows(seq.mfb, net.context_mode)
    return infer_sequence(params, net, seq.images, windows, mode, model)


def evaluate_system(name: str, params, net: NetConfig, seqs: list[SynthSequence], model: BlendshapeModel,
                    mode: Mode) -> EvalReport:
    preds = [predict_curves(params, net, s, mode, model)["x"] for s in seqs]
    return evaluate_curves(name, mode.value, preds, [s.x for s in seqs], model.speech_indices)


def ablation_report(checkpoints, seqs: list[SynthSequence], model: BlendshapeModel, modes=(Mode.AUDIO_VISUAL,),
                    out_dir=None) -> tuple[list[EvalReport], str]:
    """Evaluate every checkpoint under every input mode.

    ``checkpoints`` holds paths, ``(name, params, NetConfig)`` triples or
    ``(name, predictor)`` pairs where ``predictor(seq, mode)`` returns a T x K curve array.
    With ``out_dir`` set, ``ablation.csv`` and ``ablation.txt`` are written there.
    """
    reports = []
    for ck in checkpoints:
        if not isinstance(ck, (str, Path)) and len(ck) == 2:
            name, predictor = ck
            for mode in modes:
                preds = [np.asarray(predictor(s, Mode(mode))) for s in seqs]
                reports.append(evaluate_curves(name, Mode(mode).value, preds, [s.x for s in seqs],
                                               model.speech_indices))
            continue
        if isinstance(ck, (str, Path)):
            params, cfg = load_params(ck)
            name, net = Path(ck).parent.name or str(ck), cfg.net
        else:
            name, params, net = ck
            params = {k: v if isinstance(v, Tensor) else Tensor(v) for k, v in params.items()}
        for mode in modes:
            reports.append(evaluate_system(name, params, net, seqs, model, Mode(mode)))
    text = summarize(reports)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_report_csv(out / "ablation.csv", reports)
        (out / "ablation.txt").write_text(text + "\n")
    return reports, text


def make_dataset(seqs: list[SynthSequence], model: BlendshapeModel, net: NetConfig) -> SequenceDataset:
    return SequenceDataset(as_training_data(seqs, net), model)


def export_obj_sequence(model: BlendshapeModel, x: np.ndarray, out_dir, poses: np.ndarray | None = None) -> list[Path]:
    """One OBJ per frame of the coefficient curves, optionally posed."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[1] != model.n_shapes:
        raise ValueError(f"curves have {x.shape[1]} coefficients, model has {model.n_shapes}")
    paths = []
    for t, xt in enumerate(x):
        v = evaluate_mesh(model, xt)
        if poses is not None:
            v = apply_pose(v, HeadPose.from_vector(poses[t]))
        p = out / f"frame_{t:05d}.obj"
        write_obj(p, v, model.faces)
        paths.append(p)
    return paths
