"""Command line entry point: ``avbf <synth|fit|train|infer|eval|export>``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from . import io
from .blendshape import load_model
from .fitting import FitSchedule, FitWeights, fit_sequence, read_curves_csv, write_curves_csv
from .harness import ablation_report, export_obj_sequence, load_dataset, make_dataset, predict_curves
from .synth import SynthConfig, generate_dataset
from .trainer import Mode, TrainConfig, TrainingDiverged, load_params, save_result, train

log = logging.getLogger("avbf")

MODES = {"av": Mode.AUDIO_VISUAL, "video": Mode.VIDEO_ONLY, "audio": Mode.AUDIO_ONLY}


def _read_json(path) -> dict:
    if path is None:
        return {}
    return json.loads(Path(path).read_text())


def _synth_config(args) -> SynthConfig:
    d = _read_json(args.config)
    known = {f.name for f in fields(SynthConfig)}
    unknown = set(d) - known
    if unknown:
        raise ValueError(f"unknown synth config keys: {sorted(unknown)}")
    if args.seed is not None:
        d["seed"] = args.seed
    return SynthConfig(**d)


def _train_config(args) -> TrainConfig:
    d = _read_json(args.config)
    if args.seed is not None:
        d["seed"] = args.seed
    if args.iterations is not None:
        d["iterations"] = args.iterations
    cfg = TrainConfig.from_dict(d)
    if args.causal:
        cfg.net.causal = True
    return cfg


def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    out = generate_dataset(cfg, args.out)
    print(f"wrote {cfg.n_sequences} sequences to {out}")
    return 0


def cmd_fit(args) -> int:
    data = load_dataset(args.data)
    seq = data.sequences[args.sequence]
    frames = seq.frames()[: args.frames] if args.frames else seq.frames()
    d = _read_json(args.config)
    w = FitWeights(**d.get("weights", {}))
    schedule = FitSchedule(**d.get("schedule", {}))
    results = fit_sequence(data.model, frames, data.camera, w, schedule)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"fit_seq{args.sequence:04d}.csv"
    write_curves_csv(path, results)
    mae = float(np.mean(np.abs(np.array([r.x for r in results]) - seq.x[: len(results)])))
    print(f"wrote {path} ({len(results)} frames, coefficient MAE vs ground truth {mae:.5f})")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    data = load_dataset(args.data)
    train_seqs, _ = data.split(args.holdout)
    result = train(cfg, make_dataset(train_seqs, data.model, cfg.net), data.camera, progress=True)
    ckpt, logf = save_result(result, args.out)
    print(f"wrote {ckpt} and {logf}; final total loss {result.log[-1]['total'] if result.log else float('nan'):.6f}")
    return 0


def _write_pred_csv(path, x: np.ndarray, pose: np.ndarray) -> None:
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["frame", "converged", "objective", "rx", "ry", "rz", "tx", "ty", "tz"]
                    + [f"x_{k}" for k in range(x.shape[1])])
        for t in range(len(x)):
            wr.writerow([t, 1, "nan"] + [repr(float(v)) for v in pose[t]] + [repr(float(v)) for v in x[t]])


def cmd_infer(args) -> int:
    params, cfg = load_params(args.checkpoint)
    if args.causal and not cfg.net.causal:
        raise ValueError("checkpoint was trained with non-causal context")
    data = load_dataset(args.data)
    seq = data.sequences[args.sequence]
    mode_name = args.mode or "av"
    mode = MODES[mode_name]
    pred = predict_curves(params, cfg.net, seq, mode, data.model)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"infer_seq{args.sequence:04d}_{mode_name}.csv"
    # outputs are unconstrained; curves leave the tool clamped to the rig's range
    _write_pred_csv(path, np.clip(pred["x"], 0.0, 1.0), pred["pose"])
    print(f"wrote {path}")
    return 0


def cmd_eval(args) -> int:
    data = load_dataset(args.data)
    _, held = data.split(args.holdout)
    modes = [MODES[args.mode]] if args.mode else list(MODES.values())
    _, text = ablation_report(args.checkpoint, held, data.model, modes, args.out)
    print(text)
    return 0


def cmd_export(args) -> int:
    model = load_model(args.model)
    x, pose = read_curves_csv(args.curves)
    paths = export_obj_sequence(model, np.clip(x, 0.0, 1.0), args.out, pose if args.posed else None)
    print(f"wrote {len(paths)} OBJ files to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="avbf", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default):
        sp.add_argument("--config", type=Path, help="JSON config file")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out", type=Path, default=Path(out_default))
        sp.add_argument("--mode", choices=list(MODES), help="input mode for infer/eval; ignored elsewhere")
        sp.add_argument("--causal", action="store_true", help="past-only audio context (train, infer)")
        sp.add_argument("-v", "--verbose", action="store_true")
        return sp

    common(sub.add_parser("synth", help="generate a synthetic dataset"), "data").set_defaults(fn=cmd_synth)

    sp = common(sub.add_parser("fit", help="fit coefficients and pose to a sequence's observations"), "fit")
    sp.add_argument("--data", type=Path, default=Path("data"))
    sp.add_argument("--sequence", type=int, default=0)
    sp.add_argument("--frames", type=int, help="fit only the first N frames")
    sp.set_defaults(fn=cmd_fit)

    sp = common(sub.add_parser("train", help="train the audiovisual network"), "run")
    sp.add_argument("--data", type=Path, default=Path("data"))
    sp.add_argument("--iterations", type=int)
    sp.add_argument("--holdout", type=int, default=1, help="sequences held out from training")
    sp.set_defaults(fn=cmd_train)

    sp = common(sub.add_parser("infer", help="predict curves for a sequence"), "infer")
    sp.add_argument("--data", type=Path, default=Path("data"))
    sp.add_argument("--checkpoint", type=Path, required=True)
    sp.add_argument("--sequence", type=int, default=0)
    sp.set_defaults(fn=cmd_infer)

    sp = common(sub.add_parser("eval", help="ablation table over checkpoints and input modes"), "eval")
    sp.add_argument("--data", type=Path, default=Path("data"))
    sp.add_argument("--checkpoint", type=Path, nargs="+", required=True)
    sp.add_argument("--holdout", type=int, default=1)
    sp.set_defaults(fn=cmd_eval)

    sp = common(sub.add_parser("export", help="write an OBJ sequence from curves"), "export")
    sp.add_argument("--curves", type=Path, required=True)
    sp.add_argument("--model", type=Path, required=True)
    sp.add_argument("--posed", action="store_true", help="apply the pose columns")
    sp.set_defaults(fn=cmd_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"avbf: error: missing file: {exc.filename or exc}", file=sys.stderr)
        return 2
    except io.FormatError as exc:
        print(f"avbf: error: bad file format: {exc}", file=sys.stderr)
        return 3
    except TrainingDiverged as exc:
        print(f"avbf: error: training diverged: {exc}", file=sys.stderr)
        return 5
    except (ValueError, TypeError, KeyError, IndexError, json.JSONDecodeError) as exc:
        print(f"avbf: error: invalid configuration: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
