"""Modality-dropout ablation on the synthetic corpus.

Trains a (0.4, 0.5) dropout network and a no-dropout network per seed and reports
audio-only jaw-open energy and closure recall on held-out sequences.

    python3 scripts/dropout_ablation.py --seeds 0 1 2 3 4 --out runs/dropout
"""
import argparse
import csv
from pathlib import Path

from avbf.experiments import ExperimentConfig, dropout_contrast, dropout_effect_holds
from avbf.trainer import Mode


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--iterations", type=int, default=ExperimentConfig.iterations)
    ap.add_argument("--n-train", type=int, default=ExperimentConfig.n_train)
    ap.add_argument("--out", type=Path, default=Path("runs/dropout"))
    args = ap.parse_args()
    exp = ExperimentConfig(n_train=args.n_train, iterations=args.iterations)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        c = dropout_contrast(seed, exp, modes=(Mode.AUDIO_VISUAL, Mode.VIDEO_ONLY, Mode.AUDIO_ONLY))
        for system, by_mode in c.reports.items():
            for mode, r in by_mode.items():
                rows.append({"seed": seed, "system": system, "mode": mode, "jaw_energy": r.energy[0],
                             "closure_recall": r.closure_recall, "closure_precision": r.closure_precision,
                             "speech_mse": r.speech_mse})
                print(f"seed {seed} {system:<11}{mode:<6} energy {r.energy[0]:.3f} recall {r.closure_recall:.2f} "
                      f"precision {r.closure_precision:.2f} speech MSE {r.speech_mse:.4f}", flush=True)
        print(f"seed {seed}: dropout effect {'holds' if dropout_effect_holds(c) else 'does not hold'}", flush=True)
    with open(args.out / "dropout_ablation.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


if __name__ == "__main__":
    main()
