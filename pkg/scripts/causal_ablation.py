"""Causal vs non-causal audio context with audio leading the face by a few frames.

    python3 scripts/causal_ablation.py --seeds 0 1 2 3 4 --lag 2 --out runs/causal
"""
import argparse
import csv
from pathlib import Path

from avbf.experiments import ExperimentConfig, causal_contrast, causal_effect_holds
from avbf.trainer import Mode


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    ap.add_argument("--iterations", type=int, default=6000)
    ap.add_argument("--lag", type=int, default=2, help="frames by which audio leads the coefficients")
    ap.add_argument("--out", type=Path, default=Path("runs/causal"))
    args = ap.parse_args()
    exp = ExperimentConfig(iterations=args.iterations)
    args.out.mkdir(parents=True, exist_ok=True)
    rows = []
    for seed in args.seeds:
        c = causal_contrast(seed, exp, audio_lag=args.lag, modes=(Mode.AUDIO_VISUAL, Mode.AUDIO_ONLY))
        for system, by_mode in c.reports.items():
            for mode, r in by_mode.items():
                rows.append({"seed": seed, "lag": args.lag, "system": system, "mode": mode,
                             "speech_mse": r.speech_mse, "jaw_energy": r.energy[0]})
                print(f"seed {seed} {system:<10}{mode:<6} speech MSE {r.speech_mse:.4f}", flush=True)
        print(f"seed {seed}: non-causal {'<=' if causal_effect_holds(c) else '>'} causal", flush=True)
    with open(args.out / "causal_ablation.csv", "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=list(rows[0]))
        wr.writeheader()
        wr.writerows(rows)


if __name__ == "__main__":
    main()
