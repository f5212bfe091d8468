"""Evaluation metrics: curve energy, lip-closure hits and ablation tables."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

CLOSURE_TAU = 0.05
CLOSURE_MIN_RUN = 2


def _std(a: np.ndarray) -> float:
    # exact zero for constant curves, where the mean can round
    return 0.0 if np.all(a == a[0]) else float(a.std())


def energy_ratio(pred, gt) -> float:
    """std(pred) / std(gt), both with 1/N normalization."""
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 1:
        raise ValueError("curves must be 1-D with equal lengths")
    if len(gt) < 2:
        raise ValueError("curves need at least two samples")
    s = _std(gt)
    if s == 0:
        raise ValueError("ground-truth curve has zero variance, energy ratio undefined")
    return _std(pred) / s


def closure_events(curve, tau: float = CLOSURE_TAU, min_run: int = CLOSURE_MIN_RUN) -> list[tuple[int, int]]:
    """Maximal runs [start, stop) of at least ``min_run`` frames below ``tau``."""
    below = np.concatenate([[False], np.asarray(curve) < tau, [False]])
    edges = np.flatnonzero(np.diff(below.astype(np.int8)))
    return [(int(a), int(b)) for a, b in zip(edges[::2], edges[1::2]) if b - a >= min_run]


def _hits(events, others) -> int:
    return sum(any(a < d and c < b for c, d in others) for a, b in events)


def closure_metrics(pred, gt, tau: float = CLOSURE_TAU, min_run: int = CLOSURE_MIN_RUN) -> tuple[float, float]:
    """(recall, precision) of predicted closure events against ground-truth ones, by overlap."""
    pred, gt = np.asarray(pred), np.asarray(gt)
    if pred.shape != gt.shape:
        raise ValueError("curves must have equal lengths")
    pe, ge = closure_events(pred, tau, min_run), closure_events(gt, tau, min_run)
    recall = _hits(ge, pe) / len(ge) if ge else 1.0
    precision = _hits(pe, ge) / len(pe) if pe else 1.0
    return recall, precision


@dataclass
class EvalReport:
    system: str
    mode: str
    mse: np.ndarray  # per coefficient
    energy: np.ndarray  # per coefficient, nan where gt is constant
    closure_recall: float
    closure_precision: float
    speech_mse: float
    extra: dict = field(default_factory=dict)

    def row(self) -> dict:
        r = {"system": self.system, "mode": self.mode, "speech_mse": self.speech_mse,
             "closure_recall": self.closure_recall, "closure_precision": self.closure_precision}
        r.update({f"mse_{k}": float(v) for k, v in enumerate(self.mse)})
        r.update({f"energy_{k}": float(v) for k, v in enumerate(self.energy)})
        return r


def evaluate_curves(system: str, mode: str, preds: list[np.ndarray], gts: list[np.ndarray], speech_idx,
                    jaw: int = 0) -> EvalReport:
    """Metrics over held-out sequences; curves are concatenated in sequence order, closures counted per sequence."""
    P, G = np.concatenate(preds), np.concatenate(gts)
    mse = ((P - G) ** 2).mean(axis=0)
    energy = np.array([energy_ratio(P[:, k], G[:, k]) if G[:, k].std() > 0 else np.nan for k in range(G.shape[1])])
    hit_g = n_g = hit_p = n_p = 0
    for p, g in zip(preds, gts):
        pe, ge = closure_events(p[:, jaw]), closure_events(g[:, jaw])
        hit_g += _hits(ge, pe)
        n_g += len(ge)
        hit_p += _hits(pe, ge)
        n_p += len(pe)
    return EvalReport(system, mode, mse, energy, hit_g / n_g if n_g else 1.0, hit_p / n_p if n_p else 1.0,
                      float(mse[np.asarray(speech_idx)].mean()))


def write_report_csv(path, reports: list[EvalReport]) -> None:
    rows = [r.row() for r in reports]
    keys = list(rows[0]) if rows else ["system", "mode"]
    with open(path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=keys)
        wr.writeheader()
        wr.writerows(rows)


def summarize(reports: list[EvalReport], jaw: int = 0) -> str:
    """Plain-text table ordered by speech-coefficient MSE."""
    lines = [f"{'system':<24}{'mode':<8}{'speech_mse':>12}{'jaw_energy':>12}{'recall':>8}{'precision':>10}"]
    for r in sorted(reports, key=lambda r: r.speech_mse):
        lines.append(f"{r.system:<24}{r.mode:<8}{r.speech_mse:>12.5f}{r.energy[jaw]:>12.3f}"
                     f"{r.closure_recall:>8.2f}{r.closure_precision:>10.2f}")
    return "\n".join(lines)
