"""Desk-scale ablations: modality dropout on/off and causal vs non-causal audio context.

Both experiments train a pair of networks that differ in one setting, with the same
seed, corpus and schedule, and evaluate them on held-out synthetic sequences.
"""
from __future__ import annotations

from dataclasses import dataclass, field

from .blendshape import BlendshapeModel, Camera
from .harness import evaluate_system, make_dataset
from .metrics import EvalReport
from .net import NetConfig
from .synth import SynthConfig, SynthSequence, default_camera, generate_model, generate_sequence
from .tensor import Tensor
from .trainer import DropoutPolicy, Mode, TrainConfig, train


@dataclass(frozen=True)
class ExperimentConfig:
    n_train: int = 8
    n_test: int = 2
    iterations: int = 15000
    learning_rate: float = 1e-3
    batch_size: int = 32

    def __post_init__(self):
        if self.n_train < 1 or self.n_test < 1 or self.iterations < 0:
            raise ValueError("need at least one training and one test sequence")


@dataclass
class Corpus:
    model: BlendshapeModel
    camera: Camera
    train: list[SynthSequence]
    test: list[SynthSequence]


@dataclass
class Contrast:
    """Held-out reports of two systems, keyed by system name then mode value."""
    seed: int
    reports: dict[str, dict[str, EvalReport]] = field(default_factory=dict)


def make_corpus(seed: int, exp: ExperimentConfig, **synth_overrides) -> Corpus:
    cfg = SynthConfig(seed=seed, n_sequences=exp.n_train + exp.n_test, **synth_overrides)
    model, cam = generate_model(cfg), default_camera()
    seqs = [generate_sequence(model, cfg, i, cam) for i in range(cfg.n_sequences)]
    return Corpus(model, cam, seqs[: exp.n_train], seqs[exp.n_train:])


def _train_and_evaluate(corpus: Corpus, net: NetConfig, policy: DropoutPolicy, seed: int, exp: ExperimentConfig,
                        modes) -> dict[str, EvalReport]:
    cfg = TrainConfig(learning_rate=exp.learning_rate, batch_size=exp.batch_size, iterations=exp.iterations,
                      seed=seed, dropout=policy, net=net)
    result = train(cfg, make_dataset(corpus.train, corpus.model, net), corpus.camera)
    params = {k: Tensor(v) for k, v in result.params.items()}
    return {m.value: evaluate_system("", params, net, corpus.test, corpus.model, m) for m in modes}


def dropout_contrast(seed: int, exp: ExperimentConfig = ExperimentConfig(),
                     modes=(Mode.AUDIO_ONLY,)) -> Contrast:
    """(0.4, 0.5) dropout against no dropout on the default synthetic set."""
    corpus = make_corpus(seed, exp)
    out = Contrast(seed)
    for name, policy in (("dropout", DropoutPolicy(0.4, 0.5)), ("no_dropout", DropoutPolicy(0.0, 0.0))):
        out.reports[name] = _train_and_evaluate(corpus, NetConfig.desk(), policy, seed, exp, modes)
    return out


def causal_contrast(seed: int, exp: ExperimentConfig = ExperimentConfig(), audio_lag: int = 2,
                    modes=(Mode.AUDIO_VISUAL,)) -> Contrast:
    """Non-causal (past and future) against causal (past only) audio windows, audio leading by ``audio_lag``."""
    corpus = make_corpus(seed, exp, audio_lag=audio_lag)
    out = Contrast(seed)
    for name, causal in (("noncausal", False), ("causal", True)):
        out.reports[name] = _train_and_evaluate(corpus, NetConfig.desk(causal=causal), DropoutPolicy(), seed, exp,
                                                modes)
    return out


def dropout_effect_holds(c: Contrast, energy_factor: float = 2.0, jaw: int = 0) -> bool:
    d, n = c.reports["dropout"]["audio"], c.reports["no_dropout"]["audio"]
    return bool(d.energy[jaw] >= energy_factor * n.energy[jaw] and d.closure_recall > n.closure_recall)


def causal_effect_holds(c: Contrast) -> bool:
    return bool(c.reports["noncausal"]["av"].speech_mse <= c.reports["causal"]["av"].speech_mse)
