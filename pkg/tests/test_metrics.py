import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from avbf.harness import ablation_report
from avbf.metrics import closure_events, closure_metrics, energy_ratio, evaluate_curves
from avbf.trainer import Mode

curves = arrays(np.float64, st.integers(4, 60), elements=st.floats(-5, 5, allow_nan=False))


def open_curve(n=80):
    return np.full(n, 0.5)


def test_energy_ratio_identity_and_constant():
    g = np.sin(np.linspace(0, 6, 50))
    assert energy_ratio(g, g) == pytest.approx(1.0)
    assert energy_ratio(np.full(50, 0.3), g) == 0.0


def test_energy_ratio_half_deviation():
    g = np.random.default_rng(0).uniform(size=40)
    assert energy_ratio(0.5 * (g - g.mean()) + g.mean(), g) == pytest.approx(0.5)


def test_energy_ratio_uses_population_std():
    assert energy_ratio(np.array([0.0, 2.0]), np.array([0.0, 1.0])) == pytest.approx(2.0)


def test_energy_ratio_errors():
    with pytest.raises(ValueError, match="zero variance"):
        energy_ratio([1.0, 2.0], [3.0, 3.0])
    with pytest.raises(ValueError):
        energy_ratio([1.0], [2.0])
    with pytest.raises(ValueError):
        energy_ratio([1.0, 2.0, 3.0], [2.0, 1.0])


@given(curves, st.floats(0.1, 10), st.floats(-10, 10))
@settings(max_examples=80)
def test_energy_ratio_scaling_and_shift(g, scale, c):
    if g.std() < 1e-3:
        return
    p = np.random.default_rng(len(g)).normal(size=len(g))
    base = energy_ratio(p, g)
    assert energy_ratio(g.mean() + 2 * (p - p.mean()), g) == pytest.approx(2 * base, rel=1e-9)
    assert energy_ratio(p + c, g + c) == pytest.approx(base, rel=1e-6)
    assert energy_ratio(scale * p, g) == pytest.approx(scale * base, rel=1e-9)


def test_closure_hand_case():
    gt = open_curve()
    gt[10:15] = 0.0
    gt[50:54] = 0.0
    pred = open_curve()
    pred[11:14] = 0.0
    assert closure_metrics(pred, gt) == (0.5, 1.0)


def test_closure_trivial_cases():
    gt = open_curve()
    gt[20:25] = 0.0
    assert closure_metrics(gt, gt) == (1.0, 1.0)
    assert closure_metrics(open_curve(), gt)[0] == 0.0
    assert closure_metrics(open_curve(), open_curve()) == (1.0, 1.0)


def test_single_frame_dips_are_not_events():
    c = open_curve()
    c[5] = 0.0
    c[30:32] = 0.0
    assert closure_events(c) == [(30, 32)]


def test_false_alarm_lowers_precision():
    gt = open_curve()
    gt[10:14] = 0.0
    pred = gt.copy()
    pred[60:63] = 0.01
    assert closure_metrics(pred, gt) == (1.0, 0.5)


@given(curves, st.floats(0.06, 5))
@settings(max_examples=80)
def test_closures_ignore_values_above_threshold(g, bump):
    p = np.random.default_rng(1).uniform(-0.1, 0.2, size=len(g))
    q = np.where(p > 0.05, p + bump, p)
    h = np.where(g > 0.05, g * 3 + 1, g)
    assert closure_metrics(p, g) == closure_metrics(q, h)


@given(curves, curves)
@settings(max_examples=80)
def test_recall_precision_in_unit_interval(a, b):
    n = min(len(a), len(b))
    r, p = closure_metrics(a[:n], b[:n])
    assert 0.0 <= r <= 1.0 and 0.0 <= p <= 1.0


def test_events_counted_per_sequence():
    # a closure at the end of one sequence must not merge with one at the start of the next
    g1 = np.column_stack([open_curve(20), np.linspace(0, 1, 20)])
    g2 = g1.copy()
    g1[17:, 0] = 0.0
    g2[:3, 0] = 0.0
    rep = evaluate_curves("s", "av", [g1, g2], [g1, g2], [0, 1])
    assert rep.closure_recall == 1.0 and rep.closure_precision == 1.0
    assert np.all(rep.mse == 0) and rep.speech_mse == 0.0
    np.testing.assert_allclose(rep.energy, 1.0)


def test_ablation_with_perfect_predictor(small_corpus, tmp_path):
    model, _, seqs = small_corpus
    reports, text = ablation_report([("oracle", lambda s, mode: s.x)], seqs, model,
                                    modes=(Mode.AUDIO_VISUAL, Mode.AUDIO_ONLY), out_dir=tmp_path)
    assert [r.mode for r in reports] == ["av", "audio"]
    for r in reports:
        assert r.speech_mse == 0.0 and np.all(r.mse == 0)
        assert r.closure_recall == 1.0
    assert (tmp_path / "ablation.csv").read_text().startswith("system,mode,speech_mse")
    assert "oracle" in (tmp_path / "ablation.txt").read_text()


def test_ablation_orders_by_speech_mse(small_corpus):
    model, _, seqs = small_corpus
    _, text = ablation_report([("noisy", lambda s, m: s.x + 0.1), ("oracle", lambda s, m: s.x)], seqs, model)
    lines = text.splitlines()
    assert lines[1].startswith("oracle") and lines[2].startswith("noisy")
