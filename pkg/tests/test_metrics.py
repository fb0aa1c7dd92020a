import numpy as np
import pytest

import engagekit.tensor as T
from engagekit.data import SynthConfig, synth_session
from engagekit.metrics import (mse, ccc, ccc_loss, evaluate_sessions, EvalReport,
                               LabelEchoPredictor, predict_session)
from engagekit.tensor import Tensor, backward, grad_check

from conftest import TOY_FEATURE_DIMS


def brute_force_ccc(x, y):
    """Independent streaming two-pass oracle: plain python accumulators."""
    n = 0
    sum_x = sum_y = 0.0
    for a, b in zip(x, y):
        n += 1
        sum_x += float(a)
        sum_y += float(b)
    mean_x, mean_y = sum_x / n, sum_y / n
    sxx = syy = sxy = 0.0
    for a, b in zip(x, y):
        dx, dy = float(a) - mean_x, float(b) - mean_y
        sxx += dx * dx
        syy += dy * dy
        sxy += dx * dy
    denom = sxx / n + syy / n + (mean_x - mean_y) ** 2
    return 2.0 * (sxy / n) / denom


# ---------------------------------------------------------------- mse

def test_mse_trivial_values():
    x = np.array([0.3, 0.7, 0.1])
    assert mse(T.constant(x), x).item() == 0.0
    assert mse(T.constant(np.zeros(2)), np.ones(2)).item() == 1.0


def test_mse_gradient_closed_form_and_fd(rng):
    pred = Tensor(rng.standard_normal(10), requires_grad=True)
    label = rng.standard_normal(10)
    mask = (rng.random(10) > 0.3).astype(float)
    loss = mse(pred, label, mask)
    backward(loss)
    expected = 2.0 * (pred.data - label) * mask / mask.sum()
    assert np.allclose(pred.grad, expected)
    assert grad_check(lambda: mse(pred, label, mask), [("pred", pred)]) < 1e-7


def test_mse_empty_mask_rejected(rng):
    with pytest.raises(ValueError):
        mse(T.constant(np.ones(4)), np.ones(4), np.zeros(4))


# ---------------------------------------------------------------- ccc metric

def test_ccc_perfect_and_constant():
    x = np.array([0.1, 0.5, 0.9, 0.3])
    assert ccc(x, x) == pytest.approx(1.0, abs=1e-12)
    assert ccc(x, np.full(4, 0.4)) == 0.0


def test_ccc_known_value():
    assert ccc([1, 2, 3], [2, 3, 4]) == pytest.approx(4.0 / 7.0, abs=1e-12)


def test_ccc_symmetry(rng):
    for _ in range(20):
        x = rng.standard_normal(50)
        y = rng.standard_normal(50)
        assert abs(ccc(x, y) - ccc(y, x)) < 1e-12


def test_ccc_bounded_by_pearson(rng):
    for _ in range(20):
        x = rng.standard_normal(60)
        y = rng.standard_normal(60) + 0.5 * x
        r = np.corrcoef(x, y)[0, 1]
        c = ccc(x, y)
        assert abs(c) <= abs(r) + 1e-12 <= 1.0 + 1e-12


def test_ccc_mean_shift_penalty(rng):
    x = rng.standard_normal(80)
    shifts = [0.1, 0.5, 1.0, 2.0, 5.0]
    values = [ccc(x, x + a) for a in shifts]
    assert all(v < 1.0 for v in values)
    assert all(values[i] > values[i + 1] for i in range(len(values) - 1))
    # closed form: ccc(x, x + a) = 2 var / (2 var + a^2)
    var = np.mean((x - x.mean()) ** 2)
    for a, v in zip(shifts, values):
        assert v == pytest.approx(2 * var / (2 * var + a * a), rel=1e-12)


def test_ccc_matches_brute_force_oracle(rng):
    for _ in range(100):
        n = int(rng.integers(2, 200))
        x = rng.standard_normal(n) * rng.uniform(0.1, 5)
        y = rng.standard_normal(n) + rng.uniform(-2, 2)
        assert ccc(x, y) == pytest.approx(brute_force_ccc(x, y), abs=1e-10)


def test_ccc_degenerate_and_errors():
    with pytest.raises(ValueError):
        ccc([1.0], [1.0])
    with pytest.warns(RuntimeWarning):
        assert ccc(np.full(5, 2.0), np.full(5, 2.0)) == 0.0
    # both constant, different means: denominator is the mean gap, ccc = 0
    assert ccc(np.full(5, 2.0), np.full(5, 3.0)) == 0.0


# ---------------------------------------------------------------- ccc loss

def test_ccc_loss_trivial_cases(rng):
    x = rng.uniform(0, 1, 32)
    assert ccc_loss(T.constant(x), x).item() == pytest.approx(0.0, abs=1e-12)
    assert ccc_loss(T.constant(np.full(32, 0.5)), x).item() == pytest.approx(1.0, abs=1e-12)


def test_ccc_loss_agrees_with_metric(rng):
    pred = rng.standard_normal(64)
    label = rng.standard_normal(64)
    loss = ccc_loss(T.constant(pred), label).item()
    assert loss == pytest.approx(1.0 - ccc(pred, label), abs=1e-12)


def test_ccc_loss_gradient_fd(rng):
    pred = Tensor(rng.standard_normal(64), requires_grad=True)
    label = rng.uniform(0, 1, 64)
    assert grad_check(lambda: ccc_loss(pred, label), [("pred", pred)],
                      max_coords_per_param=32) < 1e-5


def test_ccc_loss_masked_matches_subset(rng):
    pred_vals = rng.standard_normal(40)
    label = rng.uniform(0, 1, 40)
    mask = np.zeros(40)
    mask[5:25] = 1.0
    masked = ccc_loss(T.constant(pred_vals), label, mask).item()
    subset = ccc_loss(T.constant(pred_vals[5:25]), label[5:25]).item()
    assert masked == pytest.approx(subset, abs=1e-12)


def test_ccc_loss_per_window_mode(rng):
    pred = rng.standard_normal((3, 20))
    label = rng.uniform(0, 1, (3, 20))
    pooled = ccc_loss(T.constant(pred), label).item()
    per_window = ccc_loss(T.constant(pred), label, per_window=True).item()
    rows = [ccc_loss(T.constant(pred[i]), label[i]).item() for i in range(3)]
    assert per_window == pytest.approx(np.mean(rows), abs=1e-12)
    assert per_window != pytest.approx(pooled, abs=1e-6)


def test_ccc_loss_too_few_frames(rng):
    with pytest.raises(ValueError):
        ccc_loss(T.constant(np.ones(4)), np.ones(4), np.array([1.0, 0, 0, 0]))


# ---------------------------------------------------------------- evaluation

def _sessions(n, frames=90, seed=0):
    cfg = SynthConfig(sessions=n, num_frames=frames, seed=seed,
                      feature_dims=dict(TOY_FEATURE_DIMS))
    return [synth_session(cfg, i) for i in range(n)]


def test_evaluate_sessions_oracle_predictor():
    sessions = _sessions(3)
    report = evaluate_sessions(LabelEchoPredictor(core_len=16, context_len=8), sessions)
    assert report.ccc_per_session == pytest.approx([1.0, 1.0, 1.0], abs=1e-12)
    assert report.mean_ccc == pytest.approx(1.0, abs=1e-12)
    assert report.mse_per_session == pytest.approx([0.0, 0.0, 0.0], abs=1e-14)


def test_evaluate_sessions_constant_predictor():
    class ConstantPredictor:
        core_len, context_len = 16, 8

        def predict_windows(self, batch):
            return np.full(batch.labels.shape, 0.5)

    report = evaluate_sessions(ConstantPredictor(), _sessions(2))
    assert report.ccc_per_session == pytest.approx([0.0, 0.0], abs=1e-12)


def test_evaluate_sessions_skips_unlabeled():
    sessions = _sessions(2)
    sessions[1].roles["target"].labels = None
    with pytest.warns(RuntimeWarning):
        report = evaluate_sessions(LabelEchoPredictor(16, 8), sessions)
    assert len(report.ccc_per_session) == 1
    assert report.skipped == [sessions[1].session_id]


def test_predict_session_clamps_and_covers_timeline():
    class WildPredictor:
        core_len, context_len = 16, 8

        def predict_windows(self, batch):
            return np.full(batch.labels.shape, 7.5)

    session = _sessions(1, frames=50)[0]
    series = predict_session(WildPredictor(), session)
    assert series.shape == (50,)
    assert np.all(series == 1.0)


def test_report_mean_is_arithmetic_average_and_serializes(tmp_path):
    report = EvalReport(session_ids=["a", "b"], ccc_per_session=[0.25, 0.75],
                        mse_per_session=[0.1, 0.2], frame_counts=[10, 20])
    assert report.mean_ccc == pytest.approx(0.5)
    report.write_json(tmp_path / "report.json")
    report.write_csv(tmp_path / "report.csv")
    import json
    loaded = json.loads((tmp_path / "report.json").read_text())
    assert loaded["mean_ccc"] == pytest.approx(0.5)
    assert loaded["sessions"][0]["session_id"] == "a"
    lines = (tmp_path / "report.csv").read_text().strip().splitlines()
    assert lines[0] == "session_id,ccc"
    assert lines[1].startswith("a,0.25")
