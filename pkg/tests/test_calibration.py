import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import oracles
from semcal.calibration import (
    TemperatureParam,
    apply_temperature,
    brier,
    ece,
    fit_temperature,
    nll_at_temperature,
    reliability_curve,
)
from semcal.errors import NumericError, ValidationError


def test_ece_all_confident_512_correct():
    conf = [1.0] * 1000
    correct = [True] * 512 + [False] * 488
    value, bins = ece(conf, correct, 10)
    assert value == pytest.approx(0.488, abs=1e-12)
    assert sum(b.count for b in bins) == 1000
    assert bins[-1].count == 1000 and bins[-1].mean_conf == 1.0


def test_ece_all_confident_263_correct():
    conf = [1.0] * 1000
    correct = [True] * 263 + [False] * 737
    value, _ = ece(conf, correct, 10)
    assert value == pytest.approx(0.737, abs=1e-12)


def test_ece_perfectly_calibrated_bin():
    conf = [0.65] * 100
    correct = [True] * 65 + [False] * 35
    value, _ = ece(conf, correct, 10)
    assert value == pytest.approx(0.0, abs=1e-12)


def test_ece_matches_direct_grouping_oracle(rng):
    for _ in range(30):
        n = int(rng.integers(1, 201))
        conf = rng.random(n)
        correct = rng.random(n) < conf
        value, _ = ece(conf, correct, 10)
        assert value == pytest.approx(oracles.ece_oracle(conf, correct, 10), abs=1e-12)


def test_ece_validates_inputs():
    with pytest.raises(ValidationError, match="length"):
        ece([0.5], [True, False], 10)
    with pytest.raises(ValidationError, match="0, 1"):
        ece([1.5], [True], 10)
    with pytest.raises(ValidationError, match="empty"):
        ece([], [], 10)
    with pytest.raises(ValidationError, match="bin count"):
        ece([0.5], [True], 0)


def test_bin_edges_half_open_with_closed_top():
    conf = [0.0, 0.1, 0.999, 1.0]
    correct = [False, True, True, True]
    _, bins = ece(conf, correct, 10)
    assert bins[0].count == 1  # 0.0 in [0.0, 0.1)
    assert bins[1].count == 1  # 0.1 in [0.1, 0.2)
    assert bins[9].count == 2  # 0.999 and 1.0 both in [0.9, 1.0]


def test_empty_bins_report_zero_not_nan():
    value, bins = ece([1.0, 1.0], [True, False], 10)
    for b in bins[:-1]:
        assert b.count == 0 and b.mean_conf == 0.0 and b.accuracy == 0.0
    assert np.isfinite(value)


def test_brier_trivial_cases():
    assert brier([1.0], [True]) == 0.0
    assert brier([1.0], [False]) == 1.0


def test_brier_degenerate_identity():
    conf = [1.0] * 1000
    correct = [True] * 512 + [False] * 488
    assert brier(conf, correct) == pytest.approx(0.488, abs=1e-12)


def test_reliability_curve_top_bin_only():
    curve = reliability_curve([1.0] * 5, [True] * 3 + [False] * 2, 10)
    assert curve.histogram == [0] * 9 + [5]
    assert curve.histogram_correct == [0] * 9 + [3]
    assert curve.histogram_incorrect == [0] * 9 + [2]


def test_reliability_curve_seeded_simulation(rng):
    n = 5000
    conf = rng.random(n)
    correct = rng.random(n) < conf
    curve = reliability_curve(conf, correct, 10)
    for b in curve.bins:
        if b.count >= 200:
            assert abs(b.accuracy - b.mean_conf) < 0.1
    assert sum(curve.histogram) == n


def test_apply_temperature_unit_is_softmax():
    z = np.array([1.0, 2.0, 3.0])
    expected = np.exp(z) / np.exp(z).sum()
    np.testing.assert_allclose(apply_temperature(z, 1.0), expected, atol=1e-12)


def test_apply_temperature_high_t_flattens():
    probs = apply_temperature(np.array([2.0, 0.0]), 1000.0)
    # closed form: softmax(0.002, 0)
    expected = 1.0 / (1.0 + np.exp(-0.002))
    assert probs[0] == pytest.approx(expected, abs=1e-9)
    assert probs[0] == pytest.approx(0.5005, abs=1e-4)
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)


def test_apply_temperature_rejects_bad_inputs():
    with pytest.raises(NumericError):
        apply_temperature([1.0, 2.0], 0.0)
    with pytest.raises(ValidationError):
        apply_temperature([np.nan, 1.0], 1.0)


@settings(max_examples=100, deadline=None)
@given(seed=st.integers(0, 2**32 - 1))
def test_apply_temperature_argmax_invariance(seed):
    rng = np.random.default_rng(seed)
    z = rng.standard_normal(int(rng.integers(2, 30))) * 5.0
    t = float(rng.uniform(1e-3, 20.0))
    probs = apply_temperature(z, t)
    assert int(np.argmax(probs)) == int(np.argmax(z))
    assert probs.sum() == pytest.approx(1.0, abs=1e-9)


def test_apply_temperature_extreme_logits_stable():
    probs = apply_temperature(np.array([1000.0, 0.0, -1000.0]), 1.0)
    assert np.all(np.isfinite(probs))
    assert probs[0] == pytest.approx(1.0, abs=1e-12)


def _sample_rows(rng, n, vocab, scale=2.0):
    z = rng.standard_normal((n, vocab)) * scale
    probs = np.exp(z - z.max(axis=1, keepdims=True))
    probs /= probs.sum(axis=1, keepdims=True)
    cum = np.cumsum(probs, axis=1)
    u = rng.random(n)
    targets = (u[:, None] > cum).sum(axis=1)
    return z, targets


def test_fit_temperature_recovers_scale(rng):
    z, targets = _sample_rows(rng, 4000, 10)
    fitted = fit_temperature(3.0 * z, targets)
    assert fitted.T == pytest.approx(3.0, abs=0.15)
    assert nll_at_temperature(3.0 * z, targets, fitted.T) <= nll_at_temperature(
        3.0 * z, targets, 1.0
    ) + 1e-9


def test_fit_temperature_confident_data_sharpens(rng):
    z = rng.standard_normal((200, 6)) * 12.0
    targets = z.argmax(axis=1)
    fitted = fit_temperature(z, targets)
    assert fitted.T < 0.2
    assert nll_at_temperature(z, targets, fitted.T) <= nll_at_temperature(z, targets, 1.0) + 1e-9


def test_fit_temperature_single_row_hits_lower_bound():
    z = np.array([[2.0, 0.0, -1.0]])
    targets = np.array([0])
    # NLL decreases monotonically toward the lower bound for a single
    # correct argmax row
    values = [nll_at_temperature(z, targets, t) for t in (4.0, 2.0, 1.0, 0.5, 0.1, 0.05)]
    assert values == sorted(values, reverse=True)
    fitted = fit_temperature(z, targets)
    assert fitted.T == pytest.approx(0.05, abs=0.01)


def test_fit_temperature_validates():
    with pytest.raises(ValidationError):
        fit_temperature(np.zeros((0, 3)), [])
    with pytest.raises(ValidationError):
        fit_temperature(np.zeros((2, 3)), [0, 3])


def test_temperature_param_positive():
    with pytest.raises(NumericError):
        TemperatureParam(T=0.0)
