import math

import numpy as np
import pytest

import oracles
from semcal.confidence import (
    HeadConfig,
    HeadParams,
    TrainConfig,
    TrainExample,
    confidence_loss,
    head_backward,
    head_forward,
    init_params,
    load_head,
    loss_and_grads,
    mean_confidence,
    sample_dropout_masks,
    save_head,
    train_head,
)
from semcal.errors import NumericError, ValidationError


def toy_params():
    return HeadParams(
        W1=np.array([[0.1, 0.2, 0.3, 0.4], [-0.5, 0.1, 0.2, 0.3]]),
        b1=np.array([0.05, -0.1]),
        W2=np.array([[0.5, -1.0]]),
        b2=np.array([0.2]),
        W3=np.array([[-2.0]]),
        b3=np.array([0.3]),
    )


def random_params(config, rng):
    return HeadParams(
        W1=rng.normal(0, 0.5, (config.hidden1, config.d_model)),
        b1=rng.normal(0, 0.2, config.hidden1),
        W2=rng.normal(0, 0.5, (config.hidden2, config.hidden1)),
        b2=rng.normal(0, 0.2, config.hidden2),
        W3=rng.normal(0, 0.5, (1, config.hidden2)),
        b3=rng.normal(0, 0.2, 1),
    )


def test_forward_zero_params_gives_half():
    config = HeadConfig(d_model=8, seed=1)
    params = HeadParams(
        W1=np.zeros((4, 8)), b1=np.zeros(4),
        W2=np.zeros((2, 4)), b2=np.zeros(2),
        W3=np.zeros((1, 2)), b3=np.zeros(1),
    )
    conf = head_forward(np.random.default_rng(0).standard_normal((5, 8)), params, config)
    np.testing.assert_array_equal(conf, np.full(5, 0.5))


def test_forward_hand_computed_single_token():
    # z1 = [0.9, 0.0] -> relu -> z2 = 0.5*0.9 + 0.2 = 0.65 -> u = -2*0.65 + 0.3 = -1
    config = HeadConfig(d_model=4, dropout_rate=0.0, seed=0)
    h = np.array([[1.0, -1.0, 0.5, 2.0]])
    conf = head_forward(h, toy_params(), config)
    assert conf[0] == pytest.approx(1.0 / (1.0 + math.exp(1.0)), abs=1e-15)


def test_forward_eval_deterministic(rng):
    config = HeadConfig(d_model=8, seed=3)
    params = random_params(config, rng)
    h = rng.standard_normal((7, 8))
    a = head_forward(h, params, config)
    b = head_forward(h, params, config)
    np.testing.assert_array_equal(a, b)


def test_forward_outputs_strictly_inside_unit_interval(rng):
    config = HeadConfig(d_model=8, seed=4)
    for _ in range(10):
        params = random_params(config, rng)
        conf = head_forward(rng.standard_normal((20, 8)) * 10, params, config)
        assert np.all(conf > 0.0) and np.all(conf < 1.0)


def test_forward_train_mode_requires_rng(rng):
    config = HeadConfig(d_model=8, seed=5)
    params = random_params(config, rng)
    with pytest.raises(ValidationError, match="rng"):
        head_forward(rng.standard_normal((3, 8)), params, config, mode="train")


def test_forward_shape_mismatch(rng):
    config = HeadConfig(d_model=8, seed=6)
    params = random_params(config, rng)
    with pytest.raises(ValidationError, match="hidden states"):
        head_forward(rng.standard_normal((3, 4)), params, config)


def test_head_config_validates():
    with pytest.raises(ValidationError):
        HeadConfig(d_model=6)
    with pytest.raises(ValidationError):
        HeadConfig(d_model=8, dropout_rate=1.0)
    config = HeadConfig(d_model=768)
    assert config.hidden1 == 384 and config.hidden2 == 192


def test_mean_confidence_cases():
    assert mean_confidence([0.7], [True]) == 0.7
    assert mean_confidence([0.2, 0.8], [True, True]) == 0.5
    assert mean_confidence([0.2, 0.8, 0.9], [False, True, True]) == pytest.approx(0.85)
    with pytest.raises(ValidationError, match="no true"):
        mean_confidence([0.5], [False])


def test_confidence_loss_cases():
    assert confidence_loss([0.3, 0.9], [0.3, 0.9]) == 0.0
    assert confidence_loss([1.0], [0.0]) == 1.0
    assert confidence_loss([0.6, 0.8], [0.5, 0.5]) == pytest.approx(0.05, abs=1e-15)
    with pytest.raises(ValidationError):
        confidence_loss([0.5], [0.5, 0.5])
    with pytest.raises(ValidationError):
        confidence_loss([0.5], [1.5])


def test_zero_gradient_when_loss_zero():
    config = HeadConfig(d_model=8, dropout_rate=0.0, seed=7)
    params = HeadParams(
        W1=np.zeros((4, 8)), b1=np.zeros(4),
        W2=np.zeros((2, 4)), b2=np.zeros(2),
        W3=np.zeros((1, 2)), b3=np.zeros(1),
    )
    # zero params give every confidence 0.5; a 0.5 target zeroes the loss
    grads = head_backward(np.ones((3, 8)), params, config, [True, True, True], 0.5)
    for g in grads.values():
        np.testing.assert_array_equal(g, np.zeros_like(g))


def test_dead_relu_unit_gets_zero_input_gradient(rng):
    config = HeadConfig(d_model=4, dropout_rate=0.0, seed=8)
    params = toy_params()
    params.b1[1] = -100.0  # unit 1 can never activate on bounded inputs
    h = rng.standard_normal((5, 4))
    grads = head_backward(h, params, config, [True] * 5, 0.9)
    np.testing.assert_array_equal(grads["W1"][1], np.zeros(4))
    assert grads["b1"][1] == 0.0


@pytest.mark.parametrize("d_model,n_tokens", [(4, 1), (4, 3), (8, 3), (8, 5)])
def test_gradients_match_finite_differences(d_model, n_tokens, rng):
    config = HeadConfig(d_model=d_model, dropout_rate=0.0, seed=9)
    params = random_params(config, rng)
    batch = [
        TrainExample(
            hidden_states=rng.standard_normal((n_tokens, d_model)),
            token_mask=np.array([True] * n_tokens),
            target=float(rng.uniform(0.1, 0.9)),
        )
        for _ in range(2)
    ]
    _, analytic = loss_and_grads(batch, params, config)
    numeric = oracles.finite_difference_grads(batch, params, config, step=1e-5)
    assert oracles.max_relative_gradient_error(analytic, numeric) < 1e-4


def test_gradient_with_partial_mask(rng):
    config = HeadConfig(d_model=4, dropout_rate=0.0, seed=10)
    params = random_params(config, rng)
    batch = [
        TrainExample(
            hidden_states=rng.standard_normal((4, 4)),
            token_mask=np.array([False, True, True, False]),
            target=0.4,
        )
    ]
    _, analytic = loss_and_grads(batch, params, config)
    numeric = oracles.finite_difference_grads(batch, params, config)
    assert oracles.max_relative_gradient_error(analytic, numeric) < 1e-4


def test_dropout_masks_have_inverted_scaling(rng):
    config = HeadConfig(d_model=8, dropout_rate=0.25, seed=11)
    m1, m2 = sample_dropout_masks(config, 4, rng)
    for m in (m1, m2):
        assert set(np.unique(m)).issubset({0.0, 1.0 / 0.75})


def test_dropout_expectation_matches_eval_on_linear_probe():
    # first affine layer, ReLU disabled: E[dropout(z)] == z
    config = HeadConfig(d_model=8, dropout_rate=0.1, seed=12)
    rng = np.random.default_rng(99)
    z = rng.standard_normal(config.hidden1) * 2.0
    total = np.zeros_like(z)
    k = 20000
    for _ in range(k):
        m1, _ = sample_dropout_masks(config, 1, rng)
        total += z * m1[0]
    np.testing.assert_allclose(total / k, z, atol=0.05)


def _learnable_dataset(rng, n, d_model=8, tokens=4):
    dataset = []
    for _ in range(n):
        row = rng.standard_normal(d_model)
        h = np.tile(row, (tokens, 1))
        target = 1.0 / (1.0 + math.exp(-3.0 * row.mean()))
        dataset.append(
            TrainExample(hidden_states=h, token_mask=np.array([True] * tokens), target=target)
        )
    return dataset


def test_train_learns_logistic_of_hidden_mean(rng):
    dataset = _learnable_dataset(rng, 48)
    head_config = HeadConfig(d_model=8, dropout_rate=0.0, seed=13)
    train_config = TrainConfig(learning_rate=1e-2, epochs=200, batch_size=16, seed=13)
    result = train_head(dataset, head_config, train_config)
    assert result.epoch_losses[-1] < 0.01


def test_train_single_example_loss_strictly_decreases(rng):
    h = rng.standard_normal((3, 8))
    dataset = [TrainExample(hidden_states=h, token_mask=np.array([True] * 3), target=1.0)]
    head_config = HeadConfig(d_model=8, dropout_rate=0.0, seed=14)
    train_config = TrainConfig(
        learning_rate=0.1, epochs=10, batch_size=1, optimizer="sgd", seed=14
    )
    result = train_head(dataset, head_config, train_config)
    diffs = np.diff(result.epoch_losses)
    assert np.all(diffs < 0.0)


def test_train_deterministic_given_seed(rng):
    dataset = _learnable_dataset(rng, 12)
    head_config = HeadConfig(d_model=8, dropout_rate=0.1, seed=15)
    train_config = TrainConfig(learning_rate=1e-3, epochs=3, batch_size=4, seed=15)
    a = train_head(dataset, head_config, train_config)
    b = train_head(dataset, head_config, train_config)
    assert a.epoch_losses == b.epoch_losses
    for name, arr in a.params.arrays().items():
        np.testing.assert_array_equal(arr, b.params.arrays()[name])


def test_train_empty_dataset_rejected():
    with pytest.raises(ValidationError, match="empty"):
        train_head([], HeadConfig(d_model=8), TrainConfig())


def test_train_aborts_on_non_finite_loss():
    h = np.full((2, 8), np.nan)
    dataset = [TrainExample(hidden_states=h, token_mask=np.array([True, True]), target=0.5)]
    with pytest.raises(NumericError, match="non-finite"):
        train_head(dataset, HeadConfig(d_model=8, dropout_rate=0.0), TrainConfig(epochs=1))


def test_train_reports_combined_loss_with_ce(rng):
    dataset = _learnable_dataset(rng, 8)
    for ex in dataset:
        ex.ce_loss = 2.0
    head_config = HeadConfig(d_model=8, dropout_rate=0.0, seed=16)
    train_config = TrainConfig(learning_rate=1e-3, epochs=2, batch_size=4, seed=16)
    result = train_head(dataset, head_config, train_config)
    for conf_loss, combined in zip(result.epoch_losses, result.epoch_combined):
        assert combined == pytest.approx(2.0 + 0.15 * conf_loss, abs=1e-12)


def test_init_params_deterministic():
    a = init_params(HeadConfig(d_model=8, seed=42))
    b = init_params(HeadConfig(d_model=8, seed=42))
    for name, arr in a.arrays().items():
        np.testing.assert_array_equal(arr, b.arrays()[name])


def test_save_load_round_trip(tmp_path, rng):
    config = HeadConfig(d_model=8, dropout_rate=0.1, seed=17)
    params = random_params(config, rng)
    descriptor = save_head(params, config, tmp_path / "head")
    loaded, loaded_config = load_head(descriptor)
    assert loaded_config == config
    for name, arr in params.arrays().items():
        np.testing.assert_array_equal(arr, loaded.arrays()[name])
