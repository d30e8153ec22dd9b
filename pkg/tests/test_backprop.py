"""Tests for back-propagation, training and the gradient oracle"""
import numpy as np
import pytest

from onnkit.backprop import (
    BPState,
    LayerSensitivity,
    adapt_learning_rate,
    apply_update,
    backward,
    degenerate_points,
    finite_difference_gradients,
    gradient_check,
    gradients,
    inter_layer_delta,
    intra_neuron_delta,
    loss,
    loss_scale,
    max_relative_error,
    output_delta,
    train,
    train_best_of,
    weight_bias_sensitivities,
)
from onnkit.datasets import PatternGenerator
from onnkit.errors import CacheError, NumericalError, ShapeError, TrainingDivergedError
from onnkit.models import BatchPolicy, LayerSpec, PaddingMode, TrainConfig
from onnkit.network import assign_operator_set, forward, init
from onnkit.tensor_core import conv2d, conv2d_full

FAST_GRADCHECK_SETS = [0, 3, 5, 7, 9, 13, 16, 20, 27]


def cnn_backward_oracle(model, trace, outputs, targets):
    """Classic CNN BP: full convolution with the kernels, valid correlation for dW"""
    scale = 2.0 / outputs.size
    depth = model.depth
    deltas, delta_ys, sensitivities = [None] * depth, [None] * depth, [None] * depth
    delta_y = scale * (outputs - targets)
    for l in range(depth, 0, -1):
        layer, layer_trace = model.layers[l - 1], trace.layers[l - 1]
        if l < depth:
            following = model.layers[l]
            delta_y = np.zeros_like(layer_trace.y)
            for k in range(layer.neuron_count):
                for i in range(following.neuron_count):
                    delta_y[k] += conv2d_full(deltas[l][i], following.kernels[i, k])
        f = layer.spec.sampling
        if f < -1:
            back = np.repeat(np.repeat(delta_y, -f, axis=1), -f, axis=2) / f**2
        elif f > 1:
            n, rows, cols = delta_y.shape
            back = delta_y.reshape(n, rows // f, f, cols // f, f).sum(axis=(2, 4))
        else:
            back = delta_y
        delta = back * layer_trace.fprime
        d_w = np.zeros_like(layer.kernels)
        for k in range(layer.neuron_count):
            for i in range(layer.input_count):
                d_w[k, i] = conv2d(layer_trace.inputs[i], delta[k])
        deltas[l - 1], delta_ys[l - 1] = delta, delta_y
        sensitivities[l - 1] = (d_w, delta.sum(axis=(1, 2)))
    return deltas, delta_ys, sensitivities


def test_loss_and_scale():
    """Test the mean-squared loss and its gradient scale"""
    assert loss(np.ones((2, 3)), np.zeros((2, 3))) == 1.0
    assert loss_scale(np.zeros((1, 4, 4)), batch_size=2) == 2.0 / 32
    with pytest.raises(ShapeError):
        loss(np.ones((2, 2)), np.ones((3, 3)))


def test_output_delta_cases(rng):
    """Test zero residual, saturated activation and a finite-difference check"""
    y = rng.uniform(-1, 1, size=(1, 4, 4))
    assert np.all(output_delta(y, y, np.ones_like(y)) == 0.0)
    assert np.all(output_delta(y, -y, np.zeros_like(y)) == 0.0)

    x = rng.normal(scale=0.5, size=(1, 4, 4))
    target = rng.uniform(-1, 1, size=(1, 4, 4))
    out = np.tanh(x)
    delta = output_delta(out, target, 1.0 - out**2, loss_scale(out))
    h = 1e-6
    for index in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[index] += h
        down[index] -= h
        numeric = (loss(np.tanh(up), target) - loss(np.tanh(down), target)) / (2 * h)
        assert delta[index] == pytest.approx(numeric, rel=1e-6, abs=1e-9)

    with pytest.raises(ShapeError):
        output_delta(y, y, np.ones((1, 3, 3)))


def test_intra_neuron_delta():
    """Test sampling 1, down-sampling by 2 and up-sampling by 2"""
    delta_y = np.arange(4.0).reshape(1, 2, 2)
    np.testing.assert_array_equal(intra_neuron_delta(delta_y, np.ones((1, 2, 2)), 1), delta_y)

    down = intra_neuron_delta(delta_y, np.ones((1, 4, 4)), -2)
    np.testing.assert_array_equal(down[0, :2, :2], np.zeros((2, 2)))
    np.testing.assert_array_equal(down[0, 2:, 2:], np.full((2, 2), 0.75))

    up = intra_neuron_delta(np.ones((1, 4, 4)), np.full((1, 2, 2), 0.5), 2)
    np.testing.assert_array_equal(up, np.full((1, 2, 2), 2.0))

    with pytest.raises(ShapeError):
        intra_neuron_delta(delta_y, np.ones((1, 3, 3)), 1)


def test_inter_layer_delta_zero_and_missing_cache(small_model, rng):
    """Test zero next deltas and the missing-cache error"""
    _, trace = forward(small_model, rng.uniform(-1, 1, size=(1, 10, 10)), training=True)
    last = trace.layers[-1]
    zero = inter_layer_delta(np.zeros_like(last.x), last)
    np.testing.assert_array_equal(zero, np.zeros((3, 4, 4)))
    with pytest.raises(CacheError):
        inter_layer_delta(np.zeros((1, 2, 2)), None)
    with pytest.raises(CacheError):
        weight_bias_sensitivities(np.zeros((1, 2, 2)), None)


def test_weight_sensitivities_zero_delta(small_model, rng):
    """Test that zero deltas give zero sensitivities"""
    _, trace = forward(small_model, rng.uniform(-1, 1, size=(1, 10, 10)), training=True)
    result = weight_bias_sensitivities(np.zeros((3, 8, 8)), trace.layers[0])
    assert np.all(result.kernels == 0.0)
    assert np.all(result.biases == 0.0)
    assert result.kernels.shape == (3, 1, 3, 3)


def test_backward_matches_cnn_oracle(small_model, rng):
    """Test the whole BP state against classic CNN BP on set-0 models of several sizes"""
    for seed in range(50):
        size = (10, 12, 14, 16)[seed % 4]
        model = init(small_model.specs, seed, input_shape=(size, size))
        inputs = rng.uniform(-1, 1, size=(1, size, size))
        outputs, trace = forward(model, inputs, training=True)
        targets = rng.uniform(-1, 1, size=outputs.shape)
        state = backward(model, trace, outputs, targets)
        deltas, delta_ys, sensitivities = cnn_backward_oracle(model, trace, outputs, targets)
        for l in range(model.depth):
            np.testing.assert_allclose(state.deltas[l], deltas[l], rtol=0, atol=1e-12)
            np.testing.assert_allclose(state.delta_y[l], delta_ys[l], rtol=0, atol=1e-12)
            np.testing.assert_allclose(
                state.sensitivities[l].kernels, sensitivities[l][0], rtol=0, atol=1e-12
            )
            np.testing.assert_allclose(
                state.sensitivities[l].biases, sensitivities[l][1], rtol=0, atol=1e-12
            )


def test_backward_state_dims(small_model, rng):
    """Test that deltas have x dims and sensitivities have parameter dims"""
    model = assign_operator_set(small_model, 2, 16)
    outputs, trace = forward(model, rng.uniform(-1, 1, size=(1, 10, 10)), training=True)
    state = backward(model, trace, outputs, np.zeros_like(outputs))
    assert isinstance(state, BPState)
    for layer, layer_trace, delta, grad in zip(
        model.layers, trace.layers, state.deltas, state.sensitivities
    ):
        assert delta.shape == layer_trace.x.shape
        assert grad.kernels.shape == layer.kernels.shape
        assert grad.biases.shape == layer.biases.shape


def test_backward_needs_training_trace(small_model):
    """Test that an inference forward cannot be back-propagated"""
    outputs, trace = forward(small_model, np.zeros((1, 10, 10)))
    with pytest.raises(CacheError):
        backward(small_model, trace, outputs, outputs)


def test_cnn_gradients_match_finite_differences(small_model, rng):
    """Test analytic sensitivities of a set-0 net against central differences"""
    inputs = rng.uniform(-1, 1, size=(1, 10, 10))
    outputs, _ = forward(small_model, inputs)
    targets = outputs + rng.normal(scale=0.1, size=outputs.shape)
    _, analytic = gradients(small_model, inputs, targets)
    numeric = finite_difference_gradients(small_model, inputs, targets)
    assert max_relative_error(analytic, numeric) < 1e-6


def test_finite_differences_leave_model_untouched(small_model, rng):
    """Test that the oracle perturbs a copy"""
    before = [layer.kernels.copy() for layer in small_model.layers]
    inputs = rng.uniform(-1, 1, size=(1, 10, 10))
    finite_difference_gradients(small_model, inputs, np.zeros((1, 2, 2)))
    for layer, kernels in zip(small_model.layers, before):
        np.testing.assert_array_equal(layer.kernels, kernels)
    with pytest.raises(ValueError):
        finite_difference_gradients(small_model, inputs, np.zeros((1, 2, 2)), h=0.0)


@pytest.mark.parametrize("set_index", FAST_GRADCHECK_SETS)
@pytest.mark.parametrize("padding", list(PaddingMode))
def test_gradient_check_sample_sets(set_index, padding):
    """Test analytic vs numerical gradients on a sample of operator sets"""
    result = gradient_check(set_index, seed=0, padding=padding)
    assert result.max_relative_error < 1e-5


@pytest.mark.slow
@pytest.mark.parametrize("set_index", list(range(28)))
def test_gradient_check_all_sets(set_index):
    """Test every operator set over five seeds and both padding modes"""
    for padding in PaddingMode:
        for seed in range(5):
            result = gradient_check(set_index, seed=seed, padding=padding)
            assert result.max_relative_error < 1e-5, f"seed {seed}, {padding.value}"


def test_degenerate_points(rng):
    """Test lin-cut kink and sinc guard-band detection"""
    spec = LayerSpec(neuron_count=1, padding=PaddingMode.NO_ZERO_PAD, operator_set=7)
    model = init([spec], seed=0)
    model.layers[0].kernels[...] = 0.0
    model.layers[0].biases[...] = 1.0 - 5e-5
    _, trace = forward(model, rng.uniform(-1, 1, size=(1, 5, 5)), training=True)
    assert any("lin-cut" in p for p in degenerate_points(model, trace))

    sinc = init([spec.model_copy(update={"operator_set": 5})], seed=0)
    inputs = rng.uniform(0.5, 1.0, size=(1, 5, 5))
    _, trace = forward(sinc, inputs, training=True)
    assert degenerate_points(sinc, trace) == []
    inputs[0, 2, 2] = 0.0
    _, trace = forward(sinc, inputs, training=True)
    assert any("sinc" in p for p in degenerate_points(sinc, trace))


def test_apply_update(small_model):
    """Test epsilon 0, the scalar step and non-finite rejection"""
    zero = [
        LayerSensitivity(kernels=np.ones_like(l.kernels), biases=np.ones_like(l.biases))
        for l in small_model.layers
    ]
    same = apply_update(small_model, zero, 0.0)
    for a, b in zip(small_model.layers, same.layers):
        np.testing.assert_array_equal(a.kernels, b.kernels)

    spec = LayerSpec(neuron_count=1, kernel_rows=1, kernel_cols=1)
    scalar = init([spec], seed=0)
    scalar.layers[0].kernels[...] = 1.0
    grad = [LayerSensitivity(kernels=np.full((1, 1, 1, 1), 2.0), biases=np.zeros(1))]
    stepped = apply_update(scalar, grad, 0.1)
    assert stepped.layers[0].kernels[0, 0, 0, 0] == pytest.approx(0.8)
    assert scalar.layers[0].kernels[0, 0, 0, 0] == 1.0

    bad = [LayerSensitivity(kernels=np.full((1, 1, 1, 1), np.nan), biases=np.zeros(1))]
    with pytest.raises(NumericalError):
        apply_update(scalar, bad, 0.1)
    with pytest.raises(ValueError):
        apply_update(scalar, grad, -0.1)


def test_adapt_learning_rate():
    """Test growth, the cap, decay and the floor"""
    config = TrainConfig()
    assert adapt_learning_rate(0.1, 1.0, 2.0, config) == pytest.approx(0.105)
    assert adapt_learning_rate(0.49, 1.0, 2.0, config) == 0.49
    assert adapt_learning_rate(6e-5, 2.0, 1.0, config) == 6e-5
    assert adapt_learning_rate(0.1, 2.0, 1.0, config) == pytest.approx(0.07)
    assert adapt_learning_rate(0.1, 1.0, 1.0, config) == pytest.approx(0.07)


def test_learning_rate_stays_in_bounds(rng):
    """Test any loss sequence keeps epsilon in [eps_min, eps_max]"""
    config = TrainConfig()
    epsilon, previous = config.epsilon0, 1.0
    for current in rng.uniform(0, 2, size=2000):
        epsilon = adapt_learning_rate(epsilon, current, previous, config)
        assert config.eps_min <= epsilon <= config.eps_max
        previous = current


def test_train_zero_iterations(small_model, tiny_dataset):
    """Test that iter_max 0 returns the model unchanged"""
    trained, history = train(small_model, tiny_dataset, TrainConfig(iter_max=0))
    assert trained is small_model
    assert history == []


def test_train_is_deterministic(tiny_dataset, short_config):
    """Test identical histories for identical inputs"""
    specs = [LayerSpec(neuron_count=2), LayerSpec(neuron_count=1)]
    runs = [train(init(specs, seed=3), tiny_dataset, short_config) for _ in range(2)]
    assert [h.loss for h in runs[0][1]] == [h.loss for h in runs[1][1]]
    assert [h.epsilon for h in runs[0][1]] == [h.epsilon for h in runs[1][1]]
    np.testing.assert_array_equal(runs[0][0].layers[0].kernels, runs[1][0].layers[0].kernels)


def test_train_returns_best_snapshot(tiny_dataset, short_config):
    """Test that the returned model reproduces the lowest recorded loss"""
    specs = [LayerSpec(neuron_count=2), LayerSpec(neuron_count=1)]
    trained, history = train(init(specs, seed=3), tiny_dataset, short_config)
    assert len(history) == short_config.iter_max
    outputs = [forward(trained, inputs)[0] for inputs, _ in tiny_dataset]
    batch_loss = np.mean([loss(o, t) for o, (_, t) in zip(outputs, tiny_dataset)])
    assert batch_loss == pytest.approx(min(h.loss for h in history), rel=1e-12)


def test_train_stops_at_target(tiny_dataset):
    """Test CP* stopping without an update"""
    specs = [LayerSpec(neuron_count=1)]
    model = init(specs, seed=0)
    trained, history = train(model, tiny_dataset, TrainConfig(iter_max=50, target_metric=10.0))
    assert len(history) == 1
    np.testing.assert_array_equal(trained.layers[0].kernels, model.layers[0].kernels)


def test_train_per_item_policy(tiny_dataset):
    """Test that per-item updates run and record one row per iteration"""
    specs = [LayerSpec(neuron_count=1)]
    config = TrainConfig(iter_max=4, batch_policy=BatchPolicy.PER_ITEM)
    _, history = train(init(specs, seed=0), tiny_dataset, config)
    assert [h.iteration for h in history] == [0, 1, 2, 3]
    assert all(np.isfinite(h.loss) for h in history)


def test_train_reports_divergence_iteration(tiny_dataset):
    """Test that an exploding exp-nodal output layer stops with the iteration and history"""
    specs = [LayerSpec(neuron_count=2), LayerSpec(neuron_count=1, operator_set=3)]
    config = TrainConfig(epsilon0=1e5, eps_max=1e9, iter_max=10)
    for policy in BatchPolicy:
        run_config = config.model_copy(update={"batch_policy": policy})
        with pytest.raises(TrainingDivergedError) as info:
            train(init(specs, seed=0), tiny_dataset, run_config)
        error = info.value
        assert 0 <= error.iteration < config.iter_max
        assert f"iteration {error.iteration}" in str(error)
        assert [h.iteration for h in error.history] == list(range(error.iteration))
        assert isinstance(error.__cause__, NumericalError)


def test_train_converges_to_least_squares(rng):
    """Test a 1x1 linear neuron against the closed-form least-squares fit"""
    spec = LayerSpec(
        neuron_count=1, kernel_rows=1, kernel_cols=1, padding=PaddingMode.NO_ZERO_PAD,
        operator_set=7,
    )
    dataset = []
    for _ in range(2):
        x = rng.uniform(-0.5, 0.5, size=(1, 6, 6))
        t = 0.8 * x + 0.1 + rng.normal(scale=0.01, size=x.shape)
        dataset.append((x, t))
    xs = np.concatenate([x.ravel() for x, _ in dataset])
    ts = np.concatenate([t.ravel() for _, t in dataset])
    design = np.stack([xs, np.ones_like(xs)], axis=1)
    (w_star, b_star), *_ = np.linalg.lstsq(design, ts, rcond=None)

    trained, history = train(init([spec], seed=2), dataset, TrainConfig(iter_max=600))
    assert trained.layers[0].kernels[0, 0, 0, 0] == pytest.approx(w_star, abs=1e-6)
    assert trained.layers[0].biases[0] == pytest.approx(b_star, abs=1e-6)
    assert history[-1].loss < history[0].loss


def test_train_best_of(tiny_dataset, short_config):
    """Test that the best of several runs is kept"""
    specs = [LayerSpec(neuron_count=1)]
    model, history, run_index = train_best_of(specs, tiny_dataset, short_config, runs=3)
    assert 0 <= run_index < 3
    _, first_history = train(init(specs, short_config.seed), tiny_dataset, short_config)
    assert min(h.loss for h in history) <= min(h.loss for h in first_history)
    with pytest.raises(ValueError):
        train_best_of(specs, tiny_dataset, short_config, runs=0)


@pytest.mark.slow
@pytest.mark.parametrize("hidden_set", [0, 13])
def test_synthesis_smoke_reaches_tenth_of_initial_loss(hidden_set):
    """Test that a 1x4x8x1 net maps white noise to a checkerboard within 240 iterations"""
    rng = np.random.default_rng(0)
    noise = np.clip(rng.normal(0.0, 0.5, size=(1, 16, 16)), -1.0, 1.0)
    dataset = [(noise, PatternGenerator.checkerboard(16, 4)[None])]
    specs = [
        LayerSpec(neuron_count=4, sampling=-2, operator_set=hidden_set),
        LayerSpec(neuron_count=8, sampling=2, operator_set=hidden_set),
        LayerSpec(neuron_count=1, operator_set=0),
    ]
    _, history = train(init(specs, seed=0), dataset, TrainConfig(iter_max=240))
    assert len(history) == 240
    assert min(h.loss for h in history) <= 0.1 * history[0].loss
