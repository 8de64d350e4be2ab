"""Tests for the numpy reverse-mode engine, model zoo, training and weight files."""

import math

import numpy as np
import pytest

from app.modules.data import Dataset
from app.modules.errors import RejectedInputError, WeightFormatError
from app.modules.nn import (
    Conv2d,
    Dense,
    Flatten,
    MaxPool2,
    Model,
    ReLU,
    ResidualAdd,
    _forward,
    build_model,
    cross_entropy,
    equal_parameters,
    forward_with_tap,
    grad_input_loss,
    grad_input_projection,
    load_weights,
    predict,
    save_weights,
    softmax,
    tap_features,
    train_sgd,
)

FD_STEP = 1e-5


def numeric_gradient(f, x, step=FD_STEP):
    grad = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, down = x.copy(), x.copy()
        up[idx] += step
        down[idx] -= step
        grad[idx] = (f(up) - f(down)) / (2 * step)
    return grad


def _linear_model(W, b):
    W = np.asarray(W, dtype=np.float64)
    return Model(arch="linear", input_shape=(W.shape[1],), layers=[Dense(W.shape[1], W.shape[0])],
                 taps={0: "logits"}, params=[{"W": W, "b": np.asarray(b, dtype=np.float64)}])


# ==========================================
# Forward
# ==========================================
def test_identity_dense_layer():
    model = _linear_model(np.eye(2), np.zeros(2))
    logits, feature = forward_with_tap(model, np.array([1.0, 2.0]), "logits")
    np.testing.assert_array_equal(logits, [1.0, 2.0])
    np.testing.assert_array_equal(feature, [1.0, 2.0])


def test_relu_tap():
    model = Model(arch="relu", input_shape=(2,), layers=[ReLU(), Dense(2, 2)], taps={0: "relu", 1: "logits"},
                  params=[{}, {"W": np.eye(2), "b": np.zeros(2)}])
    _, feature = forward_with_tap(model, np.array([-1.0, 3.0]), "relu")
    np.testing.assert_array_equal(feature, [0.0, 3.0])


def test_mlp_matches_straight_line_forward(random_mlp):
    x = np.array([0.3, -0.7])
    p = random_mlp.params
    hidden = np.maximum(p[0]["W"] @ x + p[0]["b"], 0.0)
    logits = p[2]["W"] @ hidden + p[2]["b"]
    out, feature = forward_with_tap(random_mlp, x, "hidden")
    np.testing.assert_allclose(feature, hidden, rtol=0, atol=1e-15)
    np.testing.assert_allclose(out, logits, rtol=0, atol=1e-14)


def test_maxpool_first_max_wins_ties():
    model = Model(arch="pool", input_shape=(1, 2, 2), layers=[MaxPool2(), Flatten(), Dense(1, 1)],
                  taps={0: "pool", 2: "logits"}, params=[{}, {}, {"W": np.ones((1, 1)), "b": np.zeros(1)}])
    x = np.full((1, 2, 2), 0.5)
    g = grad_input_projection(model, x, "pool", np.ones(1), np.zeros(1))
    np.testing.assert_array_equal(g, [[[1.0, 0.0], [0.0, 0.0]]])


def test_wrong_shape_and_unknown_tap_rejected():
    model = build_model("mlp", (1, 8, 8), 4)
    with pytest.raises(RejectedInputError):
        forward_with_tap(model, np.zeros((1, 4, 4)), "fc1")
    with pytest.raises(RejectedInputError):
        forward_with_tap(model, np.zeros((1, 8, 8)), "conv9")


@pytest.mark.parametrize("arch", ["logistic", "mlp", "vgg", "resnet"])
def test_zoo_taps_have_features(arch):
    model = build_model(arch, (1, 8, 8), 4, seed=3)
    x = np.random.default_rng(0).uniform(size=(3, 1, 8, 8))
    for tap in model.tap_names():
        assert tap_features(model, x, tap).shape == (3, model.feature_dim(tap))


def test_residual_source_must_precede():
    with pytest.raises(RejectedInputError):
        Model(arch="bad", input_shape=(2,), layers=[ReLU(), ResidualAdd(source=1)],
              taps={1: "out"}, params=[{}, {}])


# ==========================================
# Cross-entropy
# ==========================================
def test_cross_entropy_uniform():
    for y in range(10):
        assert cross_entropy(np.zeros(10), y) == pytest.approx(math.log(10), abs=1e-12)


def test_cross_entropy_saturated_no_overflow():
    assert cross_entropy(np.array([1000.0, 0.0]), 0) == pytest.approx(0.0, abs=1e-12)
    assert cross_entropy(np.array([1000.0, 0.0]), 1) == pytest.approx(1000.0)


def test_cross_entropy_against_softmax():
    logits = np.array([1.0, 2.0, 3.0])
    assert cross_entropy(logits, 2) == pytest.approx(-math.log(softmax(logits)[2]), rel=1e-12)
    assert cross_entropy(logits, 2) == pytest.approx(0.40760596, abs=1e-8)


def test_cross_entropy_label_out_of_range():
    with pytest.raises(RejectedInputError):
        cross_entropy(np.zeros(3), 3)


# ==========================================
# Gradients
# ==========================================
def test_linear_gradient_closed_form():
    rng = np.random.default_rng(1)
    W = rng.normal(size=(2, 3))
    model = _linear_model(W, np.zeros(2))
    x = rng.normal(size=3)
    onehot = np.array([0.0, 1.0])
    expected = (softmax(W @ x) - onehot) @ W
    np.testing.assert_allclose(grad_input_loss(model, x, 1), expected, rtol=1e-12, atol=1e-15)


def test_constant_model_zero_gradient():
    model = _linear_model(np.zeros((3, 4)), np.array([0.5, -1.0, 2.0]))
    np.testing.assert_array_equal(grad_input_loss(model, np.ones(4), 0), np.zeros(4))


@pytest.mark.parametrize("arch", ["mlp", "vgg", "resnet"])
def test_loss_gradient_finite_differences(arch):
    model = build_model(arch, (1, 8, 8), 3, seed=11)
    x = np.random.default_rng(5).uniform(0.2, 0.8, size=(1, 8, 8))
    y = 1
    numeric = numeric_gradient(lambda z: cross_entropy(forward_with_tap(model, z, "logits")[0], y), x)
    np.testing.assert_allclose(grad_input_loss(model, x, y), numeric, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("arch,tap", [("vgg", "pool1"), ("resnet", "block1"), ("mlp", "relu2")])
def test_projection_gradient_finite_differences(arch, tap):
    model = build_model(arch, (1, 8, 8), 3, seed=2)
    rng = np.random.default_rng(9)
    x = rng.uniform(0.2, 0.8, size=(1, 8, 8))
    w = rng.normal(size=model.feature_dim(tap))
    h0 = forward_with_tap(model, x, tap)[1]
    numeric = numeric_gradient(lambda z: float((forward_with_tap(model, z, tap)[1] - h0) @ w), x)
    np.testing.assert_allclose(grad_input_projection(model, x, tap, w, h0), numeric, rtol=1e-6, atol=1e-9)


def test_projection_gradient_zero_direction():
    model = build_model("vgg", (1, 8, 8), 3)
    x = np.full((1, 8, 8), 0.5)
    m = model.feature_dim("relu1")
    np.testing.assert_array_equal(grad_input_projection(model, x, "relu1", np.zeros(m), np.zeros(m)), 0.0)


def test_projection_gradient_identity_tap():
    model = build_model("logistic", (1, 2, 2), 2)
    w = np.array([0.1, -2.0, 3.0, 0.0])
    g = grad_input_projection(model, np.full((1, 2, 2), 0.3), "flat", w, np.zeros(4))
    np.testing.assert_array_equal(g.reshape(-1), w)


def test_projection_gradient_dimension_mismatch():
    model = build_model("mlp", (1, 4, 4), 2)
    with pytest.raises(RejectedInputError):
        grad_input_projection(model, np.zeros((1, 4, 4)), "fc1", np.ones(3), np.ones(3))


# ==========================================
# Training
# ==========================================
def _blobs(n, seed):
    rng = np.random.default_rng(seed)
    labels = np.repeat([0, 1], n // 2)
    centers = np.where(labels[:, None] == 0, 0.25, 0.75)
    images = np.clip(centers + rng.normal(0.0, 0.05, size=(n, 4)), 0, 1).reshape(n, 1, 2, 2)
    return Dataset(images=images, labels=labels, classes=2, split="train", seed=seed)


def test_logistic_separates_blobs():
    model = build_model("logistic", (1, 2, 2), 2, seed=0)
    trained = train_sgd(model, _blobs(200, 0), epochs=30, lr=0.5, batch=20, seed=0,
                        holdout=_blobs(100, 1), accuracy_floor=0.5)
    assert trained.holdout_accuracy >= 0.95


def test_zero_learning_rate_keeps_parameters():
    model = build_model("mlp", (1, 2, 2), 2, seed=4)
    trained = train_sgd(model, _blobs(40, 0), epochs=2, lr=0.0, batch=8, seed=0)
    assert equal_parameters(model, trained)


def test_training_is_deterministic(tiny_train):
    model = build_model("vgg", (1, 8, 8), 4, seed=1)
    a = train_sgd(model, tiny_train, epochs=1, lr=0.05, batch=32, seed=5)
    b = train_sgd(model, tiny_train, epochs=1, lr=0.05, batch=32, seed=5)
    assert equal_parameters(a, b)


def test_training_rejects_wide_labels():
    model = build_model("logistic", (1, 2, 2), 2)
    data = _blobs(10, 0)
    data.labels = data.labels + 1
    with pytest.raises(RejectedInputError):
        train_sgd(model, data, epochs=1)


def test_predict_ties_to_lowest_class():
    model = _linear_model(np.zeros((3, 2)), np.zeros(3))
    np.testing.assert_array_equal(predict(model, np.ones((4, 2))), [0, 0, 0, 0])


# ==========================================
# Weight files
# ==========================================
def test_weights_round_trip(tmp_path):
    model = build_model("resnet", (1, 8, 8), 4, seed=8)
    path = tmp_path / "resnet.xfw"
    save_weights(model, path)
    loaded = load_weights(path, build_model("resnet", (1, 8, 8), 4, seed=99))
    assert equal_parameters(model, loaded)


def test_weights_wrong_magic(tmp_path):
    path = tmp_path / "bad.xfw"
    save_weights(build_model("mlp", (1, 4, 4), 2), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(WeightFormatError):
        load_weights(path, build_model("mlp", (1, 4, 4), 2))


def test_weights_truncated_reports_position(tmp_path):
    path = tmp_path / "short.xfw"
    save_weights(build_model("mlp", (1, 4, 4), 2), path)
    raw = path.read_bytes()
    path.write_bytes(raw[: len(raw) - 20])
    with pytest.raises(WeightFormatError) as info:
        load_weights(path, build_model("mlp", (1, 4, 4), 2))
    assert info.value.position is not None
    assert "byte" in str(info.value)


def test_weights_shape_mismatch(tmp_path):
    path = tmp_path / "mlp.xfw"
    save_weights(build_model("mlp", (1, 4, 4), 2), path)
    with pytest.raises(WeightFormatError):
        load_weights(path, build_model("mlp", (1, 4, 4), 3))


# ==========================================
# Seeded gradient checks across layer types
# ==========================================
def _layer_case(kind, rng):
    if kind == "dense":
        shape, layers, taps = (6,), [Dense(6, 4)], {0: "out"}
    elif kind == "relu":
        shape, layers, taps = (6,), [Dense(6, 5), ReLU(), Dense(5, 3)], {1: "hidden", 2: "out"}
    elif kind == "conv":
        shape, layers, taps = (2, 5, 5), [Conv2d(2, 3), Flatten(), Dense(75, 3)], {0: "hidden", 2: "out"}
    elif kind == "maxpool":
        shape = (1, 4, 4)
        layers, taps = [Conv2d(1, 2), MaxPool2(), Flatten(), Dense(8, 3)], {1: "hidden", 3: "out"}
    else:
        shape = (6,)
        layers = [Dense(6, 6), ReLU(), Dense(6, 6), ResidualAdd(source=1), Dense(6, 3)]
        taps = {3: "hidden", 4: "out"}
    params = []
    for layer in layers:
        p = layer.init_params(rng)
        if "b" in p:
            p["b"] = rng.normal(0.0, 0.3, size=p["b"].shape)
        params.append(p)
    return Model(arch=kind, input_shape=shape, layers=layers, taps=taps, params=params)


def _kink_margin(model, x):
    """Distance of every ReLU input from 0 and of every pool maximum from its runner-up."""
    outputs, _ = _forward(model, x[None])
    margins = [np.inf]
    for i, layer in enumerate(model.layers):
        before = x[None] if i == 0 else outputs[i - 1]
        if isinstance(layer, ReLU):
            margins.append(np.min(np.abs(before)))
        elif isinstance(layer, MaxPool2):
            n, c, h, w = before.shape
            win = before.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(-1, 4)
            top = np.sort(win, axis=1)
            margins.append(np.min(top[:, -1] - top[:, -2]))
    return float(min(margins))


def _smooth_instance(kind, seed):
    rng = np.random.default_rng([seed, LAYER_KINDS.index(kind)])
    model = _layer_case(kind, rng)
    for _ in range(100):
        x = rng.uniform(0.0, 1.0, size=model.input_shape)
        if _kink_margin(model, x) > 1e-3:
            return model, x, rng
    pytest.fail(f"no smooth instance found for {kind} seed {seed}")


LAYER_KINDS = ["dense", "relu", "conv", "maxpool", "residual"]


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_seeded_loss_gradients(kind, seed):
    model, x, rng = _smooth_instance(kind, seed)
    y = int(rng.integers(model.classes))
    numeric = numeric_gradient(lambda z: cross_entropy(forward_with_tap(model, z, "out")[0], y), x)
    np.testing.assert_allclose(grad_input_loss(model, x, y), numeric, rtol=1e-6, atol=1e-9)


@pytest.mark.parametrize("seed", range(10))
@pytest.mark.parametrize("kind", LAYER_KINDS)
def test_seeded_projection_gradients(kind, seed):
    model, x, rng = _smooth_instance(kind, seed)
    tap = model.tap_names()[0]
    w = rng.normal(size=model.feature_dim(tap))
    h0 = forward_with_tap(model, x, tap)[1]
    numeric = numeric_gradient(lambda z: float((forward_with_tap(model, z, tap)[1] - h0) @ w), x)
    np.testing.assert_allclose(grad_input_projection(model, x, tap, w, h0), numeric, rtol=1e-6, atol=1e-9)


# ==========================================
# Exactness and repeatability
# ==========================================
def test_residual_add_is_branch_plus_source():
    rng = np.random.default_rng(3)
    model = Model(arch="res", input_shape=(4,), layers=[Dense(4, 4), ReLU(), Dense(4, 4), ResidualAdd(source=1)],
                  taps={1: "source", 2: "branch", 3: "sum"},
                  params=[{"W": rng.normal(size=(4, 4)), "b": rng.normal(size=4)}, {},
                          {"W": rng.normal(size=(4, 4)), "b": rng.normal(size=4)}, {}])
    for _ in range(5):
        x = rng.normal(size=4)
        source = forward_with_tap(model, x, "source")[1]
        branch = forward_with_tap(model, x, "branch")[1]
        np.testing.assert_array_equal(forward_with_tap(model, x, "sum")[1], branch + source)


@pytest.mark.parametrize("arch,tap", [("vgg", "pool1"), ("resnet", "block2"), ("mlp", "relu1")])
def test_forward_with_tap_bitwise_repeatable(arch, tap):
    model = build_model(arch, (1, 8, 8), 4, seed=6)
    x = np.random.default_rng(2).uniform(size=(1, 8, 8))
    first = forward_with_tap(model, x, tap)
    for _ in range(3):
        again = forward_with_tap(model, x.copy(), tap)
        assert again[0].tobytes() == first[0].tobytes()
        assert again[1].tobytes() == first[1].tobytes()


@pytest.mark.parametrize("shift", [-7.5, 0.25, 3.0, 100.0])
def test_cross_entropy_shift_invariant(shift):
    rng = np.random.default_rng(int(abs(shift) * 4))
    for _ in range(20):
        logits = rng.normal(0.0, 3.0, size=6)
        y = int(rng.integers(6))
        assert abs(cross_entropy(logits + shift, y) - cross_entropy(logits, y)) <= 1e-12
