import io
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _gradcheck import TOL, graph_gradient_error, layer_cases, layer_gradient_error
from fusionchem.errors import LoadError, NumericError, ShapeError, StateError, StructuralError, ValidationError
from fusionchem.tensorcore import (
    BCE_CLAMP,
    LAYERS,
    Add,
    Conv2D,
    Dense,
    Dropout,
    GlobalAvgPool,
    ModelGraph,
    OptimizerConfig,
    ReLU,
    RmspropState,
    Sigmoid,
    backward,
    binary_cross_entropy,
    binary_cross_entropy_grad,
    checkpoint_bytes,
    conv2d_forward,
    conv_output_size,
    forward,
    read_checkpoint,
    rmsprop_step,
    sigmoid,
    write_checkpoint,
)


def dense_graph(W, b):
    g = ModelGraph()
    g.add_input("x", (len(W),))
    g.add("d", Dense(len(W[0])), "x", params={"W": np.array(W, float), "b": np.array(b, float)})
    return g


# -- forward examples ---------------------------------------------------------


def test_dense_identity():
    g = dense_graph(np.eye(2), [0, 0])
    out = forward(g, {"x": np.array([[3.0, 4.0]])})["d"]
    assert out.tolist() == [[3.0, 4.0]]


def test_dense_hand_matrix():
    # row-vector convention x @ W: [1+3, 2+4] + b
    g = dense_graph([[1, 2], [3, 4]], [1, 1])
    out = forward(g, {"x": np.array([[1.0, 1.0]])})["d"]
    assert out.tolist() == [[5.0, 7.0]]


def test_dense_hand_matrix_column_convention():
    # W @ x convention of the written example: [[1,2],[3,4]] @ [1,1] + 1 = [4, 8]
    g = dense_graph(np.array([[1, 2], [3, 4]]).T, [1, 1])
    out = forward(g, {"x": np.array([[1.0, 1.0]])})["d"]
    assert out.tolist() == [[4.0, 8.0]]


def test_relu_values():
    y, _ = ReLU().forward({}, [np.array([[-1.0, 0.0, 2.0]])], False, None)
    assert y.tolist() == [[0.0, 0.0, 2.0]]


def test_sigmoid_output_in_unit_interval():
    g = ModelGraph()
    g.add_input("x", (3,))
    g.add("d", Dense(1), "x", rng=np.random.default_rng(0))
    g.add("s", Sigmoid(), "d")
    x = np.random.default_rng(1).normal(scale=5, size=(50, 3))
    out = forward(g, {"x": x})["s"]
    assert out.shape == (50, 1)
    assert np.all((out > 0) & (out < 1))


def test_forward_shape_mismatch_names_node():
    g = dense_graph(np.eye(2), [0, 0])
    with pytest.raises(ShapeError, match="'x'"):
        forward(g, {"x": np.zeros((1, 3))})


def test_forward_non_finite_input():
    g = dense_graph(np.eye(2), [0, 0])
    with pytest.raises(NumericError):
        forward(g, {"x": np.array([[np.nan, 1.0]])})


def test_forward_missing_input():
    g = dense_graph(np.eye(2), [0, 0])
    with pytest.raises(StructuralError):
        forward(g, {})


def test_inference_does_not_touch_tape():
    g = dense_graph(np.eye(2), [0, 0])
    forward(g, {"x": np.ones((1, 2))})
    with pytest.raises(StateError):
        backward(g, np.ones((1, 2)))


# -- graph construction -------------------------------------------------------


def test_duplicate_node_name():
    g = ModelGraph()
    g.add_input("x", (2,))
    with pytest.raises(StructuralError):
        g.add("x", ReLU(), "x")


def test_unknown_input_reference():
    g = ModelGraph()
    g.add_input("x", (2,))
    with pytest.raises(StructuralError):
        g.add("r", ReLU(), "nope")


def test_add_layer_shape_check():
    g = ModelGraph()
    g.add_input("a", (2,))
    g.add_input("b", (3,))
    with pytest.raises(ShapeError):
        g.add("s", Add(), "a", "b")


def test_architecture_round_trip():
    g = ModelGraph("m")
    g.add_input("x", (6, 6, 2))
    g.add("c", Conv2D(3, 3, padding=1), "x", rng=np.random.default_rng(0))
    g.add("p", GlobalAvgPool(), "c")
    g.add("d", Dense(1, init="glorot"), "p", rng=np.random.default_rng(1))
    g.add("s", Sigmoid(), "d")
    g.tags["penultimate"] = "p"
    g.trainable["c.bias"] = False
    h = ModelGraph.from_architecture(g.architecture(), g.params)
    assert h.architecture() == g.architecture()
    x = np.random.default_rng(2).random((4, 6, 6, 2))
    assert np.array_equal(forward(g, {"x": x})["s"], forward(h, {"x": x})["s"])


def test_layer_registry_complete():
    assert set(LAYERS) == {"dense", "conv2d", "relu", "sigmoid", "dropout", "global_avg_pool", "concat", "add"}


# -- backward examples --------------------------------------------------------


def test_backward_linear_case():
    g = dense_graph([[3.0]], [0.0])
    forward(g, {"x": np.array([[2.0]])}, training_mode=True)
    grads = backward(g, np.array([[1.0]]))
    assert grads["d.W"].tolist() == [[2.0]]


def test_backward_zero_input_kills_weight_gradient():
    g = dense_graph([[0.7]], [0.0])
    g.add("s", Sigmoid(), "d")
    out = forward(g, {"x": np.array([[0.0]])}, training_mode=True)["s"]
    grads = backward(g, binary_cross_entropy_grad(out, np.array([[1.0]])))
    assert grads["d.W"].tolist() == [[0.0]]


def test_backward_before_forward_is_state_error():
    g = dense_graph(np.eye(2), [0, 0])
    with pytest.raises(StateError):
        backward(g, np.ones((1, 2)))


def test_backward_gradient_shape_checked():
    g = dense_graph(np.eye(2), [0, 0])
    forward(g, {"x": np.ones((3, 2))}, training_mode=True)
    with pytest.raises(ShapeError):
        backward(g, np.ones((2, 2)))


def test_frozen_parameters_get_no_gradient():
    g = dense_graph(np.eye(2), [0, 0])
    g.trainable["d.W"] = False
    forward(g, {"x": np.ones((1, 2))}, training_mode=True)
    grads = backward(g, np.ones((1, 2)))
    assert set(grads) == {"d.b"}


def test_multiple_consumers_sum():
    g = ModelGraph()
    g.add_input("x", (2,))
    g.add("d", Dense(2), "x", params={"W": np.eye(2), "b": np.zeros(2)})
    g.add("a", Add(), "d", "d")
    forward(g, {"x": np.array([[1.0, 2.0]])}, training_mode=True)
    grads = backward(g, np.ones((1, 2)))
    assert grads["d.b"].tolist() == [2.0, 2.0]


# -- finite-difference oracle, layer by layer ---------------------------------


@pytest.mark.parametrize("seed", range(12))
def test_layer_gradients_match_finite_differences(seed):
    for layer, params, xs in layer_cases(seed):
        err = layer_gradient_error(layer, params, xs, seed=seed)
        assert err < TOL, (layer.kind, err)


def test_small_cnn_graph_gradients():
    rng = np.random.default_rng(3)
    g = ModelGraph()
    g.add_input("x", (6, 6, 2))
    g.add("c1", Conv2D(3, 2, stride=2), "x", rng=rng)
    g.add("r1", ReLU(), "c1")
    g.add("c2", Conv2D(3, 3, padding=1), "r1", rng=rng)
    g.add("a", Add(), "c2", "r1")
    g.add("p", GlobalAvgPool(), "a")
    g.add("d", Dense(1, init="glorot"), "p", rng=rng)
    g.add("s", Sigmoid(), "d")
    x = rng.normal(size=(3, 6, 6, 2))
    assert graph_gradient_error(g, {"x": x}, seed=1) < TOL


# -- BCE ----------------------------------------------------------------------


def test_bce_examples():
    assert binary_cross_entropy(0.5, 1) == pytest.approx(0.693147, abs=1e-6)
    assert binary_cross_entropy(1.0, 1) == pytest.approx(0.0, abs=1e-6)
    assert binary_cross_entropy(0.9, 0) == pytest.approx(2.302585, abs=1e-6)


def test_bce_clamp_keeps_loss_finite():
    assert binary_cross_entropy(0.0, 1) == pytest.approx(-math.log(BCE_CLAMP))
    assert np.isfinite(binary_cross_entropy_grad(1.0, 0))


def test_bce_rejects_bad_label():
    with pytest.raises(ValidationError):
        binary_cross_entropy(0.5, 0.5)


def test_bce_monotone_in_p_for_positive_label():
    p = np.linspace(0.001, 0.999, 999)
    loss = binary_cross_entropy(p, np.ones_like(p))
    assert np.all(np.diff(loss) < 0)


@given(st.floats(1e-6, 1 - 1e-6), st.sampled_from([0.0, 1.0]))
def test_bce_non_negative_and_gradient_matches(p, y):
    assert binary_cross_entropy(p, y) >= 0
    h = 1e-4 * min(p, 1 - p)
    fd = (binary_cross_entropy(p + h, y) - binary_cross_entropy(p - h, y)) / (2 * h)
    assert binary_cross_entropy_grad(p, y) == pytest.approx(fd, rel=1e-4)


def test_sigmoid_is_stable_at_extremes():
    z = np.array([-1000.0, 0.0, 1000.0])
    assert sigmoid(z).tolist() == [0.0, 0.5, 1.0]


# -- convolution --------------------------------------------------------------


def test_conv_1x1_identity():
    x = np.random.default_rng(0).random((4, 5, 1))
    y = conv2d_forward(x, np.ones((1, 1, 1, 1)))
    assert np.array_equal(y, x)


def test_conv_all_ones():
    y = conv2d_forward(np.ones((3, 3, 1)), np.ones((3, 3, 1, 1)))
    assert y.shape == (1, 1, 1) and y[0, 0, 0] == 9.0


def test_conv_output_shape_stem():
    assert conv_output_size(80, 4, 2, 0) == 39
    y = conv2d_forward(np.zeros((80, 80, 4)), np.zeros((4, 4, 4, 16)), stride=2)
    assert y.shape == (39, 39, 16)


def test_conv_is_cross_correlation():
    x = np.zeros((3, 3, 1))
    x[0, 0, 0] = 1.0
    k = np.arange(9, dtype=float).reshape(3, 3, 1, 1)
    # no flip: the top-left kernel tap meets the top-left pixel
    assert conv2d_forward(x, k)[0, 0, 0] == 0.0
    x[0, 0, 0], x[2, 2, 0] = 0.0, 1.0
    assert conv2d_forward(x, k)[0, 0, 0] == 8.0


def test_conv_matches_direct_loops():
    rng = np.random.default_rng(5)
    x = rng.normal(size=(7, 6, 2))
    k = rng.normal(size=(3, 3, 2, 4))
    y = conv2d_forward(x, k, stride=2, padding=1)
    xp = np.pad(x, ((1, 1), (1, 1), (0, 0)))
    ref = np.zeros(y.shape)
    for i in range(y.shape[0]):
        for j in range(y.shape[1]):
            patch = xp[2 * i:2 * i + 3, 2 * j:2 * j + 3, :]
            ref[i, j] = np.tensordot(patch, k, axes=([0, 1, 2], [0, 1, 2]))
    assert np.allclose(y, ref)


@pytest.mark.parametrize("stride,padding", [(0, 0), (1, -1), (1.5, 0)])
def test_conv_invalid_stride_padding(stride, padding):
    with pytest.raises(ValidationError):
        conv2d_forward(np.zeros((4, 4, 1)), np.zeros((2, 2, 1, 1)), stride=stride, padding=padding)


def test_conv_kernel_larger_than_input():
    with pytest.raises(ShapeError):
        conv2d_forward(np.zeros((2, 2, 1)), np.zeros((3, 3, 1, 1)))


# -- dropout ------------------------------------------------------------------


def test_dropout_expectation_matches_inference():
    layer = Dropout(0.5)
    x = np.linspace(-2, 2, 8)[None]
    rng = np.random.default_rng(11)
    n = 10_000
    samples = np.vstack([layer.forward({}, [x], True, rng)[0] for _ in range(n)])
    mean = samples.mean(axis=0)
    # per-unit std of x * Bernoulli(0.5) / 0.5 is |x|
    band = 3 * np.abs(x[0]) / np.sqrt(n)
    assert np.all(np.abs(mean - x[0]) <= band + 1e-12)
    assert np.array_equal(layer.forward({}, [x], False, None)[0], x)


def test_dropout_rate_validated():
    with pytest.raises(ValidationError):
        Dropout(1.0)


# -- RMSprop ------------------------------------------------------------------


def test_rmsprop_first_step():
    params = {"w": np.array([0.0])}
    state = RmspropState()
    rmsprop_step(params, {"w": np.array([1.0])}, state, OptimizerConfig())
    assert state.accumulators["w"][0] == pytest.approx(0.1)
    assert -params["w"][0] == pytest.approx(3.1623e-3, rel=1e-4)


def test_rmsprop_second_step():
    params = {"w": np.array([0.0])}
    state = RmspropState()
    cfg = OptimizerConfig()
    rmsprop_step(params, {"w": np.array([1.0])}, state, cfg)
    before = params["w"][0]
    rmsprop_step(params, {"w": np.array([1.0])}, state, cfg)
    assert state.accumulators["w"][0] == pytest.approx(0.19)
    assert before - params["w"][0] == pytest.approx(2.2942e-3, rel=1e-4)


def test_rmsprop_zero_gradient_decays_accumulator():
    params = {"w": np.array([1.0, -2.0])}
    state = RmspropState({"w": np.array([0.5, 0.2])})
    rmsprop_step(params, {"w": np.zeros(2)}, state, OptimizerConfig())
    assert params["w"].tolist() == [1.0, -2.0]
    assert state.accumulators["w"] == pytest.approx([0.45, 0.18])


def test_rmsprop_non_finite_aborts_untouched():
    params = {"a": np.array([1.0]), "b": np.array([2.0])}
    state = RmspropState()
    with pytest.raises(NumericError):
        rmsprop_step(params, {"a": np.array([1.0]), "b": np.array([np.inf])}, state, OptimizerConfig())
    assert params["a"][0] == 1.0 and params["b"][0] == 2.0
    assert state.accumulators == {}


def test_rmsprop_rejects_frozen_gradient():
    with pytest.raises(ValidationError):
        rmsprop_step({"a": np.zeros(1)}, {"a": np.ones(1)}, RmspropState(), OptimizerConfig(), {"a": False})


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
@settings(max_examples=50)
def test_rmsprop_accumulators_non_negative(gs):
    params = {"w": np.zeros(1)}
    state = RmspropState()
    for g in gs:
        rmsprop_step(params, {"w": np.array([g])}, state, OptimizerConfig())
        assert state.accumulators["w"][0] >= 0


@pytest.mark.parametrize("kwargs", [dict(learning_rate=0), dict(rho=1.0), dict(rho=0.0),
                                    dict(epsilon=0), dict(batch_size=0), dict(max_epochs=0)])
def test_optimizer_config_validation(kwargs):
    with pytest.raises(ValidationError):
        OptimizerConfig(**kwargs)


def test_frozen_parameters_bit_identical_through_training():
    rng = np.random.default_rng(0)
    g = ModelGraph()
    g.add_input("x", (3,))
    g.add("h", Dense(4), "x", rng=rng)
    g.add("r", ReLU(), "h")
    g.add("o", Dense(1, init="glorot"), "r", rng=rng)
    g.add("s", Sigmoid(), "o")
    g.set_trainable(False, "h.")
    frozen = {k: v.tobytes() for k, v in g.params.items() if k.startswith("h.")}
    state = RmspropState()
    for _ in range(20):
        x = rng.normal(size=(8, 3))
        y = (x[:, :1] > 0).astype(float)
        out = forward(g, {"x": x}, training_mode=True)["s"]
        rmsprop_step(g.params, backward(g, binary_cross_entropy_grad(out, y) / 8), state, OptimizerConfig(), g.trainable)
    assert {k: g.params[k].tobytes() for k in frozen} == frozen


def test_training_determinism():
    def run():
        rng = np.random.default_rng(4)
        g = ModelGraph()
        g.add_input("x", (3,))
        g.add("h", Dense(5), "x", rng=rng)
        g.add("dr", Dropout(0.5), "h")
        g.add("o", Dense(1), "dr", rng=rng)
        g.add("s", Sigmoid(), "o")
        state = RmspropState()
        drop = np.random.default_rng(9)
        for step in range(10):
            x = np.random.default_rng(step).normal(size=(4, 3))
            out = forward(g, {"x": x}, training_mode=True, rng=drop)["s"]
            rmsprop_step(g.params, backward(g, out - 1.0), state, OptimizerConfig())
        return {k: v.tobytes() for k, v in g.params.items()}

    assert run() == run()


# -- checkpoints --------------------------------------------------------------


def test_checkpoint_round_trip_bit_exact():
    rng = np.random.default_rng(0)
    params = {"a.W": rng.normal(size=(3, 2)), "b": np.array([np.pi, -0.0, 1e-300]), "c": rng.normal(size=(2, 2, 1, 3))}
    desc = {"graph": {"name": "x"}, "note": "ünïcode"}
    blob = checkpoint_bytes(desc, params)
    d2, p2 = read_checkpoint(io.BytesIO(blob))
    assert d2 == desc
    assert list(p2) == list(params)
    for k in params:
        assert p2[k].tobytes() == params[k].tobytes() and p2[k].shape == params[k].shape
    assert checkpoint_bytes(d2, p2) == blob


def test_checkpoint_layout():
    blob = checkpoint_bytes({}, {"w": np.array([1.5])})
    assert blob[:4] == b"BFUS"
    assert int.from_bytes(blob[4:8], "little") == 1
    assert blob[-8:] == np.array([1.5], dtype="<f8").tobytes()


def test_checkpoint_bad_magic_and_truncation():
    with pytest.raises(LoadError):
        read_checkpoint(io.BytesIO(b"NOPE" + b"\0" * 20))
    blob = checkpoint_bytes({}, {"w": np.ones(4)})
    with pytest.raises(LoadError):
        read_checkpoint(io.BytesIO(blob[:-3]))


def test_write_checkpoint_to_file(tmp_path):
    path = tmp_path / "m.bfus"
    with open(path, "wb") as fp:
        write_checkpoint(fp, {"k": 1}, {"p": np.arange(3.0)})
    with open(path, "rb") as fp:
        d, p = read_checkpoint(fp)
    assert d == {"k": 1} and p["p"].tolist() == [0.0, 1.0, 2.0]
