import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from rome.nn import (Adam, AdamState, ComputationGraph, GraphError, NonFiniteError,
                     SaturationWarning, adam_step, backward, cosine_lr, cross_entropy, forward,
                     load_graph, save_graph, softmax)
from rome.nn import tensor as T
from rome.nn.layers import dense, res_block
from rome.nn.tensor import Tensor

from gradcheck import check

TRIALS = 100
TOL = 1e-3


def away_from_zero(rng, shape, gap=0.05):
    """Values whose magnitude exceeds ``gap`` so ReLU kinks are never straddled by a probe."""
    x = rng.standard_normal(shape)
    return np.where(np.abs(x) < gap, np.sign(x + 1e-12) * gap * 2, x)


# ---------------------------------------------------------------- forward / backward examples

def test_linear_node_by_hand():
    g = ComputationGraph({"x": (1,)})
    g.add("linear", "x", {"W": np.array([[2.0]]), "b": np.array([1.0])})
    np.testing.assert_array_equal(forward(g, [np.array([3.0])]).data, [7.0])


def test_relu_node_by_hand():
    g = ComputationGraph({"x": (2,)})
    g.add("relu", "x")
    np.testing.assert_array_equal(forward(g, [np.array([-1.0, 2.0])]).data, [0.0, 2.0])


def _scalar_interpreter(g, x):
    """Independent per-scalar evaluation of a linear/relu chain."""
    vals = list(x)
    for node in g.nodes[1:]:
        if node.op == "linear":
            W, b = node.params["W"].data, node.params["b"].data
            vals = [sum(W[i, j] * vals[j] for j in range(len(vals))) + b[i] for i in range(len(b))]
        elif node.op == "relu":
            vals = [v if v > 0 else 0.0 for v in vals]
    return np.array(vals)


def test_two_layer_net_matches_scalar_interpreter():
    rng = np.random.default_rng(0)
    g = ComputationGraph({"x": (5,)})
    h = dense(g, "x", 5, 7, rng)
    h = g.add("relu", h)
    dense(g, h, 7, 3, rng)
    x = np.ones(5)
    np.testing.assert_allclose(forward(g, [x]).data, _scalar_interpreter(g, x), rtol=1e-12)


def test_identity_graph_backward():
    g = ComputationGraph({"x": (2,)})
    g.add("reshape", "x", attrs={"shape": (2,)})
    forward(g, [np.array([0.3, -0.1])])
    np.testing.assert_array_equal(backward(g, np.ones(2))["x"], [1.0, 1.0])


def test_square_backward():
    x = Tensor(np.array(3.0), requires_grad=True)
    T.square(x).backward()
    assert x.grad == pytest.approx(6.0)


def test_backward_before_forward_is_rejected():
    g = ComputationGraph({"x": (2,)})
    g.add("relu", "x")
    with pytest.raises(GraphError):
        backward(g, np.ones(2))


def test_backward_upstream_shape_mismatch():
    g = ComputationGraph({"x": (2,)})
    g.add("relu", "x")
    forward(g, [np.ones(2)])
    with pytest.raises(GraphError):
        backward(g, np.ones(3))


def test_forward_shape_mismatch():
    g = ComputationGraph({"x": (2,)})
    g.add("relu", "x")
    with pytest.raises(GraphError):
        forward(g, [np.ones(3)])


def test_non_finite_values_raise():
    with np.errstate(over="ignore"), pytest.raises(NonFiniteError):
        T.exp(Tensor(np.array([1e6])))


def test_three_layer_parameter_gradients_match_finite_differences():
    rng = np.random.default_rng(3)
    g = ComputationGraph({"x": (4,)})
    h = g.add("relu", dense(g, "x", 4, 6, rng))
    h = g.add("relu", dense(g, h, 6, 5, rng))
    dense(g, h, 5, 2, rng)
    x = rng.standard_normal((3, 4))
    up = rng.standard_normal((3, 2))
    forward(g, [x])
    grads = backward(g, up)
    step = 1e-4
    for name, t in g.parameters().items():
        num = np.zeros_like(t.data)
        for i in np.ndindex(t.data.shape):
            old = t.data[i]
            t.data[i] = old + step
            hi = float((g.run(x) * up).sum())
            t.data[i] = old - step
            lo = float((g.run(x) * up).sum())
            t.data[i] = old
            num[i] = (hi - lo) / (2 * step)
        scale = max(np.abs(num).max(), np.abs(grads[name]).max(), 1e-6)
        assert np.abs(num - grads[name]).max() / scale < TOL, name


# ---------------------------------------------------------------- gradient suite per layer kind

def _trials(fn):
    rng = np.random.default_rng(2024)
    worst = max(fn(rng) for _ in range(TRIALS))
    assert worst < TOL


def test_gradcheck_linear():
    def trial(rng):
        x, W, b, u = rng.standard_normal((3, 4)), rng.standard_normal((5, 4)), rng.standard_normal(5), rng.standard_normal((3, 5))
        return check(lambda x, W, b: T.tsum(T.mul(T.linear(x, W, b), Tensor(u))), [x, W, b])
    _trials(trial)


def test_gradcheck_conv2d():
    def trial(rng):
        stride = int(rng.integers(1, 3))
        x, W, b = rng.standard_normal((2, 2, 5, 5)), rng.standard_normal((3, 2, 3, 3)), rng.standard_normal(3)
        out_side = (5 + 2 - 3) // stride + 1
        u = rng.standard_normal((2, 3, out_side, out_side))
        return check(lambda x, W, b: T.tsum(T.mul(T.conv2d(x, W, b, stride=stride), Tensor(u))), [x, W, b])
    _trials(trial)


def test_gradcheck_relu():
    def trial(rng):
        x, u = away_from_zero(rng, (4, 6)), rng.standard_normal((4, 6))
        return check(lambda x: T.tsum(T.mul(T.relu(x), Tensor(u))), [x])
    _trials(trial)


def test_gradcheck_avgpool():
    def trial(rng):
        x, u = rng.standard_normal((2, 3, 4, 4)), rng.standard_normal((2, 3, 2, 2))
        return check(lambda x: T.tsum(T.mul(T.avg_pool2d(x, 2), Tensor(u))), [x])
    _trials(trial)


def test_gradcheck_softmax_cross_entropy():
    def trial(rng):
        z = 3 * rng.standard_normal((5, 7))
        labels = rng.integers(7, size=5)
        return check(lambda z: T.softmax_cross_entropy(z, labels), [z])
    _trials(trial)


def test_gradcheck_residual_block_graph():
    def trial(rng):
        g = ComputationGraph({"x": (2, 4, 4)})
        res_block(g, "x", 2, 3, rng, stride=2)
        x = rng.standard_normal((2, 2, 4, 4))
        shape = g.node_shapes()[g.output_id]
        u = rng.standard_normal((2, *shape))
        return check(lambda x: T.tsum(T.mul(g(x), Tensor(u))), [x])
    _trials(trial)


@pytest.mark.parametrize("op", ["project_l2", "complex_scale", "minmax_normalize", "nll", "amax"])
def test_gradcheck_auxiliary_ops(op):
    rng = np.random.default_rng(7)
    for _ in range(20):
        u = rng.standard_normal((3, 6))
        if op == "project_l2":
            eps = rng.uniform(0.2, 3.0, 3)
            fn = lambda x: T.tsum(T.mul(T.project_l2(x, eps), Tensor(u)))  # noqa: E731
        elif op == "complex_scale":
            h = rng.standard_normal(3) + 1j * rng.standard_normal(3)
            fn = lambda x: T.tsum(T.mul(T.complex_scale(x, h), Tensor(u)))  # noqa: E731
        elif op == "minmax_normalize":
            fn = lambda x: T.tsum(T.mul(T.minmax_normalize(x), Tensor(u)))  # noqa: E731
        elif op == "nll":
            labels = rng.integers(6, size=3)
            fn = lambda x: T.nll(T.softmax(x), labels)  # noqa: E731
        else:
            fn = lambda x: T.tsum(T.mul(T.amax(x, axis=1), Tensor(u[:, 0])))  # noqa: E731
        assert check(fn, [rng.standard_normal((3, 6))]) < TOL


# ---------------------------------------------------------------- optimiser and schedule

def test_adam_zero_gradient_leaves_params():
    p = {"w": np.array([1.0, -2.0])}
    adam_step(p, {"w": np.zeros(2)}, AdamState(lr0=0.1))
    np.testing.assert_array_equal(p["w"], [1.0, -2.0])


def test_adam_first_step_descends():
    p = {"w": np.array([1.0, 1.0])}
    adam_step(p, {"w": np.array([0.5, -3.0])}, AdamState(lr0=0.1))
    assert p["w"][0] < 1.0 < p["w"][1]


def test_adam_quadratic_matches_scalar_recursion():
    p, state = {"w": np.array([0.0])}, AdamState(lr0=0.1)
    w, m, v = 0.0, 0.0, 0.0
    for t in range(1, 101):
        adam_step(p, {"w": 2 * (p["w"] - 5)}, state)
        g = 2 * (w - 5)
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        w -= 0.1 * (m / (1 - 0.9 ** t)) / (math.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
    assert p["w"][0] == pytest.approx(w, abs=1e-10)
    assert abs(w - 5) < 0.5
    assert state.step == 100


def test_adam_shape_mismatch():
    with pytest.raises(ValueError):
        adam_step({"w": np.zeros(2)}, {"w": np.zeros(3)}, AdamState())


def test_adam_graph_wrapper_trains_linear_fit():
    rng = np.random.default_rng(0)
    g = ComputationGraph({"x": (3,)})
    dense(g, "x", 3, 1, rng)
    x = rng.standard_normal((64, 3))
    y = x @ np.array([1.0, -2.0, 0.5]) + 0.3
    opt = Adam(g, lr0=0.05, total_steps=400)
    for _ in range(400):
        opt.zero_grad()
        err = T.add(T.reshape(g(Tensor(x)), (64,)), Tensor(-y))
        loss = T.mean(T.square(err))
        loss.backward()
        opt.step()
    assert float(loss.data) < 1e-3


@pytest.mark.parametrize("step,expected", [(0, 1.0), (100, 0.0), (50, 0.5)])
def test_cosine_lr_points(step, expected):
    assert cosine_lr(step, 100, 1.0) == pytest.approx(expected, abs=1e-12)


def test_cosine_lr_rejects_zero_total():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1.0)


@given(st.integers(1, 500), st.floats(1e-6, 10))
def test_cosine_lr_non_increasing(total, lr0):
    lrs = [cosine_lr(s, total, lr0) for s in range(total + 1)]
    assert all(a >= b - 1e-15 for a, b in zip(lrs, lrs[1:]))


# ---------------------------------------------------------------- softmax / cross-entropy

def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0]), [0.5, 0.5])
    np.testing.assert_allclose(softmax([1000.0, 1000.0, 1000.0]), [1 / 3] * 3)
    e = math.e
    np.testing.assert_allclose(softmax([1.0, 0.0]), [e / (e + 1), 1 / (e + 1)], rtol=1e-12)


def test_softmax_empty():
    with pytest.raises(ValueError):
        softmax([])


@given(arrays(np.float64, st.integers(1, 20), elements=st.floats(-700, 700)), st.floats(-300, 300))
def test_softmax_simplex_and_shift_invariance(v, c):
    p = softmax(v)
    assert np.all(p >= 0) and np.all(p <= 1)
    assert abs(p.sum() - 1) <= 1e-9
    np.testing.assert_allclose(softmax(v + c), p, atol=1e-12)


def test_cross_entropy_examples():
    assert cross_entropy([0.0, 1.0, 0.0], 1) == 0.0
    assert cross_entropy(np.full(10, 0.1), 3) == pytest.approx(math.log(10))
    assert cross_entropy([0.25, 0.75], 1) == pytest.approx(-math.log(0.75))
    assert cross_entropy([0.25, 0.75], 1) == pytest.approx(0.2877, abs=1e-4)


def test_cross_entropy_saturates():
    with pytest.warns(SaturationWarning):
        assert cross_entropy([1.0, 0.0], 1) == pytest.approx(-math.log(1e-12))


def test_cross_entropy_label_range():
    with pytest.raises(IndexError):
        cross_entropy([0.5, 0.5], 2)


# ---------------------------------------------------------------- graph invariants and checkpoints

def test_graph_rejects_unknown_parent_and_op():
    g = ComputationGraph({"x": (2,)})
    with pytest.raises(GraphError):
        g.add("relu", "nope")
    with pytest.raises(GraphError):
        g.add("sigmoid", "x")


def test_forward_deterministic():
    rng = np.random.default_rng(5)
    g = ComputationGraph({"x": (1, 6, 6)})
    res_block(g, "x", 1, 2, rng)
    x = rng.standard_normal((4, 1, 6, 6))
    np.testing.assert_array_equal(g.run(x), g.run(x))


def _multi_input_graph(rng):
    g = ComputationGraph({"z": (3,), "eps": (1,)}, name="two-inputs")
    h = dense(g, "z", 3, 4, rng)
    h = g.add("relu", h)
    g.add("project_l2", [h, "eps"])
    return g


def test_checkpoint_round_trip_bit_exact(tmp_path):
    rng = np.random.default_rng(11)
    g = ComputationGraph({"x": (2, 6, 6)}, name="conv")
    x = res_block(g, "x", 2, 3, rng, stride=2)
    x = g.add("avgpool", x, attrs={"kernel": 3})
    x = g.add("flatten", x)
    dense(g, x, 3, 4, rng)
    save_graph(g, tmp_path / "g.npz")
    h = load_graph(tmp_path / "g.npz")
    assert [n.id for n in h.nodes] == [n.id for n in g.nodes]
    for k, t in g.parameters().items():
        assert t.data.tobytes() == h.parameters()[k].data.tobytes()
    inp = rng.standard_normal((3, 2, 6, 6))
    assert g.run(inp).tobytes() == h.run(inp).tobytes()


def test_checkpoint_preserves_input_order(tmp_path):
    rng = np.random.default_rng(12)
    g = _multi_input_graph(rng)
    save_graph(g, tmp_path / "g.npz")
    h = load_graph(tmp_path / "g.npz")
    assert h.input_ids == ["z", "eps"]
    z, eps = rng.standard_normal((5, 3)), rng.uniform(0, 1, (5, 1))
    np.testing.assert_array_equal(g.run(z, eps), h.run(z, eps))
