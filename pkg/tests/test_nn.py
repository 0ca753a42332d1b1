import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nnmrom import nn
from nnmrom.errors import ContractViolation, TrainingError


def mlp(widths, acts, seed=0):
    rng = np.random.default_rng(seed)
    return [nn.DenseLayer.init(a, b, act, rng) for a, b, act in zip(widths[:-1], widths[1:], acts)]


def stack_loss(layers, X, T):
    def f():
        acts = nn.stack_forward(layers, X, keep=True)
        loss, dy = nn.mse_loss(acts[-1], T)
        _, grads = nn.stack_backward(layers, acts, dy)
        return loss, grads

    return f


# ---------------------------------------------------------------- forward


def test_zero_layer_tanh_gives_zero():
    layer = nn.DenseLayer(np.zeros((3, 2)), np.zeros(3), "tanh")
    assert np.all(layer.forward(np.array([1.0, -2.0])) == 0.0)


def test_identity_linear_passthrough():
    layer = nn.DenseLayer(np.eye(4), np.zeros(4))
    x = np.random.default_rng(0).standard_normal((4, 6))
    np.testing.assert_array_equal(nn.forward(layer, x), x)


@pytest.mark.parametrize("act", nn.ACTIVATIONS)
def test_forward_matches_scalar_loop(act):
    rng = np.random.default_rng(1)
    layer = nn.DenseLayer(rng.standard_normal((3, 2)), rng.standard_normal(3), act)
    X = rng.standard_normal((2, 5))
    out = np.empty((3, 5))
    for n in range(5):
        for i in range(3):
            s = layer.bias[i]
            for j in range(2):
                s += layer.weights[i, j] * X[j, n]
            out[i, n] = {"linear": s, "tanh": np.tanh(s), "sigmoid": 1.0 / (1.0 + np.exp(-s))}[act]
    np.testing.assert_allclose(layer.forward(X), out, rtol=1e-14, atol=1e-15)
    np.testing.assert_allclose(layer.forward(X[:, 0]), out[:, 0], rtol=1e-14, atol=1e-15)


def test_layer_validation():
    with pytest.raises(ContractViolation):
        nn.DenseLayer(np.zeros((2, 2)), np.zeros(2), "relu")
    with pytest.raises(ContractViolation):
        nn.DenseLayer(np.zeros((2, 2)), np.zeros(3))
    with pytest.raises(ContractViolation):
        nn.DenseLayer(np.full((2, 2), np.nan), np.zeros(2))
    with pytest.raises(ContractViolation):
        nn.DenseLayer(np.zeros((2, 3)), np.zeros(2)).forward(np.zeros(2))


@settings(max_examples=50, deadline=None)
@given(st.floats(-10, 10), st.integers(0, 1000))
def test_linear_positive_homogeneity(alpha, seed):
    rng = np.random.default_rng(seed)
    layer = nn.DenseLayer(rng.standard_normal((4, 3)), np.zeros(4))
    x = rng.standard_normal(3)
    np.testing.assert_allclose(layer.forward(alpha * x), alpha * layer.forward(x), rtol=1e-12, atol=1e-12)


def test_glorot_bounds():
    rng = np.random.default_rng(0)
    W = nn.glorot_uniform(rng, 20, 8)
    assert np.abs(W).max() <= np.sqrt(6 / 28)
    assert W.shape == (20, 8)


def test_sigmoid_stable():
    x = np.array([-800.0, 0.0, 800.0])
    np.testing.assert_allclose(nn.sigmoid(x), [0.0, 0.5, 1.0])


# ---------------------------------------------------------------- loss


def test_mse_trivial_cases():
    X = np.ones((3, 4))
    loss, g = nn.mse_loss(X, X)
    assert loss == 0.0 and np.all(g == 0.0)
    loss, g = nn.mse_loss(np.zeros((1, 1)), np.ones((1, 1)))
    assert loss == 1.0 and g[0, 0] == -2.0


def test_mse_matches_two_loop_oracle():
    rng = np.random.default_rng(2)
    P, T = rng.standard_normal((20, 100)), rng.standard_normal((20, 100))
    total = 0.0
    for i in range(20):
        for j in range(100):
            total += (T[i, j] - P[i, j]) ** 2
    loss, g = nn.mse_loss(P, T)
    assert loss == pytest.approx(total / 2000, rel=1e-14)
    np.testing.assert_allclose(g, 2 * (P - T) / 2000, rtol=1e-14)


def test_mse_shape_mismatch():
    with pytest.raises(ContractViolation):
        nn.mse_loss(np.zeros((2, 3)), np.zeros((3, 2)))


# ---------------------------------------------------------------- Adam


def test_adam_zero_gradient_no_move():
    p = [np.array([1.0, -2.0])]
    nn.adam_step(nn.Adam(), p, [np.zeros(2)])
    np.testing.assert_array_equal(p[0], [1.0, -2.0])


def test_adam_first_step_hand_value():
    # t=1: m_hat = g, v_hat = g^2, so the step is lr * g / (|g| + eps)
    p = [np.array([0.0])]
    nn.adam_step(nn.Adam(lr=1e-3), p, [np.array([0.5])])
    assert p[0][0] == pytest.approx(-1e-3 * 0.5 / (0.5 + 1e-8), rel=1e-12)


def test_adam_second_step_hand_value():
    opt = nn.Adam(lr=0.01)
    p = [np.array([0.0])]
    g1, g2 = 0.5, -0.2
    nn.adam_step(opt, p, [np.array([g1])])
    nn.adam_step(opt, p, [np.array([g2])])
    m = 0.9 * 0.1 * g1 + 0.1 * g2
    v = 0.999 * 0.001 * g1**2 + 0.001 * g2**2
    step2 = 0.01 * (m / (1 - 0.9**2)) / (np.sqrt(v / (1 - 0.999**2)) + 1e-8)
    assert p[0][0] == pytest.approx(-0.01 * g1 / (g1 + 1e-8) - step2, rel=1e-12)


def test_adam_symmetry():
    p = [np.array([1.0, 1.0]), np.array([1.0])]
    g = [np.array([0.3, 0.3]), np.array([0.3])]
    opt = nn.Adam()
    for _ in range(5):
        nn.adam_step(opt, p, g)
    assert p[0][0] == p[0][1] == p[1][0]


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, 6, elements=st.floats(-5, 5)), st.floats(1e-3, 1e3))
def test_adam_sign_invariant_to_gradient_scale(g, c):
    a, b = [np.zeros(6)], [np.zeros(6)]
    nn.adam_step(nn.Adam(), a, [g])
    nn.adam_step(nn.Adam(), b, [c * g])
    np.testing.assert_array_equal(np.sign(a[0]), np.sign(b[0]))


def test_adam_rejects_non_finite():
    with pytest.raises(TrainingError):
        nn.adam_step(nn.Adam(), [np.zeros(2)], [np.array([1.0, np.inf])])
    with pytest.raises(ContractViolation):
        nn.adam_step(nn.Adam(), [np.zeros(2)], [np.zeros(3)])


def test_adam_minimizes_quadratic():
    p = [np.array([3.0, -4.0])]
    opt = nn.Adam(lr=0.05)
    for _ in range(2000):
        nn.adam_step(opt, p, [2 * p[0]])
    assert np.abs(p[0]).max() < 1e-3


def test_clip_by_global_norm():
    g = [np.array([3.0]), np.array([4.0])]
    clipped, norm = nn.clip_by_global_norm(g, 1.0)
    assert norm == 5.0
    np.testing.assert_allclose([clipped[0][0], clipped[1][0]], [0.6, 0.8])
    same, _ = nn.clip_by_global_norm(g, 10.0)
    assert same[0] is g[0]


# ---------------------------------------------------------------- gradients


def test_grad_check_linear_layer():
    rng = np.random.default_rng(3)
    layers = mlp([4, 3], ["linear"])
    X, T = rng.standard_normal((4, 10)), rng.standard_normal((3, 10))
    assert nn.grad_check(stack_loss(layers, X, T), nn.stack_params(layers)) < 1e-9


def test_grad_check_three_layer_tanh():
    rng = np.random.default_rng(4)
    layers = mlp([5, 6, 4, 5], ["tanh", "tanh", "linear"])
    X, T = rng.standard_normal((5, 12)), rng.standard_normal((5, 12))
    assert nn.grad_check(stack_loss(layers, X, T), nn.stack_params(layers)) < 1e-5


def test_grad_check_sigmoid_and_vector_input():
    rng = np.random.default_rng(5)
    layers = mlp([3, 4, 2], ["sigmoid", "tanh"])
    x, t = rng.standard_normal(3), rng.standard_normal(2)
    assert nn.grad_check(stack_loss(layers, x, t), nn.stack_params(layers)) < 1e-5


def test_grad_check_flags_wrong_gradient():
    p = [np.array([1.0, 2.0])]

    def bad():
        return float(np.sum(p[0] ** 2)), [p[0]]  # true gradient is 2p

    assert nn.grad_check(bad, p) > 0.4


def test_input_gradient():
    rng = np.random.default_rng(6)
    layers = mlp([3, 5, 2], ["tanh", "linear"])
    x, t = rng.standard_normal((3, 4)), rng.standard_normal((2, 4))

    def f():
        acts = nn.stack_forward(layers, x, keep=True)
        loss, dy = nn.mse_loss(acts[-1], t)
        dx, _ = nn.stack_backward(layers, acts, dy)
        return loss, [dx]

    assert nn.grad_check(f, [x]) < 1e-6


# ---------------------------------------------------------------- container


def test_container_round_trip(tmp_path):
    rng = np.random.default_rng(7)
    arrays_in = [rng.standard_normal((3, 2)), rng.standard_normal(3), np.array(4.0)]
    nn.save_container(tmp_path / "m.nnm", {"kind": "x", "n": 3}, arrays_in)
    header, arrays_out = nn.load_container(tmp_path / "m.nnm")
    assert header["kind"] == "x" and header["arrays"] == [[3, 2], [3], []]
    for a, b in zip(arrays_in, arrays_out):
        np.testing.assert_array_equal(a, b)


def test_container_layout(tmp_path):
    nn.save_container(tmp_path / "m.nnm", {}, [np.array([1.5, -2.0])])
    raw = (tmp_path / "m.nnm").read_bytes()
    assert raw[:8] == b"NNMROMM\x00"
    assert int.from_bytes(raw[8:12], "little") == 1
    assert np.frombuffer(raw[-16:], "<f8").tolist() == [1.5, -2.0]


def test_container_rejects_garbage(tmp_path):
    (tmp_path / "x").write_bytes(b"garbage" * 4)
    with pytest.raises(ContractViolation):
        nn.load_container(tmp_path / "x")


def test_layer_spec_round_trip():
    layers = mlp([3, 4, 2], ["tanh", "linear"])
    back = nn.layers_from_spec(nn.layers_to_spec(layers), nn.stack_params(layers))
    for a, b in zip(layers, back):
        assert a.activation == b.activation
        np.testing.assert_array_equal(a.weights, b.weights)
