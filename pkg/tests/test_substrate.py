"""Compute layer: operators, gradients, graphs, optimizers and checkpoints."""
import numpy as np
import pytest

from autood.errors import ContractError, FormatError, GraphConstructionError, NumericError, ShapeError
from autood.substrate import functional as F
from autood.substrate import optim
from autood.substrate.checkpoint import load_tensors, save_tensors
from autood.substrate.gradcheck import grad_check
from autood.substrate.graph import Graph, backward, forward
from autood.substrate.tensor import Tensor, grad, log

TOLERANCE = 1e-4


def _t(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape))


def test_conv2d_gradients(rng):
    for _ in range(3):
        x, w, b = _t(rng, 2, 2, 5, 5), _t(rng, 3, 2, 3, 3), _t(rng, 3)
        assert grad_check(F.conv2d, [x, w, b]) < TOLERANCE


def test_conv_transpose2d_gradients(rng):
    x, w, b = _t(rng, 2, 3, 4, 4), _t(rng, 3, 2, 5, 5), _t(rng, 2)
    assert grad_check(F.conv_transpose2d, [x, w, b]) < TOLERANCE


def test_conv_keeps_spatial_size_and_matches_direct_sum(rng):
    x, w = rng.standard_normal((1, 1, 4, 4)), rng.standard_normal((1, 1, 3, 3))
    out = F.conv2d(x, w).data
    padded = np.pad(x[0, 0], 1)
    expected = np.array([[np.sum(padded[i:i + 3, j:j + 3] * w[0, 0]) for j in range(4)] for i in range(4)])
    assert out.shape == (1, 1, 4, 4)
    np.testing.assert_allclose(out[0, 0], expected, atol=1e-12)


def test_pool_gradients(rng):
    x = Tensor(rng.permutation(2 * 2 * 6 * 6).reshape(2, 2, 6, 6) / 10.0)
    assert grad_check(lambda t: F.avg_pool2d(t, 3), x) < TOLERANCE
    assert grad_check(lambda t: F.max_pool2d(t, 3), x) < TOLERANCE
    assert grad_check(lambda t: F.unpool_nearest(t, (5, 5)), _t(rng, 1, 2, 3, 3)) < TOLERANCE


def test_pool_geometry_halves_or_keeps():
    x = np.arange(64, dtype=float).reshape(1, 1, 8, 8)
    assert F.avg_pool2d(x, 1).shape == (1, 1, 8, 8)
    for kernel in (3, 5, 7):
        assert F.max_pool2d(x, kernel).shape == (1, 1, 4, 4)
    assert F.avg_pool2d(x, 3, stride=1, padding=0).shape == (1, 1, 6, 6)


def test_norm_gradients(rng):
    x, gamma, beta = _t(rng, 3, 2, 3, 3), _t(rng, 2, low=0.5, high=1.5), _t(rng, 2)
    assert grad_check(lambda a, g, b: F.batch_norm(a, g, b, training=True), [x, gamma, beta]) < TOLERANCE
    assert grad_check(F.instance_norm, [x, gamma, beta]) < TOLERANCE


def test_batch_norm_running_statistics(rng):
    stats = F.RunningStats.for_channels(2)
    x = rng.normal(3.0, 2.0, size=(16, 2, 4, 4))
    F.batch_norm(x, np.ones(2), np.zeros(2), running=stats, training=True)
    np.testing.assert_allclose(stats.mean, 0.01 * x.mean(axis=(0, 2, 3)))
    evaluated = F.batch_norm(x, np.ones(2), np.zeros(2), running=stats, training=False)
    assert evaluated.shape == x.shape


@pytest.mark.parametrize("name", sorted(F.ACTIVATIONS))
def test_activation_gradients(name, rng):
    # keep away from the kinks at 0 and 6
    x = Tensor(rng.choice([-1, 1], size=(2, 5)) * rng.uniform(0.2, 0.9, size=(2, 5)))
    assert grad_check(F.ACTIVATIONS[name], x) < TOLERANCE


def test_lstm_and_log_softmax_gradients(rng):
    x, h, c = _t(rng, 1, 4), _t(rng, 1, 4), _t(rng, 1, 4)
    w, b = _t(rng, 8, 16, low=-0.3, high=0.3), _t(rng, 16)
    assert grad_check(lambda *a: F.lstm_cell(*a)[0], [x, h, c, w, b]) < TOLERANCE
    assert grad_check(F.log_softmax, _t(rng, 2, 5)) < TOLERANCE


def test_non_finite_forward_raises():
    with pytest.raises(NumericError):
        log(Tensor(np.array([0.0, 1.0])))


def test_grad_needs_scalar_loss():
    x = Tensor(np.ones(3), requires_grad=True)
    with pytest.raises(ContractError):
        grad(x * 2.0, [x])


def test_unreached_tensors_get_zero_gradient():
    x = Tensor(np.ones(3), requires_grad=True)
    y = Tensor(np.ones(2), requires_grad=True)
    gx, gy = grad((x * x).sum(), [x, y])
    np.testing.assert_allclose(gx, 2.0)
    np.testing.assert_allclose(gy, 0.0)


def test_graph_shape_inference_and_backward(rng):
    graph = Graph("toy")
    graph.input("x", (1, 6, 6))
    graph.parameter("w", Tensor(rng.standard_normal((4, 1, 3, 3)), requires_grad=True))
    graph.add("conv", "conv2d", ["x", "w"])
    graph.add("pool", "max_pool2d", ["conv"], kernel=3)
    graph.add("act", "relu", ["pool"])
    graph.add("flat", "flatten", ["act"])
    assert graph.shape_of("pool") == (4, 3, 3)
    assert ("conv", "pool") in graph.edges
    assert [op for _, op in graph.audit()] == ["conv2d", "max_pool2d", "relu", "flatten"]

    out = forward(graph, {"x": rng.standard_normal((3, 1, 6, 6))}, outputs=["flat"])["flat"]
    grads = backward(graph, out.sum())
    assert out.shape == (3, 36)
    assert grads["w"].shape == (4, 1, 3, 3)


def test_graph_construction_error_names_the_node(rng):
    graph = Graph()
    graph.input("x", (2, 4, 4))
    graph.parameter("w", Tensor(rng.standard_normal((3, 5, 3, 3))))
    with pytest.raises(GraphConstructionError) as excinfo:
        graph.add("bad_conv", "conv2d", ["x", "w"])
    assert excinfo.value.node == "bad_conv"
    with pytest.raises(GraphConstructionError):
        graph.add("orphan", "relu", ["missing"])


def test_optimizer_rejects_non_finite_gradients():
    param = Tensor(np.ones(2), requires_grad=True)
    state = optim.OptimizerState(kind="adam", learning_rate=0.1)
    with pytest.raises(NumericError):
        optim.step(state, {"p": param}, {"p": np.array([1.0, np.nan])})
    np.testing.assert_allclose(param.data, 1.0)
    with pytest.raises(ShapeError):
        optim.step(state, {"p": param}, {"p": np.ones(3)})


def test_sgd_momentum_and_adam_descend():
    for kind in ("sgd-momentum", "adam"):
        param = Tensor(np.array([2.0]), requires_grad=True)
        state = optim.OptimizerState(kind=kind, learning_rate=0.1, momentum=0.9)
        for _ in range(50):
            optim.step(state, {"p": param}, {"p": 2.0 * param.data})
        assert abs(param.data[0]) < 2.0


def test_step_schedule_drops_tenfold():
    assert optim.step_schedule(0.01, 0.0) == 0.01
    assert optim.step_schedule(0.01, 0.5) == pytest.approx(0.001)
    assert optim.step_schedule(0.01, 0.8) == pytest.approx(0.0001)


def test_checkpoint_round_trip(tmp_path, rng):
    tensors = {"enc/0/conv/1-8/k3/w": rng.standard_normal((8, 1, 3, 3)), "scalar": np.array(2.5)}
    path = save_tensors(tmp_path / "c.aodt", tensors)
    loaded = load_tensors(path)
    assert list(loaded) == list(tensors)
    np.testing.assert_array_equal(loaded["enc/0/conv/1-8/k3/w"], tensors["enc/0/conv/1-8/k3/w"])


def test_checkpoint_format_errors(tmp_path):
    path = save_tensors(tmp_path / "c.aodt", {"w": np.ones((2, 2))})
    blob = path.read_bytes()

    (tmp_path / "magic.aodt").write_bytes(b"XXXX" + blob[4:])
    with pytest.raises(FormatError) as excinfo:
        load_tensors(tmp_path / "magic.aodt")
    assert excinfo.value.offset == 0

    (tmp_path / "short.aodt").write_bytes(blob[:-3])
    with pytest.raises(FormatError):
        load_tensors(tmp_path / "short.aodt")


def test_checkpoint_rejects_undecodable_names(tmp_path):
    blob = bytearray(save_tensors(tmp_path / "c.aodt", {"w": np.ones(2)}).read_bytes())
    blob[12] = 0xFF  # first byte of the name, after magic, version and name length
    (tmp_path / "name.aodt").write_bytes(bytes(blob))
    with pytest.raises(FormatError) as excinfo:
        load_tensors(tmp_path / "name.aodt")
    assert excinfo.value.offset == 12


def test_pool_then_unpool_restores_the_shape(rng):
    for size in (4, 5, 8):
        x = _t(rng, 2, 3, size, size)
        for kernel in (3, 5, 7):
            pooled = F.max_pool2d(x, kernel)
            assert F.unpool_nearest(pooled, (size, size)).shape == x.shape
        assert F.unpool_nearest(F.avg_pool2d(x, 1), (size, size), factor=1).shape == x.shape


def test_dense_and_softmax_gradients(rng):
    x, w, b = _t(rng, 3, 4), _t(rng, 4, 5), _t(rng, 5)
    assert grad_check(F.dense, [x, w, b]) < TOLERANCE
    assert grad_check(F.softmax, _t(rng, 3, 6)) < TOLERANCE
    assert grad_check(lambda a, m: F.softmax(F.dense(a, m)), [x, w]) < TOLERANCE


def test_evaluation_forward_leaves_running_stats_alone(rng):
    running = F.RunningStats.for_channels(2)
    graph = Graph("bn")
    graph.input("x", (2, 3, 3))
    graph.parameter("gamma", Tensor(np.ones(2), requires_grad=True))
    graph.parameter("beta", Tensor(np.zeros(2), requires_grad=True))
    graph.add("norm", "batch_norm", ["x", "gamma", "beta"], running=running)
    batch = {"x": rng.standard_normal((4, 2, 3, 3)) + 3.0}

    forward(graph, batch, training=False)
    np.testing.assert_array_equal(running.mean, 0.0)
    np.testing.assert_array_equal(running.var, 1.0)

    forward(graph, batch, training=True)
    assert np.all(running.mean > 0.0)
