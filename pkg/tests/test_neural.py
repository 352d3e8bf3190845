import numpy as np
import pytest

from src.errors import TrainingDivergedError
from src.models import TrainConfig
from src.neural import (ACTIVATION_KINDS, LINEAR, Activation, Autoencoder, DenseLayer, DenseNetwork,
                        LstmCell, backprop_gradients, dense_forward, gradient_check, lstm_cell_step, train)


def _sigmoid(v):
    return 1.0 / (1.0 + np.exp(-v))


def _scalar_dense(net, x):
    """Loop-by-loop reference forward pass."""
    a = list(x)
    for layer in net.layers:
        out = []
        for r in range(layer.out_dim):
            z = layer.bias[r] + sum(layer.weights[r, c] * a[c] for c in range(layer.in_dim))
            out.append(float(layer.activation(np.array([z]))[0]))
        a = out
    return np.array(a)


def test_identity_layer():
    net = DenseNetwork([DenseLayer(np.eye(3), np.zeros(3), LINEAR)])
    x = np.array([1.0, -2.0, 3.0])
    assert np.array_equal(dense_forward(net, x), x)


def test_relu_on_negative_input():
    net = DenseNetwork([DenseLayer(np.eye(3), np.zeros(3), Activation("relu"))])
    assert np.array_equal(dense_forward(net, -np.ones(3)), np.zeros(3))


def test_dense_matches_scalar_loop(rng):
    net = DenseNetwork.init([4, 5, 3], [Activation("tanh"), Activation("leaky_relu", 0.3)], seed=3)
    for layer in net.layers:
        layer.bias += rng.standard_normal(layer.out_dim)
    x = rng.standard_normal(4)
    assert np.allclose(dense_forward(net, x), _scalar_dense(net, x), atol=1e-12)


def test_width_mismatch_rejected():
    net = DenseNetwork.init([4, 2], [LINEAR])
    with pytest.raises(ValueError):
        dense_forward(net, np.zeros(3))
    with pytest.raises(ValueError):
        DenseNetwork([DenseLayer(np.eye(3), np.zeros(3)), DenseLayer(np.eye(2), np.zeros(2))])


def test_zero_lstm_cell():
    cell = LstmCell.zeros(2, 3)
    h, C = lstm_cell_step(cell, np.zeros(3), np.zeros(3), np.ones(2))
    assert np.array_equal(h, np.zeros(3))
    assert np.array_equal(C, np.zeros(3))
    c = np.array([1.0, -2.0, 0.5])
    h, C = lstm_cell_step(cell, np.zeros(3), c, np.ones(2))
    assert np.allclose(C, 0.5 * c)
    assert np.allclose(h, 0.5 * np.tanh(0.5 * c))


def test_lstm_matches_scalar_loop(rng):
    cell = LstmCell.init(2, 2, seed=5)
    cell.b_i += rng.standard_normal(2)
    h0, C0, x = rng.standard_normal(2), rng.standard_normal(2), rng.standard_normal(2)
    z = list(h0) + list(x)
    gates = {}
    for g, act in (("f", _sigmoid), ("i", _sigmoid), ("C", np.tanh), ("o", _sigmoid)):
        W, b = getattr(cell, f"W_{g}"), getattr(cell, f"b_{g}")
        gates[g] = [act(b[r] + sum(W[r, k] * z[k] for k in range(4))) for r in range(2)]
    C_ref = [gates["f"][r] * C0[r] + gates["i"][r] * gates["C"][r] for r in range(2)]
    h_ref = [gates["o"][r] * np.tanh(C_ref[r]) for r in range(2)]
    h, C = lstm_cell_step(cell, h0, C0, x)
    assert np.allclose(C, C_ref, atol=1e-12)
    assert np.allclose(h, h_ref, atol=1e-12)


def test_zero_residual_gives_zero_gradients(rng):
    net = DenseNetwork.init([3, 4, 2], [Activation("tanh"), LINEAR], seed=0)
    x = rng.standard_normal((5, 3))
    grads = backprop_gradients(net, x, net.forward(x))
    assert all(np.all(g == 0) for g in grads.values())


def test_empty_batch_rejected():
    net = DenseNetwork.init([3, 2], [LINEAR])
    with pytest.raises(ValueError):
        backprop_gradients(net, np.zeros((0, 3)), np.zeros((0, 2)))


@pytest.mark.parametrize("kind", ACTIVATION_KINDS)
def test_dense_gradients_match_finite_differences(rng, kind):
    for seed in range(20):
        net = DenseNetwork.init([3, 5, 2], [Activation(kind), Activation(kind)], seed=seed)
        x = rng.standard_normal((4, 3))
        y = rng.standard_normal((4, 2))
        assert gradient_check(net, x, y, n_probe=20, seed=seed) < 1e-5


def test_autoencoder_gradients(rng):
    leaky = Activation("leaky_relu", 0.3)
    ae = Autoencoder(DenseNetwork.init([6, 4, 2], [leaky, leaky], seed=0),
                     DenseNetwork.init([2, 4, 6], [leaky, leaky], seed=1))
    x = rng.standard_normal((5, 6))
    assert gradient_check(ae, x, x, n_probe=50) < 1e-5


class _CellModel:
    """Two unrolled steps of one cell, hidden state regressed on targets."""

    def __init__(self, cell):
        self.cell = cell

    def parameters(self):
        return self.cell.parameters()

    def _run(self, x):
        B = x.shape[0]
        h = np.zeros((B, self.cell.hidden_dim))
        C = np.zeros_like(h)
        caches = []
        for t in range(x.shape[1]):
            h, C, cache = self.cell.step(h, C, x[:, t])
            caches.append(cache)
        return h, caches

    def loss(self, x, y):
        h, _ = self._run(x)
        return float(np.mean((h - y) ** 2))

    def loss_and_gradients(self, x, y):
        h, caches = self._run(x)
        r = h - y
        dh, dC = 2.0 * r / r.size, np.zeros_like(h)
        grads = {k: np.zeros_like(v) for k, v in self.parameters().items()}
        for cache in reversed(caches):
            g, dh, dC, _ = self.cell.step_backward(cache, dh, dC)
            for k, v in g.items():
                grads[k] += v
        return float(np.mean(r ** 2)), grads


def test_lstm_cell_gradients(rng):
    for seed in range(100):
        model = _CellModel(LstmCell.init(3, 4, seed=seed))
        x = rng.standard_normal((3, 2, 3))
        y = rng.standard_normal((3, 4))
        assert gradient_check(model, x, y, n_probe=5, seed=seed) < 1e-5


def test_zero_learning_rate_keeps_parameters(rng):
    net = DenseNetwork.init([3, 2], [LINEAR], seed=0)
    before = {k: v.copy() for k, v in net.parameters().items()}
    x, y = rng.standard_normal((10, 3)), rng.standard_normal((10, 2))
    res = train(net, (x, y), TrainConfig(learning_rate=0.0, epochs=5, batch_size=4))
    assert all(np.array_equal(before[k], v) for k, v in res.model.parameters().items())
    assert len(set(res.history)) == 1


def test_linear_regression_converges(rng):
    A = rng.standard_normal((2, 3))
    b = rng.standard_normal(2)
    x = rng.standard_normal((50, 3))
    y = x @ A.T + b
    net = DenseNetwork.init([3, 2], [LINEAR], seed=0)
    res = train(net, (x, y), TrainConfig(learning_rate=0.1, epochs=2000, batch_size=50, optimizer="sgd"))
    assert res.history[-1] < 1e-8
    assert np.allclose(res.model.layers[0].weights, A, atol=1e-4)


def test_training_is_deterministic(rng):
    x, y = rng.standard_normal((30, 3)), rng.standard_normal((30, 2))
    net = DenseNetwork.init([3, 4, 2], [Activation("tanh"), LINEAR], seed=2)
    cfg = TrainConfig(learning_rate=1e-2, epochs=20, batch_size=8, seed=7)
    assert train(net, (x, y), cfg).history == train(net, (x, y), cfg).history


def test_divergence_reports_epoch(rng):
    x = rng.standard_normal((20, 3)) * 1e3
    y = rng.standard_normal((20, 2)) * 1e3
    net = DenseNetwork.init([3, 2], [LINEAR], seed=0)
    with pytest.raises(TrainingDivergedError) as err:
        train(net, (x, y), TrainConfig(learning_rate=10.0, epochs=200, batch_size=20, optimizer="sgd"))
    assert err.value.epoch >= 1


def test_network_save_load(rng, tmp_path):
    net = DenseNetwork.init([3, 4, 2], [Activation("leaky_relu", 0.3), Activation("sigmoid")], seed=1)
    loaded = DenseNetwork.load(net.save(tmp_path / "net"))
    x = rng.standard_normal((5, 3))
    assert np.array_equal(loaded.forward(x), net.forward(x))
    cell = LstmCell.init(2, 3, seed=0)
    assert np.array_equal(LstmCell.load(cell.save(tmp_path / "cell")).W_o, cell.W_o)


def test_gradients_invariant_to_duplicated_batch(rng):
    net = DenseNetwork.init([3, 4, 2], [Activation("tanh"), LINEAR], seed=2)
    x = rng.standard_normal((6, 3))
    y = rng.standard_normal((6, 2))
    once = backprop_gradients(net, x, y)
    twice = backprop_gradients(net, np.vstack([x, x]), np.vstack([y, y]))
    for name, g in once.items():
        assert np.allclose(twice[name], g, atol=1e-12), name


def test_bounded_activation_ranges(rng):
    z = np.concatenate([rng.standard_normal(200) * 10, [-30.0, 0.0, 30.0]])
    s = Activation("sigmoid")(z)
    t = Activation("tanh")(z)
    assert np.all((s > 0) & (s < 1))
    assert np.all((t > -1) & (t < 1))
