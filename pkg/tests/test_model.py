import numpy as np
import pytest

from gbpn import autodiff as ad
from gbpn.errors import InputError
from gbpn.graph import grid_graph
from gbpn.model import (ModelConfig, ModelParams, accuracy, coupling, degree_weights, forward,
                        init_params, loss, predict, self_log_beliefs, watch)


def _params(seed=0, c=2, width=8, raw=None):
    p = init_params(2, c, ModelConfig(hidden_width=width), np.random.default_rng(seed))
    if raw is not None:
        p.coupling_raw = np.asarray(raw, dtype=np.float64)
    return p


def test_coupling_symmetrization():
    p = _params(raw=[[0.0, 2.0], [0.0, 0.0]])
    np.testing.assert_array_equal(coupling(p).value, [[0.0, 1.0], [1.0, 0.0]])
    p = _params(raw=[[0.3, -1.0], [-1.0, 2.0]])
    np.testing.assert_array_equal(coupling(p).value, p.coupling_raw)


def test_coupling_gradient_splits_evenly():
    tape = ad.Tape()
    raw = tape.watch(np.zeros((2, 2)), "raw")
    L = coupling({"coupling_raw": raw})
    g = ad.backward(tape, ad.total(ad.mul(L, np.array([[0.0, 1.0], [0.0, 0.0]]))))["raw"]
    np.testing.assert_allclose(g, [[0.0, 0.5], [0.5, 0.0]])


def test_self_beliefs_uniform_and_normalized():
    p = _params(c=3)
    zeros = ModelParams([np.zeros_like(w) for w in p.weights], [np.zeros_like(b) for b in p.biases],
                        p.coupling_raw)
    X = np.random.default_rng(0).normal(size=(5, 2))
    np.testing.assert_allclose(self_log_beliefs(X, zeros).value, -np.log(3))
    out = self_log_beliefs(X, p).value
    assert np.abs(np.logaddexp.reduce(out, axis=1)).max() < 1e-12
    np.testing.assert_array_equal(self_log_beliefs(X, p).value, out)
    with pytest.raises(InputError):
        self_log_beliefs(np.zeros((5, 3)), p)


def test_degenerate_equivalences():
    g = grid_graph(3, 3)
    X = np.random.default_rng(1).normal(size=(9, 2))
    p = _params(seed=2)
    mlp = self_log_beliefs(X, p).value
    for T in (0, 1, 5):
        out = forward(g, X, p, ModelConfig(hidden_width=8, bp_steps=T)).value
        assert np.abs(out - mlp).max() < 1e-12
    p = _params(seed=2, raw=[[1.0, -0.5], [0.2, 0.3]])
    np.testing.assert_array_equal(forward(g, X, p, ModelConfig(hidden_width=8, bp_steps=0)).value, mlp)


def test_inductive_rejects_conditioning():
    g = grid_graph(2, 2)
    with pytest.raises(InputError):
        forward(g, np.zeros((4, 2)), _params(), ModelConfig(hidden_width=8, mode="inductive"), {0: 1})


def test_clamped_prediction_kept():
    g = grid_graph(3, 3)
    X = np.random.default_rng(3).normal(size=(9, 2))
    p = _params(seed=3, raw=[[-2.0, 2.0], [2.0, -2.0]])
    out = forward(g, X, p, ModelConfig(hidden_width=8), conditioned={0: 0, 5: 1})
    assert list(predict(out)[[0, 5]]) == [0, 1]


def test_loss_values():
    g = grid_graph(3, 3)  # node 4 has degree 4, node 1 degree 3
    uniform = ad.constant(np.full((9, 2), -np.log(2)))
    labels = np.zeros(9, dtype=np.int64)
    for beta in (0.0, 0.5, 2.0):
        assert loss(uniform, labels, [0, 4], g, beta).value == pytest.approx(np.log(2), abs=1e-12)
    b = np.tile(np.log([0.6, 0.4]), (9, 1))
    assert loss(ad.constant(b), labels, [4], g, 0.0).value == pytest.approx(-np.log(0.6), abs=1e-12)
    b = np.tile(np.log([0.9, 0.1]), (9, 1))
    expected = -np.log(0.9 ** 0.5 / (0.9 ** 0.5 + 0.1 ** 0.5))
    assert loss(ad.constant(b), labels, [4], g, 0.5).value == pytest.approx(expected, abs=1e-12)
    # sqrt(.9) / (sqrt(.9) + sqrt(.1)) = 3/4 exactly, so the value is ln(4/3) = 0.28768
    assert expected == pytest.approx(np.log(4 / 3), abs=1e-12)
    scaled = loss(ad.constant(b), labels, [4], g, 0.5, weighting="scale").value
    assert scaled == pytest.approx(-0.5 * np.log(0.9), abs=1e-12)


def test_degree_weights():
    np.testing.assert_allclose(degree_weights([0, 1, 4], 0.5), [1.0, 1.0, 0.5])


def test_predict_ties_and_shift():
    assert list(predict(np.log([[0.6, 0.4], [0.5, 0.5], [0.2, 0.8]]))) == [0, 0, 1]
    v = np.random.default_rng(0).normal(size=(6, 3))
    np.testing.assert_array_equal(predict(v), predict(v + np.arange(6)[:, None]))
    assert accuracy(np.log([[0.6, 0.4], [0.2, 0.8]]), [0, 0], [0, 1]) == 0.5


@pytest.mark.parametrize("beta", [0.0, 0.5])
@pytest.mark.parametrize("mode", ["inductive", "transductive"])
def test_end_to_end_gradient(beta, mode):
    g = grid_graph(2, 4)
    rng = np.random.default_rng(5)
    X = rng.normal(size=(8, 2))
    labels = rng.integers(0, 2, size=8)
    cfg = ModelConfig(hidden_width=6, bp_steps=3, beta=beta, mode=mode)
    p = init_params(2, 2, cfg, rng)
    p.coupling_raw = rng.normal(size=(2, 2))
    cond = {0: int(labels[0]), 5: int(labels[5])} if mode == "transductive" else None
    targets = [1, 2, 3, 4, 6, 7]

    def f(tape, t):
        return loss(forward(g, X, t, cfg, conditioned=cond), labels, targets, g, beta)

    assert ad.grad_check(f, p.as_dict()) < 1e-4


def test_params_validation_and_copy():
    p = _params()
    q = p.copy()
    q.weights[0][0, 0] += 1.0
    assert p.weights[0][0, 0] != q.weights[0][0, 0]
    with pytest.raises(InputError):
        ModelParams([np.zeros((2, 3)), np.zeros((4, 2))], [np.zeros(3), np.zeros(2)], np.zeros((2, 2)))
    with pytest.raises(InputError):
        ModelConfig(mode="semi")
    tape = ad.Tape()
    assert set(watch(tape, p)) == {"W0", "b0", "W1", "b1", "W2", "b2", "coupling_raw"}
