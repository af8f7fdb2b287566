import numpy as np
import pytest

from vlhmm import numerics as nx
from oracles import central_diff


rng = np.random.default_rng(0)


def test_matmul_vjp():
    a, b, g = rng.normal(size=(3, 4)), rng.normal(size=(4, 2)), rng.normal(size=(3, 2))
    ga, gb = nx.matmul_vjp(g, a, b)
    np.testing.assert_allclose(ga, central_diff(lambda v: (nx.matmul(v, b) * g).sum(), a), rtol=1e-6, atol=1e-8)
    np.testing.assert_allclose(gb, central_diff(lambda v: (nx.matmul(a, v) * g).sum(), b), rtol=1e-6, atol=1e-8)


def test_matmul_shape_error():
    with pytest.raises(ValueError):
        nx.matmul(np.zeros((2, 3)), np.zeros((2, 3)))


def test_layer_norm_vjp():
    x = rng.normal(size=(5, 6))
    gain, bias = rng.normal(size=6), rng.normal(size=6)
    g = rng.normal(size=(5, 6))
    _, cache = nx.layer_norm(x, gain, bias)
    gx, ggain, gbias = nx.layer_norm_vjp(g, cache)
    np.testing.assert_allclose(gx, central_diff(lambda v: (nx.layer_norm(v, gain, bias)[0] * g).sum(), x),
                               rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(ggain, central_diff(lambda v: (nx.layer_norm(x, v, bias)[0] * g).sum(), gain),
                               rtol=1e-5, atol=1e-7)
    np.testing.assert_allclose(gbias, g.sum(axis=0))


def test_layer_norm_standardizes():
    y, _ = nx.layer_norm(rng.normal(3, 5, size=(4, 64)), np.ones(64), np.zeros(64))
    np.testing.assert_allclose(y.mean(axis=1), 0, atol=1e-7)
    np.testing.assert_allclose(y.std(axis=1), 1, atol=1e-3)


def test_logsumexp_stable_and_all_neg_inf():
    v = np.array([1000.0, 1000.0])
    assert nx.logsumexp(v) == pytest.approx(1000 + np.log(2))
    out = nx.logsumexp(np.array([[-np.inf, -np.inf], [0.0, -np.inf]]), axis=1)
    assert out[0] == -np.inf and out[1] == 0.0


def test_log_softmax_vjp():
    z = rng.normal(size=(3, 5))
    g = rng.normal(size=(3, 5))
    out = nx.log_softmax(z)
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1)
    np.testing.assert_allclose(nx.log_softmax_vjp(g, out),
                               central_diff(lambda v: (nx.log_softmax(v) * g).sum(), z), rtol=1e-5, atol=1e-7)


def test_masked_log_softmax():
    z = rng.normal(size=(2, 4))
    mask = np.array([[1, 0, 1, 0], [1, 1, 1, 1]], dtype=bool)
    out = nx.masked_log_softmax(z, mask)
    assert np.isneginf(out[0, 1]) and np.isneginf(out[0, 3])
    np.testing.assert_allclose(np.exp(out).sum(axis=1), 1)
    g = rng.normal(size=(2, 4))
    ga = nx.masked_log_softmax_vjp(g, out)
    assert ga[0, 1] == 0 and ga[0, 3] == 0
    with pytest.raises(nx.EmptySupportError):
        nx.masked_log_softmax(z, np.zeros((2, 4), dtype=bool))


def test_embedding_vjp_accumulates_repeats():
    table = rng.normal(size=(4, 3))
    ids = np.array([1, 1, 3])
    g = np.ones((3, 3))
    np.testing.assert_array_equal(nx.embedding_gather(table, ids), table[ids])
    grad = nx.embedding_vjp(g, ids, 4)
    np.testing.assert_array_equal(grad[:, 0], [0, 2, 0, 1])


def test_finite_diff_and_relative_error():
    params = {"w": np.array([1.0, 2.0, -3.0])}
    num = nx.finite_diff_grad(lambda p: float((p["w"] ** 3).sum()), params)
    np.testing.assert_allclose(num["w"], 3 * params["w"] ** 2, rtol=1e-8)
    assert nx.max_relative_error({"w": num["w"] * (1 + 1e-3)}, num) == pytest.approx(1e-3, rel=1e-6)
    # Below the floor the error is absolute.
    assert nx.max_relative_error({"w": np.array([1e-9])}, {"w": np.array([0.0])}) == pytest.approx(1e-9)
