import math

import numpy as np
import pytest

from fewshot_dml import model
from fewshot_dml.losses import CombinedConfig, SoftTripleConfig, SupConConfig, cce, grad_check
from fewshot_dml.numerics import DimensionError, DomainError, Rng
from fewshot_dml.trainer import objective


def _params(activation="tanh", k=2, seed=0):
    return model.init_params(6, (5,), 4, 3, k, Rng(seed), activation)


def test_init_is_deterministic():
    a, b = model.flatten(*_params())[0], model.flatten(*_params())[0]
    assert np.array_equal(a, b)
    assert not np.array_equal(a, model.flatten(*_params(seed=1))[0])


def test_init_proxy_norms_and_shapes():
    enc, clf, proxies = model.init_params(6, (5, 7), 4, 3, 10, Rng(2))
    np.testing.assert_allclose(np.linalg.norm(proxies, axis=2), 1.0, atol=1e-12)
    assert [W.shape for W, _ in enc.layers] == [(5, 6), (7, 5), (4, 7)]
    assert clf.weight.shape == (3, 4) and proxies.shape == (3, 10, 4)
    with pytest.raises(DomainError):
        model.init_params(6, (0,), 4, 3, 2, Rng(0))


def test_zero_weights_give_zero_logits():
    enc, clf, _ = _params()
    enc.layers = [(np.zeros_like(W), np.zeros_like(b)) for W, b in enc.layers]
    clf = model.ClassifierParams(np.zeros_like(clf.weight), np.zeros_like(clf.bias))
    _, logits, _ = model.forward(np.random.default_rng(0).normal(size=(4, 6)), enc, clf)
    np.testing.assert_array_equal(logits, 0.0)
    assert cce(logits, [0, 1, 2, 0]).value == pytest.approx(math.log(3), abs=1e-12)


def test_identity_layer_passes_inputs_through():
    enc = model.EncoderParams([(np.eye(3), np.zeros(3))], "tanh")
    clf = model.ClassifierParams(np.ones((2, 3)), np.zeros(2))
    x = np.array([[3.0, -2.0, 0.5]])
    emb, _, _ = model.forward(x, enc, clf)
    np.testing.assert_array_equal(emb, x)


def test_hand_computed_tanh_layer():
    W1 = np.array([[0.5, -1.0], [2.0, 0.25]])
    b1 = np.array([0.1, -0.2])
    W2 = np.eye(2)
    enc = model.EncoderParams([(W1, b1), (W2, np.zeros(2))], "tanh")
    clf = model.ClassifierParams(np.eye(2), np.zeros(2))
    x = np.array([[1.0, 2.0], [-0.5, 0.0]])
    emb, _, _ = model.forward(x, enc, clf)
    expected = [[math.tanh(0.5 - 2.0 + 0.1), math.tanh(2.0 + 0.5 - 0.2)],
                [math.tanh(-0.25 + 0.1), math.tanh(-1.0 - 0.2)]]
    np.testing.assert_allclose(emb, expected, atol=1e-12)


def test_forward_deterministic_and_shape_checked():
    enc, clf, _ = _params()
    x = np.random.default_rng(1).normal(size=(5, 6))
    a, b = model.forward(x, enc, clf), model.forward(x, enc, clf)
    assert np.array_equal(a[0], b[0]) and np.array_equal(a[1], b[1])
    np.testing.assert_array_equal(model.embed(x, enc), a[0])
    with pytest.raises(DimensionError):
        model.forward(x[:, :5], enc, clf)


def test_backward_zero_upstream():
    enc, clf, _ = _params()
    emb, logits, cache = model.forward(np.ones((3, 6)), enc, clf)
    g = model.backward(cache, enc, clf, np.zeros_like(emb), np.zeros_like(logits))
    assert not np.any(model.flatten_grads(g))


def test_linear_cce_classifier_gradient_closed_form(rng):
    enc = model.EncoderParams([(rng.normal(size=(4, 6)), rng.normal(size=4))])
    clf = model.ClassifierParams(rng.normal(size=(3, 4)), rng.normal(size=3))
    x = rng.normal(size=(7, 6))
    y = rng.integers(0, 3, 7)
    emb, logits, cache = model.forward(x, enc, clf)
    b = cce(logits, y)
    g = model.backward(cache, enc, clf, np.zeros_like(emb), b.grad_logits)
    p = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    expected = (p - np.eye(3)[y]).T @ emb / 7
    np.testing.assert_allclose(g.clf_weight, expected, atol=1e-10)


@pytest.mark.parametrize("activation", ["tanh", "relu"])
@pytest.mark.parametrize("loss", [CombinedConfig(), CombinedConfig(0.5, SupConConfig(0.6)),
                                  CombinedConfig(0.5, SoftTripleConfig(k=2, gamma=0.1, lam=5.0, delta=0.5))],
                         ids=["cce", "supcon", "softtriple"])
def test_full_model_gradient(activation, loss):
    r = np.random.default_rng(11)
    enc, clf, proxies = _params(activation, seed=3)
    if loss.kind != "softtriple":
        proxies = None
    theta, layout = model.flatten(enc, clf, proxies)
    x = r.normal(size=(8, 6))
    y = np.array([0, 1, 2, 0, 1, 2, 0, 1])
    assert grad_check(objective(x, y, layout, loss), {"params": theta}) < 1e-5


def test_input_gradient_matches_finite_difference(rng):
    enc, clf, _ = _params()
    x = rng.normal(size=(4, 6))
    y = [0, 1, 2, 1]

    def fn(p):
        emb, logits, cache = model.forward(p["x"], enc, clf)
        b = cce(logits, y)
        return b.value, {"x": model.backward(cache, enc, clf, np.zeros_like(emb), b.grad_logits).inputs}

    assert grad_check(fn, {"x": x}) < 1e-6


def test_flatten_round_trip_is_bitwise():
    enc, clf, proxies = _params(k=3)
    vec, layout = model.flatten(enc, clf, proxies)
    e2, c2, p2 = model.unflatten(vec, layout)
    vec2, layout2 = model.flatten(e2, c2, p2)
    assert np.array_equal(vec, vec2) and layout == layout2
    assert layout.size == vec.size
    _, _, none = model.unflatten(*model.flatten(enc, clf))
    assert none is None
    with pytest.raises(DimensionError):
        model.unflatten(vec[:-1], layout)


def test_checkpoint_round_trip(tmp_path):
    enc, clf, proxies = _params("relu")
    vec, layout = model.flatten(enc, clf, proxies)
    model.save_checkpoint(tmp_path / "ck.json", vec, layout)
    vec2, layout2 = model.load_checkpoint(tmp_path / "ck.json")
    assert np.array_equal(vec, vec2) and layout2 == layout and layout2.activation == "relu"
