import math

import numpy as np
import pytest

from factorcast import autodiff as ad


def test_matmul_identity_passthrough():
    m = np.arange(12, dtype=float).reshape(3, 4)
    out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(m))
    np.testing.assert_array_equal(out.value, m)


def test_sigmoid_at_zero():
    assert ad.sigmoid(ad.Tensor(0.0)).item() == 0.5


def test_shape_mismatch_is_structured():
    with pytest.raises(ad.ShapeError) as exc:
        ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))
    assert "matmul" in str(exc.value)
    assert "(2, 3)" in str(exc.value)


def test_log_domain_error():
    with pytest.raises(ad.DomainError):
        ad.log(ad.Tensor([1.0, 0.0]))


def test_backward_linear_case():
    # loss = sum(W @ x): grad of W replicates x along output rows.
    w = ad.Tensor(np.random.default_rng(0).normal(size=(3, 2)))
    x = np.array([[0.5], [-2.0]])
    with ad.Graph({"w": w}) as g:
        loss = ad.tsum(ad.matmul(w, ad.Tensor(x)))
        grads = g.backward(loss)
    np.testing.assert_allclose(grads["w"], np.tile(x.T, (3, 1)))


def test_backward_rejects_nonscalar_loss():
    w = ad.Tensor(np.ones((2, 2)))
    with ad.Graph({"w": w}) as g:
        out = ad.mul(w, 2.0)
        with pytest.raises(ad.GraphError):
            g.backward(out)


def test_detach_blocks_gradient():
    x = ad.Tensor([3.0])
    w = ad.Tensor([2.0])
    with ad.Graph({"x": x, "w": w}) as g:
        loss = ad.tsum(ad.mul(ad.detach(x), w))
        grads = g.backward(loss)
    np.testing.assert_array_equal(grads["x"], [0.0])
    np.testing.assert_array_equal(grads["w"], [3.0])


def test_unreachable_parameter_gets_zero_gradient():
    used = ad.Tensor([1.0])
    unused = ad.Tensor(np.ones((2, 2)))
    with ad.Graph({"used": used, "unused": unused}) as g:
        grads = g.backward(ad.tsum(ad.square(used)))
    np.testing.assert_array_equal(grads["unused"], np.zeros((2, 2)))
    np.testing.assert_array_equal(grads["used"], [2.0])


def test_dropout_eval_mode_is_identity():
    x = ad.Tensor(np.random.default_rng(1).normal(size=(4, 5)))
    out = ad.dropout(x, rate=0.5, training=False)
    np.testing.assert_array_equal(out.value, x.value)


def test_dropout_training_scales_surviving_units():
    rng = np.random.default_rng(7)
    x = ad.Tensor(np.ones((200, 10)))
    out = ad.dropout(x, rate=0.25, training=True, rng=rng)
    survivors = out.value[out.value != 0]
    np.testing.assert_allclose(survivors, 1.0 / 0.75)
    assert abs(np.mean(out.value) - 1.0) < 0.05


def test_broadcast_add_bias_gradient():
    x = ad.Tensor(np.ones((4, 3)))
    b = ad.Tensor(np.zeros(3))
    with ad.Graph({"b": b}) as g:
        grads = g.backward(ad.tsum(ad.add(x, b)))
    np.testing.assert_array_equal(grads["b"], [4.0, 4.0, 4.0])


def test_concat_and_narrow_roundtrip_gradients():
    a = ad.Tensor(np.ones((2, 3)))
    b = ad.Tensor(np.ones((2, 2)))
    with ad.Graph({"a": a, "b": b}) as g:
        cat = ad.concat([a, b], axis=-1)
        loss = ad.tsum(ad.mul(ad.narrow(cat, -1, 3, 2), 5.0))
        grads = g.backward(loss)
    np.testing.assert_array_equal(grads["a"], np.zeros((2, 3)))
    np.testing.assert_array_equal(grads["b"], np.full((2, 2), 5.0))


def test_take_rows_scatters_gradient():
    x = ad.Tensor(np.arange(6, dtype=float).reshape(3, 2))
    with ad.Graph({"x": x}) as g:
        picked = ad.take_rows(x, [0, 0, 2])
        grads = g.backward(ad.tsum(picked))
    np.testing.assert_array_equal(grads["x"], [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]])


def test_no_active_graph_evaluates_eagerly():
    x = ad.Tensor(np.ones(3))
    out = ad.tanh(x)
    assert out.parents == ()
    assert out.bwd is None


# -- LSTM ---------------------------------------------------------------


def _zero_lstm(in_dim, hidden):
    return {
        f"{kind}_{g}": ad.Tensor(np.zeros(shape))
        for g in ad.LSTM_GATES
        for kind, shape in (("W", (in_dim, hidden)), ("R", (hidden, hidden)), ("b", (hidden,)))
    }


def test_lstm_zero_weights_fixed_point():
    weights = _zero_lstm(3, 4)
    x = ad.Tensor(np.random.default_rng(3).normal(size=(2, 3)))
    h = ad.Tensor(np.zeros((2, 4)))
    c = ad.Tensor(np.zeros((2, 4)))
    h2, c2 = ad.lstm_cell(x, h, c, weights)
    np.testing.assert_array_equal(h2.value, np.zeros((2, 4)))
    np.testing.assert_array_equal(c2.value, np.zeros((2, 4)))


def test_lstm_deterministic_forward():
    rng = np.random.default_rng(11)
    weights = ad.init_lstm(rng, 3, 4)
    x = ad.Tensor(rng.normal(size=(2, 3)))
    h = ad.Tensor(rng.normal(size=(2, 4)))
    c = ad.Tensor(rng.normal(size=(2, 4)))
    h1, c1 = ad.lstm_cell(x, h, c, weights)
    h2, c2 = ad.lstm_cell(x, h, c, weights)
    assert np.array_equal(h1.value, h2.value)
    assert np.array_equal(c1.value, c2.value)


def test_lstm_gradient_matches_finite_differences():
    rng = np.random.default_rng(5)
    weights = ad.init_lstm(rng, 3, 4)
    x = rng.normal(size=(2, 3))
    h0 = rng.normal(size=(2, 4))
    c0 = rng.normal(size=(2, 4))

    def loss():
        h, _ = ad.lstm_cell(ad.Tensor(x), ad.Tensor(h0), ad.Tensor(c0), weights)
        return ad.tsum(h)

    err = ad.gradient_check(loss, weights, eps=1e-5, max_coords=12, seed=0)
    assert err < 1e-4


def test_lstm_shape_mismatch():
    weights = _zero_lstm(3, 4)
    with pytest.raises(ad.ShapeError):
        ad.lstm_cell(ad.Tensor(np.ones((2, 5))), ad.Tensor(np.zeros((2, 4))),
                     ad.Tensor(np.zeros((2, 4))), weights)


# -- Adam ---------------------------------------------------------------


def test_adam_zero_gradient_keeps_parameters():
    p = ad.Tensor(np.array([1.0, -2.0]))
    opt = ad.Adam({"p": p}, lr=0.1)
    before = p.value.copy()
    opt.step({"p": np.zeros(2)})
    np.testing.assert_array_equal(p.value, before)
    assert opt.t == 1


def test_adam_constant_gradient_limit():
    # With a persistent gradient g, the bias-corrected update direction
    # approaches -lr * sign(g).
    p = ad.Tensor(np.array([0.0, 0.0]))
    g = np.array([0.37, -1.4])
    lr = 1e-3
    opt = ad.Adam({"p": p}, lr=lr)
    for _ in range(1000):
        before = p.value.copy()
        opt.step({"p": g.copy()})
    step_taken = p.value - before
    np.testing.assert_allclose(step_taken, -lr * np.sign(g), atol=lr * 1e-3)


def test_adam_determinism():
    def run():
        rng = np.random.default_rng(9)
        p = ad.Tensor(rng.normal(size=(3, 3)))
        opt = ad.Adam({"p": p}, lr=0.01)
        for _ in range(50):
            opt.step({"p": rng.normal(size=(3, 3))})
        return p.value

    assert np.array_equal(run(), run())


def test_adam_rejects_nonfinite_gradient():
    p = ad.Tensor(np.zeros(2))
    opt = ad.Adam({"p": p})
    with pytest.raises(ad.GraphError) as exc:
        opt.step({"p": np.array([1.0, np.nan])})
    assert "p" in str(exc.value)


def test_clip_grad_norm():
    grads = {"a": np.array([3.0]), "b": np.array([4.0])}
    norm = ad.clip_grad_norm(grads, max_norm=1.0)
    assert norm == pytest.approx(5.0)
    total = math.sqrt(sum(float(np.sum(g ** 2)) for g in grads.values()))
    assert total == pytest.approx(1.0)


# -- gradient_check harness ----------------------------------------------


def test_gradient_check_quadratic():
    w = ad.Tensor(np.array([3.0]))

    def loss():
        return ad.tsum(ad.square(w))

    assert ad.gradient_check(loss, {"w": w}, eps=1e-5) < 1e-8


def test_gradient_check_eps_bounds():
    w = ad.Tensor(np.array([1.0]))
    with pytest.raises(ValueError):
        ad.gradient_check(lambda: ad.tsum(w), {"w": w}, eps=1e-2)


def test_primitive_gradients_match_finite_differences():
    rng = np.random.default_rng(17)
    w = ad.Tensor(rng.uniform(0.5, 1.5, size=(3, 3)))
    x = rng.normal(size=(2, 3))

    cases = {
        "sigmoid": lambda t: ad.sigmoid(t),
        "tanh": lambda t: ad.tanh(t),
        "relu": lambda t: ad.relu(t),
        "exp": lambda t: ad.exp(t),
        "log": lambda t: ad.log(ad.add(ad.square(t), 0.1)),
        "square": lambda t: ad.square(t),
        "abs": lambda t: ad.absolute(t),
    }
    for name, fn in cases.items():
        def loss(fn=fn):
            return ad.tmean(ad.square(fn(ad.matmul(ad.Tensor(x), w))))

        err = ad.gradient_check(loss, {"w": w}, eps=1e-5, max_coords=9, seed=1)
        assert err < 1e-4, f"{name} gradient mismatch: {err}"


def test_full_graph_determinism():
    def run():
        rng = np.random.default_rng(23)
        w = ad.Tensor(rng.normal(size=(4, 4)))
        x = ad.Tensor(rng.normal(size=(5, 4)))
        with ad.Graph({"w": w}) as g:
            out = ad.tanh(ad.matmul(x, w))
            drop = ad.dropout(out, 0.3, training=True, rng=np.random.default_rng(99))
            loss = ad.tmean(ad.square(drop))
            grads = g.backward(loss)
        return loss.item(), grads["w"]

    l1, g1 = run()
    l2, g2 = run()
    assert l1 == l2
    assert np.array_equal(g1, g2)


# -- checkpoints ----------------------------------------------------------


def test_checkpoint_roundtrip_is_exact(tmp_path):
    rng = np.random.default_rng(31)
    params = {
        "layer1.W": ad.Tensor(rng.normal(size=(3, 4))),
        "layer1.b": ad.Tensor(rng.normal(size=(4,))),
    }
    path = tmp_path / "ckpt.json"
    ad.save_params(path, params, metadata={"note": "unit"})
    loaded, meta = ad.load_params(path)
    assert list(loaded) == list(params)
    for k in params:
        assert np.array_equal(loaded[k].value, params[k].value)
    assert meta["note"] == "unit"


def test_checkpoint_version_check(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"format_version": 99, "params": {}}')
    with pytest.raises(ValueError):
        ad.load_params(path)
