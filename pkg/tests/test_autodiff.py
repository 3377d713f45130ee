import numpy as np
import pytest

from spcv import autodiff as ad


def conv_ref(x, w, b=None):
    """Direct valid cross-correlation loop."""
    c, h, wd = x.shape
    o, _, kh, kw = w.shape
    out = np.zeros((o, h - kh + 1, wd - kw + 1))
    for i in range(out.shape[1]):
        for j in range(out.shape[2]):
            out[:, i, j] = np.tensordot(w, x[:, i:i + kh, j:j + kw], axes=([1, 2, 3], [0, 1, 2]))
    if b is not None:
        out += b[:, None, None]
    return out


def test_conv_matches_loop(rng):
    for k in (1, 3, 5):
        x = rng.normal(size=(4, 9, 7))
        w = rng.normal(size=(5, 4, k, k))
        b = rng.normal(size=5)
        got = ad.conv2d(ad.Tensor(x), ad.Tensor(w), ad.Tensor(b)).data
        np.testing.assert_allclose(got, conv_ref(x, w, b), rtol=1e-12, atol=1e-12)


def test_conv_kernel_grad_is_correlation_with_ones(rng):
    x = rng.normal(size=(3, 8, 8))
    w = ad.parameter(rng.normal(size=(2, 3, 3, 3)))
    out = ad.conv2d(ad.Tensor(x), w)
    out.sum().backward()
    ones = np.ones((1, 1, 6, 6))
    expected = np.stack([conv_ref(x[c:c + 1], ones)[0] for c in range(3)])  # (3, 3, 3)
    for o in range(2):
        np.testing.assert_allclose(w.grad[o], expected, rtol=1e-12)


def test_reflect_pad_matches_numpy(rng):
    x = rng.normal(size=(2, 5, 6))
    got = ad.pad_reflect(ad.Tensor(x), 2).data
    np.testing.assert_array_equal(got, np.pad(x, ((0, 0), (2, 2), (2, 2)), mode="reflect"))


@pytest.mark.parametrize("name,fn,tol", [
    ("sine", lambda x: x.sin().sum(), 1e-6),
    ("mean", lambda x: x.mean(), 1e-8),
    ("sum-axis", lambda x: (x.sum(axis=1) * x.sum(axis=1)).sum(), 1e-6),
    ("sqrt", lambda x: (x.square() + 1.0).sqrt().sum(), 1e-6),
    ("div", lambda x: (x / (x.square() + 2.0)).sum(), 1e-6),
    ("take", lambda x: (x.take(np.array([2, 0, 2, 1]), 1).square()).sum(), 1e-6),
])
def test_elementwise_gradients(rng, name, fn, tol):
    for _ in range(10):
        rep = ad.gradient_check(fn, [rng.uniform(-2, 2, size=(3, 4))], tol=tol)
        assert rep.passed, (name, rep.max_rel_error)


def test_cross_gradient(rng):
    fn = lambda a, b: (ad.cross(a, b, axis=0) * ad.Tensor(rng_w)).sum()
    rng_w = rng.normal(size=(3, 4))
    rep = ad.gradient_check(fn, [rng.normal(size=(3, 4)), rng.normal(size=(3, 4))])
    assert rep.passed, rep.max_rel_error


def test_conv_gradient(rng):
    for _ in range(5):
        x = rng.normal(size=(2, 6, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        b = rng.normal(size=3)
        proj = rng.normal(size=(3, 6, 5))
        fn = lambda x, w, b: (ad.conv2d(ad.pad_reflect(x, 1), w, b) * ad.Tensor(proj)).sum()
        rep = ad.gradient_check(fn, [x, w, b], tol=1e-4)
        assert rep.passed, rep.max_rel_error


def test_two_layer_net_gradient(rng):
    params = ad.init_generator(num_layers=2, hidden=4, kernel=3, zero_last=False, seed=5)
    grid = rng.uniform(size=(3, 5, 5))
    proj = rng.normal(size=(3, 5, 5))

    # gradient_check rebinds leaves each call, so route them through the closure
    def fn(*leaves):
        layers = []
        for i, layer in enumerate(params.layers):
            layers.append(ad.ConvLayer(leaves[2 * i], leaves[2 * i + 1], layer.activation, layer.frequency))
        out, _ = ad.forward_generator(ad.GeneratorParams(layers), grid)
        return (out * ad.Tensor(proj)).sum()

    rep = ad.gradient_check(fn, params.state_arrays(), tol=1e-4)
    assert rep.passed, rep.max_rel_error


def test_zero_last_layer_gives_zero_output(rng):
    params = ad.init_generator(num_layers=3, hidden=8, seed=1)
    out, _ = ad.forward_generator(params, rng.normal(size=(3, 6, 6)))
    assert np.all(out.data == 0)


def test_identity_layer():
    w = np.zeros((3, 3, 1, 1))
    w[[0, 1, 2], [0, 1, 2]] = 1.0
    params = ad.GeneratorParams([ad.ConvLayer(ad.parameter(w), ad.parameter(np.zeros(3)), "linear")])
    x = np.random.default_rng(0).normal(size=(3, 4, 5))
    out, _ = ad.forward_generator(params, x)
    np.testing.assert_array_equal(out.data, x)


def test_forward_deterministic(rng):
    p1 = ad.init_generator(num_layers=3, hidden=8, zero_last=False, seed=9)
    p2 = ad.init_generator(num_layers=3, hidden=8, zero_last=False, seed=9)
    x = rng.normal(size=(3, 7, 7))
    np.testing.assert_array_equal(ad.forward_generator(p1, x)[0].data, ad.forward_generator(p2, x)[0].data)


def test_shape_chain_validation():
    good = ad.init_generator(num_layers=2, hidden=4)
    bad = [good.layers[0], ad.ConvLayer(ad.parameter(np.zeros((3, 5, 3, 3))), ad.parameter(np.zeros(3)))]
    with pytest.raises(ValueError):
        ad.GeneratorParams(bad)
    with pytest.raises(ValueError):
        ad.forward_generator(good, np.zeros((4, 5, 5)))


def test_tape_reuse_rejected(rng):
    params = ad.init_generator(num_layers=2, hidden=4, zero_last=False)
    out, tape = ad.forward_generator(params, rng.normal(size=(3, 5, 5)))
    ad.backward(tape, np.ones(out.shape))
    with pytest.raises(ad.TapeConsumedError):
        ad.backward(tape, np.ones(out.shape))


def test_zero_loss_gradient(rng):
    params = ad.init_generator(num_layers=2, hidden=4, zero_last=False)
    out, tape = ad.forward_generator(params, rng.normal(size=(3, 5, 5)))
    ad.backward(tape, np.zeros(out.shape))
    for t in params.tensors():
        assert np.all(t.grad == 0)


def test_adam_first_step():
    p = ad.parameter(np.array(0.0))
    st = ad.AdamState(lr=0.1)
    ad.adam_step([p], [np.array(1.0)], st)
    assert st.step == 1
    assert p.data == pytest.approx(-0.1, abs=1e-6)


def test_adam_zero_grad_and_monotone():
    p = ad.parameter(np.array([1.0, -2.0]))
    st = ad.AdamState(lr=0.01)
    ad.adam_step([p], [np.zeros(2)], st)
    np.testing.assert_array_equal(p.data, [1.0, -2.0])
    assert st.step == 1
    prev = p.data.copy()
    for _ in range(100):
        ad.adam_step([p], [np.ones(2)], st)
        assert np.all(p.data < prev)
        prev = p.data.copy()


def test_adam_rejects_nonfinite():
    p = ad.parameter(np.zeros(2))
    with pytest.raises(ad.NonFiniteError):
        ad.adam_step([p], [np.array([np.nan, 0.0])], ad.AdamState())


def test_nonfinite_op_raises():
    with pytest.raises(ad.NonFiniteError):
        ad.Tensor(np.array([1.0, 0.0])) / ad.Tensor(np.array([0.0, 0.0]))


def test_external_scalar_routes_gradient(rng):
    x = ad.parameter(rng.normal(size=(4, 3)))
    g = rng.normal(size=(4, 3))
    s = ad.external_scalar(x, 2.5, g) * 3.0
    s.backward()
    assert s.data == 7.5
    np.testing.assert_allclose(x.grad, 3.0 * g)
