import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from pal_loco import nn


def small_mlp(rng, sizes=(7, 9, 8, 4)):
    net = nn.init_mlp(list(sizes), rng)
    # non-zero biases so every parameter is exercised
    return net.with_params([p + 0.1 * rng.standard_normal(p.shape) for p in net.params()])


def test_mlp_zero_weights_returns_bias():
    w = [np.zeros((3, 4)), np.zeros((4, 2))]
    b = [np.zeros(4), np.array([0.5, -2.0])]
    out = nn.Mlp(w, b)(np.ones((5, 3)))
    assert np.array_equal(out, np.tile([0.5, -2.0], (5, 1)))


def test_mlp_identity_on_positive_inputs():
    net = nn.Mlp([np.eye(4)], [np.zeros(4)])
    x = np.array([[0.1, 2.0, 3.0, 4.5]])
    assert np.array_equal(net(x), x)


def test_mlp_hidden_slope():
    net = nn.Mlp([np.eye(2), np.eye(2)], [np.zeros(2), np.zeros(2)])
    assert np.allclose(net(np.array([[-1.0, 2.0]])), [[-nn.LEAK, 2.0]])


def test_mlp_shape_error():
    net = nn.init_mlp([3, 4, 2], np.random.default_rng(0))
    with pytest.raises(nn.ShapeError):
        net(np.ones((2, 5)))


def test_mlp_gradients_match_finite_differences(rng):
    net = small_mlp(rng)
    x = rng.standard_normal((6, 7))
    up = rng.standard_normal((6, 4))
    params = [p.copy() for p in net.params()]

    def loss():
        return float(np.sum(nn.Mlp(params[0::2], params[1::2])(x) * up))

    out, cache = nn.Mlp(params[0::2], params[1::2]).forward(x)
    grads, gx = nn.Mlp(params[0::2], params[1::2]).backward(cache, up)
    assert nn.gradcheck(loss, params, grads) < 1e-4

    xs = x.copy()

    def loss_x():
        return float(np.sum(nn.Mlp(params[0::2], params[1::2])(xs) * up))

    assert nn.gradcheck(loss_x, [xs], [gx]) < 1e-4


def test_gru_zero_params_halves_hidden():
    p = nn.GruParams(*[np.zeros_like(a) for a in nn.init_gru(45, 36, np.random.default_rng(0)).params()])
    h = np.linspace(-0.9, 0.9, 36)
    h_new, cache = nn.gru_step(p, np.ones(45), h)
    z = cache[2]
    assert np.allclose(z, 0.5)
    assert np.allclose(h_new, 0.5 * h, atol=0, rtol=1e-15)


@given(st.integers(0, 2**31 - 1), st.floats(0.1, 50.0))
def test_gru_hidden_stays_bounded(seed, scale):
    rng = np.random.default_rng(seed)
    p = nn.init_gru(5, 4, rng)
    h = np.zeros((3, 4))
    for _ in range(200):
        h, _ = nn.gru_step(p, scale * rng.standard_normal((3, 5)), h)
        # tanh rounds to exactly 1.0 in float64 for large arguments
        assert np.all(np.abs(h) <= 1.0)


def test_gru_hidden_bounded_long_stream():
    rng = np.random.default_rng(5)
    p = nn.init_gru(45, 36, rng)
    h = np.zeros(36)
    xs = rng.uniform(-5, 5, (10_000, 45))
    for x in xs:
        h, _ = nn.gru_step(p, x, h)
    assert np.all(np.abs(h) < 1.0)


def test_gru_step_gradients(rng):
    p = nn.init_gru(5, 4, rng)
    params = [a + 0.1 * rng.standard_normal(a.shape) for a in p.params()]
    x = rng.standard_normal((3, 5))
    h = rng.uniform(-0.9, 0.9, (3, 4))
    up = rng.standard_normal((3, 4))

    def loss():
        return float(np.sum(nn.gru_step(nn.GruParams(*params), x, h)[0] * up))

    _, cache = nn.gru_step(nn.GruParams(*params), x, h)
    grads, dx, dh = nn.gru_step_backward(nn.GruParams(*params), cache, up)
    assert nn.gradcheck(loss, params, grads) < 1e-4
    xx, hh = x.copy(), h.copy()

    def loss_in():
        return float(np.sum(nn.gru_step(nn.GruParams(*params), xx, hh)[0] * up))

    assert nn.gradcheck(loss_in, [xx, hh], [dx, dh]) < 1e-4


def _bptt_loss_and_grads(params, xs, h0, resets, up, max_len=50):
    p = nn.GruParams(*params)
    win = nn.bptt_forward(p, xs, h0, resets, max_len)
    return float(np.sum(win.hiddens * up)), nn.bptt_backward(p, win, up)


def test_bptt_50_step_gradients(rng):
    p = nn.init_gru(6, 5, rng)
    params = [a.copy() for a in p.params()]
    xs = rng.standard_normal((50, 2, 6))
    h0 = rng.uniform(-0.5, 0.5, (2, 5))
    resets = np.zeros((50, 2), bool)
    resets[20, 1] = True
    up = rng.standard_normal((50, 2, 5))
    _, grads = _bptt_loss_and_grads(params, xs, h0, resets, up)

    def loss():
        return _bptt_loss_and_grads(params, xs, h0, resets, up)[0]

    assert nn.gradcheck(loss, params, grads, max_entries=25) < 1e-4


def test_bptt_window_too_long():
    p = nn.init_gru(3, 2, np.random.default_rng(0))
    with pytest.raises(nn.StateError):
        nn.bptt_forward(p, np.zeros((51, 1, 3)), np.zeros((1, 2)))


def test_bptt_upstream_mismatch():
    p = nn.init_gru(3, 2, np.random.default_rng(0))
    win = nn.bptt_forward(p, np.zeros((4, 1, 3)), np.zeros((1, 2)))
    with pytest.raises(nn.StateError):
        nn.bptt_backward(p, win, np.zeros((5, 1, 2)))


def test_bptt_single_step_equals_step_backward(rng):
    p = nn.init_gru(3, 2, rng)
    x = rng.standard_normal((1, 4, 3))
    h0 = rng.uniform(-0.5, 0.5, (4, 2))
    up = rng.standard_normal((1, 4, 2))
    win = nn.bptt_forward(p, x, h0)
    g1 = nn.bptt_backward(p, win, up)
    _, cache = nn.gru_step(p, x[0], h0)
    g2, _, _ = nn.gru_step_backward(p, cache, up[0])
    for a, b in zip(g1, g2):
        assert np.array_equal(a, b)


def test_bptt_linear_in_upstream(rng):
    p = nn.init_gru(3, 2, rng)
    xs = rng.standard_normal((10, 3, 3))
    win = nn.bptt_forward(p, xs, np.zeros((3, 2)))
    up = rng.standard_normal((10, 3, 2))
    g1 = nn.bptt_backward(p, win, up)
    g2 = nn.bptt_backward(p, win, 2.0 * up)
    for a, b in zip(g1, g2):
        assert np.allclose(2.0 * a, b, rtol=1e-12, atol=1e-15)


def test_truncation_changes_gradient(rng):
    p = nn.init_gru(3, 4, rng)
    xs = rng.standard_normal((50, 1, 3))
    up = rng.standard_normal((50, 1, 4))
    full = nn.bptt_backward(p, nn.bptt_forward(p, xs, np.zeros((1, 4))), up)
    w1 = nn.bptt_forward(p, xs[:25], np.zeros((1, 4)))
    w2 = nn.bptt_forward(p, xs[25:], w1.hiddens[-1])
    split = [a + b for a, b in zip(nn.bptt_backward(p, w1, up[:25]),
                                   nn.bptt_backward(p, w2, up[25:]))]
    # forward hiddens agree, gradients differ because the carry is cut
    assert np.allclose(np.concatenate([w1.hiddens, w2.hiddens]),
                       nn.bptt_forward(p, xs, np.zeros((1, 4))).hiddens)
    assert max(np.max(np.abs(a - b)) for a, b in zip(full, split)) > 1e-8


def test_gaussian_logprob_at_mean():
    head = nn.GaussianHead.fixed(12, 0.6)
    mean = np.zeros((1, 12))
    expected = -12 * math.log(0.6 * math.sqrt(2 * math.pi))
    assert abs(head.log_prob(mean, mean)[0] - expected) < 1e-12


def test_gaussian_doubling_sigma():
    a = nn.GaussianHead.fixed(12, 0.6)
    b = nn.GaussianHead.fixed(12, 1.2)
    m = np.zeros(12)
    assert abs(a.log_prob(m, m) - b.log_prob(m, m) - 12 * math.log(2)) < 1e-12


def test_gaussian_entropy_closed_form():
    head = nn.GaussianHead.fixed(12, 0.6)
    assert abs(head.entropy() - 12 * 0.5 * math.log(2 * math.pi * math.e * 0.36)) < 1e-12


def test_gaussian_sample_mean():
    head = nn.GaussianHead.fixed(12, 0.6)
    mean = np.linspace(-1, 1, 12)
    act, _ = head.sample(np.tile(mean, (100_000, 1)), np.random.default_rng(3))
    assert np.max(np.abs(act.mean(0) - mean)) < 0.01


def test_gaussian_logprob_gradients(rng):
    head = nn.GaussianHead(np.log(rng.uniform(0.3, 1.0, 12)))
    mean = rng.standard_normal((5, 12))
    act = mean + rng.standard_normal((5, 12))
    up = rng.standard_normal(5)
    d_mean, d_ls = head.log_prob_grads(mean, act, up)
    m = mean.copy()
    ls = head.log_std.copy()

    def loss():
        return float(np.sum(nn.GaussianHead(ls).log_prob(m, act) * up))

    assert nn.gradcheck(loss, [m, ls], [d_mean, d_ls]) < 1e-4


def test_adam_zero_grad_keeps_params():
    opt = nn.Adam()
    p = [np.arange(3.0)]
    assert np.array_equal(opt.update(p, [np.zeros(3)], 1e-3)[0], p[0])


def test_adam_constant_grad_step_tends_to_lr():
    opt = nn.Adam()
    p = [np.zeros(2)]
    for _ in range(2000):
        new = opt.update(p, [np.array([3.0, -0.2])], 1e-3)
        step = new[0] - p[0]
        p = new
    assert np.allclose(np.abs(step), 1e-3, rtol=1e-6)


def test_adam_deterministic():
    g = [np.array([0.3, -1.0])]
    a = nn.Adam().update([np.ones(2)], g, 1e-2)
    b = nn.Adam().update([np.ones(2)], g, 1e-2)
    assert np.array_equal(a[0], b[0])


def test_running_norm_matches_batch_stats(rng):
    x = rng.standard_normal((1000, 3)) * [1.0, 5.0, 0.1] + [0.0, 2.0, -1.0]
    rn = nn.RunningNorm.identity(3)
    for chunk in np.array_split(x, 7):
        rn.update(chunk)
    assert np.allclose(rn.mean, x.mean(0), atol=1e-12)
    assert np.allclose(rn.var, x.var(0), atol=1e-12)


def test_checkpoint_roundtrip(tmp_path, rng):
    net = small_mlp(rng)
    opt = nn.Adam()
    opt.update(net.params(), [np.ones_like(p) for p in net.params()], 1e-3)
    path = tmp_path / "c.npz"
    nn.save_checkpoint(path, {"net": net.params()}, {"note": "x"}, {"net": opt})
    mods, meta, opts = nn.load_checkpoint(path)
    assert meta["note"] == "x"
    assert all(np.array_equal(a, b) for a, b in zip(mods["net"], net.params()))
    assert opts["net"].step_count == 1
    assert all(np.array_equal(a, b) for a, b in zip(opts["net"].m, opt.m))
