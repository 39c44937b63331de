import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from thermoflow import nn


def rel_err(a, b):
    a, b = np.asarray(a), np.asarray(b)
    return np.abs(a - b).max() / max(np.abs(b).max(), 1e-12)


def test_spec_invariants():
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 1))
    with pytest.raises(ValueError):
        nn.MlpSpec((3, 0, 1))


class TestInit:
    def test_biases_zero_and_bounds(self):
        p = nn.init_xavier_uniform(nn.MlpSpec((5, 50, 50, 50, 1)), np.random.default_rng(0))
        assert all(np.all(b == 0) for b in p.biases)
        for w in p.weights:
            assert np.abs(w).max() <= np.sqrt(6 / sum(w.shape))

    def test_variance(self):
        p = nn.init_xavier_uniform(nn.MlpSpec((300, 400, 1)), np.random.default_rng(1))
        w = p.weights[0]
        assert w.size >= 1e5
        assert abs(w.var() / (2 / 700) - 1) < 0.02

    def test_seed(self):
        spec = nn.MlpSpec((2, 8, 1))
        a = nn.init_xavier_uniform(spec, np.random.default_rng(5))
        b = nn.init_xavier_uniform(spec, np.random.default_rng(5))
        assert all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))


class TestForward:
    def test_zero_net(self):
        p = nn.zeros_like_params(nn.init_xavier_uniform(nn.MlpSpec((3, 4, 2)), np.random.default_rng(0)))
        y, _ = nn.forward(p, np.random.default_rng(1).normal(size=(7, 3)))
        assert np.all(y == 0)

    def test_softplus_zero(self):
        assert nn.softplus(0.0) == pytest.approx(0.693147, abs=1e-6)

    def test_unit_chain(self):
        p = nn.MlpParams([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)])
        y, _ = nn.forward(p, np.zeros((1, 1)))
        assert y[0, 0] == pytest.approx(np.log(2), abs=1e-15)

    def test_shape_mismatch(self):
        p = nn.init_xavier_uniform(nn.MlpSpec((3, 4, 1)), np.random.default_rng(0))
        with pytest.raises(ValueError):
            nn.forward(p, np.zeros((2, 4)))

    def test_pure(self):
        p = nn.init_xavier_uniform(nn.MlpSpec((3, 4, 1)), np.random.default_rng(0))
        x = np.random.default_rng(1).normal(size=(5, 3))
        assert np.array_equal(nn.forward(p, x)[0], nn.forward(p, x)[0])


class TestBackward:
    def setup_method(self):
        self.p = nn.init_xavier_uniform(nn.MlpSpec((3, 50, 50, 50, 2)), np.random.default_rng(0))
        self.x = np.random.default_rng(1).normal(size=(6, 3))

    def test_zero_cotangent(self):
        _, c = nn.forward(self.p, self.x)
        g = nn.backward(self.p, c, np.zeros((6, 2)))
        assert all(np.all(a == 0) for a in g.arrays())

    def test_linearity(self):
        rng = np.random.default_rng(2)
        g1, g2 = rng.normal(size=(6, 2)), rng.normal(size=(6, 2))
        _, c = nn.forward(self.p, self.x)
        a = nn.backward(self.p, c, g1).arrays()
        b = nn.backward(self.p, c, g2).arrays()
        ab = nn.backward(self.p, c, 2 * g1 - 3 * g2).arrays()
        for u, v, w in zip(a, b, ab):
            assert np.allclose(2 * u - 3 * v, w, atol=1e-12)

    def test_stale_cache(self):
        _, c = nn.forward(self.p, self.x)
        st_ = nn.adam_init(self.p)
        nn.adam_step(st_, self.p, nn.backward(self.p, c, np.ones((6, 2))))
        with pytest.raises(RuntimeError):
            nn.backward(self.p, c, np.ones((6, 2)))


def _loss(p, x, go, v=None, gt=None):
    if v is None:
        y, _ = nn.forward(p, x)
        return float((go * y).sum())
    y, dy, _ = nn.forward(p, x, tangent=v)
    return float((go * y).sum() + (gt * dy).sum())


def _fd_check(p, x, grads, loss, rng, n_coords=25, step=1e-5):
    """Central differences on random coordinates and along a random direction."""
    arrs, garrs = p.arrays(), grads.arrays()
    worst = 0.0
    for _ in range(n_coords):
        k = rng.integers(len(arrs))
        idx = tuple(rng.integers(s) for s in arrs[k].shape)
        old = arrs[k][idx]
        arrs[k][idx] = old + step
        lp = loss()
        arrs[k][idx] = old - step
        lm = loss()
        arrs[k][idx] = old
        fd = (lp - lm) / (2 * step)
        scale = max(np.abs(garrs[k]).max(), 1e-8)
        worst = max(worst, abs(fd - garrs[k][idx]) / scale)
    dirs = [rng.normal(size=a.shape) for a in arrs]
    for a, d in zip(arrs, dirs):
        a += step * d
    lp = loss()
    for a, d in zip(arrs, dirs):
        a -= 2 * step * d
    lm = loss()
    for a, d in zip(arrs, dirs):
        a += step * d
    fd = (lp - lm) / (2 * step)
    an = sum(float((g * d).sum()) for g, d in zip(garrs, dirs))
    worst = max(worst, abs(fd - an) / max(abs(an), 1e-8))
    return worst


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_parameter_gradient_property(seed):
    rng = np.random.default_rng(seed)
    n_in, n_out = int(rng.integers(1, 6)), int(rng.integers(1, 3))
    p = nn.init_xavier_uniform(nn.MlpSpec((n_in, 50, 50, 50, n_out)), rng)
    for b in p.biases:
        b += 0.1 * rng.normal(size=b.shape)
    x = rng.normal(size=(4, n_in))
    go = rng.normal(size=(4, n_out))
    _, c = nn.forward(p, x)
    g = nn.backward(p, c, go)
    assert _fd_check(p, x, g, lambda: _loss(p, x, go), rng) < 1e-5


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_tangent_gradient_property(seed):
    """Gradients of a loss that contains the input derivative of the output."""
    rng = np.random.default_rng(seed)
    n_in = int(rng.integers(1, 5))
    p = nn.init_xavier_uniform(nn.MlpSpec((n_in, 50, 50, 50, 2)), rng)
    x = rng.normal(size=(4, n_in))
    v = np.zeros_like(x)
    v[:, 0] = 1.0
    go, gt = rng.normal(size=(4, 2)), rng.normal(size=(4, 2))
    _, _, c = nn.forward(p, x, tangent=v)
    g = nn.backward(p, c, go, gt)
    assert _fd_check(p, x, g, lambda: _loss(p, x, go, v, gt), rng) < 1e-5


@given(st.integers(0, 2**31 - 1))
@settings(max_examples=100, deadline=None)
def test_input_gradient_property(seed):
    rng = np.random.default_rng(seed)
    n_in = int(rng.integers(1, 5))
    p = nn.init_xavier_uniform(nn.MlpSpec((n_in, 50, 50, 50, 2)), rng)
    x = rng.normal(size=(5, n_in))
    coord = int(rng.integers(n_in))
    dy = nn.input_gradient(p, x, coord)
    h = 1e-5
    xp, xm = x.copy(), x.copy()
    xp[:, coord] += h
    xm[:, coord] -= h
    fd = (nn.forward(p, xp)[0] - nn.forward(p, xm)[0]) / (2 * h)
    assert rel_err(dy, fd) < 1e-5
    # reverse-mode input cotangent agrees with the forward tangent
    go = rng.normal(size=(5, 2))
    _, c = nn.forward(p, x)
    _, gx = nn.backward(p, c, go, want_input=True)
    assert np.allclose(gx[:, coord], (go * dy).sum(axis=1), rtol=1e-10, atol=1e-12)


class TestInputGradient:
    def test_linear_single_layer(self):
        # identity-like hidden layer is not linear; use a tiny net and its exact chain rule
        w0 = np.array([[2.0], [-1.0]])
        w1 = np.array([[3.0]])
        p = nn.MlpParams([w0, w1], [np.zeros(1), np.zeros(1)])
        x = np.array([[0.0, 0.0]])
        # d/dx0 = w1 * sigmoid(0) * w0[0] = 3 * 0.5 * 2
        assert nn.input_gradient(p, x, 0)[0, 0] == pytest.approx(3.0)
        assert nn.input_gradient(p, x, 1)[0, 0] == pytest.approx(-1.5)

    def test_constant_output(self):
        p = nn.init_xavier_uniform(nn.MlpSpec((3, 4, 1)), np.random.default_rng(0))
        p.weights[-1][:] = 0
        p.biases[-1][:] = 2.0
        assert np.all(nn.input_gradient(p, np.ones((3, 3)), 1) == 0)


class TestAdam:
    def test_zero_gradient(self):
        w = [np.array([1.5, -2.0])]
        st_ = nn.adam_init(w, lr=0.1)
        for _ in range(50):
            nn.adam_step(st_, w, [np.zeros(2)])
        assert np.array_equal(w[0], [1.5, -2.0])
        assert st_.step == 50

    def test_scalar_quadratic(self):
        w = [np.array([0.0])]
        st_ = nn.adam_init(w, lr=0.1)
        for _ in range(500):
            nn.adam_step(st_, w, [2 * (w[0] - 3.0)])
        assert abs(w[0][0] - 3.0) < 1e-3

    def test_counter(self):
        w = [np.zeros(3)]
        st_ = nn.adam_init(w)
        nn.adam_step(st_, w, [np.ones(3)])
        assert st_.step == 1
