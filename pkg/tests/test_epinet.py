import copy

import numpy as np
import pytest

from thermoflow import epinet as E
from thermoflow import fem
from thermoflow import models as M
from thermoflow import nn


def _enns(bases, spec=E.EpinetSpec(), zero=False, seed=1):
    km, fm, _, _ = bases
    rng = np.random.default_rng(seed)
    return (E.EnnK1(km, E.init_epinet(52, spec, rng, zero)),
            E.EnnF(fm, E.init_epinet(51, spec, rng, zero)))


class TestPrior:
    def setup_method(self):
        self.net = E.init_epinet(6, E.EpinetSpec(), np.random.default_rng(0), zero_learnable=True)
        self.h = np.random.default_rng(1).normal(size=(40, 6))

    def test_zero_index(self):
        assert np.all(self.net(self.h, np.zeros(4)) == 0)

    def test_zero_scale(self):
        net = E.Epinet(E.EpinetSpec(prior_scale=0.0), self.net.priors, self.net.learnable)
        assert np.all(net(self.h, np.ones(4)) == 0)

    def test_zero_mean(self):
        phis = E.sample_indices(100_000, 4, np.random.default_rng(2))
        s = self.net.many(self.h[:3], phis)
        se = s.std(axis=0) / np.sqrt(phis.shape[0])
        assert np.all(np.abs(s.mean(axis=0)) < 3 * se)

    def test_linear_in_index(self):
        a, b = np.random.default_rng(3).normal(size=(2, 4))
        lhs = self.net(self.h, 2 * a - b)
        assert np.allclose(lhs, 2 * self.net(self.h, a) - self.net(self.h, b), atol=1e-12)


class TestLearnable:
    def test_zero_head(self):
        net = E.init_epinet(5, E.EpinetSpec(prior_scale=0.0), np.random.default_rng(0), zero_learnable=True)
        h = np.random.default_rng(1).normal(size=(10, 5))
        assert np.all(net.many(h, np.random.default_rng(2).normal(size=(7, 4))) == 0)

    def test_many_matches_single(self):
        net = E.init_epinet(5, E.EpinetSpec(), np.random.default_rng(0))
        h = np.random.default_rng(1).normal(size=(10, 5))
        phis = np.random.default_rng(2).normal(size=(3, 4))
        many = net.many(h, phis)
        for k in range(3):
            assert np.allclose(many[k], net(h, phis[k]), atol=1e-12)

    def test_parameter_gradient(self):
        rng = np.random.default_rng(4)
        net = E.init_epinet(5, E.EpinetSpec(), rng)
        h, phi, gs = rng.normal(size=(8, 5)), rng.normal(size=4), rng.normal(size=8)
        x, ph = net.learnable_inputs(h, phi)
        _, cache = nn.forward(net.learnable, x)
        grads = nn.backward(net.learnable, cache, gs[:, None] * ph).arrays()
        arrs = net.learnable.arrays()
        step = 1e-6
        for k in range(len(arrs)):
            idx = tuple(rng.integers(s) for s in arrs[k].shape)
            old = arrs[k][idx]
            arrs[k][idx] = old + step
            lp = float(gs @ net(h, phi))
            arrs[k][idx] = old - step
            lm = float(gs @ net(h, phi))
            arrs[k][idx] = old
            fd = (lp - lm) / (2 * step)
            assert abs(fd - grads[k][idx]) <= 1e-5 * max(np.abs(grads[k]).max(), 1e-8)


class TestEnn:
    def test_identity_at_zero(self, bases):
        ek, ef = _enns(bases, E.EpinetSpec(prior_scale=0.0), zero=True)
        e = np.random.default_rng(0).uniform(0, 1, (20, 2))
        phi = np.random.default_rng(1).normal(size=4)
        assert np.array_equal(ek.predict(e, phi), g_base := M.g_transform(bases[0].base_raw(e)[0]))
        assert np.allclose(g_base, bases[0].predict(e), rtol=1e-12, atol=0)
        rho = np.linspace(0.05, 0.95, 9)
        f, q = ef.predict(rho, phi)
        fb, qb = bases[1].predict(rho)
        assert np.array_equal(f, fb) and np.array_equal(q, qb)

    def test_k1_samples_negative(self, bases):
        ek, _ = _enns(bases)
        e = np.random.default_rng(0).uniform(0, 1, (50, 2))
        k = ek.predict_many(e, 3 * E.sample_indices(100, 4, np.random.default_rng(1)))
        assert np.all(k < 0)

    def test_variance_grows_with_scale(self, bases):
        e = np.random.default_rng(0).uniform(0.1, 0.9, (10, 2))
        phis = E.sample_indices(400, 4, np.random.default_rng(1))
        spreads = []
        for kappa in (0.0, 0.5, 1.0):
            ek, _ = _enns(bases, E.EpinetSpec(prior_scale=kappa), zero=True)
            k = ek.predict_many(e, phis)
            spreads.append(0.0 if np.ptp(k, axis=0).max() == 0 else k.var(axis=0).mean())
        assert spreads[0] == 0.0 and 0 < spreads[1] < spreads[2]

    def test_sample_force_is_derivative(self, bases):
        _, ef = _enns(bases)
        phi = np.random.default_rng(3).normal(size=4)
        rho = np.linspace(0.1, 0.9, 17)
        h = 1e-5
        _, q = ef.predict(rho, phi)
        fd = (ef.predict(rho + h, phi)[0] - ef.predict(rho - h, phi)[0]) / (2 * h)
        assert np.abs(q - fd).max() < 1e-4
        fm, qm = ef.predict_many(rho, phi[None])
        assert np.allclose(qm[0], q, atol=1e-12)


class TestIndices:
    def test_seeded(self):
        a = E.sample_indices(5, 4, np.random.default_rng(9))
        assert np.array_equal(a, E.sample_indices(5, 4, np.random.default_rng(9)))

    def test_covariance(self):
        c = np.cov(E.sample_indices(100_000, 4, np.random.default_rng(0)).T)
        assert np.abs(c - np.eye(4)).max() < 0.02

    def test_spec_validation(self):
        with pytest.raises(ValueError):
            E.EpinetSpec(index_dim=0)


class TestTraining:
    @pytest.fixture(scope="class")
    @staticmethod
    def trained(bases):
        km, fm, dk, df = bases
        spec = E.EpinetSpec(epochs=600, lr=1e-3)
        ek, ef = _enns(bases, spec)
        before = (copy.deepcopy(km.params), copy.deepcopy(fm.params),
                  copy.deepcopy(ek.epinet.priors), copy.deepcopy(ef.epinet.priors))
        hist = E.train_epinets(ek, ef, dk, df, np.random.default_rng(4))
        return ek, ef, before, hist

    def test_loss_decreases(self, trained):
        hist = trained[3]
        assert hist.loss[-50:].mean() < 0.1 * hist.loss[:10].mean()

    def test_frozen_parts(self, trained, bases):
        ek, ef, (kp, fp, pk, pf), _ = trained
        same = lambda a, b: all(np.array_equal(x, y) for x, y in zip(a.arrays(), b.arrays()))
        assert same(kp, bases[0].params) and same(fp, bases[1].params)
        assert all(same(a, b) for a, b in zip(pk, ek.epinet.priors))
        assert all(same(a, b) for a, b in zip(pf, ef.epinet.priors))

    def test_mean_reproduces_targets(self, trained, bases):
        ek, _, _, _ = trained
        dk = bases[2]
        phis = E.sample_indices(500, 4, np.random.default_rng(7))
        mean = ek.predict_many(dk.z[:, 1:], phis).mean(axis=0)
        target = bases[0].predict(dk.z[:, 1:])
        assert np.abs(mean / target - 1).max() < 0.01

    @pytest.mark.filterwarnings("ignore::RuntimeWarning")
    def test_nan_guard(self, bases):
        km, fm, dk, df = bases
        ek, ef = _enns(bases, E.EpinetSpec(epochs=2))
        bad = fem.DatasetF(df.node, df.b, df.k_rows, np.full_like(df.zf, np.nan), df.upsilon)
        with pytest.raises((RuntimeError, ValueError)):
            E.train_epinets(ek, ef, dk, bad)
