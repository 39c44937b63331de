"""Epinets on top of the frozen base models.

An epinet adds ``sigma(h, phi) = kappa * P(h) . phi + L(h, phi) . phi`` to a
base prediction, where ``h`` are stop-gradient features of the base network,
``P`` is a frozen ensemble of ``d_phi`` small random networks and ``L`` is a
learnable network.  Each draw ``phi ~ N(0, I)`` is one function sample.

For K1 the correction is added to the base network's standardized raw output
before the non-positive transform, so every sample stays strictly negative.
For the free energy it is added to ``f`` directly and ``Q`` follows from the
tangent of ``f`` with respect to the density (through the features).
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from . import nn
from .models import FModel, K1Model, g_derivative, g_transform
from .fem import DatasetF, DatasetK1

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class EpinetSpec:
    index_dim: int = 4
    prior_scale: float = 1.0
    prior_hidden: tuple = (16, 16)
    learn_hidden: tuple = (16, 16)
    epochs: int = 10000
    lr: float = 1e-4
    indices_per_epoch: int = 8

    def __post_init__(self):
        if self.index_dim < 1:
            raise ValueError("index_dim must be >= 1")
        if self.indices_per_epoch < 1:
            raise ValueError("indices_per_epoch must be >= 1")


@dataclass
class Epinet:
    spec: EpinetSpec
    priors: list              # d_phi frozen MLPs, features -> 1
    learnable: nn.MlpParams   # (features, phi) -> d_phi

    @property
    def feature_dim(self) -> int:
        return self.priors[0].weights[0].shape[0]

    def prior_basis(self, feats, feat_tangent=None):
        """``P(h)`` with shape (n, d_phi), plus its tangent when requested."""
        cols, tans = [], []
        for p in self.priors:
            if feat_tangent is None:
                cols.append(nn.forward(p, feats)[0][:, 0])
            else:
                out, dout, _ = nn.forward(p, feats, tangent=feat_tangent)
                cols.append(out[:, 0])
                tans.append(dout[:, 0])
        basis = np.column_stack(cols)
        return basis if feat_tangent is None else (basis, np.column_stack(tans))

    def learnable_inputs(self, feats, phi):
        phi = np.broadcast_to(np.asarray(phi, dtype=np.float64), (feats.shape[0], self.spec.index_dim))
        return np.column_stack([feats, phi]), phi

    def __call__(self, feats, phi) -> np.ndarray:
        """``sigma`` for one index (broadcast) or one index per row."""
        feats = np.asarray(feats, dtype=np.float64)
        x, ph = self.learnable_inputs(feats, phi)
        prior = self.spec.prior_scale * np.einsum("nd,nd->n", self.prior_basis(feats), ph)
        return prior + np.einsum("nd,nd->n", nn.forward(self.learnable, x)[0], ph)

    def with_tangent(self, feats, feat_tangent, phi):
        """``(sigma, d sigma)`` along a feature-space tangent, for one index."""
        x, ph = self.learnable_inputs(feats, phi)
        basis, dbasis = self.prior_basis(feats, feat_tangent)
        v = np.column_stack([feat_tangent, np.zeros_like(ph)])
        out, dout, _ = nn.forward(self.learnable, x, tangent=v)
        k = self.spec.prior_scale
        return (k * (basis * ph).sum(1) + (out * ph).sum(1),
                k * (dbasis * ph).sum(1) + (dout * ph).sum(1))

    def many(self, feats, phis) -> np.ndarray:
        """``sigma`` for every index in ``phis`` (m, d): returns (m, n).

        The feature part of the first learnable layer and the prior basis
        are shared across indices.
        """
        feats = np.asarray(feats, dtype=np.float64)
        phis = np.atleast_2d(np.asarray(phis, dtype=np.float64))
        prior = self.spec.prior_scale * self.prior_basis(feats) @ phis.T   # (n, m)
        ws, bs = self.learnable.weights, self.learnable.biases
        nf = feats.shape[1]
        base = feats @ ws[0][:nf] + bs[0]
        out = np.empty((phis.shape[0], feats.shape[0]))
        for k, ph in enumerate(phis):
            a = nn.softplus(base + ph @ ws[0][nf:])
            for w, b in zip(ws[1:-1], bs[1:-1]):
                a = nn.softplus(a @ w + b)
            out[k] = (a @ ws[-1] + bs[-1]) @ ph
        return out + prior.T


def init_epinet(feature_dim: int, spec: EpinetSpec, rng: np.random.Generator,
                zero_learnable: bool = False) -> Epinet:
    priors = [nn.init_xavier_uniform(nn.MlpSpec((feature_dim,) + tuple(spec.prior_hidden) + (1,)), rng)
              for _ in range(spec.index_dim)]
    lspec = nn.MlpSpec((feature_dim + spec.index_dim,) + tuple(spec.learn_hidden) + (spec.index_dim,))
    learn = nn.init_xavier_uniform(lspec, rng)
    if zero_learnable:
        learn.weights[-1][:] = 0.0
    return Epinet(spec, priors, learn)


def sample_indices(n: int, dim: int, rng: np.random.Generator) -> np.ndarray:
    """``n`` epistemic indices from the standard Gaussian."""
    return rng.standard_normal((n, dim))


# --------------------------------------------------------------------------- #
# ENNs


@dataclass
class EnnK1:
    base: K1Model
    epinet: Epinet

    def base_terms(self, edges):
        """Base raw output and features at the last sampler step."""
        return self.base.base_raw(edges)

    def predict(self, edges, phi) -> np.ndarray:
        raw, feats = self.base_terms(edges)
        return g_transform(raw + self.base.raw.std * self.epinet(feats, phi))

    def predict_many(self, edges, phis) -> np.ndarray:
        raw, feats = self.base_terms(edges)
        return g_transform(raw[None, :] + self.base.raw.std * self.epinet.many(feats, phis))


@dataclass
class EnnF:
    base: FModel
    epinet: Epinet

    def base_terms(self, rho):
        """``(f, Q, features, feature tangent)`` from the base readout."""
        rho = np.asarray(rho, dtype=np.float64).reshape(-1)
        f, q, cache = self.base.readout(rho)
        feats = np.column_stack([cache.features, rho])
        ftan = np.column_stack([cache.feature_tangent, np.ones_like(rho)])
        return f, q, feats, ftan

    def predict(self, rho, phi):
        """``(f, Q)`` of the function sample indexed by ``phi``."""
        f, q, feats, ftan = self.base_terms(rho)
        s, ds = self.epinet.with_tangent(feats, ftan, phi)
        return f + s, q + ds

    def predict_many(self, rho, phis):
        f, q, feats, ftan = self.base_terms(rho)
        phis = np.atleast_2d(phis)
        out_f = np.empty((phis.shape[0], f.size))
        out_q = np.empty_like(out_f)
        for k, ph in enumerate(phis):
            s, ds = self.epinet.with_tangent(feats, ftan, ph)
            out_f[k] = f + s
            out_q[k] = q + ds
        return out_f, out_q


# --------------------------------------------------------------------------- #
# Distillation


@dataclass
class EpinetHistory:
    loss: np.ndarray = field(default_factory=lambda: np.zeros(0))
    k1: np.ndarray = field(default_factory=lambda: np.zeros(0))
    f: np.ndarray = field(default_factory=lambda: np.zeros(0))


def _rows(feats, phis):
    """Stack features for every index: (m * n, nf) and the matching (m * n, d) indices."""
    m, n = phis.shape[0], feats.shape[0]
    return np.tile(feats, (m, 1)), np.repeat(phis, n, axis=0)


def train_epinets(enn_k1: EnnK1, enn_f: EnnF, dk: DatasetK1, df: DatasetF,
                  rng: np.random.Generator | None = None) -> EpinetHistory:
    """Joint distillation of both epinets against their frozen base models.

    Targets are the base predictions on the training conditions: K1 on the
    right edge, K0 from both edges and f at the middle node.  Both terms are
    measured in the standardized units the base networks were trained in.
    Each epoch draws a fresh batch of indices from a separate stream per
    epinet.  Only the learnable parameters change.
    """
    rng = np.random.default_rng(0) if rng is None else rng
    rk, rf = rng.spawn(2)
    ek, ef = enn_k1.epinet, enn_f.epinet
    spec = ek.spec
    if ef.spec.index_dim != spec.index_dim:
        raise ValueError("both epinets must share the index dimension")
    n = len(dk)
    raw_l, h_l = enn_k1.base_terms(dk.z[:, :2])
    raw_r, h_r = enn_k1.base_terms(dk.z[:, 1:])
    s_raw, sk = enn_k1.base.raw.std, enn_k1.base.target.std
    k_r = g_transform(raw_r)
    k0_t = -g_transform(raw_l) - k_r
    feats_k = np.vstack([h_l, h_r])
    raw_k = np.concatenate([raw_l, raw_r])
    rho_f = df.zf[:, 1]
    f_t, _, feats_f, _ = enn_f.base_terms(rho_f)
    sf = max(float(np.std(f_t)), 1e-12)
    nf_ = len(rho_f)

    opt = nn.adam_init([ek.learnable, ef.learnable], lr=spec.lr)
    m = spec.indices_per_epoch
    # prior contributions do not depend on the learnable parameters
    pk_basis = ek.spec.prior_scale * ek.prior_basis(feats_k)
    pf_basis = ef.spec.prior_scale * ef.prior_basis(feats_f)
    hist = EpinetHistory(np.empty(spec.epochs), np.empty(spec.epochs), np.empty(spec.epochs))
    for ep in range(spec.epochs):
        phk = sample_indices(m, spec.index_dim, rk)
        phf = sample_indices(m, spec.index_dim, rf)
        # K1 epinet
        xk, pk = _rows(feats_k, phk)
        outk, ck = nn.forward(ek.learnable, np.column_stack([xk, pk]))
        sig = np.tile(pk_basis, (m, 1)) * pk
        sig = sig.sum(1) + (outk * pk).sum(1)
        raw = np.tile(raw_k, m) + s_raw * sig
        kk = g_transform(raw).reshape(m, 2 * n)
        kl, kr = kk[:, :n], kk[:, n:]
        c = (-kl - kr - k0_t) / sk
        d = (kr - k_r) / sk
        lk = float(np.mean(c * c) + np.mean(d * d))
        gk = np.concatenate([-2 * c, -2 * c + 2 * d], axis=1) / (m * n * sk)
        gsig = gk.reshape(-1) * g_derivative(raw) * s_raw
        grad_k = nn.backward(ek.learnable, ck, gsig[:, None] * pk)
        # f epinet
        xf, pf = _rows(feats_f, phf)
        outf, cf = nn.forward(ef.learnable, np.column_stack([xf, pf]))
        sf_all = (np.tile(pf_basis, (m, 1)) * pf).sum(1) + (outf * pf).sum(1)
        e = sf_all / sf          # f~ - f^ = sigma
        lf = float(np.mean(e * e))
        grad_f = nn.backward(ef.learnable, cf, (2 * e / (m * nf_ * sf))[:, None] * pf)
        loss = lk + lf
        if not np.isfinite(loss):
            raise RuntimeError(f"train epinets: non-finite loss at epoch {ep}")
        hist.loss[ep], hist.k1[ep], hist.f[ep] = loss, lk, lf
        nn.adam_step(opt, [ek.learnable, ef.learnable], [grad_k, grad_f])
    return hist
