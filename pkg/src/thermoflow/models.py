"""Conditional diffusion models for the operator entry K1 and the free energy f.

Both networks predict the clean target from ``(condition, noised target,
Fourier time embedding)``.  The K1 network's output is a raw value that the
non-positive transform ``g`` maps to the operator entry; the free-energy
network has two heads, ``f`` and the auxiliary target ``Upsilon``, and the
driving force ``Q = df/drho`` is obtained by forward-mode differentiation.

The module also holds the deterministic two-network baseline trained with
noise-weighted residuals.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from . import diffusion as dm
from . import nn
from .fem import DatasetF, DatasetK1

log = logging.getLogger(__name__)

E5 = math.exp(-5.0)
_RAW_FLOOR = -700.0  # keeps exp(raw - 5) > 0 in double precision


# --------------------------------------------------------------------------- #
# Structure-preserving pieces


def g_transform(raw):
    """Non-positive map: ``-raw - e^-5`` for ``raw >= 0``, ``-exp(raw - 5)`` otherwise."""
    raw = np.asarray(raw, dtype=np.float64)
    neg = np.maximum(np.minimum(raw, 0.0), _RAW_FLOOR)
    return np.where(raw >= 0, -raw - E5, -np.exp(neg - 5.0))


def g_derivative(raw):
    raw = np.asarray(raw, dtype=np.float64)
    neg = np.maximum(np.minimum(raw, 0.0), _RAW_FLOOR)
    return np.where(raw >= 0, -1.0, -np.exp(neg - 5.0))


def g_inverse(k):
    """Inverse of :func:`g_transform`; non-negative inputs are clipped just below 0."""
    k = np.minimum(np.asarray(k, dtype=np.float64), -1e-300)
    return np.where(k <= -E5, -k - E5, np.log(-k) + 5.0)


def k0_from_k1(k1_left, k1_right):
    return -np.asarray(k1_left) - np.asarray(k1_right)


def assemble_operator(densities, k1_source) -> np.ndarray:
    """Periodic tridiagonal operator; ``k1_source`` maps edge pairs (n, 2) to K1."""
    z = np.asarray(densities, dtype=np.float64)
    edges = np.column_stack([z, np.roll(z, -1)])
    k1 = np.asarray(k1_source(edges), dtype=np.float64).reshape(-1)
    n = z.size
    k = np.zeros((n, n))
    i = np.arange(n)
    k[i, (i + 1) % n] += k1
    k[(i + 1) % n, i] += k1
    k[i, i] = k0_from_k1(np.roll(k1, 1), k1)
    return k


def _clamp_unit(x, what):
    x = np.asarray(x, dtype=np.float64)
    if np.any((x < 0) | (x > 1)):
        log.warning("%s outside [0, 1] clamped", what)
        x = np.clip(x, 0.0, 1.0)
    return x


# --------------------------------------------------------------------------- #
# Configuration


@dataclass(frozen=True)
class DiffusionTrainConfig:
    epochs: int = 20000
    lr: float = 1e-4
    steps: int = 50
    hidden: tuple = (50, 50, 50)
    log_every: int = 0


K1_DEFAULT = DiffusionTrainConfig(epochs=20000, lr=1e-4)
F_DEFAULT = DiffusionTrainConfig(epochs=20000, lr=1e-3)


def _check_loss(loss, stage, epoch):
    if not np.isfinite(loss):
        raise RuntimeError(f"{stage}: non-finite loss at epoch {epoch}")


# --------------------------------------------------------------------------- #
# K1 model


@dataclass
class K1Model:
    params: nn.MlpParams
    schedule: dm.DiffusionSchedule
    target: dm.Standardizer
    raw: dm.Standardizer
    trained: bool = False
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def steps(self) -> int:
        return self.schedule.steps

    def inputs(self, edges, y, w):
        edges = np.asarray(edges, dtype=np.float64).reshape(-1, 2)
        emb = np.broadcast_to(dm.fourier_embed(w, self.steps), (edges.shape[0], 2))
        return np.column_stack([edges, np.broadcast_to(y, edges.shape[0]), emb])

    def raw_output(self, edges, y, w):
        out, cache = nn.forward(self.params, self.inputs(edges, y, w))
        return self.raw.decode(out[:, 0]), cache

    def __call__(self, y, w, edges):
        raw, _ = self.raw_output(edges, y, w)
        return self.target.encode(g_transform(raw))

    def final_state(self, edges, n_steps=2, eta=0.0, rng=None):
        """Diffusion state ``(y, w)`` at the last sampler step."""
        edges = np.asarray(edges, dtype=np.float64).reshape(-1, 2)
        return _final_state(self, edges, edges.shape[0], n_steps, eta, rng)

    def base_raw(self, edges, n_steps=2):
        """Deterministic raw prediction and the features at the last step."""
        edges = _clamp_unit(np.asarray(edges).reshape(-1, 2), "K1 condition")
        y, w = self.final_state(edges, n_steps)
        raw, cache = self.raw_output(edges, y, w)
        return raw, np.column_stack([cache.features, edges])

    def predict(self, edges, n_steps=2, eta=0.0, rng=None):
        """K1 for each edge pair (always < 0)."""
        edges = _clamp_unit(np.asarray(edges).reshape(-1, 2), "K1 condition")
        y_hat = dm.sample(self, edges, self.schedule, n_steps, eta, rng, shape=(edges.shape[0],))
        return self.target.decode(y_hat)


def predict_k1(model: K1Model, z_pair, n_steps: int = 2) -> np.ndarray:
    return model.predict(z_pair, n_steps)


def _final_state(model, cond, n, n_steps, eta, rng):
    if not model.trained:
        raise RuntimeError("model has not been trained")
    steps = dm.ddim_steps(model.schedule.steps, n_steps)
    y = rng.standard_normal(n) if rng is not None else np.zeros(n)
    for k in range(steps.size - 1):
        y_hat = model(y, int(steps[k]), cond)
        y = dm.ddim_update(y, y_hat, int(steps[k]), model.schedule, eta, rng, prev=int(steps[k + 1]))
    return y, int(steps[-1])


def train_k1(data: DatasetK1, config: DiffusionTrainConfig = K1_DEFAULT,
             rng: np.random.Generator | None = None) -> K1Model:
    """Full-batch Adam on the consistency + denoising loss (standardized units)."""
    if len(data) == 0:
        raise ValueError("empty K1 dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    sched = dm.cosine_schedule(config.steps)
    target = dm.Standardizer.fit(data.k1)
    raw_sc = dm.Standardizer.fit(g_inverse(data.k1))
    spec = nn.MlpSpec((5,) + tuple(config.hidden) + (1,))
    model = K1Model(nn.init_xavier_uniform(spec, rng), sched, target, raw_sc)
    opt = nn.adam_init(model.params, lr=config.lr)
    n = len(data)
    left = data.z[:, :2]
    right = data.z[:, 1:]
    edges = np.vstack([left, right])
    y0 = target.encode(data.k1)
    sk = target.std
    hist = np.empty(config.epochs)
    for ep in range(config.epochs):
        w, y = dm.training_draw(y0, sched, rng)
        emb = dm.fourier_embed(np.concatenate([w, w]), config.steps)
        x = np.column_stack([edges, np.concatenate([y, y]), emb])
        out, cache = nn.forward(model.params, x)
        raw = raw_sc.decode(out[:, 0])
        k = g_transform(raw)
        kl, kr = k[:n], k[n:]
        c = (-kl - kr - data.k0) / sk
        d = (kr - data.k1) / sk
        loss = float(np.mean(c * c) + np.mean(d * d))
        _check_loss(loss, "train k1", ep)
        hist[ep] = loss
        gk = np.concatenate([-2.0 * c, -2.0 * c + 2.0 * d]) / (n * sk)
        g_out = (gk * g_derivative(raw) * raw_sc.std)[:, None]
        nn.adam_step(opt, model.params, nn.backward(model.params, cache, g_out))
        if config.log_every and ep % config.log_every == 0:
            log.info("k1 epoch %d loss %.4e", ep, loss)
    model.trained = True
    model.history = hist
    return model


# --------------------------------------------------------------------------- #
# Free-energy model


@dataclass
class FModel:
    params: nn.MlpParams
    schedule: dm.DiffusionSchedule
    target: dm.Standardizer   # Upsilon
    trained: bool = False
    history: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def steps(self) -> int:
        return self.schedule.steps

    def inputs(self, rho, y, w):
        rho = np.asarray(rho, dtype=np.float64).reshape(-1)
        emb = np.broadcast_to(dm.fourier_embed(w, self.steps), (rho.size, 2))
        return np.column_stack([rho, np.broadcast_to(y, rho.size), emb])

    def __call__(self, y, w, rho):
        out, _ = nn.forward(self.params, self.inputs(rho, y, w))
        return out[:, 1]

    def readout(self, rho):
        """``(f, Q, cache)`` from the last denoising step at the Upsilon mean.

        The residual loss only sees ``df/drho``, so ``f`` may carry an
        arbitrary additive dependence on the diffusion state.  Holding that
        state fixed across densities keeps ``Q`` the exact derivative of ``f``.
        """
        if not self.trained:
            raise RuntimeError("model has not been trained")
        rho = np.asarray(rho, dtype=np.float64).reshape(-1)
        x = self.inputs(rho, 0.0, 1)
        v = np.zeros_like(x)
        v[:, 0] = 1.0
        out, dout, cache = nn.forward(self.params, x, tangent=v)
        return out[:, 0], dout[:, 0], cache

    def sample_upsilon(self, rho, n_steps=2, rng=None):
        """Denoised auxiliary target (physical units)."""
        rho = np.asarray(rho, dtype=np.float64).reshape(-1)
        return self.target.decode(dm.sample(self, rho, self.schedule, n_steps, rng=rng))

    def predict(self, rho):
        rho = _clamp_unit(rho, "density")
        f, q, _ = self.readout(rho)
        return f, q


def predict_f(model: FModel, rho):
    """``(f, Q)`` at the given densities."""
    return model.predict(rho)


def train_f(data: DatasetF, config: DiffusionTrainConfig = F_DEFAULT,
            rng: np.random.Generator | None = None) -> FModel:
    """Full-batch Adam on the evolution residual + auxiliary denoising loss.

    ``data.k_rows`` must already hold the operator rows from the trained K1
    model.  Every stencil node is conditioned on its own noised Upsilon with a
    shared step: if one value were shared, any additive y-dependence of Q
    would drop out of the residual (rows sum to zero) and stay unconstrained.
    """
    if len(data) == 0:
        raise ValueError("empty f dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    sched = dm.cosine_schedule(config.steps)
    target = dm.Standardizer.fit(data.upsilon)
    spec = nn.MlpSpec((4,) + tuple(config.hidden) + (2,))
    model = FModel(nn.init_xavier_uniform(spec, rng), sched, target)
    opt = nn.adam_init(model.params, lr=config.lr)
    n = len(data)
    su = target.std
    y0 = target.encode(data.upsilon).T      # (3, n)
    rho = data.zf.T.reshape(-1)          # node-major: all j-1, all j, all j+1
    tangent = np.zeros((3 * n, 4))
    tangent[:, 0] = 1.0
    hist = np.empty(config.epochs)
    for ep in range(config.epochs):
        w = rng.integers(1, config.steps + 1, size=n)
        ab = sched.alpha_bar[w]
        y = np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * rng.standard_normal(y0.shape)
        x = np.column_stack([rho, y.reshape(-1), dm.fourier_embed(np.tile(w, 3), config.steps)])
        out, dout, cache = nn.forward(model.params, x, tangent=tangent)
        q = dout[:, 0].reshape(3, n)
        r = (data.b + np.einsum("nk,kn->n", data.k_rows, q)) / su
        d = out[n:2 * n, 1] - y0[1]
        loss = float(np.mean(r * r) + np.mean(d * d))
        _check_loss(loss, "train f", ep)
        hist[ep] = loss
        g_out = np.zeros((3 * n, 2))
        g_out[n:2 * n, 1] = 2.0 * d / n
        g_tan = np.zeros((3 * n, 2))
        g_tan[:, 0] = (2.0 * r / (su * n) * data.k_rows.T).reshape(-1)
        nn.adam_step(opt, model.params, nn.backward(model.params, cache, g_out, g_tan))
        if config.log_every and ep % config.log_every == 0:
            log.info("f epoch %d loss %.4e", ep, loss)
    model.trained = True
    model.history = hist
    return model


def operator_rows(k1_fn, zf: np.ndarray) -> np.ndarray:
    """Rows ``(K[j,j-1], K[j,j], K[j,j+1])`` from a K1 function and stencils (n, 3)."""
    zf = np.asarray(zf, dtype=np.float64)
    kl = np.asarray(k1_fn(zf[:, :2])).reshape(-1)
    kr = np.asarray(k1_fn(zf[:, 1:])).reshape(-1)
    return np.column_stack([kl, k0_from_k1(kl, kr), kr])


# --------------------------------------------------------------------------- #
# Calibration


def calibrate(f_fn, q_fn, rho_r0: float = 0.5, rho_r1: float = 0.5):
    """Return ``(f_bar, q_bar)`` callables fixing ``f_bar(r0) = 0`` and ``f_bar'(r1) = 0``."""
    f0 = float(np.asarray(f_fn(np.array([rho_r0]))).reshape(-1)[0])
    q1 = float(np.asarray(q_fn(np.array([rho_r1]))).reshape(-1)[0])

    def f_bar(rho):
        rho = np.asarray(rho, dtype=np.float64)
        return np.asarray(f_fn(rho)) - f0 - q1 * (rho - rho_r0)

    def q_bar(rho):
        return np.asarray(q_fn(np.asarray(rho, dtype=np.float64))) - q1

    return f_bar, q_bar


# --------------------------------------------------------------------------- #
# Deterministic baseline


@dataclass(frozen=True)
class BaselineConfig:
    k1_epochs: int = 6000
    f_epochs: int = 2000
    lr: float = 1e-2
    hidden: tuple = (20, 20)
    sigma_floor: float = 1e-12


@dataclass
class BaselineModel:
    k1_params: nn.MlpParams
    f_params: nn.MlpParams
    target: dm.Standardizer
    raw: dm.Standardizer
    k1_history: np.ndarray
    f_history: np.ndarray
    trained: bool = True

    def predict_k1(self, edges):
        edges = _clamp_unit(np.asarray(edges).reshape(-1, 2), "K1 condition")
        out, _ = nn.forward(self.k1_params, edges)
        return g_transform(self.raw.decode(out[:, 0]))

    def predict_f(self, rho):
        rho = _clamp_unit(np.asarray(rho).reshape(-1), "density")
        x = rho[:, None]
        out, dout, _ = nn.forward(self.f_params, x, tangent=np.ones_like(x))
        return out[:, 0], dout[:, 0]


def equation_noise_variance(k_diag, realizations: int, dt: float, eps: float, floor: float = 1e-12):
    """``2 eps K_jj / (R dt)``, floored at a small positive value."""
    var = 2.0 * eps * np.asarray(k_diag, dtype=np.float64) / (realizations * dt)
    bad = ~(var > floor)
    if np.any(bad):
        log.warning("equation noise variance floored at %d nodes", int(bad.sum()))
        var = np.where(bad, floor, var)
    return var


def train_statpinns_baseline(dk: DatasetK1, df: DatasetF, config: BaselineConfig = BaselineConfig(),
                             realizations: int = 1000, dt: float = 1e-3, eps: float = 1 / 400,
                             rng: np.random.Generator | None = None) -> BaselineModel:
    """Plain MLPs for K1 and f trained sequentially (unit loss weights)."""
    if len(dk) == 0 or len(df) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(0) if rng is None else rng
    target = dm.Standardizer.fit(dk.k1)
    raw_sc = dm.Standardizer.fit(g_inverse(dk.k1))
    kp = nn.init_xavier_uniform(nn.MlpSpec((2,) + tuple(config.hidden) + (1,)), rng)
    opt = nn.adam_init(kp, lr=config.lr)
    n = len(dk)
    edges = np.vstack([dk.z[:, :2], dk.z[:, 1:]])
    sk = target.std
    k_hist = np.empty(config.k1_epochs)
    for ep in range(config.k1_epochs):
        out, cache = nn.forward(kp, edges)
        raw = raw_sc.decode(out[:, 0])
        k = g_transform(raw)
        c = (-k[:n] - k[n:] - dk.k0) / sk
        d = (k[n:] - dk.k1) / sk
        loss = 0.5 * float(np.mean(c * c) + np.mean(d * d))
        _check_loss(loss, "train baseline k1", ep)
        k_hist[ep] = loss
        gk = np.concatenate([-c, -c + d]) / (n * sk)
        nn.adam_step(opt, kp, nn.backward(kp, cache, (gk * g_derivative(raw) * raw_sc.std)[:, None]))
    model = BaselineModel(kp, None, target, raw_sc, k_hist, np.zeros(0))

    rows = operator_rows(model.predict_k1, df.zf)
    weight = 1.0 / equation_noise_variance(rows[:, 1], realizations, dt, eps, config.sigma_floor)
    weight = weight / weight.mean()  # overall scale does not matter for the minimiser
    fp = nn.init_xavier_uniform(nn.MlpSpec((1,) + tuple(config.hidden) + (1,)), rng)
    opt = nn.adam_init(fp, lr=config.lr)
    m = len(df)
    rho = df.zf.T.reshape(-1, 1)
    tangent = np.ones_like(rho)
    su = max(float(np.std(df.b)), 1e-300)
    f_hist = np.empty(config.f_epochs)
    for ep in range(config.f_epochs):
        out, dout, cache = nn.forward(fp, rho, tangent=tangent)
        q = dout[:, 0].reshape(3, m)
        r = (df.b + np.einsum("nk,kn->n", rows, q)) / su
        loss = 0.5 * float(np.mean(weight * r * r))
        _check_loss(loss, "train baseline f", ep)
        f_hist[ep] = loss
        g_tan = np.zeros((3 * m, 1))
        g_tan[:, 0] = (weight * r / (su * m) * rows.T).reshape(-1)
        nn.adam_step(opt, fp, nn.backward(fp, cache, np.zeros((3 * m, 1)), g_tan))
    model.f_params = fp
    model.f_history = f_hist
    return model
