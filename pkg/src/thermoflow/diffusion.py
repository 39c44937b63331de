"""Denoising diffusion machinery shared by the conditional models.

Arrays in :class:`DiffusionSchedule` are indexed by the step ``w = 0..W``
with ``alpha_bar[0] = 1`` and ``beta[0] = 0``.  Models predict the clean
target ``y0`` from ``(y_w, w, condition)``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DiffusionSchedule:
    betas: np.ndarray
    alpha_bar: np.ndarray

    @property
    def steps(self) -> int:
        return self.betas.size - 1

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    def ddpm_variance(self, w: int) -> float:
        """Posterior variance ``(1 - abar_{w-1}) / (1 - abar_w) * beta_w``."""
        ab, abp = self.alpha_bar[w], self.alpha_bar[w - 1]
        return float((1.0 - abp) / (1.0 - ab) * self.betas[w])

    def ddim_variance(self, w: int, prev: int, eta: float) -> float:
        ab, abp = self.alpha_bar[w], self.alpha_bar[prev]
        return float(eta**2 * (1.0 - abp) / (1.0 - ab) * (1.0 - ab / abp))


def cosine_schedule(steps: int, offset: float = 0.008, max_beta: float = 0.999) -> DiffusionSchedule:
    if steps < 1:
        raise ValueError("need at least one diffusion step")
    w = np.arange(steps + 1)
    f = np.cos((w / steps + offset) / (1.0 + offset) * np.pi / 2.0) ** 2
    ab = f / f[0]
    betas = np.zeros(steps + 1)
    betas[1:] = np.minimum(1.0 - ab[1:] / ab[:-1], max_beta)
    # recompute so that abar_w = prod(1 - beta) holds exactly after clipping
    alpha_bar = np.cumprod(1.0 - betas)
    return DiffusionSchedule(betas, alpha_bar)


def fourier_embed(w, steps: int) -> np.ndarray:
    """``(sin(2 pi w / W), cos(2 pi w / W))`` stacked on the last axis."""
    ang = 2.0 * np.pi * np.asarray(w, dtype=np.float64) / steps
    return np.stack([np.sin(ang), np.cos(ang)], axis=-1)


def forward_noise(y0, w, schedule: DiffusionSchedule, noise) -> np.ndarray:
    ab = schedule.alpha_bar[np.asarray(w)]
    return np.sqrt(ab) * np.asarray(y0) + np.sqrt(1.0 - ab) * np.asarray(noise)


def _noise(shape, rng, noise):
    if noise is not None:
        return np.asarray(noise, dtype=np.float64)
    if rng is None:
        return np.zeros(shape)
    return rng.standard_normal(shape)


def ddpm_update(y, y_hat, w: int, schedule: DiffusionSchedule, rng=None, noise=None):
    """Ancestral step ``w -> w - 1``; no noise is added at ``w = 1``."""
    ab, abp = schedule.alpha_bar[w], schedule.alpha_bar[w - 1]
    a, b = schedule.alphas[w], schedule.betas[w]
    mean = (np.sqrt(abp) * b / (1.0 - ab)) * y_hat + (np.sqrt(a) * (1.0 - abp) / (1.0 - ab)) * y
    if w == 1:
        return mean
    return mean + np.sqrt(schedule.ddpm_variance(w)) * _noise(np.shape(y), rng, noise)


def ddim_update(y, y_hat, w: int, schedule: DiffusionSchedule, eta: float = 0.0, rng=None,
                noise=None, prev: int | None = None):
    """Generalised step ``w -> prev`` (default ``w - 1``)."""
    if eta < 0:
        raise ValueError("eta must be non-negative")
    prev = w - 1 if prev is None else prev
    ab, abp = schedule.alpha_bar[w], schedule.alpha_bar[prev]
    var = schedule.ddim_variance(w, prev, eta)
    eps_hat = (y - np.sqrt(ab) * y_hat) / np.sqrt(1.0 - ab)
    out = np.sqrt(abp) * y_hat + np.sqrt(max(1.0 - abp - var, 0.0)) * eps_hat
    if var > 0.0:
        out = out + np.sqrt(var) * _noise(np.shape(y), rng, noise)
    return out


def ddim_steps(total: int, n_steps: int) -> np.ndarray:
    """Uniformly strided descending steps from ``total`` down to 1."""
    if not 1 <= n_steps <= total:
        raise ValueError("n_steps must lie in [1, total steps]")
    return np.unique(np.round(np.linspace(total, 1, n_steps)).astype(int))[::-1]


def sample(model, condition, schedule: DiffusionSchedule, n_steps: int = 2, eta: float = 0.0,
           rng: np.random.Generator | None = None, shape=None, return_trace=False):
    """Reverse diffusion with the strided DDIM sampler.

    ``model(y, w, condition)`` returns the clean-target estimate.  The start
    ``y_W`` is standard normal when ``rng`` is given and zero (the prior's
    mean) otherwise, which makes the prediction a deterministic function of
    the condition.  Returns the estimate from the last evaluated step.
    """
    if getattr(model, "trained", True) is False:
        raise RuntimeError("model has not been trained")
    shape = (len(condition),) if shape is None else shape
    y = rng.standard_normal(shape) if rng is not None else np.zeros(shape)
    steps = ddim_steps(schedule.steps, n_steps)
    trace = []
    y_hat = None
    for k, w in enumerate(steps):
        y_hat = model(y, int(w), condition)
        trace.append(y_hat)
        if k + 1 < steps.size:
            y = ddim_update(y, y_hat, int(w), schedule, eta, rng, prev=int(steps[k + 1]))
    return (y_hat, trace) if return_trace else y_hat


def sample_ddpm(model, condition, schedule: DiffusionSchedule, rng: np.random.Generator, shape=None):
    """Full ancestral DDPM pass; returns ``y_0``."""
    shape = (len(condition),) if shape is None else shape
    y = rng.standard_normal(shape)
    for w in range(schedule.steps, 0, -1):
        y = ddpm_update(y, model(y, w, condition), w, schedule, rng)
    return y


@dataclass(frozen=True)
class Standardizer:
    mean: float
    std: float

    @classmethod
    def fit(cls, values) -> Standardizer:
        v = np.asarray(values, dtype=np.float64)
        sd = float(v.std())
        return cls(float(v.mean()), sd if sd > 0 else 1.0)

    def encode(self, v):
        return (np.asarray(v) - self.mean) / self.std

    def decode(self, u):
        return self.mean + self.std * np.asarray(u)


def training_draw(y0, schedule: DiffusionSchedule, rng: np.random.Generator):
    """One noising draw per sample: ``(w, y_w)`` with ``w ~ U{1..W}``."""
    y0 = np.asarray(y0, dtype=np.float64)
    w = rng.integers(1, schedule.steps + 1, size=y0.shape[0])
    eps = rng.standard_normal(y0.shape)
    ab = schedule.alpha_bar[w].reshape((-1,) + (1,) * (y0.ndim - 1))
    return w, np.sqrt(ab) * y0 + np.sqrt(1.0 - ab) * eps
