"""Small dense networks in numpy: SoftPlus MLPs, exact gradients, Adam.

Besides the usual reverse-mode pass the module carries a forward-mode tangent
through the network.  The free-energy model needs the input derivative of
its output inside the loss, so its gradient is taken through the tangent as
well (:func:`backward` with ``g_tangent``).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


def softplus(z):
    return np.logaddexp(0.0, z)


def sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass(frozen=True)
class MlpSpec:
    widths: tuple

    def __post_init__(self):
        w = tuple(int(v) for v in self.widths)
        object.__setattr__(self, "widths", w)
        if len(w) < 3:
            raise ValueError("an MLP needs input, at least one hidden layer and output")
        if min(w) < 1:
            raise ValueError("layer widths must be >= 1")

    @property
    def n_in(self):
        return self.widths[0]

    @property
    def n_out(self):
        return self.widths[-1]


@dataclass
class MlpParams:
    weights: list  # W[l] has shape (fan_in, fan_out)
    biases: list
    version: int = 0

    @property
    def spec(self) -> MlpSpec:
        return MlpSpec(tuple([self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]))

    def arrays(self) -> list:
        """Flat view ``[W0, b0, W1, b1, ...]`` (shared memory)."""
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> MlpParams:
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def touch(self):
        self.version += 1


def init_xavier_uniform(spec: MlpSpec, rng: np.random.Generator) -> MlpParams:
    ws, bs = [], []
    for fan_in, fan_out in zip(spec.widths[:-1], spec.widths[1:]):
        lim = np.sqrt(6.0 / (fan_in + fan_out))
        ws.append(rng.uniform(-lim, lim, size=(fan_in, fan_out)))
        bs.append(np.zeros(fan_out))
    return MlpParams(ws, bs)


def zeros_like_params(params: MlpParams) -> MlpParams:
    return MlpParams([np.zeros_like(w) for w in params.weights],
                     [np.zeros_like(b) for b in params.biases])


@dataclass
class Cache:
    params: MlpParams
    version: int
    acts: list         # a_0 = x, a_1 .. a_L hidden activations
    pre: list          # z_1 .. z_L
    tangents: list | None = None   # t_0 = v, t_1 .. t_L
    lin: list | None = None        # u_l = t_{l-1} W_l

    @property
    def features(self) -> np.ndarray:
        """Last hidden activations."""
        return self.acts[-1]

    @property
    def feature_tangent(self) -> np.ndarray:
        return self.tangents[-1]


def forward(params: MlpParams, x, tangent=None):
    """Return ``(output, cache)``, or ``(output, output_tangent, cache)`` with a tangent.

    ``tangent`` is an input-space direction with the same shape as ``x``.
    """
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != params.weights[0].shape[0]:
        raise ValueError(f"input shape {x.shape} does not match {params.weights[0].shape[0]} inputs")
    acts, pre = [x], []
    tans = lins = None
    if tangent is not None:
        t = np.asarray(tangent, dtype=np.float64)
        if t.shape != x.shape:
            raise ValueError("tangent must have the input's shape")
        tans, lins = [t], []
    a = x
    for w, b in zip(params.weights[:-1], params.biases[:-1]):
        z = a @ w + b
        a = softplus(z)
        pre.append(z)
        acts.append(a)
        if tans is not None:
            u = tans[-1] @ w
            lins.append(u)
            tans.append(sigmoid(z) * u)
    out = a @ params.weights[-1] + params.biases[-1]
    cache = Cache(params, params.version, acts, pre, tans, lins)
    if tans is None:
        return out, cache
    return out, tans[-1] @ params.weights[-1], cache


def backward(params: MlpParams, cache: Cache, g_out, g_tangent=None, want_input=False):
    """Exact reverse-mode gradients of ``<g_out, y> + <g_tangent, dy>``.

    Returns an :class:`MlpParams` of gradients, plus the input cotangent when
    ``want_input`` is set.
    """
    if cache.params is not params or cache.version != params.version:
        raise RuntimeError("stale cache: parameters changed since the forward pass")
    if g_tangent is not None and cache.tangents is None:
        raise ValueError("forward pass was run without a tangent")
    nl = len(params.weights)
    gw = [None] * nl
    gb = [None] * nl
    g_out = np.asarray(g_out, dtype=np.float64)
    w_out = params.weights[-1]
    gw[-1] = cache.acts[-1].T @ g_out
    gb[-1] = g_out.sum(axis=0)
    ga = g_out @ w_out.T
    gt = None
    if g_tangent is not None:
        g_tangent = np.asarray(g_tangent, dtype=np.float64)
        gw[-1] = gw[-1] + cache.tangents[-1].T @ g_tangent
        gt = g_tangent @ w_out.T
    for l in range(nl - 2, -1, -1):
        z = cache.pre[l]
        s1 = sigmoid(z)
        gz = ga * s1
        if gt is not None:
            u = cache.lin[l]
            gz = gz + gt * u * s1 * (1.0 - s1)
            gu = gt * s1
        w = params.weights[l]
        gw[l] = cache.acts[l].T @ gz
        gb[l] = gz.sum(axis=0)
        if gt is not None:
            gw[l] += cache.tangents[l].T @ gu
            gt = gu @ w.T
        ga = gz @ w.T
    grads = MlpParams(gw, gb)
    if want_input:
        return grads, ga
    return grads


def input_gradient(params: MlpParams, x, coord: int) -> np.ndarray:
    """``d output / d x[:, coord]`` for every sample, shape (batch, n_out)."""
    x = np.asarray(x, dtype=np.float64)
    v = np.zeros_like(x)
    v[:, coord] = 1.0
    _, dy, _ = forward(params, x, tangent=v)
    return dy


@dataclass
class AdamState:
    m: list
    v: list
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    extra: dict = field(default_factory=dict)


def adam_init(arrays, lr: float = 1e-3, beta1: float = 0.9, beta2: float = 0.999,
              eps: float = 1e-8) -> AdamState:
    arrays = _as_arrays(arrays)
    return AdamState([np.zeros_like(a) for a in arrays], [np.zeros_like(a) for a in arrays],
                     0, lr, beta1, beta2, eps)


def _as_arrays(obj) -> list:
    if isinstance(obj, MlpParams):
        return obj.arrays()
    out = []
    for o in obj:
        out += o.arrays() if isinstance(o, MlpParams) else [o]
    return out


def adam_step(state: AdamState, params, grads):
    """Bias-corrected Adam update, in place. ``params``/``grads`` are MlpParams or lists of them."""
    ps, gs = _as_arrays(params), _as_arrays(grads)
    if len(ps) != len(state.m) or len(gs) != len(ps):
        raise ValueError("parameter/gradient structure does not match optimizer state")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.step
    c2 = 1.0 - b2**state.step
    for p, g, m, v in zip(ps, gs, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    for obj in (params if isinstance(params, (list, tuple)) else [params]):
        if isinstance(obj, MlpParams):
            obj.touch()
    return state, params
