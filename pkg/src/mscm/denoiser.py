"""Denoisers that map ``(z_t, t)`` to an (x, eps, v) prediction triple.

Two families live here: the exact posterior-mean denoiser of an isotropic
Gaussian mixture (used as teacher and as ground truth) and a small MLP that
predicts ``v`` and carries its own hand-written reverse pass.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .schedule import NoiseSchedule, x_var_analytic

__all__ = [
    "GmmSpec",
    "PredictionTriple",
    "PosteriorMoments",
    "gmm_posterior",
    "gmm_denoise",
    "GmmOracle",
    "FunctionDenoiser",
    "MlpDenoiser",
    "XVarTable",
    "x_var_table",
    "x_var_analytic",
]


def _as_batch(z):
    z = np.asarray(z, dtype=float)
    return (z[None, :], True) if z.ndim == 1 else (z, False)


def _column(values, n):
    """Broadcast a scalar or per-row array to shape ``(n, 1)``."""
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 0:
        return np.full((n, 1), float(arr))
    return arr.reshape(n, 1)


@dataclass(frozen=True)
class GmmSpec:
    """Isotropic Gaussian mixture ``sum_k w_k N(mu_k, s_k^2 I)``."""

    weights: tuple
    means: tuple
    variances: tuple

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=float)
        m = np.asarray(self.means, dtype=float)
        v = np.asarray(self.variances, dtype=float)
        if m.ndim == 1:
            m = m[:, None]
        if not (len(w) == len(m) == len(v)) or len(w) == 0:
            raise ValueError("weights, means and variances must have the same non-zero length")
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-12:
            raise ValueError(f"mixture weights must be non-negative and sum to 1, got {w.tolist()}")
        if np.any(v <= 0):
            raise ValueError("component variances must be positive")
        object.__setattr__(self, "weights", tuple(w.tolist()))
        object.__setattr__(self, "means", tuple(tuple(row) for row in m.tolist()))
        object.__setattr__(self, "variances", tuple(v.tolist()))

    @classmethod
    def two_modes(cls, m: float = 1.0, std: float = 0.05, dim: int = 1) -> "GmmSpec":
        """Equal-weight mixture of ``N(-m, std^2)`` and ``N(+m, std^2)`` along every axis."""
        mean = np.full(dim, m)
        return cls((0.5, 0.5), (tuple(-mean), tuple(mean)), (std**2, std**2))

    @property
    def dim(self) -> int:
        return len(self.means[0])

    @property
    def w(self) -> np.ndarray:
        return np.asarray(self.weights)

    @property
    def mu(self) -> np.ndarray:
        return np.asarray(self.means)

    @property
    def s2(self) -> np.ndarray:
        return np.asarray(self.variances)

    def mean(self) -> np.ndarray:
        return self.w @ self.mu

    def var_per_dim(self) -> float:
        """Total variance ``tr(Cov[x]) / d``."""
        centred = self.mu - self.mean()
        return float(self.w @ (self.s2 + (centred**2).sum(1) / self.dim))

    def sample(self, n: int, rng: np.random.Generator, return_labels: bool = False):
        labels = rng.choice(len(self.weights), size=n, p=self.w)
        x = self.mu[labels] + np.sqrt(self.s2[labels])[:, None] * rng.standard_normal((n, self.dim))
        return (x, labels) if return_labels else x


@dataclass
class PredictionTriple:
    """Views of one prediction; satisfies ``z = a x + s eps`` and ``v = a eps - s x``."""

    x_hat: np.ndarray
    eps_hat: np.ndarray
    v_hat: np.ndarray

    @classmethod
    def from_x(cls, alpha, sigma, z, x_hat):
        safe = np.where(sigma == 0.0, 1.0, sigma)
        eps_hat = np.where(sigma == 0.0, 0.0, (z - alpha * x_hat) / safe)
        return cls(x_hat, eps_hat, alpha * eps_hat - sigma * x_hat)

    @classmethod
    def from_v(cls, alpha, sigma, z, v_hat):
        # alpha^2 + sigma^2 = 1 inverts the (x, eps) -> (z, v) rotation
        return cls(alpha * z - sigma * v_hat, sigma * z + alpha * v_hat, v_hat)


@dataclass
class PosteriorMoments:
    mean: np.ndarray
    var_trace_per_dim: np.ndarray
    # per-component pieces, kept for exact posterior sampling
    responsibilities: np.ndarray = field(repr=False, default=None)
    component_means: np.ndarray = field(repr=False, default=None)
    component_vars: np.ndarray = field(repr=False, default=None)

    def sample(self, rng: np.random.Generator) -> np.ndarray:
        """Draw one ``x* ~ p(x | z_t)`` per row."""
        n, k, d = self.component_means.shape
        u = rng.random(n)
        labels = (u[:, None] > np.cumsum(self.responsibilities, axis=1)).sum(axis=1)
        labels = np.minimum(labels, k - 1)
        rows = np.arange(n)
        std = np.sqrt(self.component_vars[rows, labels])[:, None]
        return self.component_means[rows, labels] + std * rng.standard_normal((n, d))


def gmm_posterior(spec: GmmSpec, sched: NoiseSchedule, z_t, t) -> PosteriorMoments:
    """Exact moments of ``p(x | z_t)`` under the mixture prior."""
    z, single = _as_batch(z_t)
    n, d = z.shape
    if d != spec.dim:
        raise ValueError(f"latent dimension {d} does not match mixture dimension {spec.dim}")
    alpha, sigma = sched.alpha_sigma(t)
    alpha, sigma = _column(alpha, n), _column(sigma, n)
    mu, s2 = spec.mu, spec.s2[None, :]

    marg_var = alpha**2 * s2 + sigma**2  # (n, K)
    resid = z[:, None, :] - alpha[:, :, None] * mu[None]  # (n, K, d)
    log_r = (
        np.log(spec.w)[None]
        - 0.5 * d * np.log(marg_var)
        - 0.5 * (resid**2).sum(-1) / marg_var
    )
    resp = np.exp(log_r - logsumexp(log_r, axis=1, keepdims=True))

    gain = alpha * s2 / marg_var
    comp_means = mu[None] + gain[:, :, None] * resid
    comp_vars = s2 * sigma**2 / marg_var
    mean = np.einsum("nk,nkd->nd", resp, comp_means)
    between = ((comp_means - mean[:, None, :]) ** 2).sum(-1) / d
    var = (resp * (comp_vars + between)).sum(1)

    clean = sigma[:, 0] == 0.0
    if np.any(clean):
        mean[clean] = z[clean]
        var[clean] = 0.0
    moments = PosteriorMoments(mean, var, resp, comp_means, np.broadcast_to(comp_vars, resp.shape))
    if single:
        moments.mean, moments.var_trace_per_dim = mean[0], float(var[0])
    return moments


def gmm_denoise(spec: GmmSpec, sched: NoiseSchedule, z_t, t) -> PredictionTriple:
    z = np.asarray(z_t, dtype=float)
    x_hat = gmm_posterior(spec, sched, z, t).mean
    alpha, sigma = sched.alpha_sigma(t)
    if z.ndim == 2:
        alpha, sigma = _column(alpha, len(z)), _column(sigma, len(z))
    return PredictionTriple.from_x(alpha, sigma, z, x_hat)


class GmmOracle:
    """Bayes-optimal denoiser ``E[x | z_t]`` for a Gaussian mixture."""

    trainable = False

    def __init__(self, spec: GmmSpec, sched: NoiseSchedule):
        self.spec = spec
        self.sched = sched
        self.dim = spec.dim

    def predict(self, z, t) -> PredictionTriple:
        return gmm_denoise(self.spec, self.sched, z, t)

    def posterior(self, z, t) -> PosteriorMoments:
        return gmm_posterior(self.spec, self.sched, z, t)


class FunctionDenoiser:
    """Wrap ``fn(z, t) -> x_hat`` as a denoiser, e.g. a constant prediction."""

    trainable = False

    def __init__(self, fn: Callable, sched: NoiseSchedule, dim: int):
        self.fn = fn
        self.sched = sched
        self.dim = dim

    @classmethod
    def constant(cls, value, sched: NoiseSchedule, dim: int) -> "FunctionDenoiser":
        value = np.broadcast_to(np.asarray(value, dtype=float), (dim,))
        return cls(lambda z, t: np.broadcast_to(value, np.shape(z)).copy(), sched, dim)

    def predict(self, z, t) -> PredictionTriple:
        z = np.asarray(z, dtype=float)
        alpha, sigma = self.sched.alpha_sigma(t)
        if z.ndim == 2:
            alpha, sigma = _column(alpha, len(z)), _column(sigma, len(z))
        return PredictionTriple.from_x(alpha, sigma, z, np.asarray(self.fn(z, t), dtype=float))


def _silu(a):
    sig = 0.5 * (1.0 + np.tanh(0.5 * a))
    return a * sig, sig


class MlpDenoiser:
    """SiLU MLP on ``[z, t, sin(2 pi 2^k t), cos(2 pi 2^k t)]`` that outputs ``v``.

    The Fourier features have period 1, so the raw ``t`` channel is what
    separates ``t = 1`` from ``t = 0``. All weights live in one flat vector ``params``; layer matrices are views
    into it, so optimisers and checkpoints only ever see the flat vector.
    """

    trainable = True

    def __init__(
        self,
        dim: int,
        sched: NoiseSchedule,
        hidden: Sequence[int] = (64, 64, 64),
        n_freqs: int = 16,
        params: np.ndarray | None = None,
        seed_lineage: str = "",
    ):
        if dim < 1 or any(h < 1 for h in hidden) or n_freqs < 0:
            raise ValueError("dim, hidden widths must be positive and n_freqs non-negative")
        self.dim = dim
        self.sched = sched
        self.hidden = tuple(int(h) for h in hidden)
        self.n_freqs = int(n_freqs)
        self.seed_lineage = seed_lineage
        self.widths = (dim + 1 + 2 * self.n_freqs, *self.hidden, dim)
        self._shapes = [(self.widths[i + 1], self.widths[i]) for i in range(len(self.widths) - 1)]
        self.n_params = sum(o * i + o for o, i in self._shapes)
        self._slice_table = self._build_slices()
        if params is None:
            params = np.zeros(self.n_params)
        params = np.asarray(params, dtype=float)
        if params.shape != (self.n_params,):
            raise ValueError(f"expected {self.n_params} parameters, got shape {params.shape}")
        self.params = params.copy()
        self.freqs = 2.0 * np.pi * 2.0 ** np.arange(self.n_freqs)

    @classmethod
    def init(cls, dim, sched, rng: np.random.Generator, hidden=(64, 64, 64), n_freqs=16, seed_lineage=""):
        """Fan-in scaled Gaussian weights, zero biases."""
        model = cls(dim, sched, hidden, n_freqs, seed_lineage=seed_lineage)
        flat = np.zeros(model.n_params)
        for (w_sl, _), (fan_out, fan_in) in zip(model._slices(), model._shapes):
            flat[w_sl] = rng.standard_normal(fan_out * fan_in) / np.sqrt(fan_in)
        model.params = flat
        return model

    def copy(self) -> "MlpDenoiser":
        return MlpDenoiser(self.dim, self.sched, self.hidden, self.n_freqs, self.params, self.seed_lineage)

    def _slices(self):
        return self._slice_table

    def _build_slices(self):
        out, pos = [], 0
        for fan_out, fan_in in self._shapes:
            w = slice(pos, pos + fan_out * fan_in)
            pos += fan_out * fan_in
            b = slice(pos, pos + fan_out)
            pos += fan_out
            out.append((w, b))
        return out

    def _layers(self, params=None):
        p = self.params if params is None else params
        return [
            (p[w].reshape(shape), p[b]) for (w, b), shape in zip(self._slices(), self._shapes)
        ]

    def features(self, z, t):
        n = len(z)
        t_col = _column(t, n)
        phase = t_col * self.freqs[None, :]
        return np.concatenate([z, t_col, np.sin(phase), np.cos(phase)], axis=1)

    def forward(self, z, t):
        """Return ``(v_hat, cache)`` for a batch ``z`` of shape ``(n, dim)``."""
        z = np.asarray(z, dtype=float)
        if z.ndim != 2 or z.shape[1] != self.dim:
            raise ValueError(f"expected latents of shape (n, {self.dim}), got {z.shape}")
        h = self.features(z, t)
        acts, gates = [h], []
        layers = self._layers()
        for i, (w, b) in enumerate(layers):
            a = h @ w.T + b
            if i < len(layers) - 1:
                h, sig = _silu(a)
                gates.append((a, sig))
            else:
                h = a
            acts.append(h)
        return h, (acts, gates)

    def backward(self, cache, upstream):
        """Flat gradient of ``sum(upstream * v_hat)`` w.r.t. ``params``, plus d/dz."""
        acts, gates = cache
        layers = self._layers()
        upstream = np.asarray(upstream, dtype=float)
        if upstream.shape != acts[-1].shape:
            raise ValueError(f"upstream gradient shape {upstream.shape} != output shape {acts[-1].shape}")
        grad = np.empty(self.n_params)
        g = upstream
        for i in range(len(layers) - 1, -1, -1):
            w_sl, b_sl = self._slice_table[i]
            grad[w_sl] = (g.T @ acts[i]).ravel()
            grad[b_sl] = g.sum(0)
            g = g @ layers[i][0]
            if i > 0:
                a, sig = gates[i - 1]
                g = g * sig * (1.0 + a * (1.0 - sig))
        return grad, g[:, : self.dim]

    def predict(self, z, t) -> PredictionTriple:
        z_b, single = _as_batch(z)
        v, _ = self.forward(z_b, t)
        alpha, sigma = self.sched.alpha_sigma(t)
        triple = PredictionTriple.from_v(_column(alpha, len(z_b)), _column(sigma, len(z_b)), z_b, v)
        if single:
            triple = PredictionTriple(triple.x_hat[0], triple.eps_hat[0], triple.v_hat[0])
        return triple

    def describe(self) -> str:
        return f"mlp dim={self.dim} hidden={','.join(map(str, self.hidden))} n_freqs={self.n_freqs} act=silu out=v"


@dataclass
class XVarTable:
    """Per-time ``x_var`` values, read back with nearest-grid-time lookup."""

    times: np.ndarray
    values: np.ndarray

    def __call__(self, t):
        t_arr = np.asarray(t, dtype=float)
        idx = np.abs(t_arr.reshape(-1, 1) - self.times[None, :]).argmin(axis=1)
        out = self.values[idx]
        return float(out[0]) if t_arr.ndim == 0 else out.reshape(t_arr.shape)


def x_var_table(teacher, spec: GmmSpec, sched: NoiseSchedule, times, eta: float, n_mc: int, seed: int) -> XVarTable:
    """Monte-Carlo ``eta * E||x - x_hat(z_t)||^2 / d`` for every time in ``times``."""
    if not 0.0 <= eta <= 1.0:
        raise ValueError("eta must lie in [0, 1]")
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = np.random.default_rng(seed)
    times = np.asarray(times, dtype=float)
    values = np.zeros(len(times))
    for i, t in enumerate(times):
        x = spec.sample(n_mc, rng)
        eps = rng.standard_normal(x.shape)
        alpha, sigma = sched.alpha_sigma(t)
        z = alpha * x + sigma * eps
        x_hat = teacher.predict(z, t).x_hat
        values[i] = eta * ((x - x_hat) ** 2).sum(1).mean() / spec.dim
    return XVarTable(times, values)
