"""Single-step kernels (DDIM, inverse DDIM, ancestral, aDDIM, Heun, noisy DDIM)
and the drivers that loop them over a time grid.

Kernels work on one latent ``(d,)`` or a batch ``(n, d)``. Times are scalars,
or per-row arrays of length ``n`` when every row sits at its own time (training).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Callable, NamedTuple

import numpy as np

from .denoiser import XVarTable
from .rng import stream
from .schedule import NoiseSchedule, SegmentGrid, x_var_analytic

SAMPLER_KINDS = ("ddim", "addim", "ancestral", "heun", "noisy_ddim")
BLOCK_SIZE = 4096


class StepPair(NamedTuple):
    t: float
    s: float


def _coefs(sched: NoiseSchedule, t, z):
    """``(alpha, sigma)`` shaped to broadcast against ``z``."""
    alpha, sigma = sched.alpha_sigma(t)
    alpha, sigma = np.asarray(alpha, dtype=float), np.asarray(sigma, dtype=float)
    if alpha.ndim == 1 and np.ndim(z) == 2:
        alpha, sigma = alpha[:, None], sigma[:, None]
    return alpha, sigma


def _rowwise(values, z):
    arr = np.asarray(values, dtype=float)
    if arr.ndim == 1 and np.ndim(z) == 2:
        return arr[:, None]
    return arr


def _check_order(t, s):
    if np.any(np.asarray(s) > np.asarray(t)):
        raise ValueError(f"steps must move toward the data (s <= t), got t={t!r}, s={s!r}")


def _sq_norm(v):
    v = np.asarray(v)
    return (v**2).sum(-1, keepdims=v.ndim == 2) if v.ndim == 2 else float((v**2).sum())


def ddim_step(sched: NoiseSchedule, x, z_t, t, s):
    """``alpha_s x + (sigma_s / sigma_t) (z_t - alpha_t x)``; ``s == t`` returns ``z_t``."""
    _check_order(t, s)
    x, z_t = np.asarray(x, dtype=float), np.asarray(z_t, dtype=float)
    alpha_t, sigma_t = _coefs(sched, t, z_t)
    alpha_s, sigma_s = _coefs(sched, s, z_t)
    if np.any(sigma_t == 0.0):
        raise ValueError("ddim_step needs sigma_t > 0")
    eps_hat = (z_t - alpha_t * x) / sigma_t
    out = alpha_s * x + sigma_s * eps_hat
    same = _rowwise(np.asarray(t) == np.asarray(s), z_t)
    return np.where(same, z_t, out)


def inv_ddim(sched: NoiseSchedule, z_s, z_t, t, s):
    """The ``x`` for which ``ddim_step(x, z_t, t, s) == z_s``."""
    _check_order(t, s)
    z_s, z_t = np.asarray(z_s, dtype=float), np.asarray(z_t, dtype=float)
    if np.any(np.asarray(t) == np.asarray(s)):
        raise ValueError("inv_ddim is undefined for s == t")
    _, sigma_t = _coefs(sched, t, z_t)
    _, sigma_s = _coefs(sched, s, z_t)
    coef = _rowwise(sched.x_coef(t, s), z_t)
    return (z_s - (sigma_s / sigma_t) * z_t) / coef


def posterior_coefs(sched: NoiseSchedule, t, s):
    """Mean weights and std of ``q(z_s | z_t, x)``: ``(w_z, w_x, std)``."""
    alpha_t, sigma_t = sched.alpha_sigma(t)
    alpha_s, sigma_s = sched.alpha_sigma(s)
    alpha_t, sigma_t = np.asarray(alpha_t), np.asarray(sigma_t)
    alpha_s, sigma_s = np.asarray(alpha_s), np.asarray(sigma_s)
    alpha_ts = alpha_t / alpha_s
    var_ts = sigma_t**2 - alpha_ts**2 * sigma_s**2
    var = 1.0 / (1.0 / sigma_s**2 + alpha_ts**2 / var_ts)
    return var * alpha_ts / var_ts, var * alpha_s / sigma_s**2, np.sqrt(var)


def ancestral_step(sched: NoiseSchedule, x, z_t, t, s, noise):
    """Draw from the denoising posterior ``q(z_s | z_t, x)`` using caller-supplied noise."""
    if np.any(np.asarray(s) <= 0.0) or np.any(np.asarray(s) >= np.asarray(t)):
        raise ValueError("ancestral_step needs 0 < s < t; use ddim_step for the final hop")
    x, z_t = np.asarray(x, dtype=float), np.asarray(z_t, dtype=float)
    w_z, w_x, std = (_rowwise(c, z_t) for c in posterior_coefs(sched, t, s))
    return w_z * z_t + w_x * x + std * np.asarray(noise, dtype=float)


def addim_step(sched: NoiseSchedule, x, z_t, t, s, x_var):
    """Adjusted DDIM: inflate the eps direction so the iterate norm carries ``tr Var[z_s | z_t]``.

    ``x_var`` is the per-dimension posterior variance of x (scalar or per row).
    Rows with ``||eps_hat|| == 0`` fall back to the plain DDIM update.
    """
    _check_order(t, s)
    x, z_t = np.asarray(x, dtype=float), np.asarray(z_t, dtype=float)
    if np.any(np.asarray(x_var) < 0.0):
        raise ValueError("x_var must be non-negative")
    alpha_t, sigma_t = _coefs(sched, t, z_t)
    alpha_s, sigma_s = _coefs(sched, s, z_t)
    if np.any(sigma_t == 0.0):
        raise ValueError("addim_step needs sigma_t > 0")
    d = z_t.shape[-1]
    eps_hat = (z_t - alpha_t * x) / sigma_t
    same = np.asarray(t) == np.asarray(s)
    z_var = _rowwise(sched.x_coef(t, s), z_t) ** 2 * _rowwise(x_var, z_t)
    eps_sq = _sq_norm(eps_hat)
    extra = np.where(eps_sq > 0.0, d * z_var / np.where(eps_sq > 0.0, eps_sq, 1.0), 0.0)
    scale = np.where(extra > 0.0, np.sqrt(sigma_s**2 + extra), sigma_s)
    out = alpha_s * x + scale * eps_hat
    return np.where(_rowwise(same, z_t), z_t, out)


def noisy_ddim_step(sched: NoiseSchedule, x, z_t, t, s, x_var, noise):
    """DDIM with Gaussian noise of variance ``x_var`` added to the x prediction."""
    x = np.asarray(x, dtype=float)
    x_noisy = x + np.sqrt(_rowwise(x_var, x)) * np.asarray(noise, dtype=float)
    return ddim_step(sched, x_noisy, z_t, t, s)


def heun_step(sched: NoiseSchedule, model, z_t, t, s):
    """Second-order correction of DDIM in x-space.

    The predictor x-estimate at ``t`` and the corrector x-estimate at the
    predicted ``z_s`` are averaged and fed through one DDIM step from ``z_t``.
    """
    z_t = np.asarray(z_t, dtype=float)
    x_pred = model.predict(z_t, t).x_hat
    if s == t or s <= 0.0:
        return ddim_step(sched, x_pred, z_t, t, s)
    z_pred = ddim_step(sched, x_pred, z_t, t, s)
    x_corr = model.predict(z_pred, s).x_hat
    return ddim_step(sched, 0.5 * (x_pred + x_corr), z_t, t, s)


@dataclass
class SampleRun:
    """A recorded batch of trajectories: ``states[k]`` holds all latents at ``times[k]``."""

    sampler: str
    seed: int
    times: list = field(default_factory=list)
    states: list = field(default_factory=list)
    n_evals: int = 0

    @property
    def steps(self) -> int:
        return len(self.times) - 1

    @property
    def final(self) -> np.ndarray:
        return self.states[-1]

    def record(self, t, z):
        self.times.append(float(t))
        self.states.append(np.array(z, dtype=float, copy=True))

    def write_csv(self, path, n_traj: int | None = None, header_comment: str | None = None, final_only=False):
        """Trajectory-major rows ``sampler,seed,step,t,dim0,...``.

        One row per completed step (``step = 1..steps``, the starting ``z_1`` is
        not written); ``final_only`` keeps only the terminal state.
        """
        last = len(self.times) - 1
        if len(self.states) != len(self.times):
            if not final_only:
                raise ValueError("run was sampled with record=False; only final_only export is possible")
            states = {last: self.states[-1]}
        else:
            states = dict(enumerate(self.states))
        total, dim = states[last].shape
        n = total if n_traj is None else min(n_traj, total)
        steps = [last] if final_only else range(1, last + 1)
        with open(path, "w", newline="") as fh:
            if header_comment:
                fh.write(f"# {header_comment}\n")
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(["sampler", "seed", "step", "t"] + [f"dim{j}" for j in range(dim)])
            for i in range(n):
                for k in steps:
                    writer.writerow(
                        [self.sampler, self.seed, k, repr(self.times[k])] + [repr(float(v)) for v in states[k][i]]
                    )


def multistep_cm_sample(model, sched: NoiseSchedule, grid: SegmentGrid, z_1, sampler="cm", seed=0) -> SampleRun:
    """One model evaluation and one DDIM step per segment, from t = 1 down to 0."""
    z = np.asarray(z_1, dtype=float)
    if not np.all(np.isfinite(z)):
        raise ValueError("z_1 must be finite")
    run = SampleRun(sampler, seed)
    n_seg = grid.student_steps
    run.record(1.0, z)
    for k in range(n_seg, 0, -1):
        t, s = k / n_seg, (k - 1) / n_seg
        x_hat = model.predict(z, t).x_hat
        run.n_evals += 1
        z = ddim_step(sched, x_hat, z, t, s)
        run.record(s, z)
    return run


def resolve_x_var(source, sched: NoiseSchedule) -> Callable:
    """Turn an x_var source (None, 'zero', 'analytic', a table or a callable) into ``t -> x_var``."""
    if source is None or source == "zero":
        return lambda t: 0.0
    if source == "analytic":
        return lambda t: x_var_analytic(sched, t)
    if isinstance(source, XVarTable) or callable(source):
        return source
    raise ValueError(f"unknown x_var source {source!r}")


def _sample_block(model, sched, times, kind, x_var_fn, z, rng, record):
    run_times, run_states, n_evals = [times[0]], [z.copy()] if record else [], 0
    n_steps = len(times) - 1
    for k in range(n_steps):
        t, s = float(times[k]), float(times[k + 1])
        if kind == "heun":
            z = heun_step(sched, model, z, t, s)
            n_evals += 1 if s <= 0.0 else 2
        else:
            x_hat = model.predict(z, t).x_hat
            n_evals += 1
            last = s <= 0.0
            if kind == "ddim" or last:
                # stochastic kernels use the deterministic form for the final hop
                z = ddim_step(sched, x_hat, z, t, s)
            elif kind == "addim":
                z = addim_step(sched, x_hat, z, t, s, x_var_fn(t))
            elif kind == "ancestral":
                z = ancestral_step(sched, x_hat, z, t, s, rng.standard_normal(z.shape))
            elif kind == "noisy_ddim":
                z = noisy_ddim_step(sched, x_hat, z, t, s, x_var_fn(t), rng.standard_normal(z.shape))
        run_times.append(s)
        if record:
            run_states.append(z.copy())
    if not record:
        run_states = [z]
    return run_times, run_states, n_evals


def teacher_sample(
    model,
    sched: NoiseSchedule,
    n_steps: int,
    kind: str = "ddim",
    x_var=None,
    seed: int = 0,
    n: int = 1024,
    z_1=None,
    record: bool = True,
) -> SampleRun:
    """Run any single-step kernel over ``sched.time_grid(n_steps)``.

    Trajectories are processed in blocks of ``BLOCK_SIZE``; block ``b`` draws
    its ``z_1`` (unless given) and all of its kernel noise from
    ``stream(seed, b)``.
    """
    if kind not in SAMPLER_KINDS:
        raise ValueError(f"unknown sampler kind {kind!r}; expected one of {SAMPLER_KINDS}")
    if n_steps < 1:
        raise ValueError("n_steps must be >= 1")
    times = sched.time_grid(n_steps)
    x_var_fn = resolve_x_var(x_var, sched)
    dim = model.dim
    if z_1 is not None:
        z_1 = np.asarray(z_1, dtype=float).reshape(-1, dim)
        n = len(z_1)
    blocks = []
    n_evals = 0
    for b, start in enumerate(range(0, n, BLOCK_SIZE)):
        size = min(BLOCK_SIZE, n - start)
        rng = stream(seed, b)
        z = rng.standard_normal((size, dim)) if z_1 is None else z_1[start : start + size].copy()
        run_times, states, n_evals = _sample_block(model, sched, times, kind, x_var_fn, z, rng, record)
        blocks.append(states)
    run = SampleRun(kind, seed, run_times, [np.concatenate(parts) for parts in zip(*blocks)], n_evals)
    return run
