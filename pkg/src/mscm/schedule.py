"""Variance-preserving noise schedule, loss weighting and teacher-step annealing."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

SCHEDULE_KINDS = ("cosine", "karras_sigma_ramp")


@dataclass(frozen=True)
class NoiseSchedule:
    """Cosine VP schedule, ``alpha_t = cos(pi t / 2)`` and ``sigma_t = sin(pi t / 2)``.

    ``kind="karras_sigma_ramp"`` keeps the same (alpha, sigma) map and only changes
    the sampling time grid: the Karras sigma ramp is converted to VP
    times through ``t = (2 / pi) * atan(sigma_ve)``.
    """

    kind: str = "cosine"
    rho: float = 7.0
    sigma_min: float = 0.002
    sigma_max: float = 80.0

    def __post_init__(self):
        if self.kind not in SCHEDULE_KINDS:
            raise ValueError(f"unknown schedule kind {self.kind!r}; expected one of {SCHEDULE_KINDS}")
        if self.rho <= 0 or self.sigma_min <= 0 or self.sigma_max <= self.sigma_min:
            raise ValueError("karras ramp needs rho > 0 and 0 < sigma_min < sigma_max")

    def alpha_sigma(self, t):
        """Return ``(alpha_t, sigma_t)``; scalars in, floats out, arrays in, arrays out."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr < 0.0) or np.any(t_arr > 1.0) or np.any(np.isnan(t_arr)):
            raise ValueError(f"time must lie in [0, 1], got {t!r}")
        half_pi_t = 0.5 * math.pi * t_arr
        # pin the endpoints so alpha_1 and sigma_0 are exactly zero
        alpha = np.where(t_arr == 1.0, 0.0, np.cos(half_pi_t))
        sigma = np.where(t_arr == 1.0, 1.0, np.sin(half_pi_t))
        if alpha.ndim == 0:
            return float(alpha), float(sigma)
        return alpha, sigma

    def snr(self, t):
        """``alpha_t**2 / sigma_t**2``; ``+inf`` at ``t = 0``."""
        alpha, sigma = self.alpha_sigma(t)
        alpha, sigma = np.asarray(alpha), np.asarray(sigma)
        with np.errstate(divide="ignore"):
            out = np.where(sigma == 0.0, np.inf, alpha**2 / np.where(sigma == 0.0, 1.0, sigma) ** 2)
        return float(out) if out.ndim == 0 else out

    def x_coef(self, t, s):
        """``alpha_s - alpha_t sigma_s / sigma_t``, the weight of x in a DDIM step t -> s.

        Evaluated as ``sin(pi (t - s) / 2) / sigma_t`` which avoids the
        cancellation of the direct form as ``s -> t``.
        """
        _, sigma_t = self.alpha_sigma(t)
        self.alpha_sigma(s)
        sigma_t = np.asarray(sigma_t)
        if np.any(sigma_t == 0.0):
            raise ValueError("x_coef needs sigma_t > 0")
        out = np.sin(0.5 * math.pi * (np.asarray(t, dtype=float) - np.asarray(s, dtype=float))) / sigma_t
        return float(out) if out.ndim == 0 else out

    def loss_weight(self, t):
        """v-loss weighting ``SNR(t) + 1``."""
        return self.snr(t) + 1.0

    def time_grid(self, n_steps: int) -> np.ndarray:
        """Decreasing sampling grid of ``n_steps + 1`` times from 1 to 0."""
        if n_steps < 1:
            raise ValueError("n_steps must be >= 1")
        if self.kind == "cosine" or n_steps == 1:
            return np.arange(n_steps, -1, -1) / n_steps
        # n_steps points of the Karras ramp, then the data endpoint. The first
        # point (sigma_max, t ~ 0.992) is pinned to t = 1 where z_1 ~ N(0, I).
        ramp = np.linspace(0.0, 1.0, n_steps)
        inv_rho = 1.0 / self.rho
        sig = (self.sigma_max**inv_rho + ramp * (self.sigma_min**inv_rho - self.sigma_max**inv_rho)) ** self.rho
        times = (2.0 / math.pi) * np.arctan(sig)
        times[0] = 1.0
        return np.append(times, 0.0)


def x_var_analytic(sched: NoiseSchedule, t):
    """Per-dimension posterior variance proxy ``0.1 / (2 + SNR(t))``; zero at ``t = 0``."""
    snr = np.asarray(sched.snr(t), dtype=float)
    with np.errstate(divide="ignore"):
        out = np.where(np.isinf(snr), 0.0, 0.1 / (2.0 + np.where(np.isinf(snr), 0.0, snr)))
    return float(out) if out.ndim == 0 else out


@dataclass(frozen=True)
class AnnealSpec:
    """Log-linear interpolation of the teacher step count over training."""

    n_start: int = 64
    n_end: int = 1280
    anneal_iters: int = 100_000

    def __post_init__(self):
        if self.n_start < 1 or self.n_end < self.n_start:
            raise ValueError(f"need 1 <= n_start <= n_end, got {self.n_start}, {self.n_end}")
        if self.anneal_iters < 1:
            raise ValueError("anneal_iters must be >= 1")

    def teacher_steps(self, iteration: int) -> int:
        if iteration < 0:
            raise ValueError("iteration must be non-negative")
        frac = min(max(iteration / self.anneal_iters, 0.0), 1.0)
        n = math.exp(math.log(self.n_start) + frac * (math.log(self.n_end) - math.log(self.n_start)))
        # round() is half-to-even
        return int(round(n))


def teacher_steps(spec: AnnealSpec, iteration: int) -> int:
    return spec.teacher_steps(iteration)


@dataclass(frozen=True)
class SegmentGrid:
    """Partition of [0, 1] into ``student_steps`` equal segments."""

    student_steps: int

    def __post_init__(self):
        if self.student_steps < 1:
            raise ValueError("student_steps must be >= 1")

    @property
    def boundaries(self) -> np.ndarray:
        return np.arange(self.student_steps + 1) / self.student_steps

    def t_step(self, k):
        return np.asarray(k) / self.student_steps

    def segment_of(self, t):
        """Index ``k`` with ``k / T < t <= (k + 1) / T``."""
        t_arr = np.asarray(t, dtype=float)
        if np.any(t_arr <= 0.0) or np.any(t_arr > 1.0):
            raise ValueError(f"segment_of needs 0 < t <= 1, got {t!r}")
        # small slack so that k / T computed in floating point stays in segment k - 1
        k = np.ceil(t_arr * self.student_steps - 1e-9).astype(int) - 1
        k = np.clip(k, 0, self.student_steps - 1)
        return int(k) if k.ndim == 0 else k


def per_segment_steps(n_teacher: int, student_steps: int) -> int:
    return int(round(n_teacher / student_steps))
