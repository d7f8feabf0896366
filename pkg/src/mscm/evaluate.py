"""Ground truth and metrics for the Gaussian-mixture laboratory."""

from __future__ import annotations

import csv
import io
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import ndtr
from scipy.stats import wasserstein_distance

from .denoiser import GmmOracle, GmmSpec, x_var_table
from .rng import splitmix64, stream
from .samplers import SAMPLER_KINDS, addim_step, ddim_step, multistep_cm_sample, teacher_sample
from .schedule import NoiseSchedule, SegmentGrid

REPORT_FIELDS = ("sampler", "steps", "w1", "mean_norm_sq", "n", "seed")


def w1_1d(a, b) -> float:
    """Exact empirical W1 in one dimension (sorted pairing for equal sizes)."""
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.size == 0 or b.size == 0:
        raise ValueError("w1_1d needs non-empty sample sets")
    if a.size == b.size:
        return float(np.abs(np.sort(a) - np.sort(b)).mean())
    return float(wasserstein_distance(a, b))


def sliced_w1(a, b, n_proj: int = 64, seed: int = 0) -> float:
    """Mean 1D W1 over ``n_proj`` random unit directions."""
    a, b = np.atleast_2d(np.asarray(a, dtype=float)), np.atleast_2d(np.asarray(b, dtype=float))
    if a.shape[1] != b.shape[1]:
        raise ValueError(f"dimension mismatch: {a.shape[1]} vs {b.shape[1]}")
    if n_proj < 1:
        raise ValueError("n_proj must be >= 1")
    if a.shape[1] == 1:
        return w1_1d(a[:, 0], b[:, 0])
    dirs = stream(seed, 0).standard_normal((n_proj, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    return float(np.mean([w1_1d(a @ u, b @ u) for u in dirs]))


def gmm_true_samples(spec: GmmSpec, n: int, seed: int) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    return spec.sample(n, stream(seed, 0))


def gmm_cdf(spec: GmmSpec, x) -> np.ndarray:
    if spec.dim != 1:
        raise ValueError("gmm_cdf is only defined for one-dimensional mixtures")
    x = np.asarray(x, dtype=float)
    mu, std = spec.mu[:, 0], np.sqrt(spec.s2)
    return (spec.w * ndtr((x[..., None] - mu) / std)).sum(-1)


def gmm_quantiles(spec: GmmSpec, n: int, iters: int = 200) -> np.ndarray:
    """Mixture quantiles at the midpoints ``(i + 1/2) / n`` by bisection."""
    probs = (np.arange(n) + 0.5) / n
    std = np.sqrt(spec.s2).max()
    lo = np.full(n, spec.mu.min() - 40.0 * std)
    hi = np.full(n, spec.mu.max() + 40.0 * std)
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        below = gmm_cdf(spec, mid) < probs
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
        if np.all(hi - lo < 1e-14):
            break
    return 0.5 * (lo + hi)


def w1_to_gmm(samples, spec: GmmSpec, seed: int = 0, n_proj: int = 64) -> float:
    """W1 of samples against the mixture.

    One-dimensional mixtures compare against the exact quantile set of the same
    size (no reference sampling noise); higher dimensions use sliced W1 against
    an equal number of exact mixture samples.
    """
    samples = np.atleast_2d(np.asarray(samples, dtype=float))
    if samples.shape[1] != spec.dim:
        samples = samples.reshape(-1, spec.dim)
    if spec.dim == 1:
        return w1_1d(samples[:, 0], gmm_quantiles(spec, len(samples)))
    return sliced_w1(samples, gmm_true_samples(spec, len(samples), seed + 1), n_proj, seed)


@dataclass
class MetricReport:
    sampler: str
    steps: int
    w1: float
    mean_norm_sq: float
    n: int
    seed: int


def report_for(samples, spec: GmmSpec, sampler: str, steps: int, seed: int) -> MetricReport:
    samples = np.atleast_2d(samples)
    return MetricReport(
        sampler, int(steps), w1_to_gmm(samples, spec, seed), float((samples**2).sum(1).mean()), len(samples), seed
    )


def write_reports(reports, path=None, header_comment: str | None = None) -> str:
    buf = io.StringIO()
    if header_comment:
        buf.write(f"# {header_comment}\n")
    writer = csv.DictWriter(buf, fieldnames=REPORT_FIELDS, lineterminator="\n")
    writer.writeheader()
    for rep in reports:
        row = asdict(rep)
        row["w1"], row["mean_norm_sq"] = repr(row["w1"]), repr(row["mean_norm_sq"])
        writer.writerow(row)
    text = buf.getvalue()
    if path is not None:
        with open(path, "w", newline="") as fh:
            fh.write(text)
    return text


@dataclass
class NormGap:
    """``E||z*_s||^2 - E||z_s||^2`` for DDIM and aDDIM, with MC standard errors.

    ``addim_gap`` books aDDIM's added norm as ``d * z_var`` (exact when x_hat is
    orthogonal to eps_hat); ``addim_gap_raw`` uses the actual aDDIM iterates.
    ``predicted`` is ``(alpha_s - alpha_t sigma_s / sigma_t)^2 E[tr Var[x | z_t]]``.
    """

    ddim_gap: float
    ddim_se: float
    addim_gap: float
    addim_se: float
    addim_gap_raw: float
    addim_raw_se: float
    predicted: float
    predicted_se: float


def _mean_se(values):
    values = np.asarray(values, dtype=float)
    return float(values.mean()), float(values.std(ddof=1) / np.sqrt(len(values))) if len(values) > 1 else 0.0


def norm_gap(teacher: GmmOracle, sched: NoiseSchedule, t: float, s: float, n_mc: int, seed: int) -> NormGap:
    """Monte-Carlo norm deficit against the perfect sampler ``z*_s = c x* + (sigma_s / sigma_t) z_t``."""
    if n_mc < 1:
        raise ValueError("n_mc must be >= 1")
    rng = stream(seed, 0)
    spec = teacher.spec
    x = spec.sample(n_mc, rng)
    alpha_t, sigma_t = sched.alpha_sigma(t)
    _, sigma_s = sched.alpha_sigma(s)
    z_t = alpha_t * x + sigma_t * rng.standard_normal(x.shape)
    post = teacher.posterior(z_t, t)
    x_star = post.sample(rng)
    coef = sched.x_coef(t, s)
    ratio = sigma_s / sigma_t
    z_star = coef * x_star + ratio * z_t
    z_ddim = ddim_step(sched, post.mean, z_t, t, s)
    z_addim = addim_step(sched, post.mean, z_t, t, s, post.var_trace_per_dim)
    star_sq = (z_star**2).sum(1)
    ddim_sq = (z_ddim**2).sum(1)
    booked = spec.dim * coef**2 * post.var_trace_per_dim
    ddim_gap, ddim_se = _mean_se(star_sq - ddim_sq)
    acc_gap, acc_se = _mean_se(star_sq - ddim_sq - booked)
    raw_gap, raw_se = _mean_se(star_sq - (z_addim**2).sum(1))
    pred, pred_se = _mean_se(booked)
    return NormGap(ddim_gap, ddim_se, acc_gap, acc_se, raw_gap, raw_se, pred, pred_se)


def cm_w1(model, spec: GmmSpec, student_steps: int, n: int = 4096, seed: int = 0) -> float:
    z_1 = stream(seed, 0).standard_normal((n, spec.dim))
    run = multistep_cm_sample(model, model.sched, SegmentGrid(student_steps), z_1)
    return w1_to_gmm(run.final, spec, seed)


def make_cm_evaluator(spec: GmmSpec, student_steps: int, n: int = 4096, seed: int = 0):
    """``model -> W1`` of ``student_steps``-step multistep sampling on a fixed noise set."""
    return lambda model: cm_w1(model, spec, student_steps, n, seed)


def make_ddim_evaluator(spec: GmmSpec, n_steps: int = 64, n: int = 4096, seed: int = 0):
    def evaluate(model):
        z_1 = stream(seed, 0).standard_normal((n, spec.dim))
        return w1_to_gmm(teacher_sample(model, model.sched, n_steps, "ddim", z_1=z_1, record=False).final, spec, seed)

    return evaluate


def sampler_sweep(
    teacher,
    sched: NoiseSchedule,
    spec: GmmSpec,
    kinds=SAMPLER_KINDS,
    step_counts=(8, 16, 32, 64),
    n_samples: int = 10_000,
    seed: int = 0,
    eta: float = 0.75,
    x_var="table",
    n_mc: int = 10_000,
    workers: int = 1,
) -> list:
    """Terminal-sample metrics for every (kind, steps) cell.

    All cells start from the same ``z_1``; kernel noise for cell ``c`` comes from
    seed ``splitmix64(seed, c + 1)``. ``x_var="table"`` precomputes the
    eta-scaled table on each cell's grid with the teacher and ``spec``.
    """
    for kind in kinds:
        if kind not in SAMPLER_KINDS:
            raise ValueError(f"unknown sampler kind {kind!r}")
    z_1 = stream(seed, 0).standard_normal((n_samples, spec.dim))
    cells = [(kind, int(steps)) for kind in kinds for steps in step_counts]

    def run_cell(index):
        kind, steps = cells[index]
        source = x_var
        if kind in ("addim", "noisy_ddim") and x_var == "table":
            times = sched.time_grid(steps)[:-1]
            source = x_var_table(teacher, spec, sched, times, eta, n_mc, splitmix64(seed, 10_000 + steps))
        elif x_var == "table":
            source = None
        cell_seed = splitmix64(seed, index + 1)
        run = teacher_sample(teacher, sched, steps, kind, source, cell_seed, z_1=z_1, record=False)
        return report_for(run.final, spec, kind, steps, seed)

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(run_cell, range(len(cells))))
    return [run_cell(i) for i in range(len(cells))]
