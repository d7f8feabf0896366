"""Multistep consistency training / distillation and plain diffusion pretraining."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from typing import Callable

import numpy as np

from .denoiser import MlpDenoiser, XVarTable
from .rng import stream
from .samplers import addim_step, ddim_step, inv_ddim
from .schedule import AnnealSpec, NoiseSchedule, per_segment_steps, x_var_analytic

log = logging.getLogger(__name__)

METRICS = ("l2", "l2_squared", "pseudo_huber")
WEIGHTINGS = ("snr_plus_one", "unit")
X_VAR_POLICIES = ("per_sample", "precomputed_table", "analytic", "zero")


class ConfigError(ValueError):
    pass


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; ``last_good`` holds the parameters from before the step."""

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


@dataclass(frozen=True)
class LossConfig:
    metric: str = "l2"
    weighting: str = "snr_plus_one"
    huber_c: float = 1e-4

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ConfigError(f"unknown loss metric {self.metric!r}; expected one of {METRICS}")
        if self.weighting not in WEIGHTINGS:
            raise ConfigError(f"unknown weighting {self.weighting!r}; expected one of {WEIGHTINGS}")
        if self.metric == "pseudo_huber" and not self.huber_c > 0:
            raise ConfigError("huber_c must be positive")

    def distance(self, diff):
        """Per-row distance and its gradient w.r.t. ``diff``."""
        sq = (diff**2).sum(-1)
        if self.metric == "l2_squared":
            return sq, 2.0 * diff
        if self.metric == "l2":
            norm = np.sqrt(sq)
            inv = np.where(norm > 0.0, 1.0 / np.where(norm > 0.0, norm, 1.0), 0.0)
            return norm, diff * inv[:, None]
        root = np.sqrt(sq + self.huber_c**2)
        return root - self.huber_c, diff / root[:, None]

    def weight(self, sched: NoiseSchedule, t):
        if self.weighting == "unit":
            return np.ones_like(np.asarray(t, dtype=float))
        return sched.loss_weight(t)


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "CT"
    student_steps: int = 4
    anneal: AnnealSpec = field(default_factory=lambda: AnnealSpec(64, 1280, 10_000))
    eta: float = 0.75
    x_var_policy: str = "per_sample"
    batch_size: int = 256
    lr: float = 3e-4
    iters: int = 20_000
    seed: int = 0
    include_final_step: bool = True
    log_every: int = 500
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    ema_decay: float | None = None

    def validate(self, teacher=None):
        if self.mode not in ("CT", "CD"):
            raise ConfigError(f"mode must be CT or CD, got {self.mode!r}")
        if self.student_steps < 1:
            raise ConfigError("student_steps must be >= 1")
        if not 0.0 <= self.eta <= 1.0:
            raise ConfigError("eta must lie in [0, 1]")
        if self.x_var_policy not in X_VAR_POLICIES:
            raise ConfigError(f"unknown x_var policy {self.x_var_policy!r}; expected one of {X_VAR_POLICIES}")
        if self.batch_size < 1 or self.iters < 0 or self.lr < 0 or self.log_every < 1:
            raise ConfigError("batch_size and log_every must be >= 1, iters and lr non-negative")
        if self.mode == "CD" and teacher is None:
            raise ConfigError("consistency distillation requires a teacher model")
        # N_teacher(i) is monotone, so the smallest per-segment count is at one endpoint
        lowest = min(per_segment_steps(self.anneal.teacher_steps(i), self.student_steps) for i in (0, self.anneal.anneal_iters))
        need = 1 if self.include_final_step else 2
        if lowest < need:
            raise ConfigError(
                f"round(N_teacher / student_steps) = {lowest} < {need} somewhere in the annealing range; "
                "raise anneal.n_start or lower student_steps"
            )


@dataclass
class TrainingDraw:
    """A batch of training draws; every field is per row except the step counts.

    ``n_teacher`` is the grid count actually used, ``n_per_segment * student_steps``;
    ``n_teacher_schedule`` is the annealed value it was rounded from.
    """

    x: np.ndarray
    eps: np.ndarray
    step: np.ndarray
    n_rel: np.ndarray
    t_step: np.ndarray
    t: np.ndarray
    s: np.ndarray
    z_t: np.ndarray
    n_teacher: int
    n_per_segment: int
    n_teacher_schedule: int

    @property
    def final(self) -> np.ndarray:
        """Rows with ``s == t_step``."""
        return self.n_rel == 1


def draw_training_tuple(
    cfg: TrainConfig,
    iteration: int,
    rng: np.random.Generator,
    data_sampler: Callable,
    sched: NoiseSchedule,
    batch_size: int | None = None,
) -> TrainingDraw:
    n = cfg.batch_size if batch_size is None else batch_size
    n_sched = cfg.anneal.teacher_steps(iteration)
    n_seg = per_segment_steps(n_sched, cfg.student_steps)
    low = 1 if cfg.include_final_step else 2
    if n_seg < low:
        raise ConfigError(f"N_per_segment = {n_seg} at iteration {iteration}")
    grid = n_seg * cfg.student_steps

    x = np.asarray(data_sampler(n, rng), dtype=float)
    eps = rng.standard_normal(x.shape)
    step = rng.integers(0, cfg.student_steps, size=n)
    n_rel = rng.integers(low, n_seg + 1, size=n)
    # integer numerators keep segment boundaries exact in floating point
    t = (step * n_seg + n_rel) / grid
    s = (step * n_seg + n_rel - 1) / grid
    t_step = step / cfg.student_steps
    alpha, sigma = sched.alpha_sigma(t)
    z_t = alpha[:, None] * x + sigma[:, None] * eps
    return TrainingDraw(x, eps, step, n_rel, t_step, t, s, z_t, grid, n_seg, n_sched)


def teacher_x(cfg: TrainConfig, draw: TrainingDraw, sched: NoiseSchedule, teacher=None, table: XVarTable | None = None):
    """``(x_teacher, x_var)`` for the aDDIM teacher step; CT always gives ``(x, 0)``."""
    n = len(draw.x)
    if cfg.mode == "CT":
        return draw.x, np.zeros(n)
    if teacher is None:
        raise ConfigError("consistency distillation requires a teacher model")
    x_teacher = teacher.predict(draw.z_t, draw.t).x_hat
    policy = cfg.x_var_policy
    if policy == "per_sample":
        x_var = ((x_teacher - draw.x) ** 2).sum(-1) / draw.x.shape[1]
    elif policy == "precomputed_table":
        if table is None:
            raise ConfigError("x_var policy precomputed_table needs a table")
        x_var = np.asarray(table(draw.t), dtype=float)
    elif policy == "analytic":
        x_var = np.asarray(x_var_analytic(sched, draw.t), dtype=float)
    else:
        x_var = np.zeros(n)
    return x_teacher, x_var


@dataclass
class LossResult:
    loss: float
    grad: np.ndarray | None
    per_sample: np.ndarray
    target: np.ndarray
    x_hat: np.ndarray


def consistency_target(model, sched: NoiseSchedule, draw: TrainingDraw, x_teacher, x_var):
    """x-space target ``invDDIM_{t -> t_step}(DDIM_{s -> t_step}(nograd f(z_s, s), z_s), z_t)``."""
    z_s = addim_step(sched, x_teacher, draw.z_t, draw.t, draw.s, x_var)
    x_ref = model.predict(z_s, draw.s).x_hat
    z_ref = z_s.copy()
    # s == t_step: DDIM_{s -> t_step} is the identity and the target is invDDIM_{t -> s}(z_s, z_t)
    hop = ~draw.final
    if np.any(hop):
        z_ref[hop] = ddim_step(sched, x_ref[hop], z_s[hop], draw.s[hop], draw.t_step[hop])
    return inv_ddim(sched, z_ref, draw.z_t, draw.t, draw.t_step)


def consistency_loss(
    model,
    sched: NoiseSchedule,
    loss_cfg: LossConfig,
    draw: TrainingDraw,
    x_teacher,
    x_var,
    ref_model=None,
    need_grad: bool = True,
) -> LossResult:
    """Batch-mean weighted distance between ``f(z_t, t)`` and the consistency target.

    The gradient flows only through ``f(z_t, t)``; the reference branch uses
    ``ref_model`` (default: ``model`` itself) and is treated as a constant.
    """
    ref = model if ref_model is None else ref_model
    target = consistency_target(ref, sched, draw, x_teacher, x_var)
    return _weighted_x_loss(model, sched, loss_cfg, draw.z_t, draw.t, target, need_grad)


def diffusion_loss(model, sched: NoiseSchedule, loss_cfg: LossConfig, x, z_t, t, need_grad=True) -> LossResult:
    """``w_t * distance(x - f(z_t, t))`` averaged over the batch."""
    return _weighted_x_loss(model, sched, loss_cfg, z_t, t, x, need_grad)


def _weighted_x_loss(model, sched, loss_cfg, z_t, t, target, need_grad):
    n = len(z_t)
    alpha, sigma = sched.alpha_sigma(t)
    alpha, sigma = np.asarray(alpha).reshape(-1, 1), np.asarray(sigma).reshape(-1, 1)
    weight = np.asarray(loss_cfg.weight(sched, t), dtype=float).reshape(-1)
    trainable = getattr(model, "trainable", False) and need_grad
    if trainable:
        v_hat, cache = model.forward(z_t, t)
        x_hat = alpha * z_t - sigma * v_hat
    else:
        x_hat = model.predict(z_t, t).x_hat
    dist, d_dist = loss_cfg.distance(target - x_hat)
    per_sample = weight * dist
    loss = float(per_sample.mean())
    grad = None
    if trainable:
        # target - x_hat = target - alpha z + sigma v, so d(diff)/dv = sigma
        upstream = (weight[:, None] * d_dist * sigma) / n
        grad, _ = model.backward(cache, upstream)
    return LossResult(loss, grad, per_sample, target, x_hat)


class Adam:
    def __init__(self, n_params, lr=3e-4, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = np.zeros(n_params)
        self.v = np.zeros(n_params)
        self.k = 0

    def step(self, params, grad):
        self.k += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad**2
        m_hat = self.m / (1.0 - self.beta1**self.k)
        v_hat = self.v / (1.0 - self.beta2**self.k)
        return params - self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


@dataclass
class TrainResult:
    model: MlpDenoiser
    metrics: list
    loss_trace: np.ndarray
    ema_model: MlpDenoiser | None = None


def _check_finite(iteration, loss, grad, draw, params):
    if np.isfinite(loss) and (grad is None or np.all(np.isfinite(grad))):
        return
    msg = (
        f"non-finite training step at iter {iteration}: loss={loss}, "
        f"|z_t|max={np.abs(draw.z_t).max():.3g}, t in [{draw.t.min():.4g}, {draw.t.max():.4g}], "
        f"|params|max={np.abs(params).max():.3g}"
    )
    raise TrainingError(msg)


def _run_loop(model, cfg, step_fn, evaluator, n_teacher_fn):
    cfg_model = model.copy()
    opt = Adam(cfg_model.n_params, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps)
    ema = cfg_model.params.copy() if cfg.ema_decay else None
    rng = stream(cfg.seed, 1)
    trace = np.zeros(cfg.iters)
    metrics, window = [], []
    for i in range(cfg.iters):
        last_good = cfg_model.params.copy()
        try:
            loss, grad = step_fn(cfg_model, i, rng)
        except TrainingError as err:
            err.last_good = last_good
            raise
        trace[i] = loss
        window.append(loss)
        cfg_model.params = opt.step(cfg_model.params, grad)
        if ema is not None:
            ema = cfg.ema_decay * ema + (1.0 - cfg.ema_decay) * cfg_model.params
        if (i + 1) % cfg.log_every == 0 or i + 1 == cfg.iters:
            w1 = float("nan")
            if evaluator is not None:
                # with EMA enabled the averaged weights are what gets evaluated
                scored = cfg_model
                if ema is not None:
                    scored = cfg_model.copy()
                    scored.params = ema
                w1 = float(evaluator(scored))
            row = {"iter": i + 1, "loss": float(np.mean(window)), "n_teacher": n_teacher_fn(i), "w1_eval": w1}
            metrics.append(row)
            window = []
            log.info("iter %d loss %.5g n_teacher %d w1 %.4g", row["iter"], row["loss"], row["n_teacher"], w1)
    ema_model = None
    if ema is not None:
        ema_model = cfg_model.copy()
        ema_model.params = ema
    return TrainResult(cfg_model, metrics, trace, ema_model)


def train(
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    model: MlpDenoiser,
    data_sampler: Callable,
    teacher=None,
    table: XVarTable | None = None,
    evaluator: Callable | None = None,
) -> TrainResult:
    """Training loop: draw batch, mean consistency loss, one Adam update."""
    cfg.validate(teacher)
    if cfg.mode == "CD" and cfg.x_var_policy == "precomputed_table" and table is None:
        raise ConfigError("x_var policy precomputed_table needs a table")
    sched = model.sched

    def step_fn(net, i, rng):
        draw = draw_training_tuple(cfg, i, rng, data_sampler, sched)
        x_teacher, x_var = teacher_x(cfg, draw, sched, teacher, table)
        res = consistency_loss(net, sched, loss_cfg, draw, x_teacher, x_var)
        _check_finite(i, res.loss, res.grad, draw, net.params)
        return res.loss, res.grad

    return _run_loop(model, cfg, step_fn, evaluator, lambda i: cfg.anneal.teacher_steps(i))


def diffusion_pretrain(
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    model: MlpDenoiser,
    data_sampler: Callable,
    time_grid: int | None = None,
    evaluator: Callable | None = None,
) -> TrainResult:
    """Standard diffusion training on ``w_t * distance(x - x_hat)``.

    Times are ``t ~ U(0, 1]`` by default. With ``time_grid = N`` they are drawn
    exactly as a CT run with ``student_steps = N_teacher = N`` would draw them,
    consuming the random stream identically.
    """
    if cfg.batch_size < 1 or cfg.iters < 0 or cfg.lr < 0:
        raise ConfigError("batch_size must be >= 1, iters and lr non-negative")
    sched = model.sched
    grid_cfg = None
    if time_grid is not None:
        grid_cfg = replace(cfg, mode="CT", student_steps=time_grid, anneal=AnnealSpec(time_grid, time_grid, 1))

    def step_fn(net, i, rng):
        if grid_cfg is not None:
            draw = draw_training_tuple(grid_cfg, i, rng, data_sampler, sched)
            x, z_t, t = draw.x, draw.z_t, draw.t
        else:
            x = np.asarray(data_sampler(cfg.batch_size, rng), dtype=float)
            t = 1.0 - rng.random(cfg.batch_size)
            alpha, sigma = sched.alpha_sigma(t)
            z_t = alpha[:, None] * x + sigma[:, None] * rng.standard_normal(x.shape)
        res = diffusion_loss(net, sched, loss_cfg, x, z_t, t)
        if not (np.isfinite(res.loss) and np.all(np.isfinite(res.grad))):
            raise TrainingError(f"non-finite diffusion loss at iter {i}: {res.loss}")
        return res.loss, res.grad

    return _run_loop(model, cfg, step_fn, evaluator, lambda i: time_grid or 0)
