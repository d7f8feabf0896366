"""Run configuration: a YAML document, fully validated before any compute.

Grammar (every section and key is optional; omitted keys take the defaults
in ``DEFAULTS``; unknown keys are errors)::

    seed: <int>
    output_dir: <path>           # relative paths resolve under $MSCM_OUTPUT_ROOT if set
    data:     {weights: [...], means: [[...], ...], variances: [...]}
    schedule: {kind: cosine | karras_sigma_ramp, rho, sigma_min, sigma_max}
    model:    {hidden: [<int>, ...], n_freqs: <int>, init: teacher | random}
    pretrain: {iters, batch_size, lr, metric, weighting, log_every}
    train:    {mode: CT | CD, student_steps, eta, x_var_policy, batch_size, lr, iters,
               include_final_step, log_every, ema_decay, n_start, n_end, anneal_iters}
    loss:     {metric: l2 | l2_squared | pseudo_huber, weighting: snr_plus_one | unit, huber_c}
    eval:     {n_samples, seed, ddim_steps, reference_steps, n_mc}
    figure1:  {student_steps: [<int>, ...], n_trajectories}

Errors carry the file name and the line of the offending key.
"""

from __future__ import annotations

import copy
import hashlib
import os
from dataclasses import dataclass

import yaml

from .denoiser import GmmSpec
from .schedule import AnnealSpec, NoiseSchedule
from .training import ConfigError, LossConfig, TrainConfig

DEFAULTS = {
    "seed": 0,
    "output_dir": "runs/default",
    "data": {"weights": [0.5, 0.5], "means": [[-1.0], [1.0]], "variances": [0.0025, 0.0025]},
    "schedule": {"kind": "cosine", "rho": 7.0, "sigma_min": 0.002, "sigma_max": 80.0},
    "model": {"hidden": [64, 64, 64], "n_freqs": 16, "init": "teacher"},
    "pretrain": {
        "iters": 20000,
        "batch_size": 256,
        "lr": 3e-4,
        "metric": "l2_squared",
        "weighting": "snr_plus_one",
        "log_every": 1000,
    },
    "train": {
        "mode": "CT",
        "student_steps": 4,
        "eta": 0.75,
        "x_var_policy": "per_sample",
        "batch_size": 256,
        "lr": 3e-4,
        "iters": 20000,
        "include_final_step": True,
        "log_every": 1000,
        "ema_decay": None,
        "n_start": 64,
        "n_end": 1280,
        "anneal_iters": 10000,
    },
    "loss": {"metric": "l2", "weighting": "snr_plus_one", "huber_c": 1e-4},
    "eval": {"n_samples": 4096, "seed": 0, "ddim_steps": 64, "reference_steps": 512, "n_mc": 10000},
    "figure1": {"student_steps": [1, 2, 4, 8], "n_trajectories": 64},
}

# expected python type for each leaf; lists are checked element-wise where it matters
_TYPES = {
    "seed": int,
    "output_dir": str,
    "schedule.kind": str,
    "schedule.rho": float,
    "schedule.sigma_min": float,
    "schedule.sigma_max": float,
    "model.n_freqs": int,
    "model.init": str,
    "pretrain.iters": int,
    "pretrain.batch_size": int,
    "pretrain.lr": float,
    "pretrain.metric": str,
    "pretrain.weighting": str,
    "pretrain.log_every": int,
    "train.mode": str,
    "train.student_steps": int,
    "train.eta": float,
    "train.x_var_policy": str,
    "train.batch_size": int,
    "train.lr": float,
    "train.iters": int,
    "train.include_final_step": bool,
    "train.log_every": int,
    "train.ema_decay": (float, type(None)),
    "train.n_start": int,
    "train.n_end": int,
    "train.anneal_iters": int,
    "loss.metric": str,
    "loss.weighting": str,
    "loss.huber_c": float,
    "eval.n_samples": int,
    "eval.seed": int,
    "eval.ddim_steps": int,
    "eval.reference_steps": int,
    "eval.n_mc": int,
    "figure1.n_trajectories": int,
}


def _line_map(node, prefix="", out=None) -> dict:
    """``dotted.key -> 1-based line`` for every mapping key in a composed YAML tree."""
    out = {} if out is None else out
    if isinstance(node, yaml.MappingNode):
        for key_node, value_node in node.value:
            path = f"{prefix}{key_node.value}"
            out[path] = key_node.start_mark.line + 1
            _line_map(value_node, path + ".", out)
    return out


def _coerce(value, expected, where):
    if expected is float or (isinstance(expected, tuple) and float in expected):
        if value is None and isinstance(expected, tuple):
            return None
        if isinstance(value, bool):
            raise ConfigError(f"{where}: expected a number, got {value!r}")
        # PyYAML reads 3e-4 (no dot) as a string
        if isinstance(value, (int, float, str)):
            try:
                return float(value)
            except ValueError:
                pass
        raise ConfigError(f"{where}: expected a number, got {value!r}")
    if expected is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where}: expected an integer, got {value!r}")
        return value
    if expected is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{where}: expected true or false, got {value!r}")
        return value
    if expected is str:
        if not isinstance(value, str):
            raise ConfigError(f"{where}: expected a string, got {value!r}")
        return value
    return value


@dataclass
class RunConfig:
    raw: dict
    source: str
    text: str

    @property
    def digest(self) -> str:
        return hashlib.sha256(self.text.encode()).hexdigest()

    @property
    def seed(self) -> int:
        return self.raw["seed"]

    @property
    def output_dir(self) -> str:
        out = self.raw["output_dir"]
        root = os.environ.get("MSCM_OUTPUT_ROOT")
        if root and not os.path.isabs(out):
            return os.path.join(root, out)
        return out

    def gmm(self) -> GmmSpec:
        d = self.raw["data"]
        return GmmSpec(tuple(d["weights"]), tuple(map(tuple, d["means"])), tuple(d["variances"]))

    def schedule(self) -> NoiseSchedule:
        s = self.raw["schedule"]
        return NoiseSchedule(s["kind"], s["rho"], s["sigma_min"], s["sigma_max"])

    def train_config(self, student_steps: int | None = None, mode: str | None = None) -> TrainConfig:
        t = self.raw["train"]
        return TrainConfig(
            mode=mode or t["mode"],
            student_steps=student_steps or t["student_steps"],
            anneal=AnnealSpec(t["n_start"], t["n_end"], t["anneal_iters"]),
            eta=t["eta"],
            x_var_policy=t["x_var_policy"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            iters=t["iters"],
            seed=self.seed,
            include_final_step=t["include_final_step"],
            log_every=t["log_every"],
            ema_decay=t["ema_decay"],
        )

    def loss_config(self) -> LossConfig:
        loss = self.raw["loss"]
        return LossConfig(loss["metric"], loss["weighting"], loss["huber_c"])

    def pretrain_config(self) -> tuple[TrainConfig, LossConfig]:
        p = self.raw["pretrain"]
        cfg = TrainConfig(
            batch_size=p["batch_size"], lr=p["lr"], iters=p["iters"], seed=self.seed, log_every=p["log_every"]
        )
        return cfg, LossConfig(p["metric"], p["weighting"], self.raw["loss"]["huber_c"])

    def snapshot(self) -> str:
        return yaml.safe_dump(self.raw, sort_keys=True)


def _merge(defaults: dict, given: dict, lines: dict, source: str, prefix="") -> dict:
    out = copy.deepcopy(defaults)
    for key, value in given.items():
        path = f"{prefix}{key}"
        where = f"{source}:{lines.get(path, '?')}: {path}"
        if key not in defaults:
            raise ConfigError(f"{where}: unknown key (allowed: {', '.join(sorted(defaults))})")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise ConfigError(f"{where}: expected a mapping")
            out[key] = _merge(defaults[key], value, lines, source, path + ".")
        elif path in _TYPES:
            out[key] = _coerce(value, _TYPES[path], where)
        else:
            out[key] = value
    return out


def _check(raw: dict, lines: dict, source: str) -> None:
    """Build every runtime object once so invalid configs fail before any compute."""

    def at(path):
        return f"{source}:{lines.get(path, lines.get(path.split('.')[0], '?'))}: {path}"

    def guard(path, fn):
        try:
            return fn()
        except (ValueError, TypeError) as err:
            msg = str(err)
            raise ConfigError(f"{at(path)}: {msg}") from None

    data = raw["data"]
    guard(
        "data",
        lambda: GmmSpec(
            tuple(float(w) for w in data["weights"]),
            tuple(tuple(float(v) for v in m) for m in data["means"]),
            tuple(float(v) for v in data["variances"]),
        ),
    )
    raw["data"] = {
        "weights": [float(w) for w in data["weights"]],
        "means": [[float(v) for v in m] for m in data["means"]],
        "variances": [float(v) for v in data["variances"]],
    }
    s = raw["schedule"]
    guard("schedule", lambda: NoiseSchedule(s["kind"], s["rho"], s["sigma_min"], s["sigma_max"]))
    m = raw["model"]
    if not isinstance(m["hidden"], list) or not all(isinstance(h, int) and h >= 1 for h in m["hidden"]):
        raise ConfigError(f"{at('model.hidden')}: expected a list of positive integers")
    if m["n_freqs"] < 0:
        raise ConfigError(f"{at('model.n_freqs')}: must be >= 0")
    if m["init"] not in ("teacher", "random"):
        raise ConfigError(f"{at('model.init')}: expected teacher or random")
    p = raw["pretrain"]
    guard("pretrain.metric", lambda: LossConfig(p["metric"], p["weighting"]))
    for key in ("iters", "batch_size", "log_every"):
        if p[key] < (0 if key == "iters" else 1):
            raise ConfigError(f"{at('pretrain.' + key)}: out of range")
    if p["lr"] < 0:
        raise ConfigError(f"{at('pretrain.lr')}: must be >= 0")
    t = raw["train"]
    if t["mode"] not in ("CT", "CD"):
        raise ConfigError(f"{at('train.mode')}: expected CT or CD, got {t['mode']!r}")
    loss = raw["loss"]
    guard("loss", lambda: LossConfig(loss["metric"], loss["weighting"], loss["huber_c"]))
    anneal = guard("train.n_start", lambda: AnnealSpec(t["n_start"], t["n_end"], t["anneal_iters"]))
    if t["ema_decay"] is not None and not 0.0 < t["ema_decay"] < 1.0:
        raise ConfigError(f"{at('train.ema_decay')}: must lie in (0, 1) or be null")
    fig_steps = raw["figure1"]["student_steps"]
    if not isinstance(fig_steps, list) or not all(isinstance(n, int) and not isinstance(n, bool) for n in fig_steps):
        raise ConfigError(f"{at('figure1.student_steps')}: expected a list of integers")
    steps = [("train.student_steps", t["student_steps"])] + [("figure1.student_steps", n) for n in fig_steps]
    for path, n in steps:
        cfg = TrainConfig(
            mode="CT",
            student_steps=n,
            anneal=anneal,
            eta=t["eta"],
            x_var_policy=t["x_var_policy"],
            batch_size=t["batch_size"],
            lr=t["lr"],
            iters=t["iters"],
            include_final_step=t["include_final_step"],
            log_every=t["log_every"],
        )
        guard(path, cfg.validate)
    e = raw["eval"]
    for key in ("n_samples", "ddim_steps", "reference_steps", "n_mc"):
        if e[key] < 1:
            raise ConfigError(f"{at('eval.' + key)}: must be >= 1")
    if raw["figure1"]["n_trajectories"] < 1:
        raise ConfigError(f"{at('figure1.n_trajectories')}: must be >= 1")


def parse(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        given = yaml.safe_load(text)
    except yaml.MarkedYAMLError as err:
        mark = err.problem_mark
        line = mark.line + 1 if mark is not None else "?"
        raise ConfigError(f"{source}:{line}: YAML syntax error: {err.problem}") from None
    if given is None:
        given, node = {}, None
    if not isinstance(given, dict):
        raise ConfigError(f"{source}:1: top level must be a mapping")
    lines = _line_map(node) if node is not None else {}
    raw = _merge(DEFAULTS, given, lines, source)
    _check(raw, lines, source)
    return RunConfig(raw, source, text)


def load(path) -> RunConfig:
    if not os.path.exists(path):
        raise FileNotFoundError(f"config not found: {path}")
    with open(path) as fh:
        return parse(fh.read(), str(path))
