"""``mscm`` command line: pretrain, train-cm, sample, eval, sweep, figure1.

Every run writes into ``<output_dir>/<run>/`` with ``config.snapshot``,
``metrics.csv``, ``checkpoints/``, ``samples/`` and ``figures/``. Every file
written starts with ``# mscm <version> config=sha256:<hash of the config text>``.

Environment: ``MSCM_OUTPUT_ROOT`` prefixes relative output directories,
``MSCM_THREADS`` caps BLAS threads and sets the sweep worker count.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import logging
import os
import sys

import numpy as np

from . import __version__, checkpoint
from .config import RunConfig, load as load_config, parse as parse_config
from .denoiser import GmmOracle, MlpDenoiser, x_var_table
from .evaluate import (
    MetricReport,
    make_cm_evaluator,
    make_ddim_evaluator,
    report_for,
    sampler_sweep,
    sliced_w1,
    write_reports,
)
from .figures import trajectory_svg
from .rng import stream
from .samplers import SAMPLER_KINDS, multistep_cm_sample, teacher_sample
from .schedule import SegmentGrid
from .training import ConfigError, TrainingError, diffusion_pretrain, train
from .checkpoint import CheckpointError

log = logging.getLogger("mscm")

METRICS_FIELDS = ("iter", "loss", "n_teacher", "w1_eval")


class CliError(Exception):
    """Runtime failure reported to the user with exit code 1."""


def header(cfg: RunConfig) -> str:
    return f"mscm {__version__} config=sha256:{cfg.digest}"


def run_layout(cfg: RunConfig, name: str) -> str:
    run_dir = os.path.join(cfg.output_dir, name)
    for sub in ("checkpoints", "samples", "figures"):
        os.makedirs(os.path.join(run_dir, sub), exist_ok=True)
    with open(os.path.join(run_dir, "config.snapshot"), "w") as fh:
        fh.write(f"# {header(cfg)}\n")
        fh.write(cfg.snapshot())
    return run_dir


def write_metrics(rows, path, head: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(f"# {head}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METRICS_FIELDS)
        for row in rows:
            writer.writerow([row["iter"], repr(row["loss"]), row["n_teacher"], repr(row["w1_eval"])])


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else parse_config("", "<defaults>")
    if getattr(args, "seed", None) is not None:
        cfg.raw["seed"] = args.seed
    return cfg


def _init_model(cfg: RunConfig, lineage: str) -> MlpDenoiser:
    m = cfg.raw["model"]
    spec = cfg.gmm()
    return MlpDenoiser.init(spec.dim, cfg.schedule(), stream(cfg.seed, 0), m["hidden"], m["n_freqs"], lineage)


def teacher_path(cfg: RunConfig) -> str:
    return os.path.join(cfg.output_dir, "pretrain", "checkpoints", "final.ckpt")


def student_path(cfg: RunConfig, mode: str, steps: int) -> str:
    ckdir = os.path.join(cfg.output_dir, f"cm_{mode.lower()}_{steps}", "checkpoints")
    ema = os.path.join(ckdir, "ema.ckpt")
    return ema if os.path.exists(ema) else os.path.join(ckdir, "final.ckpt")


def _load_ckpt(path: str, hint: str = "") -> MlpDenoiser:
    try:
        return checkpoint.load(path)
    except FileNotFoundError:
        raise CliError(f"checkpoint not found: {path}{hint}") from None
    except CheckpointError as err:
        raise CliError(str(err)) from None


def _guarded(run, model: MlpDenoiser, ckdir: str, head: str):
    """Run training; on divergence keep the last finite parameters as ``last_good.ckpt``."""
    try:
        return run()
    except TrainingError as err:
        if err.last_good is not None:
            good = model.copy()
            good.params = err.last_good
            path = os.path.join(ckdir, "last_good.ckpt")
            checkpoint.save(good, path, head)
            raise TrainingError(f"{err}; last good parameters saved to {path}") from None
        raise


def cmd_pretrain(args) -> int:
    cfg = _config(args)
    run_dir = run_layout(cfg, "pretrain")
    train_cfg, loss_cfg = cfg.pretrain_config()
    spec = cfg.gmm()
    model = _init_model(cfg, f"pretrain:seed={cfg.seed}")
    checkpoint.save(model, os.path.join(run_dir, "checkpoints", "init.ckpt"), header(cfg))
    ev = cfg.raw["eval"]
    evaluator = make_ddim_evaluator(spec, ev["ddim_steps"], ev["n_samples"], ev["seed"])
    res = _guarded(
        lambda: diffusion_pretrain(train_cfg, loss_cfg, model, lambda n, r: spec.sample(n, r), evaluator=evaluator),
        model,
        os.path.join(run_dir, "checkpoints"),
        header(cfg),
    )
    checkpoint.save(res.model, teacher_path(cfg), header(cfg))
    write_metrics(res.metrics, os.path.join(run_dir, "metrics.csv"), header(cfg))
    print(f"teacher checkpoint: {teacher_path(cfg)}")
    return 0


def cmd_train_cm(args) -> int:
    cfg = _config(args)
    mode = args.mode.upper()
    if mode == "CD" and not args.teacher:
        raise ConfigError("--mode cd requires --teacher <checkpoint>")
    steps = args.student_steps or cfg.raw["train"]["student_steps"]
    train_cfg = cfg.train_config(steps, mode)
    train_cfg.validate(teacher=object() if mode == "CD" else None)
    loss_cfg = cfg.loss_config()
    spec = cfg.gmm()
    lineage = f"cm_{mode.lower()}_{steps}:seed={cfg.seed}"

    teacher = None
    t_path = args.teacher or teacher_path(cfg)
    if mode == "CD" or cfg.raw["model"]["init"] == "teacher":
        hint = f"; run `mscm pretrain {args.config or '<config>'}` first or pass --teacher"
        teacher = _load_ckpt(t_path, hint)
    if cfg.raw["model"]["init"] == "teacher":
        model = teacher.copy()
        model.seed_lineage = f"{teacher.seed_lineage}>{lineage}"
    else:
        model = _init_model(cfg, lineage)

    table = None
    if mode == "CD" and train_cfg.x_var_policy == "precomputed_table":
        n_end = train_cfg.anneal.n_end
        times = np.arange(1, n_end + 1) / n_end
        table = x_var_table(teacher, spec, cfg.schedule(), times, train_cfg.eta, cfg.raw["eval"]["n_mc"], cfg.seed)

    run_dir = run_layout(cfg, f"cm_{mode.lower()}_{steps}")
    ev = cfg.raw["eval"]
    evaluator = make_cm_evaluator(spec, steps, ev["n_samples"], ev["seed"])
    ckdir = os.path.join(run_dir, "checkpoints")
    res = _guarded(
        lambda: train(
            train_cfg,
            loss_cfg,
            model,
            lambda n, r: spec.sample(n, r),
            teacher=teacher if mode == "CD" else None,
            table=table,
            evaluator=evaluator,
        ),
        model,
        ckdir,
        header(cfg),
    )
    checkpoint.save(res.model, os.path.join(ckdir, "final.ckpt"), header(cfg))
    if res.ema_model is not None:
        checkpoint.save(res.ema_model, os.path.join(ckdir, "ema.ckpt"), header(cfg))
    write_metrics(res.metrics, os.path.join(run_dir, "metrics.csv"), header(cfg))
    print(f"student checkpoint: {student_path(cfg, mode, steps)}")
    return 0


def _sampling_model(cfg: RunConfig, ckpt: str):
    if ckpt == "oracle":
        return GmmOracle(cfg.gmm(), cfg.schedule())
    return _load_ckpt(ckpt)


def _x_var_source(kind, source, model, cfg: RunConfig, steps: int):
    if kind not in ("addim", "noisy_ddim"):
        return None
    if source != "table":
        return source
    sched = model.sched
    times = sched.time_grid(steps)[:-1]
    return x_var_table(model, cfg.gmm(), sched, times, cfg.raw["train"]["eta"], cfg.raw["eval"]["n_mc"], cfg.seed)


def cmd_sample(args) -> int:
    cfg = _config(args)
    model = _sampling_model(cfg, args.ckpt)
    sched = model.sched
    if args.sampler == "cm":
        z_1 = stream(args.seed, 0).standard_normal((args.n, model.dim))
        run = multistep_cm_sample(model, sched, SegmentGrid(args.steps), z_1, sampler="cm", seed=args.seed)
    else:
        source = _x_var_source(args.sampler, args.x_var, model, cfg, args.steps)
        run = teacher_sample(model, sched, args.steps, args.sampler, source, args.seed, n=args.n)
    os.makedirs(args.out, exist_ok=True)
    head = header(cfg)
    samples_path = os.path.join(args.out, "samples.csv")
    traj_path = os.path.join(args.out, "trajectories.csv")
    run.write_csv(samples_path, header_comment=head, final_only=True)
    run.write_csv(traj_path, n_traj=args.n_traj, header_comment=head)
    print(f"samples: {samples_path}\ntrajectories: {traj_path}")
    return 0


def read_samples(path: str):
    """Terminal states from a samples/trajectories CSV: ``(sampler, steps, seed, array)``."""
    if not os.path.exists(path):
        raise CliError(f"samples file not found: {path}")
    rows = []
    header_row = None
    with open(path, newline="") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip() or line.startswith("#"):
                continue
            fields = next(csv.reader([line]))
            if header_row is None:
                if fields[:4] != ["sampler", "seed", "step", "t"] or len(fields) < 5:
                    raise CliError(f"{path}:{lineno}: expected header sampler,seed,step,t,dim0,..., got {line.strip()!r}")
                header_row = fields
                continue
            if len(fields) != len(header_row):
                raise CliError(f"{path}:{lineno}: expected {len(header_row)} fields, got {len(fields)}")
            try:
                rows.append((fields[0], int(fields[1]), int(fields[2]), [float(v) for v in fields[4:]]))
            except ValueError:
                raise CliError(f"{path}:{lineno}: malformed row {line.strip()!r}") from None
            if not np.all(np.isfinite(rows[-1][3])):
                raise CliError(f"{path}:{lineno}: non-finite value")
    if not rows:
        raise CliError(f"{path}: no sample rows")
    last = max(r[2] for r in rows)
    final = np.array([r[3] for r in rows if r[2] == last])
    return rows[0][0], last, rows[0][1], final


def cmd_eval(args) -> int:
    sampler, steps, seed, samples = read_samples(args.samples)
    if args.ref_samples:
        _, _, _, ref = read_samples(args.ref_samples)
        if ref.shape[1] != samples.shape[1]:
            raise CliError(f"dimension mismatch: {samples.shape[1]} vs {ref.shape[1]}")
        w1 = sliced_w1(samples, ref, seed=args.seed)
        report = MetricReport(sampler, steps, w1, float((samples**2).sum(1).mean()), len(samples), seed)
        head = f"mscm {__version__} config=sha256:{hashlib.sha256(b'').hexdigest()}"
    else:
        cfg = load_config(args.data_spec)
        report = report_for(samples, cfg.gmm(), sampler, steps, seed)
        head = header(cfg)
    text = write_reports([report], args.out, header_comment=head)
    if args.out is None:
        sys.stdout.write(text)
    return 0


def cmd_sweep(args) -> int:
    cfg = _config(args)
    model = _sampling_model(cfg, args.ckpt)
    workers = int(os.environ.get("MSCM_THREADS", "1") or 1)
    reports = sampler_sweep(
        model,
        model.sched,
        cfg.gmm(),
        kinds=tuple(args.kinds),
        step_counts=tuple(args.steps),
        n_samples=args.n,
        seed=cfg.seed,
        eta=cfg.raw["train"]["eta"],
        x_var=args.x_var,
        n_mc=cfg.raw["eval"]["n_mc"],
        workers=workers,
    )
    out = args.out or os.path.join(cfg.output_dir, "sweep.csv")
    os.makedirs(os.path.dirname(out) or ".", exist_ok=True)
    write_reports(reports, out, header_comment=header(cfg))
    print(f"report: {out}")
    return 0


def cmd_figure1(args) -> int:
    cfg = _config(args)
    steps_list = list(cfg.raw["figure1"]["student_steps"])
    config_arg = args.config
    missing = []
    if not os.path.exists(teacher_path(cfg)):
        missing.append(("pretrain", f"mscm pretrain {config_arg}"))
    for n in steps_list:
        if not os.path.exists(student_path(cfg, "CT", n)):
            missing.append((n, f"mscm train-cm {config_arg} --mode ct --student-steps {n}"))
    if missing and not args.train_all:
        cmds = "\n  ".join(cmd for _, cmd in missing)
        raise CliError(f"missing checkpoints; run\n  {cmds}\nor rerun figure1 with --train-all")
    for what, _ in missing:
        sub = argparse.Namespace(config=config_arg, seed=args.seed, mode="ct", student_steps=None, teacher=None)
        if what == "pretrain":
            cmd_pretrain(sub)
        else:
            sub.student_steps = what
            cmd_train_cm(sub)

    run_dir = run_layout(cfg, "figure1")
    head = header(cfg)
    spec = cfg.gmm()
    ev = cfg.raw["eval"]
    teacher = _load_ckpt(teacher_path(cfg))
    n_traj = cfg.raw["figure1"]["n_trajectories"]
    z_traj = stream(cfg.seed, 7).standard_normal((n_traj, spec.dim))
    z_eval = stream(ev["seed"], 0).standard_normal((ev["n_samples"], spec.dim))
    panels, reports = [], []
    for n in steps_list:
        model = _load_ckpt(student_path(cfg, "CT", n))
        run = multistep_cm_sample(model, model.sched, SegmentGrid(n), z_traj, sampler=f"cm{n}", seed=cfg.seed)
        run.write_csv(os.path.join(run_dir, "samples", f"traj_{n}step.csv"), header_comment=head)
        panels.append((f"{n}-step", run.times, np.stack(run.states)))
        final = multistep_cm_sample(model, model.sched, SegmentGrid(n), z_eval).final
        reports.append(report_for(final, spec, f"cm{n}", n, ev["seed"]))
    ref_steps = ev["reference_steps"]
    ref = teacher_sample(teacher, teacher.sched, ref_steps, "ddim", z_1=z_traj, seed=cfg.seed)
    ref.sampler = "ddim_inf"
    ref.write_csv(os.path.join(run_dir, "samples", "traj_inf.csv"), header_comment=head)
    panels.append((f"teacher ({ref_steps} DDIM)", ref.times, np.stack(ref.states)))
    final = teacher_sample(teacher, teacher.sched, ref_steps, "ddim", z_1=z_eval, record=False).final
    reports.append(report_for(final, spec, "ddim", ref_steps, ev["seed"]))
    write_reports(reports, os.path.join(run_dir, "report.csv"), header_comment=head)
    svg_path = os.path.join(run_dir, "figures", "figure1.svg")
    with open(svg_path, "w") as fh:
        fh.write(trajectory_svg(panels, header_comment=head))
    for rep in reports:
        print(f"{rep.sampler:>10s} steps={rep.steps:<5d} W1={rep.w1:.4f}")
    print(f"figure: {svg_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mscm", description="Multistep consistency models on Gaussian-mixture data.")
    parser.add_argument("--version", action="version", version=f"mscm {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", help="train the diffusion teacher")
    p.add_argument("config")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("train-cm", help="train a multistep consistency model")
    p.add_argument("config")
    p.add_argument("--mode", choices=("ct", "cd"), default="ct")
    p.add_argument("--student-steps", type=int)
    p.add_argument("--teacher", help="teacher checkpoint (required for --mode cd)")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_train_cm)

    p = sub.add_parser("sample", help="draw samples and trajectories")
    p.add_argument("--ckpt", required=True, help="checkpoint path, or 'oracle' for the exact mixture denoiser")
    p.add_argument("--sampler", choices=("cm",) + SAMPLER_KINDS, default="ddim")
    p.add_argument("--steps", type=int, required=True)
    p.add_argument("--n", type=int, default=1024)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="run config (data spec, eta, n_mc); defaults if omitted")
    p.add_argument("--x-var", choices=("table", "analytic", "zero"), default="table")
    p.add_argument("--n-traj", type=int, default=64, help="trajectories written to trajectories.csv")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("eval", help="W1 report for a samples CSV")
    p.add_argument("--samples", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--data-spec", help="config file whose data section is the reference mixture")
    group.add_argument("--ref-samples", help="reference samples CSV")
    p.add_argument("--out")
    p.add_argument("--seed", type=int, default=0, help="projection seed for sliced W1")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="sampler comparison over kinds and step counts")
    p.add_argument("config", nargs="?")
    p.add_argument("--ckpt", default="oracle")
    p.add_argument("--kinds", nargs="+", choices=SAMPLER_KINDS, default=list(SAMPLER_KINDS))
    p.add_argument("--steps", nargs="+", type=int, default=[8, 16, 32, 64])
    p.add_argument("--n", type=int, default=10_000)
    p.add_argument("--x-var", choices=("table", "analytic", "zero"), default="table")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("figure1", help="trajectory plot for 1/2/4/8-step models and the many-step teacher")
    p.add_argument("config")
    p.add_argument("--train-all", action="store_true", help="train any missing teacher or student first")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_figure1)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except FileNotFoundError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2 if "config" in str(err) else 1
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except TrainingError as err:
        print(f"training failed: {err}", file=sys.stderr)
        return 1
    except CliError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
