"""Versioned plain-text checkpoints for ``MlpDenoiser``.

Layout (any number of leading ``#`` comment lines are allowed)::

    # mscm 0.1.0 config=sha256:...
    mscm-checkpoint 1
    schedule kind=cosine rho=7 sigma_min=0.002 sigma_max=80
    architecture mlp dim=1 hidden=64,64,64 n_freqs=16 act=silu out=v
    seed_lineage pretrain:seed=0
    n_params 8769
    params
    <one parameter per line, %.17g>

Seventeen significant digits make the text form round-trip every double exactly.
"""

from __future__ import annotations

import os

import numpy as np

from .denoiser import MlpDenoiser
from .schedule import NoiseSchedule

MAGIC = "mscm-checkpoint"
VERSION = 1


class CheckpointError(ValueError):
    pass


def _fmt(value: float) -> str:
    return "%.17g" % value


def dumps(model: MlpDenoiser, header_comment: str | None = None) -> str:
    sched = model.sched
    lines = [f"# {header_comment}"] if header_comment else []
    lines += [
        f"{MAGIC} {VERSION}",
        f"schedule kind={sched.kind} rho={_fmt(sched.rho)} sigma_min={_fmt(sched.sigma_min)} sigma_max={_fmt(sched.sigma_max)}",
        f"architecture mlp dim={model.dim} hidden={','.join(map(str, model.hidden))} n_freqs={model.n_freqs} act=silu out=v",
        f"seed_lineage {model.seed_lineage}",
        f"n_params {model.n_params}",
        "params",
    ]
    lines.extend(_fmt(v) for v in model.params)
    return "\n".join(lines) + "\n"


def save(model: MlpDenoiser, path, header_comment: str | None = None) -> None:
    tmp = f"{path}.tmp"
    with open(tmp, "w") as fh:
        fh.write(dumps(model, header_comment))
    os.replace(tmp, path)


def _fields(line: str, keyword: str, lineno: int) -> dict:
    parts = line.split()
    if not parts or parts[0] != keyword:
        raise CheckpointError(f"line {lineno}: expected '{keyword} ...', got {line!r}")
    out = {}
    for token in parts[1:]:
        key, sep, value = token.partition("=")
        if not sep:
            raise CheckpointError(f"line {lineno}: expected key=value, got {token!r}")
        out[key] = value
    return out


def loads(text: str, source: str = "<string>") -> MlpDenoiser:
    lines = text.splitlines()
    # leading '#' lines are provenance comments
    skipped = 0
    while lines and lines[0].startswith("#"):
        lines = lines[1:]
        skipped += 1
    if len(lines) < 6:
        raise CheckpointError(f"{source}: truncated checkpoint ({len(lines)} lines)")
    head = lines[0].split()
    if len(head) != 2 or head[0] != MAGIC:
        raise CheckpointError(f"{source}: not an mscm checkpoint (line 1 is {lines[0]!r})")
    if head[1] != str(VERSION):
        raise CheckpointError(f"{source}: unsupported checkpoint version {head[1]}; this build reads version {VERSION}")
    try:
        sch = _fields(lines[1], "schedule", 2)
        sched = NoiseSchedule(sch["kind"], float(sch["rho"]), float(sch["sigma_min"]), float(sch["sigma_max"]))
        arch = _fields(lines[2].replace("architecture mlp", "architecture", 1), "architecture", 3)
        hidden = tuple(int(h) for h in arch["hidden"].split(",") if h)
        dim, n_freqs = int(arch["dim"]), int(arch["n_freqs"])
        if arch.get("act", "silu") != "silu" or arch.get("out", "v") != "v":
            raise CheckpointError(f"{source}: line 3: unsupported activation or output {arch}")
    except (KeyError, ValueError) as err:
        if isinstance(err, CheckpointError):
            raise
        raise CheckpointError(f"{source}: malformed header: {err}") from err
    if not lines[3].startswith("seed_lineage"):
        raise CheckpointError(f"{source}: line 4: expected seed_lineage")
    lineage = lines[3][len("seed_lineage") :].strip()
    count_line = lines[4].split()
    if len(count_line) != 2 or count_line[0] != "n_params":
        raise CheckpointError(f"{source}: line 5: expected 'n_params <count>'")
    n_params = int(count_line[1])
    if lines[5].strip() != "params":
        raise CheckpointError(f"{source}: line 6: expected 'params'")
    body = [ln for ln in lines[6:] if ln.strip()]
    if len(body) != n_params:
        raise CheckpointError(f"{source}: header declares {n_params} parameters, file holds {len(body)}")
    params = np.empty(n_params)
    for i, ln in enumerate(body):
        try:
            params[i] = float(ln)
        except ValueError:
            raise CheckpointError(f"{source}: line {7 + skipped + i}: not a number: {ln!r}") from None
    model = MlpDenoiser(dim, sched, hidden, n_freqs, seed_lineage=lineage)
    if model.n_params != n_params:
        raise CheckpointError(f"{source}: architecture needs {model.n_params} parameters, header declares {n_params}")
    model.params = params
    return model


def load(path) -> MlpDenoiser:
    if not os.path.exists(path):
        raise FileNotFoundError(f"checkpoint not found: {path}")
    with open(path) as fh:
        return loads(fh.read(), str(path))
