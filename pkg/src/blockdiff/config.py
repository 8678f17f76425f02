"""Flat ``key = value`` run configuration.

Example::

    schema_version = 1
    seed = 0
    model.d_model = 64
    data.hi = 9
    stage.0.objective = AR
    stage.0.steps = 200
    stage.1.objective = BlockDLLM
    stage.1.block_size = 4
    stage.1.steps = 100
    stage.1.warmup_steps = 50

Blank lines and ``#`` comments are ignored. Every key must be known;
``schema_version`` is required. Stage indices must be contiguous from 0.
"""

from __future__ import annotations

import re
from dataclasses import fields, replace

from .model import ModelConfig
from .objectives import WarmupConfig
from .trainer import CurriculumStage, DataConfig, EvalConfig, OptimConfig, TrainRun

SCHEMA_VERSION = 1


class ConfigError(ValueError):
    pass


def _bool(text: str) -> bool:
    low = text.lower()
    if low in ("true", "1", "yes"):
        return True
    if low in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _opt(conv):
    return lambda text: None if text.lower() == "none" else conv(text)


def _int_tuple(text: str) -> tuple[int, ...]:
    return tuple(int(x) for x in text.split(",") if x.strip())


MODEL_KEYS = {"d_model": int, "n_layers": int, "n_heads": int, "max_len": int, "d_ff": _opt(int),
              "init_std": float, "dtype": str}
DATA_KEYS = {f.name: (_opt(int) if f.name == "max_value" else int) for f in fields(DataConfig)}
OPTIM_KEYS = {f.name: float for f in fields(OptimConfig)}
EVAL_KEYS = {"every": int, "block_sizes": _int_tuple, "n_prompts": int}
STAGE_KEYS = {"objective": str, "steps": int, "block_size": int, "lr": _opt(float), "lr_warmup": int,
              "warmdown": float, "warmup_steps": _opt(int), "u_init": float, "parametrization": _opt(str),
              "clipped": _bool, "name": _opt(str)}
TOP_KEYS = {"schema_version": int, "seed": int, "budget": _opt(int), "init": _opt(str)}

_STAGE_RE = re.compile(r"^stage\.(\d+)\.(\w+)$")


def parse_flat(text: str) -> dict[str, str]:
    out: dict[str, str] = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {n}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"line {n}: empty key or value")
        if key in out:
            raise ConfigError(f"line {n}: duplicate key {key!r}")
        out[key] = value
    return out


def _convert(key: str, conv, value: str):
    try:
        return conv(value)
    except ValueError as e:
        raise ConfigError(f"{key}: {e}") from None


def run_from_flat(flat: dict[str, str], seed: int | None = None) -> tuple[TrainRun, str | None]:
    """Build a :class:`TrainRun` (plus the optional initial checkpoint path)."""
    if "schema_version" not in flat:
        raise ConfigError("missing schema_version")
    sections: dict[str, dict] = {"model": {}, "data": {}, "optim": {}, "eval": {}}
    schemas = {"model": MODEL_KEYS, "data": DATA_KEYS, "optim": OPTIM_KEYS, "eval": EVAL_KEYS}
    stages: dict[int, dict] = {}
    top: dict = {}
    for key, value in flat.items():
        m = _STAGE_RE.match(key)
        if m:
            field_name = m.group(2)
            if field_name not in STAGE_KEYS:
                raise ConfigError(f"unknown key {key!r}")
            stages.setdefault(int(m.group(1)), {})[field_name] = _convert(key, STAGE_KEYS[field_name], value)
            continue
        head, _, rest = key.partition(".")
        if head in sections and rest in schemas[head]:
            sections[head][rest] = _convert(key, schemas[head][rest], value)
        elif key in TOP_KEYS:
            top[key] = _convert(key, TOP_KEYS[key], value)
        else:
            raise ConfigError(f"unknown key {key!r}")
    if top["schema_version"] != SCHEMA_VERSION:
        raise ConfigError(f"schema_version {top['schema_version']} not supported (expected {SCHEMA_VERSION})")
    if not stages:
        raise ConfigError("no stages configured")
    if sorted(stages) != list(range(len(stages))):
        raise ConfigError(f"stage indices must run 0..{len(stages) - 1}, got {sorted(stages)}")
    try:
        data = DataConfig(**sections["data"])
        vocab = data.corpus_config.vocab
        model = ModelConfig(vocab_size=len(vocab), **sections["model"])
        stage_list = []
        for i in range(len(stages)):
            s = dict(stages[i])
            if "objective" not in s or "steps" not in s:
                raise ConfigError(f"stage {i} needs objective and steps")
            w_steps = s.pop("warmup_steps", None)
            u_init = s.pop("u_init", 1e-3)
            warm = WarmupConfig(w_steps, u_init) if w_steps is not None else None
            stage_list.append(CurriculumStage(warmup=warm, **s))
        run = TrainRun(tuple(stage_list), model, data, OptimConfig(**sections["optim"]),
                       EvalConfig(**sections["eval"]), top.get("seed", 0), top.get("budget"))
    except ConfigError:
        raise
    except (TypeError, ValueError) as e:
        raise ConfigError(str(e)) from None
    if seed is not None:
        run = replace(run, seed=seed)
    return run, top.get("init")


def load_run(path, seed: int | None = None) -> tuple[TrainRun, str | None]:
    with open(path) as fh:
        return run_from_flat(parse_flat(fh.read()), seed)


def _fmt(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


def dump_run(run: TrainRun, init: str | None = None) -> str:
    """Canonical text for ``run``; parsing it gives back an equal run."""
    lines = [f"schema_version = {SCHEMA_VERSION}", f"seed = {run.seed}", f"budget = {_fmt(run.budget)}"]
    if init is not None:
        lines.append(f"init = {init}")
    for k in MODEL_KEYS:
        lines.append(f"model.{k} = {_fmt(getattr(run.model, k))}")
    for section, obj in (("data", run.data), ("optim", run.optim), ("eval", run.eval)):
        for f in fields(obj):
            lines.append(f"{section}.{f.name} = {_fmt(getattr(obj, f.name))}")
    for i, st in enumerate(run.stages):
        for k in STAGE_KEYS:
            if k == "warmup_steps":
                v = st.warmup.steps if st.warmup else None
            elif k == "u_init":
                v = st.warmup.u_init if st.warmup else 1e-3
            else:
                v = getattr(st, k)
            lines.append(f"stage.{i}.{k} = {_fmt(v)}")
    return "\n".join(lines) + "\n"
