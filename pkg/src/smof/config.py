"""Run configuration: flat ``key = value`` text with dotted keys.

A ``[section]`` header prefixes the keys that follow it, so these two files
are equivalent::

    optim.momentum = 0.9          [optim]
                                  momentum = 0.9

Every ``[phase]`` header opens a new phase block; phases run in file order.
``#`` starts a comment.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass, field, fields
from pathlib import Path

import numpy as np

from .controller import Phase, SmofSchedule
from .data import DatasetSpec
from .regularizers import PENALTY_MODES, PenaltyConfig


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    arch_name: str = "convnet-4"
    arch_params: dict = field(default_factory=dict)
    dataset: DatasetSpec = field(default_factory=DatasetSpec)
    schedule: SmofSchedule = field(default_factory=lambda: SmofSchedule([Phase(epochs=1)]))
    penalty_mode: str = "group-adaptive"
    scaled_gradient_step: bool = False
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 32
    eval_batch_size: int = 256
    seed: int = 0
    precision: str = "float32"
    output_dir: str = "runs/default"

    @property
    def dtype(self):
        return np.float64 if self.precision == "float64" else np.float32

    def penalty(self, phase: Phase) -> PenaltyConfig:
        return PenaltyConfig(phase.alpha, phase.beta, self.penalty_mode, self.scaled_gradient_step)


def _value(raw: str):
    raw = raw.strip()
    low = raw.lower()
    if low in ("true", "yes", "on"):
        return True
    if low in ("false", "no", "off"):
        return False
    try:
        return ast.literal_eval(raw)
    except (ValueError, SyntaxError):
        pass
    if "," in raw:
        return [_value(p) for p in raw.split(",") if p.strip()]
    return raw


def parse_pairs(text: str) -> tuple[dict[str, object], list[dict[str, object]]]:
    """Split config text into global dotted keys and a list of phase dicts."""
    flat: dict[str, object] = {}
    phases: list[dict[str, object]] = []
    section = ""
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if line.startswith("[") and line.endswith("]"):
            section = line[1:-1].strip()
            if section == "phase":
                phases.append({})
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {line!r}")
        key, val = (s.strip() for s in line.split("=", 1))
        if not key:
            raise ConfigError(f"line {lineno}: empty key")
        full = f"{section}.{key}" if section else key
        if full.startswith("phase."):
            if not phases:
                raise ConfigError(f"line {lineno}: phase key outside a [phase] block")
            phases[-1][full[len("phase."):]] = _value(val)
        else:
            flat[full] = _value(val)
    return flat, phases


_PHASE_KEYS = {f.name for f in fields(Phase)}
_DATASET_KEYS = {f.name for f in fields(DatasetSpec)}
_TOP = {
    "run.seed": ("seed", int),
    "run.precision": ("precision", str),
    "run.output_dir": ("output_dir", str),
    "optim.momentum": ("momentum", float),
    "optim.weight_decay": ("weight_decay", float),
    "optim.batch_size": ("batch_size", int),
    "optim.eval_batch_size": ("eval_batch_size", int),
    "smof.penalty_mode": ("penalty_mode", str),
    "smof.scaled_gradient_step": ("scaled_gradient_step", bool),
    "arch.name": ("arch_name", str),
}


def _listify(v):
    return list(v) if isinstance(v, (list, tuple)) else [v]


def dataset_from_pairs(pairs: dict[str, object]) -> DatasetSpec:
    kw = {}
    for key, val in pairs.items():
        if key not in _DATASET_KEYS:
            raise ConfigError(f"unknown dataset key {key!r}")
        if key.endswith("paths") or key in ("mean", "std"):
            val = _listify(val)
        kw[key] = val
    return DatasetSpec(**kw)


def parse_config(text: str, base_dir: Path | None = None) -> RunConfig:
    flat, phase_dicts = parse_pairs(text)
    cfg = RunConfig()
    arch_params: dict = {}
    ds_pairs: dict = {}
    r, interval = 1.0, 1
    for key, val in flat.items():
        if key in _TOP:
            attr, typ = _TOP[key]
            setattr(cfg, attr, typ(val) if typ is not bool else bool(val))
        elif key.startswith("arch."):
            arch_params[key[5:]] = val
        elif key.startswith("dataset."):
            ds_pairs[key[8:]] = val
        elif key == "smof.r":
            r = float(val)
        elif key == "smof.check_interval":
            interval = int(val)
        else:
            raise ConfigError(f"unknown config key {key!r}")
    phases = []
    for k, pd in enumerate(phase_dicts, 1):
        unknown = set(pd) - _PHASE_KEYS
        if unknown:
            raise ConfigError(f"phase {k}: unknown keys {sorted(unknown)}")
        if "epochs" not in pd:
            raise ConfigError(f"phase {k}: 'epochs' is required")
        if "lr_milestones" in pd:
            pd["lr_milestones"] = tuple(int(m) for m in _listify(pd["lr_milestones"]))
        try:
            phases.append(Phase(**pd))
        except (TypeError, ValueError) as e:
            raise ConfigError(f"phase {k}: {e}") from None
    if not phases:
        raise ConfigError("config defines no [phase] blocks")
    try:
        cfg.schedule = SmofSchedule(phases, r=r, check_interval=interval)
    except ValueError as e:
        raise ConfigError(str(e)) from None
    cfg.arch_params = arch_params
    cfg.dataset = dataset_from_pairs(ds_pairs)
    if base_dir is not None:
        for attr in ("train_paths", "train_label_paths", "test_paths", "test_label_paths"):
            setattr(cfg.dataset, attr, [str((base_dir / p)) if not Path(p).is_absolute() else p
                                        for p in getattr(cfg.dataset, attr)])
        if not Path(cfg.output_dir).is_absolute():
            cfg.output_dir = str(base_dir / cfg.output_dir)
    if cfg.penalty_mode not in PENALTY_MODES:
        raise ConfigError(f"unknown penalty mode {cfg.penalty_mode!r}")
    if cfg.precision not in ("float32", "float64"):
        raise ConfigError(f"precision must be float32 or float64, got {cfg.precision!r}")
    if cfg.batch_size < 1:
        raise ConfigError("batch_size must be positive")
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as e:
        raise ConfigError(f"cannot read config {path}: {e.strerror}") from None
    return parse_config(text, base_dir=path.parent)


def parse_dataset_arg(arg: str) -> DatasetSpec:
    """``--dataset`` value: a config file path or inline ``key=value,key=value`` pairs."""
    p = Path(arg)
    if p.is_file():
        return load_config(p).dataset
    pairs = {}
    for part in arg.split(";") if ";" in arg else arg.split(","):
        if not part.strip():
            continue
        if "=" not in part:
            raise ConfigError(f"bad dataset spec fragment {part!r}")
        k, v = part.split("=", 1)
        pairs[k.strip()] = _value(v)
    return dataset_from_pairs(pairs)
