"""Run configuration: nested dataclasses, YAML loading, dotted overrides and run ids."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

import yaml

from .encoder import EncoderConfig
from .policy import CONDITIONS, LSTMConfig, PolicyConfig
from .sim import ExpertParams, Kinematics
from .train import TrainConfig


@dataclass
class SimConfig:
    phantom_seed: int = 0
    n_targets: int = 9
    repetitions: int = 5
    noise_scale: float = 0.05
    resolution: int = 224
    kinematics: Kinematics = field(default_factory=Kinematics)
    expert: ExpertParams = field(default_factory=ExpertParams)


@dataclass
class DatasetConfig:
    split: str = "episode"                # episode | scenario
    ratios: tuple = (0.6, 0.2, 0.2)       # only used when scenarios are not 1..9
    shuffle: bool = False
    stride: int = 1


@dataclass
class EvalConfig:
    split_set: str = "test"               # train | val | test
    condition: str = "baseline"
    ablation_mode: str = "zero_shot"      # zero_shot | retrain
    batch_size: int = 64


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "runs"
    model: str = "cva"                    # cva | lstm
    sim: SimConfig = field(default_factory=SimConfig)
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    policy: PolicyConfig = field(default_factory=PolicyConfig)
    lstm: LSTMConfig = field(default_factory=LSTMConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self) -> "RunConfig":
        if self.model not in ("cva", "lstm"):
            raise ValueError(f"model must be cva or lstm, got {self.model!r}")
        if self.dataset.split not in ("episode", "scenario"):
            raise ValueError(f"dataset.split must be episode or scenario, got {self.dataset.split!r}")
        if self.eval.condition not in CONDITIONS:
            raise ValueError(f"eval.condition must be one of {CONDITIONS}")
        if self.eval.split_set not in ("train", "val", "test"):
            raise ValueError("eval.split_set must be train, val or test")
        if self.eval.ablation_mode not in ("zero_shot", "retrain"):
            raise ValueError("eval.ablation_mode must be zero_shot or retrain")
        if self.encoder.resolution != self.sim.resolution:
            raise ValueError(f"encoder.resolution {self.encoder.resolution} differs from "
                             f"sim.resolution {self.sim.resolution}")
        return self


# fields fed from elsewhere and hidden from the file format
DERIVED = {"train.seed": "seed"}


def _hints(cls):
    return typing.get_type_hints(cls)


def _coerce(hint, value, key: str):
    """YAML 1.1 reads ``3e-4`` as a string and ``1`` as an int; cast both for float fields."""
    accepts_float = hint is float or float in typing.get_args(hint)
    if accepts_float and isinstance(value, (int, str)) and not isinstance(value, bool):
        try:
            return float(value)
        except ValueError:
            raise ValueError(f"{key}: expected a number, got {value!r}") from None
    return value


def from_dict(cls, data: dict, prefix: str = ""):
    """Build dataclass ``cls`` from nested dicts, rejecting unknown keys."""
    data = dict(data or {})
    hints = _hints(cls)
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        value = data.pop(f.name)
        sub = hints[f.name]
        if dataclasses.is_dataclass(sub):
            value = from_dict(sub, value, f"{prefix}{f.name}.")
        elif isinstance(value, list):
            value = tuple(value)
        else:
            value = _coerce(sub, value, prefix + f.name)
        kwargs[f.name] = value
    if data:
        raise KeyError(f"unknown config keys: {', '.join(prefix + k for k in sorted(data))}")
    return cls(**kwargs)


def to_dict(cfg) -> dict:
    out = {}
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if dataclasses.is_dataclass(value):
            value = to_dict(value)
        elif isinstance(value, tuple):
            value = list(value)
        out[f.name] = value
    return out


def flatten(cfg, prefix: str = "") -> list[tuple[str, object]]:
    """``(dotted.key, value)`` for every leaf field, in declaration order."""
    rows = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        key = prefix + f.name
        if dataclasses.is_dataclass(value):
            rows += flatten(value, key + ".")
        else:
            rows.append((key, value))
    return rows


def set_dotted(data: dict, key: str, value) -> None:
    parts = key.split(".")
    node = data
    for p in parts[:-1]:
        node = node.setdefault(p, {})
        if not isinstance(node, dict):
            raise KeyError(f"{key}: {p} is not a section")
    node[parts[-1]] = value


def parse_override(text: str) -> tuple[str, object]:
    if "=" not in text:
        raise ValueError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    return key.strip(), yaml.safe_load(raw)


def load_config(path=None, overrides=()) -> RunConfig:
    """Defaults, then the YAML file, then ``(dotted key, value)`` overrides."""
    data = {}
    if path:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    for key, value in overrides:
        set_dotted(data, key, value)
    cfg = from_dict(RunConfig, data)
    cfg.train = dataclasses.replace(cfg.train, seed=cfg.seed)
    return cfg.validate()


def dump_config(cfg: RunConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(to_dict(cfg), sort_keys=False))


def run_id(cfg: RunConfig) -> str:
    """Content hash of everything that shapes a trained model (eval and output root excluded)."""
    d = to_dict(cfg)
    d.pop("eval")
    d.pop("out")
    digest = hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:12]
    return f"{cfg.model}-{cfg.dataset.split}-{digest}"


def describe_fields() -> str:
    """Every config key with its default, for ``--help``."""
    rows = [(k, v) for k, v in flatten(RunConfig()) if k not in DERIVED]
    width = max(len(k) for k, _ in rows)
    lines = ["config fields (dotted key = default):"]
    lines += [f"  {k:<{width}} = {json.dumps(list(v) if isinstance(v, tuple) else v)}" for k, v in rows]
    lines += [f"  ({k} is taken from {src})" for k, src in DERIVED.items()]
    return "\n".join(lines)
