"""Flat ``key = value`` experiment configs with dotted namespaces."""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import get_type_hints

from .decode import DecodeConfig
from .models import ModelConfig
from .synthdata import TASKS, SynthParams
from .train import AugmentConfig, TrainConfig


class ConfigError(ValueError):
    def __init__(self, errors: list[str]):
        self.errors = list(errors)
        super().__init__("\n".join(self.errors))


@dataclass
class DataConfig:
    task: str = "asr"
    seed: int = 0
    n_train: int = 12000
    n_valid: int = 200
    n_test: int = 200
    synth: SynthParams = field(default_factory=SynthParams)

    def errors(self) -> list[str]:
        e = [] if self.task in TASKS else [f"data.task must be one of {TASKS}, got {self.task!r}"]
        if min(self.n_train, self.n_valid, self.n_test) < 1:
            e.append("data.n_train, data.n_valid and data.n_test must be >= 1")
        return e + self.synth.errors()


@dataclass
class ExperimentConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    data: DataConfig = field(default_factory=DataConfig)

    def errors(self) -> list[str]:
        return (self.model.errors() + self.train.errors() + self.decode.errors()
                + self.augment.errors() + self.data.errors())


NAMESPACES = ("model", "train", "decode", "augment", "data")


def _slots(cfg: ExperimentConfig) -> dict[str, tuple[object, str, type]]:
    """key -> (owner object, attribute, type) for every settable key."""
    out = {}
    for ns in NAMESPACES:
        obj = getattr(cfg, ns)
        targets = [obj] + ([obj.synth] if ns == "data" else [])
        for t in targets:
            hints = get_type_hints(type(t))
            for f in fields(t):
                if f.name == "synth":
                    continue
                out[f"{ns}.{f.name}"] = (t, f.name, hints[f.name])
    return out


def _convert(raw: str, typ) -> object:
    s = raw.strip()
    if typ is bool:
        if s.lower() in ("1", "true", "yes", "on"):
            return True
        if s.lower() in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"expected a boolean, got {s!r}")
    if typ is int:
        return int(s)
    if typ is float:
        return float(s)
    if typ is str:
        return s
    if getattr(typ, "__origin__", None) is tuple:
        parts = [p for p in s.replace(" ", "").split(",") if p]
        return tuple(int(p) for p in parts)
    raise ValueError(f"unsupported type {typ}")


def format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_lines(text: str, source: str = "<config>") -> tuple[list[tuple[str, str]], list[str]]:
    pairs, errs = [], []
    for i, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            errs.append(f"{source}:{i}: expected 'key = value'")
            continue
        k, v = line.split("=", 1)
        pairs.append((k.strip(), v.strip()))
    return pairs, errs


def build(pairs: list[tuple[str, str]], base: ExperimentConfig | None = None,
          errors: list[str] | None = None) -> ExperimentConfig:
    """Apply pairs in order (later wins); raise ConfigError listing every problem."""
    cfg = _deepcopy(base) if base is not None else ExperimentConfig()
    slots = _slots(cfg)
    errs = list(errors or [])
    frozen: dict[str, dict] = {}
    for k, v in pairs:
        if k not in slots:
            errs.append(f"unknown key {k!r}")
            continue
        owner, attr, typ = slots[k]
        try:
            val = _convert(v, typ)
        except ValueError as e:
            errs.append(f"{k}: {e}")
            continue
        if isinstance(owner, SynthParams):
            frozen.setdefault("synth", {})[attr] = val
        else:
            setattr(owner, attr, val)
    if "synth" in frozen:
        cfg.data.synth = dataclasses.replace(cfg.data.synth, **frozen["synth"])
    errs += cfg.errors()
    if errs:
        raise ConfigError(errs)
    return cfg


def _deepcopy(cfg: ExperimentConfig) -> ExperimentConfig:
    return ExperimentConfig(dataclasses.replace(cfg.model), dataclasses.replace(cfg.train),
                            dataclasses.replace(cfg.decode), dataclasses.replace(cfg.augment),
                            dataclasses.replace(cfg.data))


def load(path: Path | None, overrides: list[tuple[str, str]] = ()) -> ExperimentConfig:
    pairs, errs = [], []
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError([f"config file {p} not found"])
        pairs, errs = parse_lines(p.read_text(), str(p))
    return build(pairs + list(overrides), errors=errs)


def dump(cfg: ExperimentConfig, namespaces=NAMESPACES) -> str:
    lines = []
    for key, (owner, attr, _) in _slots(cfg).items():
        if key.split(".", 1)[0] in namespaces:
            lines.append(f"{key} = {format_value(getattr(owner, attr))}")
    return "\n".join(lines) + "\n"


def read_pairs(path: Path) -> list[tuple[str, str]]:
    pairs, errs = parse_lines(Path(path).read_text(), str(path))
    if errs:
        raise ConfigError(errs)
    return pairs
