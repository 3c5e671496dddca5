"""Experiment configuration.

One frozen dataclass tree, serialized as flat `key = value` lines with
dotted section prefixes (`loss.a = 0.88`).  The same dotted keys drive
command line overrides.  The config hash is a sha256 over the canonical
serialization with `out_dir` excluded, so two runs of the same experiment
hash identically no matter where their artifacts land; every artifact
embeds that hash."""

from __future__ import annotations

import dataclasses
import enum
import hashlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, get_args, get_origin, get_type_hints

from latse.data import DataConfig
from latse.margins import MarginSpec


class ConfigError(ValueError):
    pass


_SCOPES = ("full_sample", "embedding_only")
_TARGET_MODES = ("momentum", "sample")


@dataclass(frozen=True)
class GateConfig:
    k: int = 1
    scope: str = "full_sample"

    def __post_init__(self) -> None:
        if self.k < 0:
            raise ValueError(f"gate k must be non-negative, got {self.k}")
        if self.scope not in _SCOPES:
            raise ValueError(f"gate scope must be one of {_SCOPES}, got {self.scope!r}")


@dataclass(frozen=True)
class GenConfig:
    weight: float = 8.0
    momentum: float = 0.9
    target_mode: str = "momentum"
    update_gated_only: bool = True
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_enabled: bool = True

    def __post_init__(self) -> None:
        if self.weight < 0.0:
            raise ValueError(f"gen weight must be non-negative, got {self.weight}")
        if not 0.0 <= self.momentum < 1.0:
            raise ValueError(f"gen momentum must be in [0, 1), got {self.momentum}")
        if self.target_mode not in _TARGET_MODES:
            raise ValueError(f"target_mode must be one of {_TARGET_MODES}")

    def ssim_config(self):
        from latse.generative import SsimConfig

        return SsimConfig(window=self.ssim_window, sigma=self.ssim_sigma,
                          enabled=self.ssim_enabled)


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 0.05
    decay_factor: float = 10.0
    decay_points: tuple[float, ...] = (0.6, 0.8)
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 64

    def __post_init__(self) -> None:
        if self.lr <= 0.0 or self.decay_factor < 1.0 or self.batch_size <= 0:
            raise ValueError("bad optimizer settings")
        if any(not 0.0 < p <= 1.0 for p in self.decay_points):
            raise ValueError("decay points are fractions of total iterations")


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 7
    teacher_iters: int = 500
    student_iters: int = 900
    metric_interval: int = 10
    embedding_dim: int = 64
    hidden_dims: tuple[int, ...] = (256, 256)
    out_dir: str = "runs/exp"
    data: DataConfig = field(default_factory=DataConfig)
    loss: MarginSpec = field(default_factory=lambda: MarginSpec.linear(0.88, 0.88, s=16.0))
    gate: GateConfig = field(default_factory=GateConfig)
    gen: GenConfig = field(default_factory=GenConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)

    def __post_init__(self) -> None:
        if self.seed < 0:
            raise ValueError("seed must be non-negative")
        if self.teacher_iters < 0 or self.student_iters <= 0:
            raise ValueError("iteration counts out of range")
        if self.metric_interval <= 0:
            raise ValueError("metric_interval must be positive")
        if self.embedding_dim <= 0 or any(d <= 0 for d in self.hidden_dims):
            raise ValueError("bad network widths")

    # -- serialization ------------------------------------------------------

    def lines(self) -> list[str]:
        out = []
        for key, value, _ in _walk(self):
            out.append(f"{key} = {_format_value(value)}")
        return out

    def serialize(self) -> str:
        return "\n".join(self.lines()) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.serialize())

    def config_hash(self) -> str:
        body = "\n".join(l for l in self.lines() if not l.startswith("out_dir "))
        return hashlib.sha256(body.encode("ascii")).hexdigest()

    def with_overrides(self, overrides: Mapping[str, str]) -> "ExperimentConfig":
        """Apply dotted-key textual overrides in order.

        Set `loss.family` before family-specific margins when changing both."""
        cfg = self
        for key, text in overrides.items():
            cfg = _set_one(cfg, key, text)
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        overrides: dict[str, str] = {}
        for raw in Path(path).read_text().splitlines():
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ConfigError(f"bad config line: {raw!r}")
            key, _, value = line.partition("=")
            overrides[key.strip()] = value.strip()
        return cls().with_overrides(overrides)


def default_config() -> ExperimentConfig:
    return ExperimentConfig()


_SECTIONS = ("data", "loss", "gate", "gen", "optim")


def _hints(cls) -> dict:
    return get_type_hints(cls)


def _walk(cfg: ExperimentConfig):
    """Yield (dotted key, value, declared type) in canonical order."""
    top_hints = _hints(ExperimentConfig)
    for f in dataclasses.fields(cfg):
        if f.name in _SECTIONS:
            continue
        yield f.name, getattr(cfg, f.name), top_hints[f.name]
    for sec in _SECTIONS:
        sub = getattr(cfg, sec)
        sub_hints = _hints(type(sub))
        for f in dataclasses.fields(sub):
            yield f"{sec}.{f.name}", getattr(sub, f.name), sub_hints[f.name]


def _format_value(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, enum.Enum):
        return str(v.value)
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, int):
        return str(v)
    if isinstance(v, str):
        return v
    if isinstance(v, tuple):
        return ",".join(_format_value(x) for x in v)
    raise ConfigError(f"cannot serialize {type(v).__name__}")


def _parse_value(text: str, ftype):
    origin = get_origin(ftype)
    if origin is tuple:
        elem = get_args(ftype)[0]
        parts = [p.strip() for p in text.split(",")]
        return tuple(_parse_value(p, elem) for p in parts if p != "")
    if ftype is bool:
        low = text.lower()
        if low in ("true", "1", "yes"):
            return True
        if low in ("false", "0", "no"):
            return False
        raise ConfigError(f"expected a boolean, got {text!r}")
    if ftype is int:
        try:
            return int(text)
        except ValueError as exc:
            raise ConfigError(f"expected an integer, got {text!r}") from exc
    if ftype is float:
        try:
            return float(text)
        except ValueError as exc:
            raise ConfigError(f"expected a number, got {text!r}") from exc
    if ftype is str:
        return text
    if isinstance(ftype, type) and issubclass(ftype, enum.Enum):
        try:
            return ftype(text)
        except ValueError as exc:
            raise ConfigError(f"bad value {text!r} for {ftype.__name__}") from exc
    raise ConfigError(f"cannot parse a {ftype!r}")


def _set_one(cfg: ExperimentConfig, key: str, text: str) -> ExperimentConfig:
    key = key.strip()
    if "." in key:
        sec, _, fname = key.partition(".")
        if sec not in _SECTIONS:
            raise ConfigError(f"unknown config section {sec!r}")
        sub = getattr(cfg, sec)
        hints = _hints(type(sub))
        if fname not in hints:
            raise ConfigError(f"unknown config key {key!r}")
        value = _parse_value(text, hints[fname])
        try:
            new_sub = dataclasses.replace(sub, **{fname: value})
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from exc
        return dataclasses.replace(cfg, **{sec: new_sub})
    hints = _hints(ExperimentConfig)
    if key not in hints or key in _SECTIONS:
        raise ConfigError(f"unknown config key {key!r}")
    value = _parse_value(text, hints[key])
    try:
        return dataclasses.replace(cfg, **{key: value})
    except ValueError as exc:
        raise ConfigError(f"{key}: {exc}") from exc
