"""Sectioned ``key = value`` configuration bundling every stage's settings."""
from __future__ import annotations

import configparser
import dataclasses
import os
from dataclasses import dataclass, field
from pathlib import Path

from .coarse import LossWeights, PoseSolveConfig
from .fine import WarpSolveConfig
from .flow import FlowProvider
from .maskprop import MaskPropConfig
from .outpaint import OutpaintConfig
from .synth import SynthConfig, _parse_value

THREADS_ENV = "FULLSTAB_THREADS"


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class SmoothConfig:
    window: int = 20
    sigma: float = 0.0           # 0 -> window / 4

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("smoothing window must be >= 1")
        if self.sigma < 0:
            raise ValueError("sigma must be non-negative")

    @property
    def sigma_or_default(self) -> float:
        return self.sigma if self.sigma > 0 else self.window / 4.0


@dataclass(frozen=True)
class PipelineOptions:
    provider: str = "oracle"
    workers: int = 1
    seed: int = 0
    fine: bool = True
    fixpoint_iters: int = 5

    def __post_init__(self):
        if self.provider not in ("oracle", "classical"):
            raise ValueError(f"unknown provider {self.provider!r}")
        if self.workers < 1:
            raise ValueError("workers must be >= 1")
        if self.fixpoint_iters < 1:
            raise ValueError("fixpoint_iters must be >= 1")


SECTIONS = {
    "pipeline": PipelineOptions,
    "maskprop": MaskPropConfig,
    "pose": PoseSolveConfig,
    "loss": LossWeights,
    "smooth": SmoothConfig,
    "warp": WarpSolveConfig,
    "outpaint": OutpaintConfig,
    "synth": SynthConfig,
}


@dataclass
class PipelineConfig:
    pipeline: PipelineOptions = field(default_factory=PipelineOptions)
    maskprop: MaskPropConfig = field(default_factory=MaskPropConfig)
    pose: PoseSolveConfig = field(default_factory=PoseSolveConfig)
    loss: LossWeights = field(default_factory=LossWeights)
    smooth: SmoothConfig = field(default_factory=SmoothConfig)
    warp: WarpSolveConfig = field(default_factory=WarpSolveConfig)
    outpaint: OutpaintConfig = field(default_factory=OutpaintConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    flow_params: dict = field(default_factory=dict)

    @property
    def provider(self) -> FlowProvider:
        return FlowProvider(self.pipeline.provider, dict(self.flow_params))

    @property
    def workers(self) -> int:
        env = os.environ.get(THREADS_ENV)
        if env:
            try:
                n = int(env)
            except ValueError:
                raise ConfigError(f"{THREADS_ENV} must be an integer, got {env!r}") from None
            if n < 1:
                raise ConfigError(f"{THREADS_ENV} must be >= 1")
            return n
        return self.pipeline.workers

    def replace(self, section: str, **kw) -> PipelineConfig:
        try:
            new = dataclasses.replace(getattr(self, section), **kw)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"[{section}] {exc}") from exc
        return dataclasses.replace(self, **{section: new})

    def to_ini(self) -> str:
        cp = configparser.ConfigParser()
        for name in SECTIONS:
            obj = getattr(self, name)
            cp[name] = {f.name: _fmt(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
        if self.flow_params:
            cp["flow"] = {k: _fmt(v) for k, v in self.flow_params.items()}
        lines = []
        for sec in cp.sections():
            lines.append(f"[{sec}]")
            lines.extend(f"{k} = {v}" for k, v in cp[sec].items())
            lines.append("")
        return "\n".join(lines)

    def write(self, path) -> None:
        Path(path).write_text(self.to_ini())


def _fmt(v) -> str:
    if isinstance(v, (tuple, list)):
        return ", ".join(str(x) for x in v)
    return str(v)


def _coerce(f: dataclasses.Field, text: str):
    if f.type in ("bool", bool):
        low = text.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{f.name}: expected a boolean, got {text!r}")
    v = _parse_value(text)
    if isinstance(v, tuple) and len(v) == 1:
        v = v[0]
    if f.type in ("float", float) and isinstance(v, int):
        v = float(v)
    if f.type in ("int", int) and isinstance(v, float):
        if not v.is_integer():
            raise ConfigError(f"{f.name}: expected an integer, got {text!r}")
        v = int(v)
    if f.type == "str":
        v = text.strip()
    return v


def load_config(path=None, text: str | None = None) -> PipelineConfig:
    """Parse a config file; unknown sections or keys are errors."""
    cfg = PipelineConfig()
    if path is None and text is None:
        return cfg
    cp = configparser.ConfigParser()
    try:
        if text is not None:
            cp.read_string(text)
        else:
            p = Path(path)
            if not p.is_file():
                raise FileNotFoundError(f"config file not found: {p}")
            cp.read_string(p.read_text())
    except configparser.Error as exc:
        raise ConfigError(f"unparsable config: {exc}") from exc
    for sec in cp.sections():
        if sec == "flow":
            cfg.flow_params = {k: _parse_value(v) for k, v in cp[sec].items()}
            continue
        if sec not in SECTIONS:
            raise ConfigError(f"unknown config section [{sec}]")
        fields = {f.name: f for f in dataclasses.fields(SECTIONS[sec])}
        kw = {}
        for key, val in cp[sec].items():
            if key not in fields:
                raise ConfigError(f"unknown key {key!r} in [{sec}]")
            kw[key] = _coerce(fields[key], val)
        cfg = cfg.replace(sec, **kw)
    return cfg
