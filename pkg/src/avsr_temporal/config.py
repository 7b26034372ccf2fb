"""Run configuration: sectioned INI files with strict keys and an exact
round-trip through the emitted effective config."""
from __future__ import annotations

import configparser
import io
import types
import typing
from dataclasses import dataclass, field, fields, replace
from pathlib import Path

from .autodiff import ConfigurationError
from .model import ModelConfig
from .temporal import TemporalConfig
from .training import TrainConfig


@dataclass(frozen=True)
class DataConfig:
    T: int = 32
    V: int = 16
    C: int = 24
    n_train: int = 4000
    n_valid: int = 200
    n_test: int = 200
    noise_pool: int = 64
    babble_m: int = 30

    def __post_init__(self):
        if self.T < 4 or self.V < 2 or self.C <= 2:
            raise ConfigurationError("data needs T >= 4, V >= 2, C > 2")
        for name in ("n_train", "n_valid", "n_test", "noise_pool", "babble_m"):
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be positive")


@dataclass(frozen=True)
class ModelSection:
    D: int = 32
    heads: int = 4
    d_model: int = 128
    backbone_heads: int = 4
    n_enc: int = 2
    n_dec: int = 1
    max_positions: int = 64
    architecture: str = "sa+ca"
    residual_init: float = 0.1
    predictor_hidden: int = 32


@dataclass(frozen=True)
class TrainSection:
    steps: int = 600
    freeze_fraction: float = 0.8
    lr: float = 1e-3
    optimizer: str = "adam"
    batch_size: int = 16
    seed: int = 0
    modality_dropout: float = 0.25
    train_snr_db: float = 0.0
    pretrain_steps: int = 1000
    pretrain_lr: float = 1e-3
    pretrain_clean_fraction: float = 0.25
    log_every: int = 1


@dataclass(frozen=True)
class AblationSection:
    lambda_temp: float = 0.05
    lambda_ref: float = 0.1
    use_order: bool = True
    use_direction: bool = True
    use_speed: bool = True
    use_ref: bool = True
    use_temp: bool = True
    v2v_order: bool = False


@dataclass(frozen=True)
class EvalSection:
    max_len: int = 24
    workers: int = 1
    noise_key: int = 0


@dataclass(frozen=True)
class PathsSection:
    out_dir: str = "runs/default"
    label: str = ""


@dataclass(frozen=True)
class RunConfig:
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelSection = field(default_factory=ModelSection)
    temporal: TemporalConfig = field(default_factory=TemporalConfig)
    train: TrainSection = field(default_factory=TrainSection)
    ablation: AblationSection = field(default_factory=AblationSection)
    eval: EvalSection = field(default_factory=EvalSection)
    paths: PathsSection = field(default_factory=PathsSection)

    def __post_init__(self):
        # constructing these validates the cross-section combinations
        self.model_config()
        self.train_config()

    def model_config(self) -> ModelConfig:
        m = self.model
        return ModelConfig(C=self.data.C, D=m.D, V=self.data.V, heads=m.heads,
                           d_model=m.d_model, backbone_heads=m.backbone_heads, n_enc=m.n_enc,
                           n_dec=m.n_dec, max_positions=max(m.max_positions, self.data.T + 1),
                           architecture=m.architecture, residual_init=m.residual_init)

    def train_config(self) -> TrainConfig:
        t, a = self.train, self.ablation
        return TrainConfig(lambda_temp=a.lambda_temp, lambda_ref=a.lambda_ref, steps=t.steps,
                           freeze_fraction=t.freeze_fraction, lr=t.lr, optimizer=t.optimizer,
                           batch_size=t.batch_size, seed=t.seed, use_order=a.use_order,
                           use_direction=a.use_direction, use_speed=a.use_speed,
                           use_ref=a.use_ref, use_temp=a.use_temp, v2v_order=a.v2v_order,
                           modality_dropout=t.modality_dropout, train_snr_db=t.train_snr_db,
                           pretrain_steps=t.pretrain_steps, pretrain_lr=t.pretrain_lr,
                           pretrain_clean_fraction=t.pretrain_clean_fraction)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, train=replace(self.train, seed=seed))

    @property
    def label(self) -> str:
        return self.paths.label or Path(self.paths.out_dir).name


SECTIONS = tuple(f.name for f in fields(RunConfig))


def _section_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in fields(cls)}


def _parse_value(raw: str, kind, where: str):
    text = raw.strip()
    if typing.get_origin(kind) in (typing.Union, types.UnionType):
        if text.lower() == "none":
            return None
        kind = next(a for a in typing.get_args(kind) if a is not type(None))
    try:
        if kind is bool:
            low = text.lower()
            if low in ("true", "yes", "on", "1"):
                return True
            if low in ("false", "no", "off", "0"):
                return False
            raise ValueError(text)
        if kind is int:
            return int(text)
        if kind is float:
            return float(text)
        return text
    except ValueError:
        raise ConfigurationError(f"{where}: cannot parse {raw!r} as {kind.__name__}") from None


def _format_value(v) -> str:
    if v is None:
        return "none"
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    cp = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as exc:
        raise ConfigurationError(f"{source}: {exc}") from None
    unknown = [s for s in cp.sections() if s not in SECTIONS]
    if unknown:
        raise ConfigurationError(f"{source}: unknown section(s) {unknown}")
    defaults = RunConfig()
    sections = {}
    for name in SECTIONS:
        current = getattr(defaults, name)
        if not cp.has_section(name):
            sections[name] = current
            continue
        types = _section_types(type(current))
        values = {}
        for key, raw in cp.items(name):
            if key not in types:
                raise ConfigurationError(f"{source}: unknown key [{name}] {key}")
            values[key] = _parse_value(raw, types[key], f"{source} [{name}] {key}")
        sections[name] = replace(current, **values)
    return RunConfig(**sections)


def load_config(path: Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    return parse_config(path.read_text(encoding="utf-8"), str(path))


def dump_config(cfg: RunConfig) -> str:
    cp = configparser.ConfigParser(interpolation=None)
    cp.optionxform = str
    for name in SECTIONS:
        section = getattr(cfg, name)
        cp[name] = {f.name: _format_value(getattr(section, f.name)) for f in fields(section)}
    buf = io.StringIO()
    cp.write(buf)
    return buf.getvalue()
