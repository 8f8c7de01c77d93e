"""Experiment configuration: nested YAML sections mapped onto the library's
dataclasses. Every field has a default and unknown keys are rejected.
"""
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import yaml

from .errors import ConfigError
from .ldc import LdcParams
from .model import ModelConfig
from .training import LossWeights, TrainConfig

# ablation switches live in their own section, not under model
MODEL_TOGGLES = ("vit_block", "cross_attention")


@dataclass
class DataSection:
    path: str = "data"
    labeled_fraction: float = 1.0


@dataclass
class RunSection:
    seed: int = 0
    out: str = "runs/default"
    epochs: int = 200


@dataclass
class AblationSection:
    vit_block: bool = True
    cross_attention: bool = True
    ldc_loss: bool = True


@dataclass
class ExperimentConfig:
    model: dict = field(default_factory=dict)
    weights: LossWeights = field(default_factory=LossWeights)
    train: TrainConfig = field(default_factory=TrainConfig)
    ldc: LdcParams = field(default_factory=LdcParams)
    data: DataSection = field(default_factory=DataSection)
    run: RunSection = field(default_factory=RunSection)
    ablation: AblationSection = field(default_factory=AblationSection)

    def __post_init__(self):
        # model is stored as the non-toggle ModelConfig fields, completed with defaults
        base = {k: v for k, v in ModelConfig().to_dict().items() if k not in MODEL_TOGGLES}
        unknown = set(self.model) - set(base)
        if unknown:
            raise ConfigError(f"unknown keys in section 'model': {sorted(unknown)}")
        base.update(self.model)
        self.model = base
        # normalized through ModelConfig so tuples and lists compare equal
        self.model = {k: v for k, v in self.model_config().to_dict().items() if k not in MODEL_TOGGLES}
        if not 0 < self.data.labeled_fraction <= 1:
            raise ConfigError(f"labeled_fraction must lie in (0, 1], got {self.data.labeled_fraction}")
        if self.run.epochs < 1:
            raise ConfigError("epochs must be positive")

    def model_config(self):
        toggles = {k: getattr(self.ablation, k) for k in MODEL_TOGGLES}
        try:
            return ModelConfig(**self.model, **toggles)
        except TypeError as e:
            raise ConfigError(f"invalid model section: {e}") from e

    def loss_weights(self):
        """Loss weights with the LDC toggle applied (off forces gamma to 0)."""
        if self.ablation.ldc_loss:
            return self.weights
        return LossWeights(**{**asdict(self.weights), "gamma_con": 0.0})

    def to_dict(self):
        out = {}
        for f in fields(self):
            v = getattr(self, f.name)
            out[f.name] = dict(v) if isinstance(v, dict) else asdict(v)
        return out

    @classmethod
    def from_dict(cls, raw):
        raw = {} if raw is None else raw
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping of sections")
        known = {f.name: f for f in fields(cls)}
        unknown = set(raw) - set(known)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        kwargs = {}
        for name, section in raw.items():
            if section is None:
                continue
            if not isinstance(section, dict):
                raise ConfigError(f"section '{name}' must be a mapping")
            if name == "model":
                kwargs[name] = section
            else:
                kwargs[name] = _build(known[name].default_factory, name, section)
        try:
            return cls(**kwargs)
        except TypeError as e:
            raise ConfigError(str(e)) from e

    def dump(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(yaml.safe_dump(self.to_dict(), sort_keys=False))
        return path

    @classmethod
    def load(cls, path):
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file not found: {path}")
        try:
            raw = yaml.safe_load(path.read_text())
        except yaml.YAMLError as e:
            raise ConfigError(f"cannot parse {path}: {e}") from e
        return cls.from_dict(raw)


def _coerce(value, default, where):
    # YAML reads "1e-3" as a string; accept it for float fields
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{where} must be true or false, got {value!r}")
        return value
    if isinstance(default, float):
        try:
            return float(value)
        except (TypeError, ValueError):
            raise ConfigError(f"{where} must be a number, got {value!r}") from None
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{where} must be an integer, got {value!r}")
        return value
    if isinstance(default, str) and not isinstance(value, str):
        raise ConfigError(f"{where} must be a string, got {value!r}")
    return value


def _build(factory, name, section):
    default = factory()
    names = {f.name for f in fields(default)}
    unknown = set(section) - names
    if unknown:
        raise ConfigError(f"unknown keys in section '{name}': {sorted(unknown)}")
    values = {k: _coerce(v, getattr(default, k), f"{name}.{k}") for k, v in section.items()}
    return factory(**{**asdict(default), **values})
