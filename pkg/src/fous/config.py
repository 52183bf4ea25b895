"""Run configuration: nested dataclasses loaded from a strict YAML file."""

import dataclasses
from dataclasses import dataclass, field
from pathlib import Path

import yaml

CONFIG_VERSION = 1


class ConfigError(ValueError):
    pass


@dataclass
class DataConfig:
    height: int = 96
    width: int = 160
    source_identities: int = 30
    target_identities: int = 30
    source_scenes: int = 200
    target_scenes: int = 200
    persons_per_scene: int = 3
    person_height: int = 36
    person_width: int = 16
    domain_shift: float = 1.0
    jitter_per_box: int = 2
    background_proposals: int = 2
    jitter: float = 0.08


@dataclass
class ModelConfig:
    channels: int = 32
    roi_height: int = 6
    roi_width: int = 4
    embed_dim: int = 64
    attention_branches: int = 1
    domain_hidden: int = 64


@dataclass
class OptimConfig:
    lr: float = 0.003
    momentum: float = 0.9
    weight_decay: float = 5e-4
    batch_size: int = 4
    grad_clip: float = 5.0


@dataclass
class AdaptConfig:
    pretrain_epochs: int = 3
    adapt_epochs: int = 5
    n_random: int = 40
    tau: float = 0.05
    memory_momentum: float = 0.2
    neighbor_threshold: float = 0.7
    consistency_weight: float = 0.1
    relabel_every: int = 1
    score_threshold: float = 0.5
    reversal_strength: float = 1.0
    freeze_norm: bool = True


@dataclass
class RunConfig:
    version: int = CONFIG_VERSION
    seed: int = 0
    output_dir: str = "runs"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    adapt: AdaptConfig = field(default_factory=AdaptConfig)

    def validate(self):
        d, m, o, a = self.data, self.model, self.optim, self.adapt
        checks = [
            ("version", self.version == CONFIG_VERSION),
            ("data.height", d.height >= 16),
            ("data.width", d.width >= 16),
            ("data.source_identities", d.source_identities >= 1),
            ("data.target_identities", d.target_identities >= 1),
            ("data.source_scenes", d.source_scenes >= 1),
            ("data.target_scenes", d.target_scenes >= 0),
            ("data.persons_per_scene", d.persons_per_scene >= 1),
            ("data.person_height", 8 <= d.person_height <= d.height),
            ("data.person_width", 8 <= d.person_width <= d.width),
            ("data.domain_shift", 0.0 <= d.domain_shift <= 2.0),
            ("data.jitter_per_box", d.jitter_per_box >= 0),
            ("data.background_proposals", d.background_proposals >= 0),
            ("data.jitter", 0.0 <= d.jitter < 0.5),
            ("model.channels", m.channels >= 1),
            ("model.roi_height", m.roi_height >= 1),
            ("model.roi_width", m.roi_width >= 1),
            ("model.embed_dim", m.embed_dim >= 1),
            ("model.attention_branches", m.attention_branches >= 1 and m.channels % m.attention_branches == 0),
            ("model.domain_hidden", m.domain_hidden >= 1),
            ("optim.lr", o.lr > 0),
            ("optim.momentum", 0.0 <= o.momentum < 1.0),
            ("optim.weight_decay", o.weight_decay >= 0),
            ("optim.grad_clip", o.grad_clip >= 0),
            ("optim.batch_size", o.batch_size >= 2 and o.batch_size % 2 == 0),
            ("adapt.pretrain_epochs", a.pretrain_epochs >= 0),
            ("adapt.adapt_epochs", a.adapt_epochs >= 0),
            ("adapt.n_random", a.n_random >= 1),
            ("adapt.tau", a.tau > 0),
            ("adapt.memory_momentum", 0.0 <= a.memory_momentum < 1.0),
            ("adapt.neighbor_threshold", 0.0 <= a.neighbor_threshold <= 2.0),
            ("adapt.consistency_weight", a.consistency_weight >= 0),
            ("adapt.relabel_every", a.relabel_every >= 1),
            ("adapt.score_threshold", 0.0 < a.score_threshold < 1.0),
            ("adapt.reversal_strength", a.reversal_strength >= 0),
        ]
        for key, ok in checks:
            if not ok:
                raise ConfigError(f"invalid value for {key}")
        return self

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, raw):
        return _build(cls, raw or {}, "").validate()


def _build(cls, raw, prefix):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {prefix.rstrip('.') or 'root'} must be a mapping")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    kwargs = {}
    for key, value in raw.items():
        if key not in fields:
            raise ConfigError(f"unknown key {prefix}{key}")
        ftype = fields[key].type
        if dataclasses.is_dataclass(ftype):
            kwargs[key] = _build(ftype, value, f"{prefix}{key}.")
        else:
            kwargs[key] = _coerce(value, fields[key].default, f"{prefix}{key}")
    return cls(**kwargs)


def _coerce(value, default, key):
    kind = type(default)
    if kind is float and isinstance(value, int) and not isinstance(value, bool):
        return float(value)
    if kind is int and isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigError(f"invalid type for {key}: expected {kind.__name__}")
    return value


def load_config(path=None):
    if path is None:
        return RunConfig().validate()
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as err:
        raise ConfigError(f"malformed config: {err}") from None
    return RunConfig.from_dict(raw)


def save_config(config, path):
    Path(path).write_text(yaml.safe_dump(config.to_dict(), sort_keys=False))
