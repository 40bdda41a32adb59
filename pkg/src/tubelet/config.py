"""Run configuration: one JSON document with data/model/train/loss sections.

Values resolve as CLI flag > config file > built-in default. Unknown keys
anywhere are rejected. The model variant decides the temporal span and
whether SAR channels are used.
"""
import json
from dataclasses import asdict, dataclass, field, fields, replace

from . import model as mdl
from .errors import ConfigError
from .objectives import LossConfig
from .trainer import TrainConfig


@dataclass(frozen=True)
class DataSection:
    seed: int = 42
    n_samples: int = 16
    H: int = 60
    W: int = 60
    T: int = 6
    clouds: int = 20
    cloud_size: float = 0.3
    n_classes: int = 6
    include_sar: bool = True


@dataclass(frozen=True)
class ModelSection:
    variant: str = "smts-vivit"
    t: int = None
    k_s: int = 5
    d_e: int = 64
    depth: int = 6
    heads: int = 8
    ff_dim: int = 256
    use_mask_channel: bool = True


@dataclass(frozen=True)
class TrainSection:
    epochs: int = 200
    batch_size: int = 8
    lr: float = 1e-3
    gamma: float = 0.95
    decay_every: int = 10
    seed: int = 42
    val_every: int = 10
    checkpoint_every: int = 0


@dataclass(frozen=True)
class LossSection:
    scales: tuple = (1.0, 0.5, 0.25)
    w_mse: float = 0.5
    w_sam: float = 0.5
    sam_epsilon: float = 1e-8


SECTIONS = {"data": DataSection, "model": ModelSection, "train": TrainSection, "loss": LossSection}


@dataclass(frozen=True)
class RunConfig:
    data: DataSection = field(default_factory=DataSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainSection = field(default_factory=TrainSection)
    loss: LossSection = field(default_factory=LossSection)
    out_dir: str = "runs"

    def model_config(self, T=None, H=None, W=None):
        m = self.model
        return mdl.ModelConfig.for_variant(
            m.variant, T=T or self.data.T, H=H or self.data.H, W=W or self.data.W, t=m.t,
            k_s=m.k_s, d_e=m.d_e, depth=m.depth, heads=m.heads, ff_dim=m.ff_dim,
            use_mask_channel=m.use_mask_channel,
        )

    def train_config(self):
        return TrainConfig(**asdict(self.train))

    def loss_config(self):
        return LossConfig(tuple(self.loss.scales), self.loss.w_mse, self.loss.w_sam, self.loss.sam_epsilon)

    def to_dict(self):
        d = asdict(self)
        d["loss"]["scales"] = list(d["loss"]["scales"])
        return d

    def validate(self):
        if self.model.variant not in mdl.VARIANTS:
            raise ConfigError(f"model.variant must be one of {mdl.VARIANTS}, got {self.model.variant!r}")
        d = self.data
        if d.n_samples < 5:
            raise ConfigError(f"data.n_samples must be >= 5, got {d.n_samples}")
        if d.clouds < 0 or not 0 < d.cloud_size <= 1:
            raise ConfigError("data.clouds must be >= 0 and data.cloud_size in (0, 1]")
        self.model_config()
        self.train_config()
        self.loss_config()
        return self


def _coerce(section, key, value, default_type):
    if key == "scales":
        if not isinstance(value, (list, tuple)) or not value:
            raise ConfigError(f"{section}.scales must be a non-empty list")
        return tuple(float(v) for v in value)
    if value is None:
        return None
    if default_type is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{section}.{key} must be true or false, got {value!r}")
        return value
    if default_type is int or key == "t":
        if isinstance(value, bool) or not isinstance(value, (int, float)) or not float(value).is_integer():
            raise ConfigError(f"{section}.{key} must be an integer, got {value!r}")
        return int(value)
    if default_type is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{section}.{key} must be a number, got {value!r}")
        return float(value)
    if not isinstance(value, str):
        raise ConfigError(f"{section}.{key} must be a string, got {value!r}")
    return value


def _section(cls, name, values):
    if not isinstance(values, dict):
        raise ConfigError(f"section {name!r} must be an object")
    known = {f.name: f for f in fields(cls)}
    unknown = sorted(set(values) - set(known))
    if unknown:
        raise ConfigError(f"unknown key(s) in {name}: {', '.join(unknown)}")
    defaults = cls()
    kwargs = {}
    for key, value in values.items():
        kwargs[key] = _coerce(name, key, value, type(getattr(defaults, key)))
    return replace(defaults, **kwargs)


def from_dict(doc):
    if not isinstance(doc, dict):
        raise ConfigError("config must be a JSON object")
    unknown = sorted(set(doc) - set(SECTIONS) - {"out_dir"})
    if unknown:
        raise ConfigError(f"unknown top-level key(s): {', '.join(unknown)}")
    kwargs = {name: _section(cls, name, doc.get(name, {})) for name, cls in SECTIONS.items()}
    out_dir = doc.get("out_dir", "runs")
    if not isinstance(out_dir, str):
        raise ConfigError("out_dir must be a string")
    return RunConfig(out_dir=out_dir, **kwargs).validate()


def load(path=None):
    if path is None:
        return RunConfig().validate()
    try:
        with open(path, encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {path} is not valid JSON: {exc.msg} at line {exc.lineno}") from exc
    return from_dict(doc)


def with_overrides(config, **overrides):
    """Apply ``section.key`` style overrides whose value is not None."""
    doc = config.to_dict()
    for dotted, value in overrides.items():
        if value is None:
            continue
        if dotted == "out_dir":
            doc["out_dir"] = value
            continue
        section, key = dotted.split(".", 1)
        doc[section][key] = value
    return from_dict(doc)
