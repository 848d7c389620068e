"""Experiment configuration: nested dataclasses, JSON files, dotted overrides.

Precedence is built-in defaults < config file < command-line overrides.
Unknown keys are rejected so that typos fail loudly.
"""
import copy
import dataclasses
import json
from dataclasses import dataclass, field

from .attacks import AttackConfig
from .classifier import PAPER_RATES, TrainConfig
from .exceptions import ConfigError, DDDMError
from .pipeline import DDDMParams

SWEEP_EPSILONS = (0.0, 0.05, 0.1, 0.15, 0.2, 0.25, 0.3)


@dataclass(frozen=True)
class DataSpec:
    source: str = "mnist"  # "mnist" or "blobs"
    data_dir: str = None
    split: tuple = (0.8, 0.1, 0.1)
    eval_size: int = 1000
    blobs_classes: int = 10
    blobs_dim: int = 20
    blobs_per_class: int = 200
    blobs_spread: float = 0.1

    def __post_init__(self):
        if self.source not in ("mnist", "blobs"):
            raise ConfigError(f"unknown data source {self.source!r}")


@dataclass(frozen=True)
class ModelSpec:
    hidden_layer_sizes: tuple = (256, 128)
    activation: str = "relu"
    a: float = 0.0
    b: float = 0.8


@dataclass(frozen=True)
class GridSpec:
    rates_a: tuple = PAPER_RATES
    rates_b: tuple = PAPER_RATES
    attacks: tuple = (AttackConfig("fgsm", 0.3), AttackConfig("pgd", 0.3, steps=40))
    selection_margin: float = 0.02
    attack_mode: str = "per_cell"        # or "shared"
    attack_gradient: str = "stochastic"  # or "deterministic"

    def __post_init__(self):
        if self.attack_mode not in ("per_cell", "shared"):
            raise ConfigError(f"unknown attack_mode {self.attack_mode!r}")
        if self.attack_gradient not in ("stochastic", "deterministic"):
            raise ConfigError(f"unknown attack_gradient {self.attack_gradient!r}")


@dataclass(frozen=True)
class SweepSpec:
    enabled: bool = True
    attack: str = "pgd"
    epsilons: tuple = SWEEP_EPSILONS
    cell: tuple = None  # (a, b); None uses the grid-selected cell


@dataclass(frozen=True)
class DdmSpec:
    mu: float = 0.0
    sigma: float = 1.0
    tau: float = 1.0
    A: float = 1.0
    dt: float = 1e-3
    t_max: float = None
    paths: int = 10000


@dataclass(frozen=True)
class ExperimentConfig:
    seed: int = 0
    threads: int = 1
    data: DataSpec = field(default_factory=DataSpec)
    model: ModelSpec = field(default_factory=ModelSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(learning_rate=0.02, epochs=20))
    dddm: DDDMParams = field(default_factory=DDDMParams)
    table_passes: int = 10
    table_inputs: int = None  # None: every training input
    attack: AttackConfig = field(default_factory=AttackConfig)
    grid: GridSpec = field(default_factory=GridSpec)
    sweep: SweepSpec = field(default_factory=SweepSpec)
    ddm: DdmSpec = field(default_factory=DdmSpec)

    def to_dict(self):
        return _to_plain(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, doc):
        return _build(cls, doc, "")

    def replace(self, **changes):
        return dataclasses.replace(self, **changes)


def _to_plain(obj):
    if isinstance(obj, dict):
        return {k: _to_plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_to_plain(v) for v in obj]
    return obj


def _build(cls, doc, prefix):
    if not isinstance(doc, dict):
        raise ConfigError(f"{prefix or 'config'} must be a JSON object")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(doc) - set(fields)
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(prefix + k for k in sorted(unknown))}")
    default = cls()
    kwargs = {}
    for name, value in doc.items():
        current = getattr(default, name)
        key = prefix + name
        if dataclasses.is_dataclass(current):
            merged = {**_to_plain(dataclasses.asdict(current)), **value} if isinstance(value, dict) else value
            kwargs[name] = _build(type(current), merged, key + ".")
        elif name == "attacks":
            kwargs[name] = tuple(_build(AttackConfig, a, key + ".") for a in value)
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except DDDMError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc
    except TypeError as exc:
        raise ConfigError(f"{prefix or 'config'}: {exc}") from exc


def deep_merge(base, override):
    out = copy.deepcopy(base)
    for key, value in override.items():
        if isinstance(value, dict) and isinstance(out.get(key), dict):
            out[key] = deep_merge(out[key], value)
        else:
            out[key] = value
    return out


def parse_override(text):
    """``"dddm.threshold=0.999"`` -> ``{"dddm": {"threshold": 0.999}}``.

    Values are parsed as JSON when possible and kept as strings otherwise.
    """
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    doc = value
    for part in reversed(key.strip().split(".")):
        if not part:
            raise ConfigError(f"empty key segment in override {text!r}")
        doc = {part: doc}
    return doc


def load_config(path=None, overrides=()):
    """Resolve defaults, an optional JSON file and override dicts/strings."""
    doc = ExperimentConfig().to_dict()
    if path:
        try:
            with open(path) as fh:
                file_doc = json.load(fh)
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from exc
        doc = deep_merge(doc, file_doc)
    for ov in overrides:
        doc = deep_merge(doc, parse_override(ov) if isinstance(ov, str) else ov)
    return ExperimentConfig.from_dict(doc)
