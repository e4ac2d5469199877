"""Experiment configuration: dataclasses with documented defaults, loaded
from TOML. Unknown keys are rejected so a typo cannot silently fall back
to a default."""

import dataclasses
from dataclasses import dataclass, field

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from .errors import ConfigError
from .losses import MODALITIES
from .netsim import Band


@dataclass
class DataConfig:
    n_classes: int = 8
    class_table: str = "desk8"
    modality_dims: dict = field(default_factory=lambda: {"depth": 64, "radar": 32, "audio": 16})
    noise_sigma: float = 0.3
    domain_mixing: float = 0.5  # 0 = diagonal shift only, 1 = full random rotation
    mean_run_samples: int = 6
    presence_rate: float = 0.93
    coarse_fraction: float = 0.75
    train_duration_s: float = 2000.0
    test_duration_s: float = 800.0
    dirichlet_alpha: float = 0.5
    label_fraction: float = 0.02
    apply_selection: bool = False  # run the deployment reduction filters on train data
    selection_rate: float = 0.01

    def __post_init__(self):
        if self.n_classes < 2:
            raise ConfigError("data.n_classes must be >= 2")
        unknown = set(self.modality_dims) - set(MODALITIES)
        if unknown:
            raise ConfigError(f"data.modality_dims has unknown modalities {sorted(unknown)}")
        if not self.modality_dims:
            raise ConfigError("data.modality_dims must not be empty")
        if not 0.0 <= self.label_fraction <= 1.0:
            raise ConfigError("data.label_fraction must be in [0, 1]")


@dataclass
class NodesConfig:
    count: int = 20
    groups: list = field(default_factory=lambda: ["NC", "MCI", "AD"])  # cycled over nodes
    richness: dict = field(default_factory=lambda: {"NC": 8, "MCI": 6, "AD": 4})

    def __post_init__(self):
        if self.count < 1:
            raise ConfigError("nodes.count must be >= 1")
        for g in self.groups:
            if g not in ("NC", "MCI", "AD"):
                raise ConfigError(f"nodes.groups has unknown group {g!r}")


@dataclass
class ModelConfig:
    embed_dim: int = 16
    hidden_dim: int = 32

    def __post_init__(self):
        if self.embed_dim < 1 or self.hidden_dim < 1:
            raise ConfigError("model dims must be positive")


@dataclass
class PretrainConfig:
    subjects: int = 6
    duration_s: float = 1200.0
    epochs: int = 30
    learning_rate: float = 0.01
    batch_size: int = 16
    baseline_epochs: int = 100  # epochs for the from-scratch supervised baseline


@dataclass
class UnsupConfig:
    rounds: int = 20
    local_epochs: int = 1
    learning_rate: float = 0.01
    batch_size: int = 16
    temperature: float = 0.1


@dataclass
class WeakConfig:
    rounds: int = 20
    local_epochs: int = 1
    learning_rate: float = 0.001
    batch_size: int = 16
    kd_temperature: float = 2.0
    kd_weight: float = 0.5
    permutation_budget: int = 32
    balanced: bool = True


@dataclass
class NetworkConfig:
    aggregation_s: float = 1.0
    compute_s_per_sample: float = 0.01
    failures: bool = True
    trace_resolution_s: float = 60.0
    noise_amplitude: float = 0.05
    day_base: float = 0.75
    night_base: float = 0.9
    start_time_s: float = 8 * 3600.0  # simulated clock at round 0
    bands: list = field(default_factory=lambda: [
        {"name": "B3", "uplink_mbps": 21.0, "downlink_mbps": 18.0},
        {"name": "B40", "uplink_mbps": 6.0, "downlink_mbps": 20.0},
    ])

    def band_objects(self):
        return tuple(Band(**b) for b in self.bands)


@dataclass
class PipelineConfig:
    collect_s: float = 0.05
    infer_s: float = 0.1058
    preprocess_s: dict = field(default_factory=lambda: {"depth": 0.03, "radar": 0.02, "audio": 0.01})


@dataclass
class AnalysisConfig:
    alpha: float = 0.05
    k_folds: int = 3

    def __post_init__(self):
        if not 0.0 < self.alpha < 1.0:
            raise ConfigError("analysis.alpha must be in (0, 1)")
        if self.k_folds < 2:
            raise ConfigError("analysis.k_folds must be >= 2")


@dataclass
class ExperimentConfig:
    seed: int = 0
    workers: int = 1
    out_dir: str = ""
    data: DataConfig = field(default_factory=DataConfig)
    nodes: NodesConfig = field(default_factory=NodesConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    unsup: UnsupConfig = field(default_factory=UnsupConfig)
    weak: WeakConfig = field(default_factory=WeakConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    pipeline: PipelineConfig = field(default_factory=PipelineConfig)
    analysis: AnalysisConfig = field(default_factory=AnalysisConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")


_SECTION_TYPES = {
    "data": DataConfig,
    "nodes": NodesConfig,
    "model": ModelConfig,
    "pretrain": PretrainConfig,
    "unsup": UnsupConfig,
    "weak": WeakConfig,
    "network": NetworkConfig,
    "pipeline": PipelineConfig,
    "analysis": AnalysisConfig,
}


def _build_section(cls, data, path):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(fields)
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in [{path}]")
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid [{path}] section: {exc}") from None


def config_from_dict(raw) -> ExperimentConfig:
    """Validate a parsed config mapping. Unknown keys anywhere are errors."""
    top = {}
    for key, value in raw.items():
        if key in _SECTION_TYPES:
            if not isinstance(value, dict):
                raise ConfigError(f"[{key}] must be a section")
            top[key] = _build_section(_SECTION_TYPES[key], value, key)
        elif key in ("seed", "workers", "out_dir"):
            top[key] = value
        else:
            raise ConfigError(f"unknown top-level key {key!r}")
    return _build_section(ExperimentConfig, top, "experiment")


def load_config(path) -> ExperimentConfig:
    """Read a TOML experiment config. Parse errors and unknown keys raise
    ConfigError with the offending location."""
    try:
        with open(path, "rb") as fh:
            raw = tomllib.load(fh)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from None
    return config_from_dict(raw)


def reference_config(seed=0) -> ExperimentConfig:
    """The default desk-scale benchmark: 20 nodes, 8 classes, 2% labels."""
    return ExperimentConfig(seed=seed)


def skewed_config(seed=0) -> ExperimentConfig:
    """The imbalance benchmark: strongly skewed per-node class mass."""
    cfg = ExperimentConfig(seed=seed)
    cfg.data.dirichlet_alpha = 0.1
    return cfg
