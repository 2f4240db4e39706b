"""Define the configurable parameters for the beam alignment pipeline."""

from __future__ import annotations

import json
import logging
import math
import os
import types
from dataclasses import dataclass, field, fields, is_dataclass, replace
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence, Union, get_args, get_origin, get_type_hints

from langchain_core.runnables import RunnableConfig

from beam_align.errors import ConfigError
from beam_align.utils import stable_hash

logger = logging.getLogger(__name__)

WORKSPACE_ENV = "BEAM_ALIGN_WORKSPACE"
SEED_ENV = "BEAM_ALIGN_SEED"


class GainModel(str, Enum):
    """Per-path complex gain distribution."""

    LOS_DOMINANT = "los_dominant"
    NLOS_BALANCED = "nlos_balanced"


class AngleSampling(str, Enum):
    """How departure angles are drawn from the angle range."""

    UNIFORM_ANGLE = "uniform_angle"
    UNIFORM_SINE = "uniform_sine"


class NoiseMode(str, Enum):
    """Measurement noise mode for the RSSI sweep."""

    NONE = "none"
    FIXED = "fixed"
    RANGED = "ranged"


class FeatureScale(str, Enum):
    """Model-side transform of the linear RSSI features."""

    DB = "db"
    LINEAR = "linear"


class LayerKind(str, Enum):
    """Hidden layer type."""

    CONV = "conv"
    DENSE = "dense"


class Activation(str, Enum):
    """Nonlinearity applied after a hidden layer."""

    RELU = "relu"
    NONE = "none"


class ConvDimensionality(str, Enum):
    """Convolution layout of the M_w-long feature vector."""

    ONE_D = "1d"
    TWO_D = "2d"


class Optimizer(str, Enum):
    """Parameter update rule."""

    ADAM = "adam"
    GD = "gd"


class DknnBackend(str, Enum):
    """Nearest-neighbor search backend."""

    EXACT = "exact"
    LSH = "lsh"


class AttackSpace(str, Enum):
    """Feature space the FGSM perturbation is applied in."""

    LINEAR = "linear"
    MODEL = "model"


@dataclass(kw_only=True)
class ScenarioConfig:
    """Statistical geometric channel scenario."""

    n_bs: int = field(default=32, metadata={"description": "Number of BS antennas (ULA)."})
    n_paths: int = field(default=5, metadata={"description": "Number of multipaths L per UE."})
    d_over_lambda: float = field(
        default=0.5, metadata={"description": "Antenna spacing normalized by the wavelength."}
    )
    n_ue: int = field(default=5000, metadata={"description": "Number of UE positions to synthesize."})
    angle_range: tuple[float, float] = field(
        default=(-math.pi / 3, math.pi / 3),
        metadata={"description": "Departure-angle interval in radians, inside (-pi/2, pi/2)."},
    )
    angle_sampling: AngleSampling = field(
        default=AngleSampling.UNIFORM_ANGLE,
        metadata={"description": "Draw angles uniformly in angle or uniformly in sin(angle)."},
    )
    gain_model: GainModel = field(
        default=GainModel.LOS_DOMINANT,
        metadata={"description": "LOS-dominant (first path fixed) or NLOS-balanced (all Rayleigh)."},
    )
    los_amplitude: float = field(
        default=1.0, metadata={"description": "Magnitude of the first path in the LOS-dominant model."}
    )
    nlos_mean_amplitude: float = field(
        default=0.3, metadata={"description": "Mean Rayleigh amplitude of scattered paths."}
    )
    seed: Optional[int] = field(
        default=None, metadata={"description": "Scenario seed; defaults to the run seed."}
    )

    def __post_init__(self) -> None:
        if self.n_bs < 1:
            raise ConfigError(f"scenario.n_bs must be >= 1, got {self.n_bs}")
        if self.n_paths < 1:
            raise ConfigError(f"scenario.n_paths must be >= 1, got {self.n_paths}")
        if not self.d_over_lambda > 0:
            raise ConfigError(f"scenario.d_over_lambda must be > 0, got {self.d_over_lambda}")
        if self.n_ue < 0:
            raise ConfigError(f"scenario.n_ue must be >= 0, got {self.n_ue}")
        low, high = self.angle_range
        if not (-math.pi / 2 < low <= high < math.pi / 2):
            raise ConfigError(f"scenario.angle_range must lie inside (-pi/2, pi/2), got {self.angle_range}")
        if self.los_amplitude <= 0 or self.nlos_mean_amplitude <= 0:
            raise ConfigError("scenario path amplitudes must be positive")


@dataclass(kw_only=True)
class SplitFractions:
    """Share of samples per split; calibration is carved from the test share."""

    train: float = 0.70
    validation: float = 0.10
    test: float = 0.15
    calibration: float = 0.05

    def __post_init__(self) -> None:
        parts = (self.train, self.validation, self.test, self.calibration)
        if any(p < 0 for p in parts):
            raise ConfigError(f"split fractions must be non-negative, got {parts}")
        if not math.isclose(sum(parts), 1.0, abs_tol=1e-9):
            raise ConfigError(f"split fractions must sum to 1, got {sum(parts)}")
        if self.calibration <= 0:
            raise ConfigError("the calibration share must be nonzero")
        if self.train <= 0:
            raise ConfigError("the train share must be nonzero")


@dataclass(kw_only=True)
class SweepConfig:
    """RSSI sweep, labeling and dataset materialization settings."""

    p_bs_dbm: float = field(default=30.0, metadata={"description": "BS transmit power in dBm."})
    path_loss_db: float = field(
        default=75.0,
        metadata={"description": "Large-scale attenuation applied on top of the normalized channels."},
    )
    oversampling: int = field(default=4, metadata={"description": "O-DFT oversampling factor."})
    m_w: Optional[int] = field(
        default=None, metadata={"description": "Number of sensing beams; defaults to n_bs."}
    )
    fractions: SplitFractions = field(default_factory=SplitFractions)
    feature_scale: FeatureScale = field(
        default=FeatureScale.DB,
        metadata={"description": "Model-side transform of the linear RSSI features."},
    )

    def __post_init__(self) -> None:
        if self.oversampling < 1:
            raise ConfigError(f"sweep.oversampling must be >= 1, got {self.oversampling}")
        if self.m_w is not None and self.m_w < 1:
            raise ConfigError(f"sweep.m_w must be >= 1, got {self.m_w}")

    @property
    def p_rx_dbm(self) -> float:
        """Transmit power after the reference path loss."""
        return self.p_bs_dbm - self.path_loss_db


@dataclass(kw_only=True)
class NoiseModel:
    """Measurement noise applied to the reported RSSI."""

    mode: NoiseMode = field(default=NoiseMode.RANGED)
    noise_power_dbm: float = field(default=-90.0, metadata={"description": "Noise power for fixed mode."})
    noise_power_range_dbm: tuple[float, float] = field(
        default=(-90.0, -28.0), metadata={"description": "(low, high) noise power for ranged mode."}
    )
    per_sample_draw: bool = field(
        default=True,
        metadata={"description": "Ranged mode: draw a level per sample instead of once per dataset."},
    )

    def __post_init__(self) -> None:
        low, high = self.noise_power_range_dbm
        if low > high:
            raise ConfigError(f"noise range low must be <= high, got {self.noise_power_range_dbm}")


@dataclass(kw_only=True)
class LayerSpec:
    """One hidden layer of the classifier."""

    kind: LayerKind = LayerKind.CONV
    filters: int = field(default=32, metadata={"description": "Output channels (conv) or units (dense)."})
    kernel: int = 3
    stride: int = 1
    padding: int = 1
    activation: Activation = Activation.RELU

    def __post_init__(self) -> None:
        if self.filters < 1 or self.kernel < 1 or self.stride < 1 or self.padding < 0:
            raise ConfigError(f"invalid layer spec {self}")


def _default_layers() -> list[LayerSpec]:
    return [
        LayerSpec(kind=LayerKind.CONV, filters=32, kernel=3, stride=1, padding=1),
        LayerSpec(kind=LayerKind.CONV, filters=64, kernel=3, stride=1, padding=1),
        LayerSpec(kind=LayerKind.CONV, filters=128, kernel=1, stride=1, padding=0),
        LayerSpec(kind=LayerKind.DENSE, filters=128),
    ]


@dataclass(kw_only=True)
class ModelConfig:
    """Layered classifier architecture."""

    input_len: Optional[int] = field(
        default=None, metadata={"description": "M_w; filled in from the dataset when unset."}
    )
    n_classes: Optional[int] = field(
        default=None, metadata={"description": "Q; filled in from the dataset when unset."}
    )
    layers: list[LayerSpec] = field(default_factory=_default_layers)
    conv_dimensionality: ConvDimensionality = ConvDimensionality.ONE_D
    reshape: Optional[tuple[int, int]] = field(
        default=None, metadata={"description": "(rows, cols) for the 2D convolution mode."}
    )

    def __post_init__(self) -> None:
        seen_dense = False
        for spec in self.layers:
            if spec.kind == LayerKind.DENSE:
                seen_dense = True
            elif seen_dense:
                raise ConfigError("convolution layers must precede dense layers")
        if self.input_len is not None and self.input_len < 1:
            raise ConfigError(f"model.input_len must be >= 1, got {self.input_len}")
        if self.n_classes is not None and self.n_classes < 1:
            raise ConfigError(f"model.n_classes must be >= 1, got {self.n_classes}")
        if self.conv_dimensionality == ConvDimensionality.TWO_D and self.input_len is not None:
            if self.reshape is None:
                raise ConfigError("2d convolution mode requires model.reshape")
            rows, cols = self.reshape
            if rows * cols != self.input_len:
                raise ConfigError(f"reshape {self.reshape} does not match input_len {self.input_len}")

    def resolved(self, input_len: int, n_classes: int) -> ModelConfig:
        """Return a copy with the data-dependent dimensions filled in."""
        if self.input_len is not None and self.input_len != input_len:
            raise ConfigError(f"model.input_len={self.input_len} but the dataset has m_w={input_len}")
        if self.n_classes is not None and self.n_classes != n_classes:
            raise ConfigError(f"model.n_classes={self.n_classes} but the dataset has q={n_classes}")
        return replace(self, input_len=input_len, n_classes=n_classes)

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready mapping."""
        return _plain(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> ModelConfig:
        """Build a ModelConfig from a mapping, rejecting unknown keys."""
        return _build(cls, data, "model")


@dataclass(kw_only=True)
class TrainingConfig:
    """Optimizer and schedule."""

    optimizer: Optimizer = Optimizer.ADAM
    learning_rate: float = field(default=1e-3, metadata={"description": "Step size."})
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    epochs: int = field(default=100, metadata={"description": "Number of passes over the train split."})
    batch_size: int = field(default=128, metadata={"description": "Mini-batch size; 0 means full batch."})
    patience: Optional[int] = field(
        default=None, metadata={"description": "Early-stop patience on validation loss."}
    )
    seed: Optional[int] = field(default=None, metadata={"description": "Defaults to the run seed."})

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError(f"training.epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 0:
            raise ConfigError(f"training.batch_size must be >= 1 (or 0 for full batch), got {self.batch_size}")
        if not self.learning_rate > 0:
            raise ConfigError(f"training.learning_rate must be > 0, got {self.learning_rate}")
        if self.patience is not None and self.patience < 1:
            raise ConfigError(f"training.patience must be >= 1, got {self.patience}")


@dataclass(kw_only=True)
class DknnConfig:
    """Deep k-nearest-neighbor credibility engine."""

    k: int = field(default=10, metadata={"description": "Neighbors per layer."})
    backend: DknnBackend = DknnBackend.EXACT
    layer_mask: Optional[list[int]] = field(
        default=None, metadata={"description": "Hidden-layer indices feeding the engine; all when unset."}
    )
    lsh_tables: int = 16
    lsh_hashes_per_table: int = 1
    lsh_projection_dim: int = 32
    lsh_buckets_per_table: int = 3
    rerank: bool = field(
        default=True, metadata={"description": "Re-rank LSH candidates by exact cosine similarity."}
    )

    def __post_init__(self) -> None:
        if self.k < 1:
            raise ConfigError(f"dknn.k must be >= 1, got {self.k}")
        if min(self.lsh_tables, self.lsh_hashes_per_table, self.lsh_projection_dim, self.lsh_buckets_per_table) < 1:
            raise ConfigError("dknn LSH parameters must be >= 1")


@dataclass(kw_only=True)
class AttackConfig:
    """FGSM adversarial generation."""

    enabled: bool = True
    epsilon: float = field(default=0.0, metadata={"description": "Absolute perturbation in feature units."})
    relative_epsilon: Optional[float] = field(
        default=0.1,
        metadata={"description": "When set, epsilon = fraction of the mean per-sample RMS feature."},
    )
    clamp_nonnegative: Optional[bool] = field(
        default=None, metadata={"description": "Clamp to >= 0; defaults ON in linear space, OFF in model space."}
    )
    relative_power_budget: Optional[float] = field(
        default=None, metadata={"description": "Cap on ||delta||_2 / ||x||_2."}
    )
    space: AttackSpace = AttackSpace.LINEAR
    split: str = field(default="test", metadata={"description": "Dataset split to perturb."})
    sweep_relative_epsilons: list[float] = field(default_factory=lambda: [0.01, 0.05, 0.1, 0.2])

    def __post_init__(self) -> None:
        if self.epsilon < 0:
            raise ConfigError(f"attack.epsilon must be >= 0, got {self.epsilon}")
        if self.relative_epsilon is not None and self.relative_epsilon < 0:
            raise ConfigError(f"attack.relative_epsilon must be >= 0, got {self.relative_epsilon}")
        if self.relative_power_budget is not None and self.relative_power_budget < 0:
            raise ConfigError("attack.relative_power_budget must be >= 0")
        if self.split not in ("train", "validation", "calibration", "test"):
            raise ConfigError(f"unknown attack split {self.split!r}")

    @property
    def clamp(self) -> bool:
        """Effective clamp flag."""
        if self.clamp_nonnegative is not None:
            return self.clamp_nonnegative
        return self.space == AttackSpace.LINEAR


@dataclass(kw_only=True)
class EvalConfig:
    """Evaluation protocol."""

    k_list: list[int] = field(default_factory=lambda: [1, 3, 5])
    n_bins: int = field(default=10, metadata={"description": "Reliability diagram bins S."})
    noise_levels_dbm: list[float] = field(
        default_factory=lambda: [-90.0, -80.0, -70.0, -60.0, -50.0, -40.0, -30.0, -28.0],
        metadata={"description": "Configured noise powers for the SNR sweeps."},
    )
    credibility_thresholds: list[float] = field(default_factory=lambda: [0.2, 0.4])
    refine_k: int = field(default=5, metadata={"description": "Top-k refinement sweep size."})
    mrt_bits: int = field(default=4, metadata={"description": "Phase shifter resolution of the upper bound."})
    mrt_phase_offsets: int = field(default=8, metadata={"description": "Common-phase candidates per step."})

    def __post_init__(self) -> None:
        if self.n_bins < 1:
            raise ConfigError(f"eval.n_bins must be >= 1, got {self.n_bins}")
        if not self.k_list or min(self.k_list) < 1:
            raise ConfigError(f"eval.k_list must hold positive values, got {self.k_list}")
        if self.refine_k < 1 or self.mrt_bits < 1 or self.mrt_phase_offsets < 1:
            raise ConfigError("eval.refine_k, mrt_bits and mrt_phase_offsets must be >= 1")


@dataclass(kw_only=True)
class PathsConfig:
    """Workspace layout of the pipeline artifacts."""

    workspace: str = field(
        default="workspace", metadata={"description": f"Artifact directory; overridden by ${WORKSPACE_ENV}."}
    )
    dataset: str = "dataset.bae"
    checkpoint: str = "model.bam"
    loss_history: str = "loss_history.csv"
    index: str = "dknn_index.bai"
    calibration: str = "calibration.json"
    adversarial: str = "adversarial.bae"
    report: str = "report.json"
    channels: str = "channels.bin"

    def resolve(self, name: str) -> Path:
        """Return the absolute path of the artifact called ``name``."""
        return Path(self.workspace) / getattr(self, name)


@dataclass(kw_only=True)
class RunConfig:
    """The complete configuration of one experiment."""

    seed: int = field(default=0, metadata={"description": "Global seed; every substream derives from it."})
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    noise: NoiseModel = field(default_factory=NoiseModel)
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    dknn: DknnConfig = field(default_factory=DknnConfig)
    attack: AttackConfig = field(default_factory=AttackConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    @property
    def scenario_seed(self) -> int:
        """Seed used for channel synthesis."""
        return self.seed if self.scenario.seed is None else self.scenario.seed

    @property
    def training_seed(self) -> int:
        """Seed used for initialization and shuffling."""
        return self.seed if self.training.seed is None else self.training.seed

    @property
    def m_w(self) -> int:
        """Effective number of sensing beams."""
        return self.scenario.n_bs if self.sweep.m_w is None else self.sweep.m_w

    @property
    def n_narrow(self) -> int:
        """Size Q of the narrow O-DFT codebook."""
        return self.scenario.n_bs * self.sweep.oversampling

    def lineage_hash(self) -> str:
        """Hash of the sections that determine the generated dataset."""
        plain = self.to_dict()
        return stable_hash(
            {
                "seed": plain["seed"],
                "scenario": plain["scenario"],
                "sweep": plain["sweep"],
                "noise": plain["noise"],
            }
        )

    def to_dict(self) -> dict[str, Any]:
        """Return a JSON-ready mapping."""
        return _plain(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> RunConfig:
        """Build a RunConfig from a nested mapping, rejecting unknown keys."""
        config = _build(cls, data, "config")
        if config.m_w > config.scenario.n_bs:
            raise ConfigError(f"sweep.m_w={config.m_w} exceeds scenario.n_bs={config.scenario.n_bs}")
        if config.n_narrow > 65535:
            raise ConfigError("narrow codebook too large for 16-bit labels")
        return config

    @classmethod
    def from_file(cls, path: str | Path) -> RunConfig:
        """Read a JSON configuration file."""
        path = Path(path)
        try:
            data = json.loads(path.read_text(encoding="utf-8"))
        except FileNotFoundError as e:
            raise ConfigError(f"configuration file not found: {path}") from e
        except OSError as e:
            raise ConfigError(f"cannot read configuration file {path}: {e.strerror or e}") from e
        except json.JSONDecodeError as e:
            raise ConfigError(f"configuration file {path} is not valid JSON: {e}") from e
        logger.info("Loaded configuration from %s", path)
        return cls.from_dict(data)

    def with_overrides(self, overrides: Sequence[str]) -> RunConfig:
        """Apply ``section.key=value`` overrides and re-validate."""
        data = self.to_dict()
        for item in overrides:
            if "=" not in item:
                raise ConfigError(f"override must look like key=value, got {item!r}")
            dotted, raw = item.split("=", 1)
            keys = dotted.strip().split(".")
            node: Any = data
            for key in keys[:-1]:
                if not isinstance(node, dict) or key not in node:
                    raise ConfigError(f"unknown configuration key {dotted!r}")
                node = node[key]
            if not isinstance(node, dict) or keys[-1] not in node:
                raise ConfigError(f"unknown configuration key {dotted!r}")
            try:
                value = json.loads(raw)
            except json.JSONDecodeError:
                value = raw
            node[keys[-1]] = value
            logger.info("Override %s=%r", dotted, value)
        return RunConfig.from_dict(data)

    def with_environment(self) -> RunConfig:
        """Apply the environment variables that take precedence over the file."""
        config = self
        workspace = os.environ.get(WORKSPACE_ENV)
        if workspace:
            config = replace(config, paths=replace(config.paths, workspace=workspace))
        seed = os.environ.get(SEED_ENV)
        if seed:
            try:
                config = replace(config, seed=int(seed))
            except ValueError as e:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {seed!r}") from e
        return config

    @classmethod
    def from_runnable_config(cls, config: Optional[RunnableConfig] = None) -> RunConfig:
        """Create a RunConfig from the ``configurable`` mapping of a RunnableConfig.

        Recognized keys are ``config_path`` (JSON file), ``overrides`` (list of
        ``key=value`` strings), ``apply_environment`` (default true) and any
        top-level RunConfig section.
        """
        configurable = (
            config["configurable"] if config and "configurable" in config else {}
        )
        logger.debug("Configurable keys: %s", list(configurable.keys()))
        config_path = configurable.get("config_path")
        base = cls.from_file(config_path) if config_path else cls()
        data = base.to_dict()
        _fields = {f.name for f in fields(cls) if f.init}
        for name, value in configurable.items():
            if name not in _fields:
                continue
            if isinstance(value, Mapping) and isinstance(data.get(name), dict):
                data[name].update(_plain(value))
            else:
                data[name] = _plain(value)
        run_config = cls.from_dict(data).with_overrides(configurable.get("overrides") or [])
        if not configurable.get("apply_environment", True):
            return run_config
        return run_config.with_environment()


def _plain(value: Any) -> Any:
    if is_dataclass(value) and not isinstance(value, type):
        return {f.name: _plain(getattr(value, f.name)) for f in fields(value)}
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, Mapping):
        return {k: _plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_plain(v) for v in value]
    return value


def _build(cls: type, data: Any, path: str) -> Any:
    if isinstance(data, cls):
        return data
    if not isinstance(data, Mapping):
        raise ConfigError(f"{path} must be a mapping, got {type(data).__name__}")
    hints = get_type_hints(cls)
    known = {f.name for f in fields(cls) if f.init}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(f"unknown keys in {path}: {', '.join(unknown)}")
    kwargs = {name: _coerce(hints[name], value, f"{path}.{name}") for name, value in data.items()}
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"invalid {path}: {e}") from e


def _coerce(tp: Any, value: Any, path: str) -> Any:
    origin = get_origin(tp)
    args = get_args(tp)
    if origin in (Union, types.UnionType):
        if value is None:
            return None
        inner = [a for a in args if a is not type(None)]
        return _coerce(inner[0], value, path)
    if value is None:
        raise ConfigError(f"{path} must not be null")
    if isinstance(tp, type) and is_dataclass(tp):
        return _build(tp, value, path)
    if isinstance(tp, type) and issubclass(tp, Enum):
        try:
            return tp(value)
        except ValueError as e:
            allowed = ", ".join(m.value for m in tp)
            raise ConfigError(f"{path} must be one of [{allowed}], got {value!r}") from e
    if origin is tuple:
        if not isinstance(value, (list, tuple)) or len(value) != len(args):
            raise ConfigError(f"{path} must be a list of {len(args)} values, got {value!r}")
        return tuple(_coerce(a, v, path) for a, v in zip(args, value))
    if origin is list:
        if not isinstance(value, (list, tuple)):
            raise ConfigError(f"{path} must be a list, got {value!r}")
        return [_coerce(args[0], v, f"{path}[{i}]") for i, v in enumerate(value)]
    if tp is bool:
        if not isinstance(value, bool):
            raise ConfigError(f"{path} must be a boolean, got {value!r}")
        return value
    if tp is int:
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{path} must be an integer, got {value!r}")
        return value
    if tp is float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{path} must be a number, got {value!r}")
        return float(value)
    if tp is str:
        if not isinstance(value, str):
            raise ConfigError(f"{path} must be a string, got {value!r}")
        return value
    return value
