"""Configuration management for pretraining, fine-tuning and consistency runs."""

import json
import os
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

from dotenv import load_dotenv
from langchain_core.runnables import RunnableConfig
from pydantic import BaseModel, Field, ValidationError, field_validator, model_validator

from ssl_cr.errors import ConfigurationError

load_dotenv()

ENV_PREFIX = "SSL_CR_"
ALPHAS = (0.10, 0.25, 0.50, 1.00)


class TaskMode(Enum):
    """Downstream task type."""

    REGRESSION = "regression"
    CLASSIFICATION = "classification"


class PretrainMethod(Enum):
    """Source of the encoder weights used to initialize fine-tuning."""

    RSP = "rsp"
    MOCO = "moco"
    VAE = "vae"
    RANDOM = "random"


class Texture(Enum):
    """Synthetic slide rendering style."""

    CELLS = "cells"
    BLANK = "blank"


class OptimizerFamily(Enum):
    """Optimizer families referenced by the hyperparameter profiles."""

    ADAM = "adam"
    SGD_NESTEROV = "sgd_nesterov"


class SelectionRule(Enum):
    """Post-hoc model selection rule over per-epoch validation records."""

    MIN_VAL_LOSS = "min_val_loss"
    MAX_VAL_ACCURACY = "max_val_accuracy"


class PseudoLabelMode(Enum):
    """Pseudo-label form for classification consistency."""

    HARD = "hard"
    SOFT = "soft"


class InfoNceMode(Enum):
    """Denominator convention for the contrastive loss."""

    STANDARD = "standard"
    LITERAL = "literal"


class DataConfig(BaseModel):
    """Synthetic pyramid generator and dataset sizes."""

    level0_size: int = Field(default=256, description="Square level-0 side length in pixels")
    n_levels: int = Field(default=3, description="Number of 2x pyramid levels")
    patch_size: int = Field(default=32, description="Patch side length P for every magnification")
    level_triple: tuple[int, int, int] = Field(default=(0, 1, 2), description="Pyramid levels for S1, S2, S3")
    base_magnification: float = Field(default=20.0, description="Nominal magnification of level 0")
    microns_per_pixel: float = Field(default=0.5, description="Level-0 resolution, metadata only")
    texture: Texture = Field(default=Texture.CELLS)
    task: TaskMode = Field(default=TaskMode.REGRESSION)
    n_classes: int = Field(default=2, description="Class count in classification mode")
    slide_labels: bool = Field(default=False, description="Derive slide-level tumor labels and heatmaps")
    blob_radius: tuple[float, float] = Field(default=(2.0, 5.0))
    max_cellularity: float = Field(default=0.7)
    noise_sigma: float = Field(default=0.05, description="Per-pixel level-0 noise std")
    background_fraction: float = Field(default=0.15, description="Share of regions rendered as background")
    max_background: float = Field(default=0.9, description="Reject tuples above this level-0 background share")
    n_train_slides: int = Field(default=8)
    n_test_slides: int = Field(default=4)
    n_pretrain_tuples: int = Field(default=1000)
    n_pretrain_val_tuples: int = Field(default=200)
    val_fraction: float = Field(default=0.2, description="Hold-out share of the fine-tune pool")
    rater_noise: float = Field(default=0.05, description="Std of the synthetic rater disagreement")
    tumor_slide_fraction: float = Field(default=0.5)


class AugmentConfig(BaseModel):
    """Augmentation policy knobs."""

    strong_n_aug: int = Field(default=7, ge=1, description="Transforms drawn per strong call")
    magnitude_range: tuple[float, float] = Field(default=(1.0, 10.0))
    transform_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    weak_flip_prob: float = Field(default=0.5, ge=0.0, le=1.0)
    weak_crop_scale: tuple[float, float] = Field(default=(0.8, 1.0))
    finetune_crop_scale: tuple[float, float] = Field(default=(0.5, 1.0))
    moco_jitter: tuple[float, float] = Field(default=(0.6, 1.4))
    moco_crop_scale: tuple[float, float] = Field(default=(0.7, 1.0))

    @model_validator(mode="after")
    def _check_ranges(self) -> "AugmentConfig":
        lo, hi = self.magnitude_range
        if not 0 <= lo <= hi:
            raise ValueError("magnitude_range must satisfy 0 <= low <= high")
        for name in ("weak_crop_scale", "finetune_crop_scale", "moco_crop_scale"):
            low, high = getattr(self, name)
            if not 0 < low <= high <= 1:
                raise ValueError(f"{name} must lie in (0, 1]")
        return self


class PretrainConfig(BaseModel):
    """Self-supervised pretraining with SGD-Nesterov wrapped in Lookahead."""

    method: PretrainMethod = Field(default=PretrainMethod.RSP)
    arch: str = Field(default="small_conv", description="Encoder architecture id")
    epochs: int = Field(default=250, gt=0)
    batch_size: int = Field(default=64, gt=0)
    lr: float = Field(default=0.01, gt=0)
    momentum: float = Field(default=0.9, gt=0)
    weight_decay: float = Field(default=1e-4, gt=0)
    lookahead_k: int = Field(default=5, ge=1)
    lookahead_alpha: float = Field(default=0.5, gt=0.0, le=1.0)
    num_workers: int = Field(default=0, ge=0)


class MocoConfig(BaseModel):
    """Momentum contrast baseline."""

    temperature: Optional[float] = Field(default=None, description="Required; no default is assumed")
    momentum: float = Field(default=0.999, ge=0.0, le=1.0)
    queue_size: int = Field(default=8192, gt=0)
    infonce_mode: InfoNceMode = Field(default=InfoNceMode.STANDARD)
    projection_dim: int = Field(default=128, gt=0)


class VaeConfig(BaseModel):
    """Variational autoencoder baseline."""

    latent_dim: int = Field(default=512, gt=0)


class _SupervisedSchedule(BaseModel):
    epochs: int = Field(default=90, gt=0)
    batch_size: int = Field(default=16, gt=0)
    lr: float = Field(default=1e-4, gt=0)
    optimizer: OptimizerFamily = Field(default=OptimizerFamily.ADAM)
    betas: tuple[float, float] = Field(default=(0.9, 0.999))
    momentum: float = Field(default=0.9)
    weight_decay: float = Field(default=1e-4, ge=0)
    milestones: list[int] = Field(default_factory=lambda: [30, 60])
    gamma: float = Field(default=0.1, gt=0)
    selection: SelectionRule = Field(default=SelectionRule.MIN_VAL_LOSS)
    num_workers: int = Field(default=0, ge=0)

    @model_validator(mode="after")
    def _check_milestones(self):
        ms = self.milestones
        if any(b <= a for a, b in zip(ms, ms[1:])):
            raise ValueError("milestones must be strictly increasing")
        if ms and (ms[0] <= 0 or ms[-1] >= self.epochs):
            raise ValueError("milestones must lie in (0, epochs)")
        return self


class FinetuneConfig(_SupervisedSchedule):
    """Supervised fine-tuning of all layers under label fraction alpha."""

    alpha: float = Field(default=0.10)
    head_hidden: tuple[int, int] = Field(default=(256, 128), description="Fc1 and Fc2 widths")

    @field_validator("alpha")
    @classmethod
    def _check_alpha(cls, v: float) -> float:
        return check_alpha(v)


class ConsistencyConfig(_SupervisedSchedule):
    """Teacher-student consistency training."""

    batch_size: int = Field(default=4, gt=0)
    mu: int = Field(default=7, ge=1, description="Unlabeled-to-labeled batch ratio")
    lam: float = Field(default=1.0, ge=0.0, description="Consistency loss weight")
    tau_c: float = Field(default=0.0, ge=0.0, le=1.01, description="Pseudo-label confidence threshold")
    pseudo_label: PseudoLabelMode = Field(default=PseudoLabelMode.HARD)
    label_smoothing: float = Field(default=0.1, ge=0.0, lt=1.0)
    use_unlabeled: bool = Field(default=True, description="False trains the head on labeled batches only")


class EvalConfig(BaseModel):
    """Evaluation and slide-level aggregation."""

    svm_c: float = Field(default=1.0, gt=0)
    confidence: float = Field(default=0.95, gt=0, lt=1)
    export_heatmaps: bool = Field(default=True)


class ExperimentConfig(BaseModel):
    """Root configuration for one experiment cell."""

    profile: str = Field(default="synthetic")
    seed: int = Field(default=0)
    progress: bool = Field(default=True)
    data: DataConfig = Field(default_factory=DataConfig)
    augment: AugmentConfig = Field(default_factory=AugmentConfig)
    pretrain: PretrainConfig = Field(default_factory=PretrainConfig)
    moco: MocoConfig = Field(default_factory=MocoConfig)
    vae: VaeConfig = Field(default_factory=VaeConfig)
    finetune: FinetuneConfig = Field(default_factory=FinetuneConfig)
    consistency: ConsistencyConfig = Field(default_factory=ConsistencyConfig)
    evaluation: EvalConfig = Field(default_factory=EvalConfig)

    @classmethod
    def from_runnable_config(
        cls, config: Optional[RunnableConfig] = None
    ) -> "ExperimentConfig":
        """Create an ExperimentConfig from a RunnableConfig's dotted `configurable` keys."""
        configurable = dict(config.get("configurable", {})) if config else {}
        known = set(flatten_config(cls()))
        overrides = {k: v for k, v in configurable.items() if k in known and v is not None}
        return resolve_config(profile=configurable.get("profile"), overrides=overrides)

    def flat(self) -> dict[str, Any]:
        """Return the dotted key-value view of this configuration."""
        return flatten_config(self)


# Hyperparameter profiles as dotted overrides on the model defaults.
PROFILES: dict[str, dict[str, Any]] = {
    "synthetic": {
        "pretrain.epochs": 30,
        "pretrain.lr": 0.03,
        "moco.temperature": 0.2,
        "moco.queue_size": 256,
        "finetune.epochs": 30,
        "finetune.milestones": [10, 20],
        "finetune.batch_size": 16,
        "finetune.lr": 1e-3,
        "consistency.epochs": 30,
        "consistency.milestones": [10, 20],
        "consistency.batch_size": 8,
        "consistency.lr": 1e-3,
    },
    "breastpathq": {
        "data.task": "regression",
        "data.patch_size": 256,
        "data.level0_size": 2048,
        "finetune.batch_size": 4,
        "finetune.lr": 1e-4,
        "finetune.optimizer": "adam",
        "finetune.selection": "min_val_loss",
        "consistency.batch_size": 4,
        "consistency.lr": 1e-4,
        "consistency.optimizer": "adam",
        "consistency.selection": "min_val_loss",
    },
    "camelyon16": {
        "data.task": "classification",
        "data.n_classes": 2,
        "data.slide_labels": True,
        "data.patch_size": 256,
        "data.level0_size": 2048,
        "finetune.batch_size": 16,
        "finetune.lr": 5e-4,
        "finetune.optimizer": "sgd_nesterov",
        "finetune.selection": "max_val_accuracy",
        "consistency.batch_size": 8,
        "consistency.lr": 5e-4,
        "consistency.optimizer": "sgd_nesterov",
        "consistency.selection": "max_val_accuracy",
    },
    "kather": {
        "data.task": "classification",
        "data.n_classes": 9,
        "data.patch_size": 224,
        "data.level0_size": 1024,
        "finetune.batch_size": 64,
        "finetune.lr": 1e-5,
        "finetune.optimizer": "adam",
        "finetune.selection": "max_val_accuracy",
        "consistency.batch_size": 8,
        "consistency.lr": 1e-5,
        "consistency.optimizer": "adam",
        "consistency.selection": "max_val_accuracy",
    },
}


def check_alpha(alpha: float) -> float:
    """Snap alpha to one of the supported label fractions or fail."""
    for allowed in ALPHAS:
        if abs(alpha - allowed) < 1e-9:
            return allowed
    raise ConfigurationError(f"alpha must be one of {ALPHAS}, got {alpha}")


def flatten_config(config: BaseModel) -> dict[str, Any]:
    """Flatten a nested config model into dotted keys with JSON-compatible values."""
    flat: dict[str, Any] = {}

    def _walk(prefix: str, value: Any) -> None:
        if isinstance(value, dict):
            for key, inner in value.items():
                _walk(f"{prefix}.{key}" if prefix else key, inner)
        else:
            flat[prefix] = value

    _walk("", config.model_dump(mode="json"))
    return flat


def _coerce(raw: Any) -> Any:
    if not isinstance(raw, str):
        return raw
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw.strip()


def _nest(flat: Mapping[str, Any]) -> dict[str, Any]:
    nested: dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        *parents, leaf = key.split(".")
        for part in parents:
            node = node.setdefault(part, {})
        node[leaf] = value
    return nested


def parse_config_file(path: Path) -> dict[str, Any]:
    """Parse a flat `key = value` file; `#` starts a comment."""
    values: dict[str, Any] = {}
    try:
        lines = Path(path).read_text().splitlines()
    except OSError as e:
        raise ConfigurationError(f"Cannot read config file {path}: {e}") from e
    for number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"{path}:{number}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        values[key] = _coerce(raw)
    return values


def env_overrides(known: set[str], environ: Optional[Mapping[str, str]] = None) -> dict[str, Any]:
    """Collect `SSL_CR_<KEY>` overrides for known dotted keys (dots spelled `__`)."""
    environ = os.environ if environ is None else environ
    found = {}
    for key in known:
        name = ENV_PREFIX + key.upper().replace(".", "__")
        if name in environ:
            found[key] = _coerce(environ[name])
    return found


def resolve_config(
    profile: Optional[str] = None,
    config_file: Optional[Path] = None,
    overrides: Optional[Mapping[str, Any]] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> ExperimentConfig:
    """Resolve a config with precedence CLI > environment > file > profile > defaults.

    Args:
        profile: Profile name from the command line, if any.
        config_file: Optional flat key-value file; its `profile` key selects a preset.
        overrides: Dotted-key values from the command line.
        environ: Environment mapping, defaults to `os.environ`.

    Returns:
        A validated ExperimentConfig.
    """
    known = set(flatten_config(ExperimentConfig()))
    file_values = parse_config_file(config_file) if config_file else {}
    cli_values = {k: _coerce(v) for k, v in (overrides or {}).items()}
    env_values = env_overrides(known, environ)

    name = cli_values.pop("profile", None) or profile or env_values.pop("profile", None) \
        or file_values.pop("profile", None) or "synthetic"
    file_values.pop("profile", None)
    env_values.pop("profile", None)
    if name not in PROFILES:
        raise ConfigurationError(f"Unknown profile '{name}'; choose from {sorted(PROFILES)}")

    merged: dict[str, Any] = {**PROFILES[name], **file_values, **env_values, **cli_values}
    unknown = sorted(set(merged) - known)
    if unknown:
        raise ConfigurationError(f"Unknown configuration keys: {unknown}")
    merged["profile"] = name
    return validate_config(merged)


def validate_config(flat: Mapping[str, Any]) -> ExperimentConfig:
    """Build an ExperimentConfig from dotted keys, mapping validation failures."""
    try:
        return ExperimentConfig.model_validate(_nest(flat))
    except ValidationError as e:
        raise ConfigurationError(f"Invalid configuration: {e}") from e


def with_overrides(config: ExperimentConfig, overrides: Mapping[str, Any]) -> ExperimentConfig:
    """Return a copy of `config` with dotted-key overrides applied."""
    flat = config.flat()
    unknown = sorted(set(overrides) - set(flat))
    if unknown:
        raise ConfigurationError(f"Unknown configuration keys: {unknown}")
    flat.update({k: _coerce(v) for k, v in overrides.items()})
    return validate_config(flat)


def config_diff(base: ExperimentConfig, other: ExperimentConfig) -> dict[str, tuple[Any, Any]]:
    """Return dotted keys whose values differ between two configs."""
    a, b = base.flat(), other.flat()
    return {k: (a[k], b[k]) for k in a if a[k] != b[k]}


def artifact_root() -> Path:
    """Artifact root directory from `SSL_CR_ARTIFACT_ROOT`."""
    return Path(os.getenv(f"{ENV_PREFIX}ARTIFACT_ROOT", "./artifacts"))
