"""Experiment configuration.

Configurations are plain YAML files. Every key has a default, so the smallest
valid file is empty; the fully resolved configuration is written next to each
run's results.

Examples:
    >>> cfg = ExperimentConfig.model_validate({"hyperparams": {"lambda": 100}})
    >>> cfg.hyperparams.lam, cfg.hyperparams.eta
    (100.0, 0.9)
"""
import os
import pathlib
from typing import Any, Literal

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from agscl.exceptions import ConfigurationError

__all__ = (
    "Hyperparams",
    "LayerConfig",
    "ModelConfig",
    "TaskStreamConfig",
    "AblationConfig",
    "AopcConfig",
    "ExperimentConfig",
    "load_config",
    "dump_config",
    "config_to_dict",
)


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True, populate_by_name=True)


class Hyperparams(_Model):
    """Optimization hyperparameters for one experiment.

    Attributes:
        mu: Group Lasso weight for unimportant nodes.
        lam: Freeze-penalty weight for important nodes (`lambda` in YAML).
        rho: Probability of re-drawing an unimportant node's incoming weights.
        eta: Exponential decay applied to node importances after each task.
        lr: Base learning rate, also the proximal step size.
        epochs: Epochs per task.
        batch_size: Minibatch size.
        lr_min: Floor for plateau decay.
        lr_factor: Divisor applied on a plateau.
        lr_patience: Epochs without validation improvement before decaying.
        prox_lr: Step size used in the proximal threshold, either the
            scheduler's current rate or the initial one.
        prox_every: Apply the proximal sweep once per epoch or after every
            minibatch.
        penalty_scale: Multiplier applied to both `mu` and `lam`.
        adam_betas: Moment decay rates.
        adam_eps: Denominator guard.
    """

    mu: float = Field(10.0, ge=0)
    lam: float = Field(400.0, ge=0, alias="lambda")
    rho: float = Field(0.3, gt=0, le=1)
    eta: float = Field(0.9, gt=0, le=1)
    lr: float = Field(1e-3, gt=0)
    epochs: int = Field(20, ge=1)
    batch_size: int = Field(256, ge=1)
    lr_min: float = Field(1e-6, ge=0)
    lr_factor: float = Field(3.0, gt=1)
    lr_patience: int = Field(5, ge=1)
    prox_lr: Literal["current", "initial"] = "current"
    prox_every: Literal["epoch", "minibatch"] = "epoch"
    penalty_scale: float = Field(1.0, ge=0)
    adam_betas: tuple[float, float] = (0.9, 0.999)
    adam_eps: float = Field(1e-8, gt=0)

    @model_validator(mode="after")
    def _check_lr_floor(self) -> "Hyperparams":
        if self.lr_min > self.lr:
            raise ValueError(f"lr_min {self.lr_min} exceeds lr {self.lr}")
        return self

    @property
    def effective_mu(self) -> float:
        """Group Lasso weight after applying `penalty_scale`."""
        return self.mu * self.penalty_scale

    @property
    def effective_lam(self) -> float:
        """Freeze-penalty weight after applying `penalty_scale`."""
        return self.lam * self.penalty_scale


class LayerConfig(_Model):
    """One hidden layer."""

    kind: Literal["dense", "conv2d"] = "dense"
    units: int = Field(ge=1)
    kernel: tuple[int, int] = (3, 3)
    stride: int = Field(1, ge=1)
    padding: int = Field(0, ge=0)


class ModelConfig(_Model):
    """Network architecture; output heads are sized from the task stream."""

    input_shape: tuple[int, ...] | None = None
    hidden: list[LayerConfig] = Field(
        default_factory=lambda: [LayerConfig(units=100), LayerConfig(units=100)]
    )


class TaskStreamConfig(_Model):
    """Where tasks come from and how they are cut."""

    kind: Literal["synthetic", "split", "permuted"] = "synthetic"
    n_tasks: int = Field(5, ge=1)
    classes_per_task: int = Field(2, ge=1)
    dim: int = Field(20, ge=1)
    samples: int = Field(200, ge=1)
    separation: float = Field(10.0, ge=0)
    train_images: pathlib.Path | None = None
    train_labels: pathlib.Path | None = None
    test_images: pathlib.Path | None = None
    test_labels: pathlib.Path | None = None
    class_partition: list[list[int]] | None = None
    val_fraction: float = Field(0.1, ge=0, lt=1)
    test_fraction: float = Field(0.1, ge=0, lt=1)

    @model_validator(mode="after")
    def _check_sources(self) -> "TaskStreamConfig":
        if self.kind != "synthetic" and (
            self.train_images is None or self.train_labels is None
        ):
            raise ValueError(f"{self.kind} task streams need train_images/labels")
        if (self.test_images is None) != (self.test_labels is None):
            raise ValueError("test_images and test_labels must be given together")
        return self


class AblationConfig(_Model):
    """Switches that remove parts of the method."""

    no_pgd: bool = False
    tau: float = Field(1e-4, gt=0)
    no_zero_init: bool = False
    no_rand_init: bool = False
    prox_per_minibatch: bool = False


class AopcConfig(_Model):
    """Node-pruning curves used to validate the importance measure."""

    enabled: bool = True
    fractions: list[float] = Field(
        default_factory=lambda: [round(0.1 * i, 1) for i in range(11)]
    )

    @model_validator(mode="after")
    def _check_fractions(self) -> "AopcConfig":
        f = self.fractions
        if not f or f[0] != 0 or any(b < a for a, b in zip(f, f[1:])):
            raise ValueError("AOPC fractions must be ascending and start at 0")
        if f[-1] > 1:
            raise ValueError("AOPC fractions must not exceed 1")
        return self


class ExperimentConfig(_Model):
    """A complete, reproducible experiment description."""

    name: str = "agscl"
    method: Literal["agscl", "finetune"] = "agscl"
    seeds: list[int] = Field(default_factory=lambda: [0])
    output_dir: pathlib.Path = pathlib.Path("results")
    model: ModelConfig = Field(default_factory=ModelConfig)
    tasks: TaskStreamConfig = Field(default_factory=TaskStreamConfig)
    hyperparams: Hyperparams = Field(default_factory=Hyperparams)
    ablations: AblationConfig = Field(default_factory=AblationConfig)
    aopc: AopcConfig = Field(default_factory=AopcConfig)
    finetune_reference: bool = True
    shuffle_tasks: bool = False
    checkpoint: bool = True

    @property
    def resolved_hyperparams(self) -> Hyperparams:
        """Hyperparameters with ablation sugar folded in."""
        if self.ablations.prox_per_minibatch:
            return self.hyperparams.model_copy(update={"prox_every": "minibatch"})
        return self.hyperparams


def load_config(path: str | os.PathLike) -> ExperimentConfig:
    """Read and validate a YAML experiment configuration.

    Args:
        path: Location of the YAML file

    Returns:
        The validated configuration, with defaults filled in.

    Raises:
        ConfigurationError: The file cannot be read, is not valid YAML, or
            fails validation.
    """
    path = pathlib.Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except (OSError, yaml.YAMLError) as e:
        raise ConfigurationError(f"Could not read configuration {path}: {e}") from e
    return parse_config(raw, source=str(path))


def parse_config(raw: Any, source: str = "<config>") -> ExperimentConfig:
    """Validate an already-parsed configuration mapping."""
    if not isinstance(raw, dict):
        raise ConfigurationError(f"{source}: top level must be a mapping")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        raise ConfigurationError(f"{source}: {e}") from e


def config_to_dict(config: ExperimentConfig) -> dict:
    """JSON-safe echo of a configuration, using the YAML key names."""
    return config.model_dump(mode="json", by_alias=True)


def dump_config(config: ExperimentConfig, path: str | os.PathLike) -> pathlib.Path:
    """Write the fully resolved configuration as YAML."""
    path = pathlib.Path(path)
    path.write_text(
        yaml.safe_dump(config_to_dict(config), sort_keys=False), encoding="utf-8"
    )
    return path
