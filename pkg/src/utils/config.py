"""Configuration models and the flat ``key = value`` file format.

Every model forbids unknown keys so that a typo in a config file fails loudly
instead of silently falling back to a default.
"""
import logging
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Literal, Mapping, NamedTuple, Type, TypeVar, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from src.utils.exceptions import ConfigError

logger = logging.getLogger(__name__)

ModelT = TypeVar("ModelT", bound=BaseModel)


class AblationMode(str, Enum):
    R = "R"
    R_ADV = "R+adv"
    R_ADV_CROSS = "R+adv+cross"
    FULL = "full"

    @property
    def level(self) -> int:
        return list(AblationMode).index(self)

    def enables(self, other: "AblationMode") -> bool:
        """True when this mode switches on everything ``other`` does."""
        return self.level >= other.level


class FactorSpec(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    n_subjects: int = Field(10, ge=2)
    n_expressions: int = Field(6, ge=2)
    n_poses: int = Field(5, ge=2)
    image_side: int = Field(24, ge=16)
    samples_per_cell: int = Field(6, ge=1)
    noise_sigma: float = Field(0.02, ge=0.0)
    seed: int = Field(0, ge=0)

    @property
    def n_pixels(self) -> int:
        return self.image_side * self.image_side

    @property
    def n_samples(self) -> int:
        return self.n_subjects * self.n_expressions * self.n_poses * self.samples_per_cell


class ArchitectureConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    image_side: int = Field(24, ge=1)
    n_poses: int = Field(5, ge=2)
    n_expressions: int = Field(6, ge=2)
    trunk_hidden: int = Field(128, ge=1)
    d_p: int = Field(16, ge=1)
    d_e: int = Field(32, ge=1)
    head_hidden: int = Field(64, ge=1)
    gen_hidden: int = Field(128, ge=1)

    @property
    def n_pixels(self) -> int:
        return self.image_side * self.image_side


class OptimizerSettings(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    name: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, gt=0.0)
    beta1: float = Field(0.9, ge=0.0, lt=1.0)
    beta2: float = Field(0.999, ge=0.0, lt=1.0)
    eps: float = Field(1e-8, gt=0.0)


class LossWeights(NamedTuple):
    alpha: float = 1.0
    beta: float = 0.5
    gamma: float = 0.1
    eta: float = 0.5


class TrainConfig(BaseModel):
    """Everything one training run needs besides the data.

    Loss weights and inner-loop counts default to values tuned on the
    synthetic faces; nothing else pins them down.
    """

    model_config = ConfigDict(extra="forbid", frozen=True, use_enum_values=False)

    alpha: float = Field(1.0, ge=0.0)
    beta: float = Field(0.5, ge=0.0)
    gamma: float = Field(0.1, ge=0.0)
    eta: float = Field(0.5, ge=0.0)

    epochs: int = Field(60, ge=1)
    k1: int = Field(1, ge=1)
    k2: int = Field(1, ge=1)
    k3: int = Field(1, ge=1)
    batch_size: int = Field(32, ge=1)

    optimizer: Literal["adam", "sgd"] = "adam"
    lr: float = Field(1e-3, gt=0.0)
    adam_beta1: float = Field(0.9, ge=0.0, lt=1.0)
    adam_beta2: float = Field(0.999, ge=0.0, lt=1.0)
    adam_eps: float = Field(1e-8, gt=0.0)

    mode: AblationMode = AblationMode.FULL
    seed: int = Field(0, ge=0)
    confusion_mode: Literal["uniform", "reverse"] = "uniform"
    recon_norm: Literal["l2", "squared"] = "l2"
    warmup_epochs: int = Field(0, ge=0)
    sync_target: bool = True
    # rates of the domain game; the supervised path and the generators use lr
    adv_lr: float = Field(5e-4, gt=0.0)
    disc_lr: float = Field(2e-3, gt=0.0)
    # fraction of the gap to E_s that E_t closes before each encoder-side adversarial step
    target_tracking: float = Field(0.1, ge=0.0, le=1.0)

    trunk_hidden: int = Field(128, ge=1)
    d_p: int = Field(16, ge=1)
    d_e: int = Field(32, ge=1)
    head_hidden: int = Field(64, ge=1)
    gen_hidden: int = Field(128, ge=1)

    probe_steps: int = Field(500, ge=1)
    probe_lr: float = Field(1e-2, gt=0.0)

    @model_validator(mode="after")
    def _warmup_within_run(self) -> "TrainConfig":
        if self.warmup_epochs > self.epochs:
            raise ValueError("warmup_epochs must not exceed epochs")
        return self

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.gamma, self.eta)

    @property
    def optimizer_settings(self) -> OptimizerSettings:
        return OptimizerSettings(
            name=self.optimizer,
            lr=self.lr,
            beta1=self.adam_beta1,
            beta2=self.adam_beta2,
            eps=self.adam_eps,
        )

    def architecture(self, spec: FactorSpec) -> ArchitectureConfig:
        return ArchitectureConfig(
            image_side=spec.image_side,
            n_poses=spec.n_poses,
            n_expressions=spec.n_expressions,
            trunk_hidden=self.trunk_hidden,
            d_p=self.d_p,
            d_e=self.d_e,
            head_hidden=self.head_hidden,
            gen_hidden=self.gen_hidden,
        )


def parse_config(model: Type[ModelT], values: Mapping[str, Any]) -> ModelT:
    try:
        return model.model_validate(dict(values))
    except ValidationError as e:
        first = e.errors()[0]
        field = ".".join(str(part) for part in first["loc"]) or model.__name__
        raise ConfigError(f"{field}: {first['msg']}") from e


def load_flat_config(path: Union[str, Path]) -> Dict[str, str]:
    """Read a flat UTF-8 ``key = value`` file. ``#`` starts a comment."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Config file not found: {path}")

    values: Dict[str, str] = {}
    for lineno, raw in enumerate(path.read_text(encoding="utf-8").splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if not key:
            raise ConfigError(f"{path}:{lineno}: empty key")
        if key in values:
            raise ConfigError(f"{key}: duplicate key at {path}:{lineno}")
        values[key] = value
    return values


def load_train_config(path: Union[str, Path, None]) -> TrainConfig:
    if path is None:
        return TrainConfig()
    return parse_config(TrainConfig, load_flat_config(path))


def load_factor_spec(path: Union[str, Path, None]) -> FactorSpec:
    if path is None:
        return FactorSpec()
    return parse_config(FactorSpec, load_flat_config(path))


def to_flat(model: BaseModel) -> Dict[str, Any]:
    """JSON-ready dict with every default materialized."""
    return model.model_dump(mode="json")


def write_flat_config(model: BaseModel, path: Union[str, Path]) -> None:
    lines = [
        f"{key} = {str(value).lower() if isinstance(value, bool) else value}"
        for key, value in to_flat(model).items()
    ]
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
