from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Annotated

from pydantic import (
    BaseModel,
    ConfigDict,
    Field,
    ValidationError,
    field_validator,
    model_validator,
)

from .const import DEFAULT_SCALES
from .exceptions import ConfigError, MissingPathError

PositiveInt = Annotated[int, Field(gt=0)]
OpenUnit = Annotated[float, Field(gt=0.0, lt=1.0)]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class PyramidConfig(StrictModel):
    scales: tuple[PositiveInt, ...] = DEFAULT_SCALES
    reduction: PositiveInt = 4

    @field_validator("scales")
    @classmethod
    def _odd_increasing(cls, scales: tuple[int, ...]) -> tuple[int, ...]:
        if not scales:
            raise ValueError("at least one temporal scale is required")
        if any(scale % 2 == 0 for scale in scales):
            raise ValueError(f"temporal scales must be odd, got {list(scales)}")
        if any(a >= b for a, b in zip(scales, scales[1:])):
            raise ValueError(f"temporal scales must be strictly increasing, got {list(scales)}")
        return scales


class CbamConfig(StrictModel):
    reduction: PositiveInt = 4
    kernel_size: PositiveInt = 7

    @field_validator("kernel_size")
    @classmethod
    def _odd_kernel(cls, kernel_size: int) -> int:
        if kernel_size % 2 == 0:
            raise ValueError(f"temporal attention kernel must be odd, got {kernel_size}")
        return kernel_size


class AblationSwitches(StrictModel):
    use_amtpn: bool = True
    use_cbam: bool = True
    use_ca: bool = True
    use_sa: bool = True
    use_aff: bool = True
    use_tce: bool = True
    use_tpp: bool = True
    use_l_pse: bool = True
    use_l_trip: bool = True


class ModelConfig(StrictModel):
    input_dim: PositiveInt = 1024
    width: PositiveInt = 128
    depth: Annotated[int, Field(ge=0)] = 2
    pyramid: PyramidConfig = PyramidConfig()
    cbam: CbamConfig = CbamConfig()
    head_hidden: PositiveInt | None = None
    dropout: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.0

    @property
    def hidden(self) -> int:
        return self.head_hidden if self.head_hidden is not None else max(self.width // 2, 1)


class ClipPathConfig(StrictModel):
    temperature: Annotated[float, Field(gt=0.0)] = 0.07
    scale: Annotated[float, Field(gt=0.0)] = 100.0
    threshold: OpenUnit = 0.5


class LossConfig(StrictModel):
    focal_alpha: OpenUnit = 0.75
    focal_gamma: Annotated[float, Field(ge=0.0)] = 2.0
    topk_fraction: Annotated[float, Field(gt=0.0, le=1.0)] = 0.1
    triplet_margin: Annotated[float, Field(ge=0.0)] = 1.0


class TrainConfig(StrictModel):
    max_iterations: Annotated[int, Field(ge=0)] = 5000
    validate_every: PositiveInt = 100
    batch_size: PositiveInt = 30
    eval_batch_size: PositiveInt = 10
    learning_rate: Annotated[float, Field(gt=0.0)] = 1e-3
    beta1: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.9
    beta2: Annotated[float, Field(ge=0.0, lt=1.0)] = 0.999
    epsilon: Annotated[float, Field(gt=0.0)] = 1e-8
    weight_decay: Annotated[float, Field(ge=0.0)] = 0.0
    seed: Annotated[int, Field(ge=0, lt=2**64)] = 0
    loss: LossConfig = LossConfig()
    model: ModelConfig = ModelConfig()
    clip: ClipPathConfig = ClipPathConfig()
    ablation: AblationSwitches = AblationSwitches()

    @model_validator(mode="after")
    def _reductions_divide_width(self) -> TrainConfig:
        width = self.model.width
        for name, reduction in (
            ("pyramid", self.model.pyramid.reduction),
            ("cbam", self.model.cbam.reduction),
        ):
            if width % reduction:
                raise ValueError(f"{name} reduction {reduction} does not divide width {width}")
        return self


class MiEstimatorConfig(StrictModel):
    bins: Annotated[int, Field(ge=2)] = 8


def load_config(path: Path) -> TrainConfig:
    if not path.is_file():
        raise MissingPathError(f"Config file {path} does not exist")
    try:
        return TrainConfig.model_validate_json(path.read_text(encoding="utf-8"))
    except ValidationError as error:
        raise ConfigError(f"Invalid config {path}: {error}") from error


def config_hash(config: TrainConfig) -> str:
    """Identity of a run; the iteration budget and validation cadence are excluded."""
    payload = config.model_dump(mode="json", exclude={"max_iterations", "validate_every"})
    canonical = json.dumps(payload, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
