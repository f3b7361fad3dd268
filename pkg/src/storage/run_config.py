"""
Run configuration schema.

A run is described by one JSON document with the sections ``model``,
``task``, ``optimizer``, ``bench`` and ``seeds``. Every section rejects
unknown keys, and the document is validated before any computation.
"""
import hashlib
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Union

from pydantic import BaseModel, ConfigDict, Field, model_validator

from ..core.errors import ConfigError
from ..core.models import ModelSpec

logger = logging.getLogger(__name__)

SpanValue = Union[int, str]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ModelSection(_Section):
    """ModelSpec fields plus the numeric mode the model is built in."""
    name: str = "axial-resnet"
    stem: Literal["conv", "full_axial", "pointwise"] = "conv"
    block: Literal["axial", "conv3x3", "ps2d"] = "axial"
    stage_blocks: List[int] = Field(default_factory=lambda: [3, 4, 6, 3])
    stage_strides: Optional[List[int]] = None
    width_multiplier: float = 1.0
    base_width: int = 128
    expansion: int = 2
    stem_channels: int = 64
    heads: int = 8
    spans: Union[SpanValue, List[SpanValue]] = "global"
    stem_span: SpanValue = 15
    ps_span: SpanValue = 7
    positional_mode: Literal["none", "query_only", "full"] = "full"
    positional_extent: int = Field(0, ge=0)
    bn_placement: Dict[str, bool] = Field(default_factory=lambda: {"qkv": True, "output": True})
    num_classes: int = 1000
    in_channels: int = 3
    resolution: int = 224
    precision: Optional[Literal["float64", "float32"]] = None

    @model_validator(mode="after")
    def _check_spec(self) -> "ModelSection":
        self.to_spec()
        return self

    def to_spec(self) -> ModelSpec:
        data = self.model_dump(exclude={"precision"})
        if data["stage_strides"] is None:
            del data["stage_strides"]
        return ModelSpec.from_dict(data)


class TaskSection(_Section):
    grid: int = 32
    d_min: int = 24
    channels: int = 3
    colors: int = 4
    train_samples: int = Field(2048, ge=1)
    eval_samples: int = Field(512, ge=1)
    eval_resolutions: List[int] = Field(default_factory=lambda: [32])

    def task_fields(self) -> Dict[str, Any]:
        return {"grid": self.grid, "d_min": self.d_min, "channels": self.channels, "colors": self.colors}


class OptimizerSection(_Section):
    learning_rate: float = Field(0.05, ge=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    warmup_steps: int = Field(100, ge=0)
    weight_decay: float = Field(0.0, ge=0)
    steps: int = Field(2000, ge=0)
    batch_size: int = Field(32, ge=1)
    checkpoint_every: int = Field(0, ge=0)


class BenchSection(_Section):
    target: str = "axial_attention"
    spans: List[int] = Field(default_factory=lambda: [5, 9, 17, 33, 65])
    resolution: int = Field(65, ge=1)
    d_in: int = Field(16, ge=1)
    heads: int = Field(2, ge=1)
    repetitions: int = Field(7, ge=1)
    warmup: int = Field(2, ge=0)
    workers: int = Field(1, ge=1)


class SeedsSection(_Section):
    data: int = 0
    init: int = 0
    train: int = 0
    eval: int = 1


class RunConfig(_Section):
    model: ModelSection = Field(default_factory=ModelSection)
    task: TaskSection = Field(default_factory=TaskSection)
    optimizer: OptimizerSection = Field(default_factory=OptimizerSection)
    bench: BenchSection = Field(default_factory=BenchSection)
    seeds: SeedsSection = Field(default_factory=SeedsSection)

    @property
    def hash(self) -> str:
        return config_hash(self)


def config_hash(document: Union[RunConfig, Dict[str, Any]]) -> str:
    """First 16 hex digits of SHA-256 over the sorted-key, compact JSON of ``document``."""
    if isinstance(document, BaseModel):
        document = document.model_dump(mode="json")
    canonical = json.dumps(document, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:16]


def load_run_config(path: Union[str, Path]) -> RunConfig:
    """Parse and validate a RunConfig document; schema violations raise ``pydantic.ValidationError``."""
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path} is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigError(f"{path} must hold a JSON object")
    run = RunConfig.model_validate(data)
    logger.info(f"loaded run config {path} (hash {run.hash})")
    return run
