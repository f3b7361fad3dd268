import numpy as np
import pytest

from src.core.models import ModelSpec
from src.train.task import SyntheticLongRangeTask


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_spec() -> ModelSpec:
    """Two global-span axial blocks on 8x8 inputs with 3 channels."""
    return ModelSpec.from_dict({
        "name": "tiny-axial",
        "stem": "pointwise",
        "stage_blocks": [1, 1],
        "stage_strides": [1, 2],
        "base_width": 8,
        "expansion": 2,
        "stem_channels": 8,
        "heads": 2,
        "spans": "global",
        "num_classes": 2,
        "in_channels": 3,
        "resolution": 8,
    })


@pytest.fixture
def tiny_local_spec(tiny_spec: ModelSpec) -> ModelSpec:
    data = tiny_spec.to_dict()
    data.update({"name": "tiny-axial-local", "spans": [3, 3]})
    return ModelSpec.from_dict(data)


@pytest.fixture
def small_task() -> SyntheticLongRangeTask:
    return SyntheticLongRangeTask(grid=8, d_min=5, channels=3, colors=3, seed=0)
