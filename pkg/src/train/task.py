"""
Synthetic long-range classification task.

Each image is a blank grid with two marker pixels at least ``d_min`` apart
(Chebyshev distance); the label says whether the markers share a colour.
No window narrower than ``d_min + 1`` ever sees both markers.
"""
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Optional, Sequence, Tuple

import numpy as np

from ..core.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class SyntheticLongRangeTask:
    """Generator settings for the marker-pair task."""
    grid: int = 32
    d_min: int = 24
    channels: int = 3
    colors: int = 4
    seed: int = 0

    def __post_init__(self):
        if self.grid < 2:
            raise ConfigError(f"grid must be at least 2, got {self.grid}")
        if not 0 < self.d_min < self.grid:
            raise ConfigError(f"d_min must lie in [1, {self.grid - 1}] for a {self.grid}x{self.grid} grid, got {self.d_min}")
        if self.colors < 2:
            raise ConfigError(f"at least two colours are needed, got {self.colors}")
        if self.colors > 2 ** self.channels - 1:
            raise ConfigError(f"{self.channels} channels encode at most {2 ** self.channels - 1} colours, asked for {self.colors}")

    def palette(self) -> np.ndarray:
        """Distinct non-black binary colours, one row per colour."""
        codes = np.arange(1, self.colors + 1)
        bits = (codes[:, None] >> np.arange(self.channels)[None, :]) & 1
        return bits.astype(np.float64)

    def to_dict(self) -> Dict[str, Any]:
        return {"grid": self.grid, "d_min": self.d_min, "channels": self.channels,
                "colors": self.colors, "seed": self.seed}

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "SyntheticLongRangeTask":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown task fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class Dataset:
    """Images (n, h, w, c), integer labels (n,), marker positions (n, 2, 2)."""
    images: np.ndarray
    labels: np.ndarray
    markers: np.ndarray
    metadata: Dict[str, Any] = field(default_factory=dict)

    def __len__(self) -> int:
        return int(self.labels.shape[0])

    @property
    def resolution(self) -> int:
        return int(self.images.shape[1])

    def subset(self, indices: Sequence[int]) -> "Dataset":
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(self.images[idx], self.labels[idx], self.markers[idx], dict(self.metadata))

    def split(self, n_first: int) -> Tuple["Dataset", "Dataset"]:
        return self.subset(range(n_first)), self.subset(range(n_first, len(self)))


def feasible_pairs(grid: int, d_min: int) -> np.ndarray:
    """Every ordered marker placement (r1, c1, r2, c2) at Chebyshev distance >= d_min."""
    rows, cols = np.divmod(np.arange(grid * grid), grid)
    dist = np.maximum(np.abs(rows[:, None] - rows[None, :]), np.abs(cols[:, None] - cols[None, :]))
    first, second = np.nonzero(dist >= d_min)
    return np.stack([rows[first], cols[first], rows[second], cols[second]], axis=1)


def generate_task(task: SyntheticLongRangeTask, n: int, seed: Optional[int] = None) -> Dataset:
    """
    ``n`` samples with exactly balanced labels (one off for odd ``n``).

    The same task and seed always produce byte-identical arrays.
    """
    if n < 1:
        raise ConfigError(f"dataset size must be positive, got {n}")
    seed = task.seed if seed is None else seed
    pairs = feasible_pairs(task.grid, task.d_min)
    if len(pairs) == 0:
        raise ConfigError(f"no marker placement at distance >= {task.d_min} on a {task.grid}x{task.grid} grid")
    rng = np.random.default_rng(seed)
    labels = rng.permutation(np.arange(n) % 2).astype(np.int64)
    chosen = pairs[rng.integers(len(pairs), size=n)]
    first = rng.integers(task.colors, size=n)
    shift = rng.integers(1, task.colors, size=n)
    second = np.where(labels == 1, first, (first + shift) % task.colors)

    palette = task.palette()
    images = np.zeros((n, task.grid, task.grid, task.channels))
    samples = np.arange(n)
    images[samples, chosen[:, 0], chosen[:, 1]] = palette[first]
    images[samples, chosen[:, 2], chosen[:, 3]] = palette[second]
    markers = chosen.reshape(n, 2, 2)
    logger.info(f"generated {n} samples on {task.grid}x{task.grid}, d_min={task.d_min}, seed={seed}")
    return Dataset(images, labels, markers, {"task": task.to_dict(), "seed": seed, "scale": 1})


def rescale_dataset(dataset: Dataset, resolution: int) -> Dataset:
    """Nearest-neighbour integer upscaling: each pixel becomes a factor x factor block."""
    base = dataset.resolution
    if resolution == base:
        return dataset
    if resolution < base or resolution % base:
        raise ConfigError(f"resolution {resolution} is not an integer multiple of {base}")
    factor = resolution // base
    images = np.repeat(np.repeat(dataset.images, factor, axis=1), factor, axis=2)
    metadata = dict(dataset.metadata)
    metadata["scale"] = metadata.get("scale", 1) * factor
    return Dataset(images, dataset.labels.copy(), dataset.markers * factor, metadata)
