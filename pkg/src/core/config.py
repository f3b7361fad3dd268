"""
Configuration settings for axial-lab.
This file centralizes all process-wide settings; run-level settings live in
the RunConfig JSON document (see src/storage/run_config.py).
"""
import os
from dataclasses import dataclass, field

from dotenv import load_dotenv

load_dotenv(override=True)

PRECISIONS = ("float64", "float32")


def _env_flag(name: str, default: str) -> bool:
    return os.getenv(name, default).strip().lower() in ("1", "true", "yes", "on")


@dataclass
class NumericsConfig:
    """Numeric mode of computation contexts."""
    precision: str = os.getenv("AXIAL_PRECISION", "float64")
    # NaN/Inf assertion after every committed op; bench turns it off
    check_finite: bool = _env_flag("AXIAL_CHECK_FINITE", "1")
    workers: int = int(os.getenv("AXIAL_WORKERS", "1"))


@dataclass
class BenchConfig:
    """Wall-clock benchmark settings."""
    warmup: int = int(os.getenv("AXIAL_BENCH_WARMUP", "2"))
    repetitions: int = int(os.getenv("AXIAL_BENCH_REPETITIONS", "7"))
    min_time: float = float(os.getenv("AXIAL_BENCH_MIN_TIME", "1e-4"))


@dataclass
class TrainConfig:
    """Desk-scale training defaults."""
    precision: str = os.getenv("AXIAL_TRAIN_PRECISION", "float32")
    checkpoint_every: int = int(os.getenv("AXIAL_CHECKPOINT_EVERY", "0"))


@dataclass
class PathsConfig:
    """Output locations."""
    output_dir: str = os.getenv("AXIAL_OUTPUT_DIR", "runs")


@dataclass
class Config:
    """Main configuration class."""
    app_title: str = "axial-lab"
    app_description: str = "Position-sensitive axial-attention toolkit."
    app_version: str = "0.1.0"
    log_level: str = os.getenv("LOG_LEVEL", "INFO")

    numerics: NumericsConfig = field(default_factory=NumericsConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    paths: PathsConfig = field(default_factory=PathsConfig)

    def validate(self) -> bool:
        """Validate configuration."""
        if self.numerics.precision not in PRECISIONS:
            raise ValueError(f"AXIAL_PRECISION must be one of {PRECISIONS}, got {self.numerics.precision!r}")
        if self.train.precision not in PRECISIONS:
            raise ValueError(f"AXIAL_TRAIN_PRECISION must be one of {PRECISIONS}, got {self.train.precision!r}")
        if self.numerics.workers < 1:
            raise ValueError("AXIAL_WORKERS must be at least 1")
        if self.bench.repetitions < 1:
            raise ValueError("AXIAL_BENCH_REPETITIONS must be at least 1")
        if self.train.checkpoint_every < 0:
            raise ValueError("AXIAL_CHECKPOINT_EVERY must be non-negative")
        return True


# Global config instance
config = Config()
