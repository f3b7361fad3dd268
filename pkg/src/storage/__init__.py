"""
Storage

Checkpoint container, attention-map export and the run configuration schema.
"""

from .checkpoint import load_checkpoint, load_dataset, load_model, save_checkpoint, save_dataset, save_model
from .export import dump_attention
from .run_config import RunConfig, config_hash, load_run_config

__all__ = [
    "load_checkpoint",
    "load_dataset",
    "load_model",
    "save_checkpoint",
    "save_dataset",
    "save_model",
    "dump_attention",
    "RunConfig",
    "config_hash",
    "load_run_config",
]
