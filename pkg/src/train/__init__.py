"""
Train

Synthetic long-range task, momentum optimizer, training and evaluation loops.
"""

from .loop import evaluate, scale_stress, train
from .optimizer import MomentumSGD
from .task import Dataset, SyntheticLongRangeTask, generate_task, rescale_dataset

__all__ = [
    "evaluate",
    "scale_stress",
    "train",
    "MomentumSGD",
    "Dataset",
    "SyntheticLongRangeTask",
    "generate_task",
    "rescale_dataset",
]
