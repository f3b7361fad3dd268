"""
Analysis

Parameter and multiply-add accounting, complexity sweeps and runtime benchmarks.
"""

from .bench import bench_runtime
from .costs import count_madds, count_params
from .sweep import model_span_sweep, span_sweep, width_sweep

__all__ = [
    "bench_runtime",
    "count_madds",
    "count_params",
    "model_span_sweep",
    "span_sweep",
    "width_sweep",
]
