"""
Wall-clock micro-benchmarks of the attention kernels.

Samples come from ``timeit.Timer.repeat``; each reported value is the median
nanoseconds of one kernel call with the interquartile range as spread.
Kernels run in 32-bit without recording or finite checks.
"""
import logging
import timeit
from typing import Any, Callable, Dict, List, Optional, Sequence, Union

import numpy as np

from ..core.config import config
from ..core.errors import BenchmarkError, ConfigError
from ..core.models import AxialAttentionConfig, Axis, Precision, PositionalMode, SweepResult
from ..core.tensor import Tape, Tensor
from ..model import attention
from ..verify.harness import ShapeCase

logger = logging.getLogger(__name__)

Runner = Callable[[], Any]
RunnerFactory = Callable[[ShapeCase, np.random.Generator, int], Runner]

MAX_NUMBER = 1 << 20


def _axial_runner(axis: Axis) -> RunnerFactory:
    def factory(case: ShapeCase, rng: np.random.Generator, workers: int) -> Runner:
        cfg = AxialAttentionConfig(axis, case.span, case.heads, case.d_in, case.d_q, case.d_out, PositionalMode.FULL)
        length = case.height if axis is Axis.HEIGHT else case.width
        params = attention.init_attention_params(cfg, length, rng, Precision.FLOAT32)
        x = _input(case, rng)
        return lambda: attention.axial_attention(x, params, cfg, workers)
    return factory


def _planar_runner(mode: PositionalMode) -> RunnerFactory:
    def factory(case: ShapeCase, rng: np.random.Generator, workers: int) -> Runner:
        cfg = AxialAttentionConfig(Axis.WIDTH, case.span, case.heads, case.d_in, case.d_q, case.d_out, mode)
        params = attention.init_attention_params(cfg, max(case.height, case.width), rng, Precision.FLOAT32, planar=True)
        x = _input(case, rng)
        if mode is PositionalMode.NONE:
            return lambda: attention.global_attention_2d(x, params)
        if mode is PositionalMode.QUERY_ONLY:
            return lambda: attention.local_attention_2d(x, params, case.span)
        return lambda: attention.ps_attention_2d(x, params, case.span)
    return factory


def _input(case: ShapeCase, rng: np.random.Generator) -> Tensor:
    shape = (case.batch, case.height, case.width, case.d_in)
    return Tensor(rng.standard_normal(shape), dtype=np.float32)


TARGETS: Dict[str, RunnerFactory] = {
    "axial_attention": _axial_runner(Axis.WIDTH),
    "axial_attention_width": _axial_runner(Axis.WIDTH),
    "axial_attention_height": _axial_runner(Axis.HEIGHT),
    "global_attention_2d": _planar_runner(PositionalMode.NONE),
    "local_attention_2d": _planar_runner(PositionalMode.QUERY_ONLY),
    "ps_attention_2d": _planar_runner(PositionalMode.FULL),
}


def _variable(shapes: Sequence[ShapeCase]) -> str:
    geometry = {(s.batch, s.height, s.width, s.d_in, s.heads, s.d_q, s.d_out) for s in shapes}
    return "span" if len(geometry) == 1 and len(shapes) > 1 else "positions"


def _value(case: ShapeCase, variable: str) -> float:
    if variable == "span":
        return float(case.span.m if not case.span.is_global else max(case.height, case.width))
    return float(case.batch * case.height * case.width)


def _timed(runner: Runner, repetitions: int, min_time: float, label: str) -> List[float]:
    """Per-call seconds of ``repetitions`` samples, raising the loop count until a sample lasts ``min_time``."""
    timer = timeit.Timer(runner)
    number = 1
    while True:
        elapsed = timer.timeit(number)
        if elapsed >= min_time or number >= MAX_NUMBER:
            break
        number *= 10
    if number > 1:
        logger.warning(f"{label}: one call is below the timer resolution target {min_time:g}s, timing {number} calls per sample")
    return [t / number for t in timer.repeat(repeat=repetitions, number=number)]


def bench_runtime(target: Union[str, RunnerFactory], shapes: Sequence[ShapeCase],
                  repetitions: Optional[int] = None, warmup: Optional[int] = None, workers: int = 1,
                  min_time: Optional[float] = None, seed: int = 0) -> SweepResult:
    """
    Median nanoseconds per call of ``target`` for every shape.

    ``target`` names one of ``TARGETS`` or is a factory returning a zero-argument
    callable. Shapes differing only in span are reported against the span;
    otherwise against the number of positions. Non-monotone growth is reported
    in ``warnings``.
    """
    repetitions = config.bench.repetitions if repetitions is None else repetitions
    warmup = config.bench.warmup if warmup is None else warmup
    min_time = config.bench.min_time if min_time is None else min_time
    if repetitions < 1:
        raise BenchmarkError(f"repetitions must be at least 1, got {repetitions}")
    if not shapes:
        raise BenchmarkError("no shapes to benchmark")
    if isinstance(target, str):
        if target not in TARGETS:
            raise ConfigError(f"unknown bench target {target!r}; choose from {sorted(TARGETS)}")
        name, factory = target, TARGETS[target]
    else:
        name, factory = getattr(target, "__name__", "custom"), target

    variable = _variable(shapes)
    rng = np.random.default_rng(seed)
    medians: List[float] = []
    spread: List[float] = []
    with Tape(Precision.FLOAT32, check_finite=False, recording=False):
        for case in shapes:
            runner = factory(case, rng, workers)
            for _ in range(warmup):
                runner()
            samples = np.asarray(_timed(runner, repetitions, min_time, f"{name} {case.describe()}")) * 1e9
            q1, median, q3 = np.percentile(samples, [25, 50, 75])
            medians.append(float(median))
            spread.append(float(q3 - q1))
            logger.debug(f"{name} {case.describe()}: {median:.0f} ns (IQR {q3 - q1:.0f})")

    values = [_value(case, variable) for case in shapes]
    warnings = []
    order = sorted(range(len(values)), key=lambda i: values[i])
    for a, b in zip(order, order[1:]):
        if values[b] > values[a] and medians[b] < medians[a]:
            warnings.append(f"runtime fell from {medians[a]:.0f} ns at {variable}={values[a]:g} "
                            f"to {medians[b]:.0f} ns at {variable}={values[b]:g}")
    for w in warnings:
        logger.warning(f"{name}: {w}")
    logger.info(f"benchmarked {name} over {len(shapes)} shapes, {repetitions} repetitions, {workers} worker(s)")
    return SweepResult(
        variable=variable, values=values, measurements=medians, unit="ns", spread=spread, warnings=warnings,
        metadata={"target": name, "repetitions": repetitions, "warmup": warmup, "workers": workers,
                  "shapes": [case.describe() for case in shapes], "seed": seed},
    )
