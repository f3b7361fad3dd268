"""
Oracle sweeps and gradient checks.

``verify_kernels`` runs every fast kernel against its nested-loop oracle on a
random grid of small shapes; ``gradcheck`` compares tape gradients with
central finite differences for every parameter group and the input.
"""
import logging
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np

from ..core import ops
from ..core.errors import AbsentGradientError, ConfigError, ContractError, NonDeterministicTargetError
from ..core.models import (
    AxialAttentionConfig,
    Axis,
    Mode,
    ModelSpec,
    OracleReport,
    PositionalMode,
    Precision,
    Span,
)
from ..core.tensor import Tape, Tensor, backward, finite_difference_grad, no_grad
from ..model import attention
from ..model.attention import AttentionParams, init_attention_params
from ..model.layers import BatchNorm, Layer
from ..model.resnet import build_axial_resnet
from . import oracles

logger = logging.getLogger(__name__)

FORWARD_THRESHOLD = 1e-10
GRADCHECK_TOLERANCE = 1e-4
# gradient magnitudes below this are compared absolutely
GRADIENT_FLOOR = 1e-4
TINY = 1e-300


@dataclass(frozen=True)
class ShapeCase:
    """One random instance: batch, lattice, channels and span."""
    batch: int
    height: int
    width: int
    d_in: int
    heads: int
    d_q: int
    d_out: int
    span: Span

    def describe(self) -> str:
        return (f"b{self.batch} {self.height}x{self.width} d_in={self.d_in} N={self.heads} "
                f"d_q={self.d_q} d_out={self.d_out} {self.span}")


KernelFn = Callable[[Tensor, AttentionParams, Span], Tensor]


@dataclass(frozen=True)
class KernelCase:
    """A fast kernel paired with its reference."""
    name: str
    fast: KernelFn
    oracle: KernelFn
    mode: PositionalMode
    planar: bool
    axis: Axis = Axis.WIDTH


def _axial(axis: Axis) -> KernelFn:
    def run(x: Tensor, params: AttentionParams, span: Span) -> Tensor:
        cfg = AxialAttentionConfig(axis, span, params.heads, params.d_in, params.d_q, params.d_out, PositionalMode.FULL)
        return attention.axial_attention(x, params, cfg)
    return run


DEFAULT_KERNELS: List[KernelCase] = [
    KernelCase("global_attention_2d", lambda x, p, s: attention.global_attention_2d(x, p),
               lambda x, p, s: oracles.oracle_global_2d(x, p), PositionalMode.NONE, True),
    KernelCase("local_attention_2d", attention.local_attention_2d, oracles.oracle_local_2d, PositionalMode.QUERY_ONLY, True),
    KernelCase("ps_attention_2d", attention.ps_attention_2d, oracles.oracle_ps_2d, PositionalMode.FULL, True),
    KernelCase("axial_attention_height", _axial(Axis.HEIGHT),
               lambda x, p, s: oracles.oracle_axial(x, p, Axis.HEIGHT, s), PositionalMode.FULL, False, Axis.HEIGHT),
    KernelCase("axial_attention_width", _axial(Axis.WIDTH),
               lambda x, p, s: oracles.oracle_axial(x, p, Axis.WIDTH, s), PositionalMode.FULL, False, Axis.WIDTH),
]

SPAN_CHOICES = (Span.local(1), Span.local(3), Span.local(5), Span.global_())


def random_grid(seed_count: int, seed: int = 0, max_extent: int = 8, max_channels: int = 8) -> List[ShapeCase]:
    """``seed_count`` random shapes with extents and channel totals bounded as given."""
    rng = np.random.default_rng(seed)
    grid = []
    for _ in range(seed_count):
        heads = int(rng.integers(1, 3))
        per_head = max(1, max_channels // heads)
        grid.append(ShapeCase(
            batch=int(rng.integers(1, 3)),
            height=int(rng.integers(1, max_extent + 1)),
            width=int(rng.integers(1, max_extent + 1)),
            d_in=int(rng.integers(1, max_channels + 1)),
            heads=heads,
            d_q=int(rng.integers(1, per_head + 1)),
            d_out=int(rng.integers(1, per_head + 1)),
            span=SPAN_CHOICES[int(rng.integers(len(SPAN_CHOICES)))],
        ))
    return grid


def case_params(case: ShapeCase, kernel: KernelCase, rng: np.random.Generator) -> AttentionParams:
    length = max(case.height, case.width) if kernel.planar else (
        case.height if kernel.axis is Axis.HEIGHT else case.width)
    cfg = AxialAttentionConfig(kernel.axis, case.span, case.heads, case.d_in, case.d_q, case.d_out, kernel.mode)
    return init_attention_params(cfg, length, rng, Precision.FLOAT64, planar=kernel.planar)


def verify_kernels(seed_count: int = 100, shape_grid: Optional[Sequence[ShapeCase]] = None,
                   kernels: Optional[Sequence[KernelCase]] = None, threshold: float = FORWARD_THRESHOLD,
                   seed: int = 0) -> List[OracleReport]:
    """Run every kernel against its oracle over the grid; failures are report entries, never exceptions."""
    grid = list(shape_grid) if shape_grid is not None else random_grid(seed_count, seed)
    reports = []
    for kernel in kernels or DEFAULT_KERNELS:
        report = OracleReport(kernel=kernel.name, threshold=threshold)
        rng = np.random.default_rng(seed)
        worst_scale = 0.0
        with Tape(Precision.FLOAT64, recording=False):
            for case in grid:
                params = case_params(case, kernel, rng)
                x = Tensor(rng.normal(size=(case.batch, case.height, case.width, case.d_in)))
                fast = kernel.fast(x, params, case.span).data
                ref = kernel.oracle(x, params, case.span).data
                deviation = float(np.max(np.abs(fast - ref))) if ref.size else 0.0
                if not np.isfinite(deviation):
                    deviation = float("inf")
                report.shapes.append(case.describe())
                if deviation > report.max_abs:
                    report.max_abs = deviation
                    worst_scale = float(np.max(np.abs(ref))) if ref.size else 0.0
                    if deviation > threshold:
                        report.notes.append(f"{case.describe()}: deviation {deviation:.3e}")
        report.max_rel = report.max_abs / max(worst_scale, TINY) if report.max_abs else 0.0
        status = "pass" if report.passed else "FAIL"
        logger.info(f"verify {kernel.name}: {len(grid)} shapes, max deviation {report.max_abs:.3e} [{status}]")
        reports.append(report)
    return reports


@dataclass
class GradTarget:
    """
    A scalar objective of an input and named parameter groups.

    ``loss`` must evaluate against the current ``.data`` of ``inputs`` and
    ``parameters``; gradcheck perturbs them in place.
    """
    name: str
    loss: Callable[[Tensor], Tensor]
    x: Tensor
    parameters: Dict[str, Tensor] = field(default_factory=dict)
    layer: Optional[Layer] = None
    mode: Mode = Mode.EVAL


def _relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Worst per-element |a - n| / max(|a|, |n|, floor)."""
    if analytic.size == 0:
        return 0.0
    scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), GRADIENT_FLOOR)
    return float(np.max(np.abs(analytic - numeric) / scale))


def _sample_indices(size: int, limit: Optional[int], rng: np.random.Generator) -> Optional[np.ndarray]:
    if limit is None or size <= limit:
        return None
    return np.sort(rng.choice(size, limit, replace=False))


def gradcheck(target: GradTarget, tolerance: float = GRADCHECK_TOLERANCE, step: float = 1e-5,
              max_elements: Optional[int] = None, seed: int = 0) -> OracleReport:
    """
    Worst relative error per parameter group and for the input.

    ``max_elements`` caps the coordinates differenced per group (sampled
    without replacement); analytic gradients are always computed in full.
    """
    if target.x.dtype != np.float64 or any(p.dtype != np.float64 for p in target.parameters.values()):
        raise ContractError(f"gradcheck {target.name} needs a float64 target")
    if target.mode is Mode.TRAIN and target.layer is not None:
        live = [m.name for m in target.layer.modules() if isinstance(m, BatchNorm) and not m.state.frozen]
        if live:
            raise NonDeterministicTargetError(
                f"{target.name} runs train-mode batch norm with statistic updates ({live[0]}, ...); freeze statistics first"
            )
    with no_grad():
        first, second = target.loss(target.x).item(), target.loss(target.x).item()
    if first != second:
        raise NonDeterministicTargetError(f"{target.name} evaluates to {first!r} then {second!r}")

    x = target.x
    x.requires_grad = True
    groups = {"input": x, **target.parameters}
    with Tape(Precision.FLOAT64) as tape:
        loss = target.loss(x)
    backward(tape, loss)

    rng = np.random.default_rng(seed)
    report = OracleReport(kernel=target.name, threshold=tolerance)
    for name, tensor in groups.items():
        try:
            analytic = tape.grad(tensor)
        except AbsentGradientError:
            analytic = np.zeros_like(tensor.data)
        indices = _sample_indices(tensor.size, max_elements, rng)

        def objective(perturbed: Tensor, tensor=tensor) -> Tensor:
            saved = tensor.data
            tensor.data = perturbed.data
            try:
                return target.loss(x)
            finally:
                tensor.data = saved

        numeric = finite_difference_grad(objective, tensor, step, indices=indices).data
        if indices is not None:
            a, n = analytic.reshape(-1)[indices], numeric.reshape(-1)[indices]
        else:
            a, n = analytic, numeric
        error = _relative_error(a, n)
        report.groups[name] = error
        report.max_abs = max(report.max_abs, float(np.max(np.abs(a - n))))
        report.max_rel = max(report.max_rel, error)
        report.shapes.append(f"{name} {tensor.shape}")
    status = "pass" if report.passed else "FAIL"
    logger.info(f"gradcheck {target.name}: worst relative error {report.max_rel:.3e} over {len(groups)} groups [{status}]")
    return report


def _weighted_sum(y: Tensor, weights: np.ndarray) -> Tensor:
    return ops.reduce_sum(ops.mul(y, Tensor(weights)))


def linear_target(d_in: int = 3, d_out: int = 5, seed: int = 0) -> GradTarget:
    """x -> sum(R * (x W^T)) for a random projection."""
    rng = np.random.default_rng(seed)
    w = Tensor(rng.normal(size=(d_out, d_in)), requires_grad=True, name="weight")
    x = Tensor(rng.normal(size=(1, 2, 2, d_in)))
    weights = rng.normal(size=(1, 2, 2, d_out))
    return GradTarget("linear", lambda t: _weighted_sum(ops.linear(t, w), weights), x, {"weight": w})


def kernel_target(kernel: str = "axial_attention_width", case: Optional[ShapeCase] = None, seed: int = 0) -> GradTarget:
    """One fast kernel with all of its projection and table groups."""
    rng = np.random.default_rng(seed)
    kernel_case = next((k for k in DEFAULT_KERNELS if k.name == kernel), None)
    if kernel_case is None:
        raise ConfigError(f"unknown kernel {kernel!r}; choose from {[k.name for k in DEFAULT_KERNELS]}")
    case = case or ShapeCase(1, 4, 5, 4, 2, 2, 3, Span.local(3))
    params = case_params(case, kernel_case, rng)
    x = Tensor(rng.normal(size=(case.batch, case.height, case.width, case.d_in)))
    y_shape = (case.batch, case.height, case.width, case.heads * case.d_out)
    weights = rng.normal(size=y_shape)
    groups = {name: t for name, t in params.named_tensors().items()
              if name.startswith("w_") or t in params.tables(kernel_case.mode)}
    return GradTarget(kernel, lambda t: _weighted_sum(kernel_case.fast(t, params, case.span), weights), x, groups)


def layer_target(layer: Layer, x: np.ndarray, mode: Mode = Mode.EVAL, seed: int = 0, name: Optional[str] = None) -> GradTarget:
    """Any layer or block under a fixed random read-out of its output."""
    rng = np.random.default_rng(seed)
    xt = Tensor(x)
    with no_grad():
        out_shape = layer(xt, mode).shape
    weights = rng.normal(size=out_shape)
    return GradTarget(name or layer.name, lambda t: _weighted_sum(layer(t, mode), weights), xt,
                      dict(layer.named_parameters()), layer, mode)


def block_target(spec: Optional[ModelSpec] = None, seed: int = 0) -> GradTarget:
    """The first residual block of a miniature model, in eval mode, with a randomized ``bn_up`` gamma."""
    spec = spec or miniature_spec()
    model = build_axial_resnet(spec, seed=seed, precision=Precision.FLOAT64)
    block = model.blocks[1]
    rng = np.random.default_rng(seed + 1)
    for name, tensor in block.named_parameters():
        if name.endswith("bn_up.gamma"):
            tensor.data = rng.normal(size=tensor.shape)
    height, width = block.plan.in_hw
    x = rng.normal(size=(1, height, width, block.plan.in_channels))
    return layer_target(block, x, Mode.EVAL, seed=seed, name=block.name)


def model_target(spec: Optional[ModelSpec] = None, batch: int = 2, seed: int = 0, mode: Mode = Mode.TRAIN) -> GradTarget:
    """
    Cross-entropy of a miniature model; classifier and residual gammas are
    randomized so every parameter group carries gradient.
    """
    spec = spec or miniature_spec()
    model = build_axial_resnet(spec, seed=seed, precision=Precision.FLOAT64)
    if mode is Mode.TRAIN:
        for bn in model.batch_norms():
            bn.state.frozen = True
    rng = np.random.default_rng(seed + 1)
    for name, tensor in model.named_parameters():
        if name.endswith("bn_up.gamma") or name.startswith("head.fc"):
            tensor.data = rng.normal(size=tensor.shape)
    x = Tensor(rng.normal(size=(batch, spec.resolution, spec.resolution, spec.in_channels)))
    labels = rng.integers(0, spec.num_classes, size=batch)

    def loss(t: Tensor) -> Tensor:
        return ops.softmax_cross_entropy(model(t, mode), labels)

    return GradTarget(spec.name, loss, x, dict(model.named_parameters()), model, mode)


def miniature_spec(resolution: int = 8, channels: int = 8, classes: int = 3) -> ModelSpec:
    """Two axial blocks on an 8x8x8 input."""
    return ModelSpec.from_dict({
        "name": "miniature-axial",
        "stem": "pointwise",
        "stage_blocks": [1, 1],
        "stage_strides": [1, 2],
        "base_width": 8,
        "expansion": 2,
        "stem_channels": 8,
        "heads": 2,
        "spans": ["global", "global"],
        "num_classes": classes,
        "in_channels": channels,
        "resolution": resolution,
    })
