"""
Analytic parameter and multiply-add accounting.

Counting convention: one multiply-add is one M-Add; batch norm, softmax,
pooling, activations and residual adds are not counted. Convolutions count
h_out * w_out * c_out * c_in * k^2. Attention layers count their q/k/v
projections at input resolution plus, for every (query, key) pair of a
boundary-clipped window and every head, the logit products (d_q each for
q.k, q.r_q, k.r_k as enabled) and the value retrievals (d_out each for a.v
and a.r_v as enabled). The classifier counts c_in * classes.
"""
import logging
from typing import Optional

from ..core.models import CostReport, CostRow, ModelSpec, PositionalMode, Span
from ..model.attention import table_radius
from ..model.plan import LayerKind, LayerPlan, plan_model

logger = logging.getLogger(__name__)

CONVENTION = (
    "1 multiply-add = 1 M-Add; BN, softmax, pooling, activations and adds excluded; "
    "attention windows counted at their clipped sizes"
)


def window_members(length: int, span: Span) -> int:
    """Sum over positions of the clipped 1D window size along an axis."""
    if span.is_global:
        return length * length
    r = span.radius
    return sum(min(o + r, length - 1) - max(o - r, 0) + 1 for o in range(length))


def pair_cost(mode: PositionalMode, d_q: int, d_out: int) -> int:
    """Multiply-adds per (query, key) pair and head."""
    if mode is PositionalMode.FULL:
        return 3 * d_q + 2 * d_out
    if mode is PositionalMode.QUERY_ONLY:
        return 2 * d_q + d_out
    return d_q + d_out


def projection_width(layer: LayerPlan) -> int:
    cfg = layer.attention
    return cfg.heads * (2 * cfg.d_q + cfg.d_out)


def table_params(layer: LayerPlan) -> int:
    cfg = layer.attention
    radius = table_radius(cfg.span, layer.table_length, layer.table_extent)
    side = 2 * radius + 1
    rows = side * side if layer.kind is LayerKind.PLANAR_ATTENTION else side
    widths = {PositionalMode.NONE: 0, PositionalMode.QUERY_ONLY: cfg.d_q,
              PositionalMode.FULL: 2 * cfg.d_q + cfg.d_out}[cfg.positional_mode]
    return rows * widths


def layer_params(layer: LayerPlan) -> int:
    kind = layer.kind
    if kind is LayerKind.CONV:
        return layer.kernel * layer.kernel * layer.c_in * layer.c_out
    if kind is LayerKind.CONV1X1:
        return layer.c_in * layer.c_out
    if kind is LayerKind.BATCH_NORM:
        return 2 * layer.c_out
    if kind is LayerKind.CLASSIFIER:
        return layer.c_in * layer.c_out + layer.c_out
    if kind in (LayerKind.AXIAL_ATTENTION, LayerKind.PLANAR_ATTENTION):
        cfg = layer.attention
        count = cfg.d_in * projection_width(layer) + table_params(layer)
        if layer.bn is not None and layer.bn.qkv:
            count += 2 * projection_width(layer)
        if layer.bn is not None and layer.bn.output:
            count += 2 * cfg.total_out
        return count
    return 0


def attention_pairs(layer: LayerPlan, nominal: bool = False) -> int:
    """(query, key) pairs of one image, clipped at borders unless ``nominal``."""
    cfg = layer.attention
    h, w = layer.in_hw
    if nominal and not cfg.span.is_global:
        m = cfg.span.m
        return h * w * (m * m if layer.kind is LayerKind.PLANAR_ATTENTION else m)
    if layer.kind is LayerKind.PLANAR_ATTENTION:
        return window_members(h, cfg.span) * window_members(w, cfg.span)
    if cfg.axis.index == 1:
        return w * window_members(h, cfg.span)
    return h * window_members(w, cfg.span)


def layer_madds(layer: LayerPlan, nominal: bool = False) -> int:
    kind = layer.kind
    h_out, w_out = layer.out_hw
    if kind is LayerKind.CONV:
        return h_out * w_out * layer.c_out * layer.c_in * layer.kernel * layer.kernel
    if kind is LayerKind.CONV1X1:
        return h_out * w_out * layer.c_out * layer.c_in
    if kind is LayerKind.CLASSIFIER:
        return layer.c_in * layer.c_out
    if kind in (LayerKind.AXIAL_ATTENTION, LayerKind.PLANAR_ATTENTION):
        cfg = layer.attention
        h, w = layer.in_hw
        projections = h * w * cfg.d_in * projection_width(layer)
        window = attention_pairs(layer, nominal) * cfg.heads * pair_cost(cfg.positional_mode, cfg.d_q, cfg.d_out)
        return projections + window
    return 0


def _report(spec: ModelSpec, resolution: int) -> CostReport:
    # parameters follow the build resolution (Global tables); M-Adds follow ``resolution``
    built = list(plan_model(spec, spec.resolution).layers())
    run = list(plan_model(spec, resolution).layers())
    rows = [CostRow(b.name, b.kind.value, layer_params(b), layer_madds(r)) for b, r in zip(built, run)]
    placement = spec.bn_placement
    report = CostReport(
        model=spec.name, resolution=resolution, rows=rows, convention=CONVENTION,
        metadata={"spec": spec.to_dict(), "bn_placement": placement.to_dict()},
    )
    logger.debug(f"{spec.name} at {resolution}px: {report.summary()}")
    return report


def count_params(spec: ModelSpec) -> CostReport:
    """Exact parameter counts per layer: weights, BN affine, positional tables, classifier."""
    return _report(spec, spec.resolution)


def count_madds(spec: ModelSpec, resolution: Optional[int] = None) -> CostReport:
    """Multiply-adds per layer for one image at ``resolution``."""
    return _report(spec, resolution or spec.resolution)
