"""
Complexity sweeps over the attention span and the width multiplier.

Layer sweeps count a padded layer (every query sees the nominal window) so
the fits test the O(h*w*m) model; exact boundary-clipped counts travel in
the result metadata.
"""
import logging
from typing import Dict, List, Optional, Sequence

import numpy as np

from ..core.errors import DomainError
from ..core.models import AxialAttentionConfig, Axis, FitResult, ModelSpec, Span, SweepResult
from ..model.plan import LayerKind, LayerPlan, local_spans
from .costs import count_madds, count_params, layer_madds

logger = logging.getLogger(__name__)

DEFAULT_SPANS = (5, 9, 17, 33, 65)


def fit_polynomial(x: Sequence[float], y: Sequence[float], degree: int) -> FitResult:
    """Least-squares fit of ``y`` by a polynomial in ``x``, highest power first."""
    if len(x) != len(y) or len(x) <= degree:
        raise DomainError(f"a degree-{degree} fit needs more than {degree} points, got {len(x)}")
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    coefficients = np.polyfit(xs, ys, degree)
    residuals = ys - np.polyval(coefficients, xs)
    ss_res = float(np.sum(residuals ** 2))
    ss_tot = float(np.sum((ys - ys.mean()) ** 2))
    if ss_tot == 0.0:
        r_squared = 1.0 if np.allclose(residuals, 0.0) else 0.0
    else:
        r_squared = 1.0 - ss_res / ss_tot
    return FitResult(degree, [float(c) for c in coefficients], r_squared, [float(r) for r in residuals])


def _check_positive(values: Sequence[float], what: str) -> None:
    if not values:
        raise DomainError(f"empty {what} list")
    if any(v <= 0 for v in values):
        raise DomainError(f"{what} values must be strictly positive, got {list(values)}")


def _layer(kind: LayerKind, cfg: AxialAttentionConfig, resolution: int) -> LayerPlan:
    hw = (resolution, resolution)
    return LayerPlan(f"sweep.{kind.value}", kind, cfg.d_in, cfg.total_out, hw, hw,
                     attention=cfg, table_length=resolution)


def span_sweep(layer_config: AxialAttentionConfig, spans: Sequence[int] = DEFAULT_SPANS,
               resolution: int = 65) -> SweepResult:
    """
    M-Adds of one axial layer and one 2D local layer per span m on a square input.

    ``measurements`` are the axial layer's; the 2D layer's counts sit in
    ``metadata["planar"]``. Fits: ``axial`` (degree 1), ``planar`` (degree 2)
    and ``planar_linear`` (degree 1, for contrast).
    """
    _check_positive(spans, "span")
    if resolution < 1:
        raise DomainError(f"resolution must be positive, got {resolution}")
    too_wide = [m for m in spans if m > 2 * resolution - 1]
    if too_wide:
        raise DomainError(f"spans {too_wide} exceed the {2 * resolution - 1} offsets of a {resolution}-wide axis")

    axial, planar, axial_clipped, planar_clipped = [], [], [], []
    for m in spans:
        cfg = AxialAttentionConfig(layer_config.axis, Span.local(m), layer_config.heads, layer_config.d_in,
                                   layer_config.d_q, layer_config.d_out, layer_config.positional_mode)
        axial_layer = _layer(LayerKind.AXIAL_ATTENTION, cfg, resolution)
        planar_layer = _layer(LayerKind.PLANAR_ATTENTION, cfg, resolution)
        axial.append(float(layer_madds(axial_layer, nominal=True)))
        planar.append(float(layer_madds(planar_layer, nominal=True)))
        axial_clipped.append(layer_madds(axial_layer))
        planar_clipped.append(layer_madds(planar_layer))

    values = [float(m) for m in spans]
    fits = {}
    if len(spans) > 2:
        fits["axial"] = fit_polynomial(values, axial, 1)
        fits["planar_linear"] = fit_polynomial(values, planar, 1)
    if len(spans) > 3:
        fits["planar"] = fit_polynomial(values, planar, 2)
    result = SweepResult(
        variable="span", values=values, measurements=axial, unit="madds", fits=fits,
        metadata={
            "layer": layer_config.to_dict(),
            "resolution": resolution,
            "planar": planar,
            "axial_clipped": axial_clipped,
            "planar_clipped": planar_clipped,
        },
    )
    logger.info(f"span sweep over {list(spans)} at {resolution}px: "
                + ", ".join(f"{k} R^2={f.r_squared:.5f}" for k, f in fits.items()))
    return result


def model_span_sweep(spec: ModelSpec, spans: Sequence[int] = DEFAULT_SPANS,
                     resolution: Optional[int] = None) -> SweepResult:
    """Whole-model parameters and M-Adds with every attention layer at Local(m)."""
    _check_positive(spans, "span")
    resolution = resolution or spec.resolution
    params: List[int] = []
    madds: List[float] = []
    for m in spans:
        variant = local_spans(spec, m)
        params.append(count_params(variant).total_params)
        madds.append(float(count_madds(variant, resolution).total_madds))
    values = [float(m) for m in spans]
    fits: Dict[str, FitResult] = {}
    if len(spans) > 2:
        fits["madds"] = fit_polynomial(values, madds, 1)
    logger.info(f"model span sweep of {spec.name}: params {params[0]:,}..{params[-1]:,}")
    return SweepResult("span", values, madds, "madds", fits,
                       metadata={"model": spec.name, "resolution": resolution, "params": params})


def width_sweep(spec: ModelSpec, multipliers: Sequence[float], resolution: Optional[int] = None) -> SweepResult:
    """Parameters and M-Adds across width multipliers."""
    _check_positive(multipliers, "multiplier")
    resolution = resolution or spec.resolution
    params: List[int] = []
    madds: List[float] = []
    for multiplier in multipliers:
        data = spec.to_dict()
        data["width_multiplier"] = multiplier
        data["name"] = f"{spec.name}-x{multiplier:g}"
        variant = ModelSpec.from_dict(data)
        params.append(count_params(variant).total_params)
        madds.append(float(count_madds(variant, resolution).total_madds))
    fits: Dict[str, FitResult] = {}
    if len(multipliers) > 3:
        fits["madds"] = fit_polynomial(list(multipliers), madds, 2)
    return SweepResult("width_multiplier", [float(m) for m in multipliers], madds, "madds", fits,
                       metadata={"model": spec.name, "resolution": resolution, "params": params})


def default_layer(d_in: int = 64, heads: int = 8, axis: Axis = Axis.WIDTH) -> AxialAttentionConfig:
    """The layer geometry sweeps use when none is given: d_out = d_in / heads, d_q = d_out / 2."""
    d_out = max(1, d_in // heads)
    return AxialAttentionConfig(axis, Span.local(1), heads, d_in, max(1, d_out // 2), d_out)
