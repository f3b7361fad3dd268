import numpy as np
import pytest

from src.analysis.bench import TARGETS, bench_runtime
from src.analysis.costs import (
    CONVENTION,
    count_madds,
    count_params,
    layer_madds,
    layer_params,
    pair_cost,
    table_params,
    window_members,
)
from src.analysis.sweep import default_layer, fit_polynomial, model_span_sweep, span_sweep, width_sweep
from src.core.errors import BenchmarkError, ConfigError, DomainError
from src.core.models import AxialAttentionConfig, Axis, BNPlacement, ModelSpec, PositionalMode, Span, StemType
from src.model.plan import LayerKind, LayerPlan, plan_model
from src.verify.harness import ShapeCase


def test_single_projection_parameters() -> None:
    plan = LayerPlan("proj", LayerKind.CONV1X1, 3, 5, (1, 1), (1, 1))
    assert layer_params(plan) == 15


def test_pointwise_conv_madds() -> None:
    plan = LayerPlan("proj", LayerKind.CONV1X1, 3, 4, (2, 2), (2, 2))
    assert layer_madds(plan) == 48


def test_conv_and_classifier_counts() -> None:
    conv = LayerPlan("conv", LayerKind.CONV, 3, 8, (8, 8), (4, 4), kernel=3, stride=2, padding=1)
    assert layer_params(conv) == 3 * 3 * 3 * 8
    assert layer_madds(conv) == 4 * 4 * 8 * 3 * 9
    fc = LayerPlan("fc", LayerKind.CLASSIFIER, 16, 10, (1, 1), (1, 1))
    assert layer_params(fc) == 16 * 10 + 10
    assert layer_madds(fc) == 160
    bn = LayerPlan("bn", LayerKind.BATCH_NORM, 6, 6, (4, 4), (4, 4))
    assert layer_params(bn) == 12
    assert layer_madds(bn) == 0


def test_window_members_clip_at_borders() -> None:
    assert window_members(5, Span.global_()) == 25
    assert window_members(5, Span.local(3)) == 2 + 3 + 3 + 3 + 2
    assert window_members(5, Span.local(1)) == 5
    assert window_members(2, Span.local(9)) == 4


def test_pair_cost_by_mode() -> None:
    assert pair_cost(PositionalMode.FULL, 8, 16) == 3 * 8 + 2 * 16
    assert pair_cost(PositionalMode.QUERY_ONLY, 8, 16) == 2 * 8 + 16
    assert pair_cost(PositionalMode.NONE, 8, 16) == 8 + 16


def test_attention_layer_counts() -> None:
    cfg = AxialAttentionConfig(Axis.WIDTH, Span.local(3), 2, 8, 2, 4)
    layer = LayerPlan("attn", LayerKind.AXIAL_ATTENTION, 8, 8, (4, 5), (4, 5), attention=cfg, table_length=5,
                      bn=BNPlacement())
    width = 2 * (2 * 2 + 4)
    tables = 5 * (2 * 2 + 4)
    assert layer_params(layer) == 8 * width + tables + 2 * width + 2 * 8
    pairs = 4 * window_members(5, Span.local(3))
    assert layer_madds(layer) == 4 * 5 * 8 * width + pairs * 2 * pair_cost(PositionalMode.FULL, 2, 4)
    assert layer_madds(layer, nominal=True) == 4 * 5 * 8 * width + 4 * 5 * 3 * 2 * pair_cost(PositionalMode.FULL, 2, 4)


def test_resnet50_reference_costs() -> None:
    spec = ModelSpec.resnet50()
    params = count_params(spec)
    madds = count_madds(spec, 224)
    assert params.total_params == pytest.approx(25.6e6, abs=0.05e6)
    assert madds.total_madds == pytest.approx(4.1e9, rel=0.03)
    assert madds.summary() == "25.6M / 4.1B"


@pytest.mark.parametrize("multiplier, params, madds", [
    (0.5, 12.4e6, 2.8e9),
    (0.75, 26.4e6, 5.7e9),
    (1.0, 45.6e6, 9.6e9),
])
def test_axial_resnet_costs_track_reference_scale(multiplier: float, params: float, madds: float) -> None:
    report = count_madds(ModelSpec.axial_resnet(multiplier), 224)
    assert report.total_params == pytest.approx(params, rel=0.03)
    assert report.total_madds == pytest.approx(madds, rel=0.05)


@pytest.mark.parametrize("multiplier, params, madds", [
    (0.5, 12.5e6, 3.3e9),
    (0.75, 26.5e6, 6.8e9),
    (1.0, 45.8e6, 11.6e9),
])
def test_full_axial_costs_track_reference_scale(multiplier: float, params: float, madds: float) -> None:
    spec = ModelSpec.axial_resnet(multiplier, StemType.FULL_AXIAL)
    report = count_madds(spec, 224)
    assert report.total_params == pytest.approx(params, rel=0.05)
    assert report.total_madds == pytest.approx(madds, rel=0.05)
    assert all(Span.local(15) == s for s in spec.spans)
    assert any(row.layer.startswith("stem.block") for row in report.rows)


def test_preset_tables_cover_the_input_extent() -> None:
    spec = ModelSpec.axial_resnet(0.5)
    assert spec.positional_extent == 224
    for layer in plan_model(spec).attention_layers():
        cfg = layer.attention
        assert table_params(layer) == (2 * 224 - 1) * (2 * cfg.d_q + cfg.d_out)


def test_positional_extent_only_widens_tables() -> None:
    cfg = AxialAttentionConfig(Axis.WIDTH, Span.local(3), 2, 8, 2, 4)
    narrow = LayerPlan("attn", LayerKind.AXIAL_ATTENTION, 8, 8, (4, 5), (4, 5), attention=cfg, table_length=5)
    wide = LayerPlan("attn", LayerKind.AXIAL_ATTENTION, 8, 8, (4, 5), (4, 5), attention=cfg, table_length=5,
                     table_extent=10)
    assert table_params(narrow) == 5 * 8
    assert table_params(wide) == 19 * 8
    assert layer_madds(wide) == layer_madds(narrow)


def test_params_do_not_change_with_run_resolution(tiny_local_spec: ModelSpec) -> None:
    at_8 = count_madds(tiny_local_spec, 8)
    at_16 = count_madds(tiny_local_spec, 16)
    assert at_8.total_params == at_16.total_params
    assert at_16.total_madds > at_8.total_madds


def test_report_rows_follow_plan(tiny_spec: ModelSpec) -> None:
    report = count_params(tiny_spec)
    names = [layer.name for layer in plan_model(tiny_spec).layers()]
    assert [row.layer for row in report.rows] == names
    assert report.convention == CONVENTION
    table = report.to_table()
    assert table.startswith(f"{tiny_spec.name} @ 8px")
    assert "total" in table
    csv_lines = report.to_csv().splitlines()
    assert csv_lines[0] == "layer,kind,params,madds"
    assert csv_lines[-1].startswith("total,,")
    assert report.to_dict()["metadata"]["bn_placement"] == {"qkv": True, "output": True}


def test_bn_placement_changes_parameter_count(tiny_spec: ModelSpec) -> None:
    data = tiny_spec.to_dict()
    data["bn_placement"] = {"qkv": False, "output": False}
    bare = ModelSpec.from_dict(data)
    assert count_params(bare).total_params < count_params(tiny_spec).total_params


def test_fit_polynomial_exact_line() -> None:
    fit = fit_polynomial([1, 2, 3, 4], [3, 5, 7, 9], 1)
    assert fit.coefficients == pytest.approx([2.0, 1.0])
    assert fit.r_squared == pytest.approx(1.0)
    with pytest.raises(DomainError):
        fit_polynomial([1, 2], [1, 2], 2)


def test_fit_polynomial_constant_series() -> None:
    assert fit_polynomial([1, 2, 3], [4, 4, 4], 1).r_squared == 1.0


def test_span_sweep_is_linear_for_axial_and_quadratic_for_planar() -> None:
    result = span_sweep(default_layer(), (5, 9, 17, 33, 65), 65)
    assert result.fits["axial"].r_squared > 0.999
    assert result.fits["planar"].r_squared > 0.999
    assert result.fits["planar_linear"].r_squared < result.fits["planar"].r_squared
    assert result.measurements == sorted(result.measurements)
    assert len(result.metadata["axial_clipped"]) == 5
    assert all(c <= n for c, n in zip(result.metadata["axial_clipped"], result.measurements))


def test_span_sweep_validation() -> None:
    with pytest.raises(DomainError):
        span_sweep(default_layer(), [], 65)
    with pytest.raises(DomainError):
        span_sweep(default_layer(), [5, -3], 65)
    with pytest.raises(DomainError):
        span_sweep(default_layer(), [5, 9], 4)


def test_span_sweep_with_two_points_has_no_fits() -> None:
    result = span_sweep(default_layer(), [5, 9], 17)
    assert result.fits == {}
    assert len(result.values) == 2


def test_model_span_sweep_keeps_parameters_nearly_flat(tiny_spec: ModelSpec) -> None:
    result = model_span_sweep(tiny_spec, [1, 3, 5], resolution=8)
    params = result.metadata["params"]
    assert params == sorted(params)
    assert result.measurements == sorted(result.measurements)
    assert "madds" in result.fits


def test_width_sweep_grows_quadratically() -> None:
    result = width_sweep(ModelSpec.axial_resnet(0.5), [0.375, 0.5, 0.75, 1.0], resolution=224)
    assert result.measurements == sorted(result.measurements)
    assert result.fits["madds"].r_squared > 0.99
    assert result.to_csv().splitlines()[0] == "width_multiplier,madds,spread"


def test_width_sweep_rejects_non_positive() -> None:
    with pytest.raises(DomainError):
        width_sweep(ModelSpec.resnet50(), [0.0, 0.5])


def bench_shapes(spans, resolution: int = 9):
    return [ShapeCase(1, resolution, resolution, 4, 2, 1, 2, Span.parse(m)) for m in spans]


def test_bench_reports_medians_per_span() -> None:
    result = bench_runtime("axial_attention", bench_shapes([3, 5]), repetitions=3, warmup=0, min_time=1e-6)
    assert result.variable == "span"
    assert result.values == [3.0, 5.0]
    assert result.unit == "ns"
    assert all(m > 0 for m in result.measurements)
    assert len(result.spread) == 2
    assert result.metadata["repetitions"] == 3
    assert result.metadata["target"] == "axial_attention"


def test_bench_positions_when_geometry_varies() -> None:
    shapes = [ShapeCase(1, 4, 4, 4, 2, 1, 2, Span.local(3)), ShapeCase(1, 6, 6, 4, 2, 1, 2, Span.local(3))]
    result = bench_runtime("ps_attention_2d", shapes, repetitions=2, warmup=1, min_time=1e-6)
    assert result.variable == "positions"
    assert result.values == [16.0, 36.0]


def test_bench_custom_factory() -> None:
    calls = []

    def factory(case, rng, workers):
        return lambda: calls.append(case.span)

    result = bench_runtime(factory, bench_shapes([3]), repetitions=2, warmup=1, min_time=0.0)
    assert result.metadata["target"] == "factory"
    assert len(calls) >= 3


def test_bench_validation() -> None:
    with pytest.raises(BenchmarkError):
        bench_runtime("axial_attention", bench_shapes([3]), repetitions=0)
    with pytest.raises(BenchmarkError):
        bench_runtime("axial_attention", [])
    with pytest.raises(ConfigError):
        bench_runtime("conv3x3", bench_shapes([3]), repetitions=1)
    assert "axial_attention_height" in TARGETS


@pytest.mark.slow
def test_local_axial_runtime_follows_span_not_axis_length() -> None:
    shapes = [ShapeCase(1, 4, 512, 16, 2, 4, 8, span) for span in (Span.local(9), Span.global_())]
    result = bench_runtime("axial_attention", shapes, repetitions=5, warmup=1)
    local, full = result.measurements
    assert 4 * local < full
    assert np.isfinite(result.spread).all()
