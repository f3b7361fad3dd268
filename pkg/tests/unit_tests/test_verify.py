import numpy as np
import pytest

from src.core import ops
from src.core.errors import ConfigError, ContractError, NonDeterministicTargetError, OracleSizeError
from src.core.models import AxialAttentionConfig, Axis, Mode, PositionalMode, Precision, Span
from src.core.tensor import Tensor
from src.model.attention import init_attention_params
from src.model.resnet import build_axial_resnet
from src.verify import oracles
from src.verify.harness import (
    DEFAULT_KERNELS,
    GradTarget,
    block_target,
    KernelCase,
    ShapeCase,
    gradcheck,
    kernel_target,
    layer_target,
    linear_target,
    miniature_spec,
    model_target,
    random_grid,
    verify_kernels,
)


def test_random_grid_is_seeded_and_bounded() -> None:
    grid = random_grid(20, seed=3)
    assert grid == random_grid(20, seed=3)
    assert all(1 <= c.height <= 8 and 1 <= c.width <= 8 for c in grid)
    assert all(c.heads * max(c.d_q, c.d_out) <= 8 for c in grid)


def test_every_kernel_matches_its_oracle() -> None:
    reports = verify_kernels(12, seed=7)
    assert [r.kernel for r in reports] == [k.name for k in DEFAULT_KERNELS]
    for report in reports:
        assert report.passed, report.notes
        assert len(report.shapes) == 12
        assert report.max_abs <= 1e-10


@pytest.mark.slow
def test_every_kernel_matches_its_oracle_over_a_hundred_shapes() -> None:
    for report in verify_kernels(100, seed=7):
        assert report.passed, report.notes
        assert len(report.shapes) == 100
        assert report.max_abs <= 1e-10


def test_span_one_and_full_span_cases() -> None:
    grid = [
        ShapeCase(1, 1, 1, 2, 1, 1, 1, Span.local(1)),
        ShapeCase(2, 3, 5, 3, 2, 2, 1, Span.local(1)),
        ShapeCase(1, 4, 4, 2, 1, 2, 3, Span.global_()),
        ShapeCase(1, 2, 6, 1, 1, 1, 1, Span.local(5)),
    ]
    assert all(r.passed for r in verify_kernels(shape_grid=grid))


def test_broken_kernel_is_reported_not_raised() -> None:
    good = DEFAULT_KERNELS[-1]
    broken = KernelCase("scaled_width", lambda x, p, s: ops.scale(good.fast(x, p, s), 1.001),
                        good.oracle, good.mode, good.planar, good.axis)
    (report,) = verify_kernels(4, kernels=[broken])
    assert not report.passed
    assert report.notes
    assert report.to_dict()["passed"] is False


def test_oracle_refuses_large_inputs(rng: np.random.Generator) -> None:
    cfg = AxialAttentionConfig(Axis.WIDTH, Span.local(3), 1, 2, 1, 1)
    params = init_attention_params(cfg, 17, rng)
    with pytest.raises(OracleSizeError):
        oracles.oracle_axial(np.zeros((1, 1, 17, 2)), params, Axis.WIDTH, 3)


def test_span_one_oracle_with_single_channel_is_exact(rng: np.random.Generator) -> None:
    cfg = AxialAttentionConfig(Axis.WIDTH, Span.local(1), 1, 1, 1, 1)
    params = init_attention_params(cfg, 4, rng)
    x = Tensor(rng.normal(size=(1, 2, 4, 1)))
    (report,) = verify_kernels(shape_grid=[ShapeCase(1, 2, 4, 1, 1, 1, 1, Span.local(1))],
                               kernels=[DEFAULT_KERNELS[-1]], threshold=0.0)
    assert report.max_abs == 0.0
    expected = x.data[..., 0] * params.w_v.data[0, 0] + params.r_v.data[0, 0]
    np.testing.assert_allclose(oracles.oracle_axial(x, params, Axis.WIDTH, 1).data[..., 0], expected, atol=1e-15)


def test_gradcheck_linear() -> None:
    report = gradcheck(linear_target())
    assert report.passed
    assert set(report.groups) == {"input", "weight"}


@pytest.mark.parametrize("kernel", [k.name for k in DEFAULT_KERNELS])
def test_gradcheck_kernels(kernel: str) -> None:
    report = gradcheck(kernel_target(kernel))
    assert report.passed, report.groups
    assert "input" in report.groups and "w_q" in report.groups


def test_gradcheck_covers_positional_tables() -> None:
    report = gradcheck(kernel_target("ps_attention_2d"))
    assert {"r_q", "r_k", "r_v"} <= set(report.groups)


def test_unknown_kernel_target() -> None:
    with pytest.raises(ConfigError):
        kernel_target("conv_attention")


def test_gradcheck_catches_wrong_gradient() -> None:
    class Doubled(ops.Scale):
        def apply(self, grad_output):
            return (2 * grad_output * self.factor,)

    x = Tensor(np.array([1.0, 2.0]))
    report = gradcheck(GradTarget("doubled", lambda t: ops.reduce_sum(Doubled(3.0)(t)), x))
    assert not report.passed
    assert report.groups["input"] == pytest.approx(0.5)


def test_gradcheck_judges_each_element_on_its_own_scale() -> None:
    class SkewedSmallEntry(ops.Scale):
        def apply(self, grad_output):
            return (grad_output * self.factor * np.array([1.0, 2.0]),)

    x = Tensor(np.array([1.0, 1.0]))
    factor = np.array([1000.0, 0.01])
    report = gradcheck(GradTarget("skewed", lambda t: ops.reduce_sum(SkewedSmallEntry(factor)(t)), x))
    assert not report.passed
    assert report.groups["input"] == pytest.approx(0.5, rel=1e-3)


def test_gradcheck_needs_float64() -> None:
    x = Tensor(np.ones(2), dtype=np.float32)
    with pytest.raises(ContractError):
        gradcheck(GradTarget("f32", lambda t: ops.reduce_sum(t), x))


def test_gradcheck_rejects_stateful_target(tiny_spec) -> None:
    model = build_axial_resnet(tiny_spec, precision=Precision.FLOAT64)
    block = model.blocks[1]
    x = np.random.default_rng(0).normal(size=(2, 8, 8, 8))
    target = layer_target(block, x, Mode.TRAIN)
    with pytest.raises(NonDeterministicTargetError):
        gradcheck(target)


def test_gradcheck_rejects_changing_objective() -> None:
    calls = []

    def loss(t: Tensor) -> Tensor:
        calls.append(1)
        return ops.scale(ops.reduce_sum(t), float(len(calls)))

    with pytest.raises(NonDeterministicTargetError):
        gradcheck(GradTarget("drifting", loss, Tensor(np.ones(2))))


def test_gradcheck_axial_block_in_eval_mode(tiny_local_spec) -> None:
    model = build_axial_resnet(tiny_local_spec, precision=Precision.FLOAT64)
    rng = np.random.default_rng(0)
    block = model.blocks[1]
    for name, tensor in block.named_parameters():
        if name.endswith("bn_up.gamma"):
            tensor.data = rng.normal(size=tensor.shape)
    target = layer_target(block, rng.normal(size=(1, 4, 4, 8)), Mode.EVAL)
    report = gradcheck(target, max_elements=6)
    assert report.passed, report.groups


def test_gradcheck_frozen_train_mode_block(tiny_local_spec) -> None:
    model = build_axial_resnet(tiny_local_spec, precision=Precision.FLOAT64)
    rng = np.random.default_rng(1)
    block = model.blocks[1]
    for name, tensor in block.named_parameters():
        if name.endswith("bn_up.gamma"):
            tensor.data = rng.normal(size=tensor.shape)
    with model.freeze_statistics():
        target = layer_target(block, rng.normal(size=(2, 4, 4, 8)), Mode.TRAIN)
        report = gradcheck(target, tolerance=1e-3, max_elements=6)
    assert report.passed, report.groups


def test_block_target_checks_the_first_residual_block() -> None:
    target = block_target(seed=2)
    assert target.name == "stage1.block0"
    assert target.x.shape == (1, 8, 8, 8)
    assert any("attn_w" in name for name in target.parameters)
    report = gradcheck(target, max_elements=6, seed=2)
    assert report.passed, report.groups


@pytest.mark.slow
def test_gradcheck_miniature_model() -> None:
    report = gradcheck(model_target(miniature_spec()), tolerance=1e-3, max_elements=20)
    assert report.passed, report.groups
    assert len(report.groups) > 20


def test_positional_mode_none_kernel_has_no_tables(rng: np.random.Generator) -> None:
    cfg = AxialAttentionConfig(Axis.WIDTH, Span.global_(), 1, 2, 1, 1, PositionalMode.NONE)
    params = init_attention_params(cfg, 3, rng, planar=True)
    assert params.named_tensors().keys() == {"w_q", "w_k", "w_v"}
