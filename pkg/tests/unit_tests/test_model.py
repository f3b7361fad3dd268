import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from src.analysis.costs import count_params
from src.core.errors import ConfigError, DimensionError, SpanOverflowError
from src.core.models import BlockType, Mode, ModelSpec, Precision, Span, StemType
from src.core.tensor import Tape, Tensor, no_grad
from src.model.layers import AttentionLayer
from src.model.plan import LayerKind, local_spans, plan_model
from src.model.resnet import baseline_convnet, build_axial_resnet, conv_twin, model_forward, receptive_field


def images(rng: np.random.Generator, spec: ModelSpec, batch: int = 2, resolution: int = 0) -> np.ndarray:
    res = resolution or spec.resolution
    return rng.normal(size=(batch, res, res, spec.in_channels))


def test_forward_shape_and_dtype(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_spec, seed=0, precision=Precision.FLOAT64)
    logits = model_forward(model, images(rng, tiny_spec))
    assert logits.shape == (2, tiny_spec.num_classes)
    assert logits.dtype == np.float64


def test_float32_model_runs_in_float32_context(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_spec, precision="float32")
    with Tape(Precision.FLOAT32, recording=False):
        logits = model_forward(model, images(rng, tiny_spec))
    assert logits.dtype == np.float32


def test_built_parameters_equal_analytic_count(tiny_spec: ModelSpec, tiny_local_spec: ModelSpec) -> None:
    for spec in (tiny_spec, tiny_local_spec, conv_twin(tiny_spec)):
        model = build_axial_resnet(spec, precision=Precision.FLOAT64)
        assert model.param_count() == count_params(spec).total_params


def test_layer_names_are_dotted_paths(tiny_spec: ModelSpec) -> None:
    model = build_axial_resnet(tiny_spec)
    layers = model.attention_layers()
    assert "stage1.block0.attn_h" in layers
    assert "stage2.block0.attn_w" in layers
    names = dict(model.named_parameters())
    assert "stage1.block0.attn_h.r_q" in names
    assert "stage1.block0.attn_h.bn_q.gamma" in names
    assert "head.fc.weight" in names


def test_block_halves_resolution(tiny_spec: ModelSpec) -> None:
    plan = plan_model(tiny_spec)
    block = next(b for b in plan.blocks if b.name == "stage2.block0")
    assert block.in_hw == (8, 8)
    assert block.out_hw == (4, 4)
    assert "proj" in block.layers
    assert plan.output_stride == 2


def test_attention_layers_follow_height_then_width(tiny_spec: ModelSpec) -> None:
    plan = plan_model(tiny_spec)
    block = plan.blocks[1]
    roles = [role for role, layer in block.layers.items() if layer.kind is LayerKind.AXIAL_ATTENTION]
    assert roles == ["attn_h", "attn_w"]
    assert block.layers["attn_h"].attention.d_out == 2 * block.layers["attn_h"].attention.d_q


def test_train_mode_updates_running_statistics(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_spec, precision=Precision.FLOAT64)
    bn = model.batch_norms()[0]
    before = bn.state.running_mean.copy()
    x = images(rng, tiny_spec)
    with no_grad():
        model_forward(model, x, Mode.EVAL)
    assert_array_equal(bn.state.running_mean, before)
    with no_grad():
        with model.freeze_statistics():
            model_forward(model, x, Mode.TRAIN)
    assert_array_equal(bn.state.running_mean, before)
    with no_grad():
        model_forward(model, x, Mode.TRAIN)
    assert not np.array_equal(bn.state.running_mean, before)


def test_running_variance_is_unbiased(rng: np.random.Generator) -> None:
    from src.model.layers import BatchNorm
    from src.model.plan import LayerPlan

    layer = BatchNorm(LayerPlan("bn", LayerKind.BATCH_NORM, 2, 2, (2, 2), (2, 2)), Precision.FLOAT64)
    x = rng.normal(size=(2, 2, 2, 2))
    with no_grad():
        layer(Tensor(x), Mode.TRAIN)
    flat = x.reshape(-1, 2)
    assert_allclose(layer.state.running_mean, 0.1 * flat.mean(axis=0))
    assert_allclose(layer.state.running_var, 0.9 + 0.1 * flat.var(axis=0, ddof=1))


def test_state_round_trip(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    source = build_axial_resnet(tiny_spec, seed=1, precision=Precision.FLOAT64)
    params = dict(source.named_parameters())
    params["head.fc.weight"].data = rng.normal(size=params["head.fc.weight"].shape)
    target = build_axial_resnet(tiny_spec, seed=2, precision=Precision.FLOAT64)
    target.load_state(source.state_dict())
    x = images(rng, tiny_spec)
    with no_grad():
        assert_array_equal(model_forward(source, x).data, model_forward(target, x).data)


def test_load_state_rejects_missing_names(tiny_spec: ModelSpec) -> None:
    model = build_axial_resnet(tiny_spec)
    state = model.state_dict()
    state.pop("head.fc.bias")
    with pytest.raises(DimensionError):
        model.load_state(state)


def test_global_model_refuses_larger_input(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_spec, precision=Precision.FLOAT64)
    with pytest.raises(SpanOverflowError):
        with no_grad():
            model_forward(model, images(rng, tiny_spec, resolution=16))


def test_local_model_runs_at_any_resolution(tiny_local_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_local_spec, precision=Precision.FLOAT64)
    with no_grad():
        logits = model_forward(model, images(rng, tiny_local_spec, resolution=16))
    assert logits.shape == (2, 2)


def test_global_tables_sized_for_requested_resolution(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_spec, precision=Precision.FLOAT64, resolution=16)
    with no_grad():
        assert model_forward(model, images(rng, tiny_spec, resolution=16)).shape == (2, 2)


def test_input_channel_mismatch(tiny_spec: ModelSpec) -> None:
    model = build_axial_resnet(tiny_spec)
    with pytest.raises(DimensionError):
        model_forward(model, np.zeros((1, 8, 8, 4)))


def test_receptive_field(tiny_spec: ModelSpec, tiny_local_spec: ModelSpec) -> None:
    assert receptive_field(tiny_spec) == (8, 8)
    assert receptive_field(tiny_local_spec) == (5, 5)
    assert receptive_field(conv_twin(tiny_spec)) == (5, 5)


def test_baseline_has_no_attention(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = baseline_convnet(tiny_spec, precision=Precision.FLOAT64)
    assert model.attention_layers() == {}
    assert model.spec.block is BlockType.CONV3X3
    with no_grad():
        assert model_forward(model, images(rng, tiny_spec)).shape == (2, 2)


def test_ps_block_uses_planar_attention(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    data = tiny_spec.to_dict()
    data.update({"name": "tiny-ps", "block": "ps2d", "ps_span": 3})
    spec = ModelSpec.from_dict(data)
    model = build_axial_resnet(spec, precision=Precision.FLOAT64)
    layers = model.attention_layers()
    assert all(layer.planar for layer in layers.values())
    assert model.param_count() == count_params(spec).total_params
    with no_grad():
        assert model_forward(model, images(rng, spec)).shape == (2, 2)


def test_full_axial_stem(tiny_local_spec: ModelSpec, rng: np.random.Generator) -> None:
    data = tiny_local_spec.to_dict()
    data.update({"name": "tiny-full-axial", "stem": "full_axial", "stem_span": 3, "resolution": 16})
    spec = ModelSpec.from_dict(data)
    plan = plan_model(spec)
    assert [b.name for b in plan.blocks[:4]] == ["stem", "stem.block0", "stem.block1", "stem.block2"]
    model = build_axial_resnet(spec, precision=Precision.FLOAT64)
    assert model.param_count() == count_params(spec).total_params
    with no_grad():
        assert model_forward(model, images(rng, spec, batch=1)).shape == (1, 2)


def test_full_axial_needs_local_spans(tiny_spec: ModelSpec) -> None:
    data = tiny_spec.to_dict()
    data["stem"] = "full_axial"
    with pytest.raises(ConfigError):
        ModelSpec.from_dict(data)


def test_local_spans_rewrites_every_stage(tiny_spec: ModelSpec) -> None:
    spec = local_spans(tiny_spec, 5)
    assert spec.spans == [Span.local(5), Span.local(5)]
    assert tiny_spec.spans == [Span.global_(), Span.global_()]


def test_attention_layer_strides_its_axis(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    model = build_axial_resnet(tiny_spec, precision=Precision.FLOAT64)
    layer = model.attention_layers()["stage2.block0.attn_h"]
    assert isinstance(layer, AttentionLayer)
    with no_grad():
        out = layer(Tensor(rng.normal(size=(1, 8, 8, 16))), Mode.EVAL)
    assert out.shape == (1, 4, 8, 16)


def test_presets_validate() -> None:
    assert ModelSpec.resnet50().bottleneck_widths() == [64, 128, 256, 512]
    assert ModelSpec.axial_resnet(0.5).bottleneck_widths() == [64, 128, 256, 512]
    assert ModelSpec.axial_resnet(0.5, StemType.FULL_AXIAL).spans[0] == Span.local(15)
    with pytest.raises(ConfigError):
        ModelSpec(width_multiplier=0.3)


def test_block_rejects_wrong_channel_count(tiny_spec: ModelSpec) -> None:
    model = build_axial_resnet(tiny_spec, precision=Precision.FLOAT64)
    block = model.blocks[1]
    with pytest.raises(ConfigError):
        with no_grad():
            block(Tensor(np.zeros((1, 8, 8, 5))), Mode.EVAL)


def test_zero_residual_gamma_leaves_exactly_the_shortcut(tiny_spec: ModelSpec, rng: np.random.Generator) -> None:
    data = tiny_spec.to_dict()
    data["stage_blocks"] = [2, 1]
    model = build_axial_resnet(ModelSpec.from_dict(data), precision=Precision.FLOAT64)
    projected, plain = model.blocks[1], model.blocks[2]
    assert "proj" in projected.layers and "proj" not in plain.layers
    with no_grad():
        x = Tensor(rng.normal(size=(2, 8, 8, 8)))
        assert_array_equal(projected(x, Mode.EVAL).data, projected.shortcut(x, Mode.EVAL).data)
        h = Tensor(rng.normal(size=(2, 8, 8, 16)))
        assert_array_equal(plain(h, Mode.EVAL).data, h.data)
        assert (plain(h, Mode.EVAL).data < 0).any()
