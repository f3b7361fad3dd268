"""
Layer plans: the flat, ordered geometry of a model at one input resolution.

``plan_model`` is the single description both the builder and the analytic
cost counters read, so instantiated and counted parameters agree exactly.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, Iterator, List, Optional, Tuple

from ..core.errors import ConfigError
from ..core.models import (
    AxialAttentionConfig,
    AxialBlockConfig,
    Axis,
    BlockType,
    BNPlacement,
    ModelSpec,
    PositionalMode,
    StemType,
)

logger = logging.getLogger(__name__)

HW = Tuple[int, int]


class LayerKind(Enum):
    CONV = "conv"
    CONV1X1 = "conv1x1"
    BATCH_NORM = "batch_norm"
    AXIAL_ATTENTION = "axial_attention"
    PLANAR_ATTENTION = "planar_attention"
    MAX_POOL = "max_pool"
    AVG_POOL = "avg_pool"
    GLOBAL_POOL = "global_pool"
    CLASSIFIER = "classifier"


@dataclass(frozen=True)
class LayerPlan:
    """One layer with its channels, kernel and spatial extents."""
    name: str
    kind: LayerKind
    c_in: int
    c_out: int
    in_hw: HW
    out_hw: HW
    kernel: int = 1
    stride: int = 1
    padding: int = 0
    attention: Optional[AxialAttentionConfig] = None
    table_length: int = 0
    table_extent: int = 0
    bn: Optional[BNPlacement] = None
    zero_init: bool = False

    def to_dict(self) -> Dict:
        data = {
            "name": self.name,
            "kind": self.kind.value,
            "c_in": self.c_in,
            "c_out": self.c_out,
            "in_hw": list(self.in_hw),
            "out_hw": list(self.out_hw),
            "kernel": self.kernel,
            "stride": self.stride,
        }
        if self.attention is not None:
            data["attention"] = self.attention.to_dict()
            data["table_length"] = self.table_length
            if self.table_extent:
                data["table_extent"] = self.table_extent
        return data


@dataclass
class BlockPlan:
    """A residual block, stem or head: named roles mapped to layer plans."""
    name: str
    kind: str
    layers: Dict[str, LayerPlan]
    in_channels: int
    out_channels: int
    in_hw: HW
    out_hw: HW
    stride: int = 1


@dataclass
class ModelPlan:
    spec: ModelSpec
    resolution: int
    blocks: List[BlockPlan] = field(default_factory=list)

    def layers(self) -> Iterator[LayerPlan]:
        for block in self.blocks:
            yield from block.layers.values()

    def attention_layers(self) -> List[LayerPlan]:
        kinds = (LayerKind.AXIAL_ATTENTION, LayerKind.PLANAR_ATTENTION)
        return [layer for layer in self.layers() if layer.kind in kinds]

    @property
    def output_hw(self) -> HW:
        return self.blocks[-1].in_hw if self.blocks else (self.resolution, self.resolution)

    @property
    def output_stride(self) -> int:
        return self.resolution // max(1, self.output_hw[0])


def conv_out(n: int, kernel: int, stride: int, padding: int) -> int:
    return (n + 2 * padding - kernel) // stride + 1


def strided(n: int, stride: int) -> int:
    return -(-n // stride)


def _down(hw: HW, stride: int) -> HW:
    return strided(hw[0], stride), strided(hw[1], stride)


class _Planner:
    def __init__(self, spec: ModelSpec, resolution: int):
        self.spec = spec
        self.plan = ModelPlan(spec, resolution)
        self.hw: HW = (resolution, resolution)
        self.channels = spec.in_channels

    def _bn(self, name: str, channels: int, hw: HW, zero_init: bool = False) -> LayerPlan:
        return LayerPlan(name, LayerKind.BATCH_NORM, channels, channels, hw, hw, zero_init=zero_init)

    def _conv1x1(self, name: str, c_in: int, c_out: int, hw: HW, stride: int = 1) -> LayerPlan:
        return LayerPlan(name, LayerKind.CONV1X1, c_in, c_out, hw, _down(hw, stride), stride=stride)

    def _shortcut(self, prefix: str, layers: Dict[str, LayerPlan], c_in: int, c_out: int, hw: HW, stride: int) -> None:
        if stride != 1 or c_in != c_out:
            proj = self._conv1x1(f"{prefix}.proj", c_in, c_out, hw, stride)
            layers["proj"] = proj
            layers["bn_proj"] = self._bn(f"{prefix}.bn_proj", c_out, proj.out_hw)

    def axial_block(self, prefix: str, cfg: AxialBlockConfig) -> None:
        spec, hw, c_in = self.spec, self.hw, self.channels
        if c_in != cfg.in_channels:
            raise ConfigError(f"{prefix}: block expects {cfg.in_channels} channels, previous layer gives {c_in}")
        layers: Dict[str, LayerPlan] = {}
        layers["conv_down"] = self._conv1x1(f"{prefix}.conv_down", c_in, cfg.bottleneck_channels, hw)
        layers["bn_down"] = self._bn(f"{prefix}.bn_down", cfg.bottleneck_channels, hw)
        h_out = (strided(hw[0], cfg.stride), hw[1])
        layers["attn_h"] = LayerPlan(
            f"{prefix}.attn_h", LayerKind.AXIAL_ATTENTION, cfg.bottleneck_channels, cfg.bottleneck_channels,
            hw, h_out, stride=cfg.stride, attention=cfg.attention(Axis.HEIGHT), table_length=hw[0],
            table_extent=spec.positional_extent, bn=spec.bn_placement,
        )
        out_hw = (h_out[0], strided(hw[1], cfg.stride))
        layers["attn_w"] = LayerPlan(
            f"{prefix}.attn_w", LayerKind.AXIAL_ATTENTION, cfg.bottleneck_channels, cfg.bottleneck_channels,
            h_out, out_hw, stride=cfg.stride, attention=cfg.attention(Axis.WIDTH), table_length=hw[1],
            table_extent=spec.positional_extent, bn=spec.bn_placement,
        )
        self._finish(prefix, BlockType.AXIAL.value, layers, cfg.bottleneck_channels, cfg.out_channels, out_hw, cfg.stride)

    def conv_block(self, prefix: str, bottleneck: int, c_out: int, stride: int) -> None:
        hw, c_in = self.hw, self.channels
        layers: Dict[str, LayerPlan] = {}
        layers["conv_down"] = self._conv1x1(f"{prefix}.conv_down", c_in, bottleneck, hw)
        layers["bn_down"] = self._bn(f"{prefix}.bn_down", bottleneck, hw)
        out_hw = (conv_out(hw[0], 3, stride, 1), conv_out(hw[1], 3, stride, 1))
        layers["conv_mid"] = LayerPlan(f"{prefix}.conv_mid", LayerKind.CONV, bottleneck, bottleneck, hw, out_hw,
                                       kernel=3, stride=stride, padding=1)
        layers["bn_mid"] = self._bn(f"{prefix}.bn_mid", bottleneck, out_hw)
        self._finish(prefix, BlockType.CONV3X3.value, layers, bottleneck, c_out, out_hw, stride)

    def ps_block(self, prefix: str, bottleneck: int, c_out: int, stride: int) -> None:
        spec, hw, c_in = self.spec, self.hw, self.channels
        heads = spec.heads
        d_out = bottleneck // heads
        cfg = AxialAttentionConfig(Axis.WIDTH, spec.ps_span, heads, bottleneck, d_out // 2, d_out, PositionalMode.FULL)
        layers: Dict[str, LayerPlan] = {}
        layers["conv_down"] = self._conv1x1(f"{prefix}.conv_down", c_in, bottleneck, hw)
        layers["bn_down"] = self._bn(f"{prefix}.bn_down", bottleneck, hw)
        out_hw = _down(hw, stride)
        layers["attn"] = LayerPlan(f"{prefix}.attn", LayerKind.PLANAR_ATTENTION, bottleneck, bottleneck, hw, out_hw,
                                   stride=stride, attention=cfg, table_length=max(hw), bn=spec.bn_placement)
        self._finish(prefix, BlockType.PS2D.value, layers, bottleneck, c_out, out_hw, stride)

    def _finish(self, prefix: str, kind: str, layers: Dict[str, LayerPlan], bottleneck: int, c_out: int,
                out_hw: HW, stride: int) -> None:
        layers["conv_up"] = self._conv1x1(f"{prefix}.conv_up", bottleneck, c_out, out_hw)
        layers["bn_up"] = self._bn(f"{prefix}.bn_up", c_out, out_hw, zero_init=True)
        self._shortcut(prefix, layers, self.channels, c_out, self.hw, stride)
        self.plan.blocks.append(BlockPlan(prefix, kind, layers, self.channels, c_out, self.hw, out_hw, stride))
        self.channels, self.hw = c_out, out_hw

    def stem(self) -> None:
        spec = self.spec
        width = spec.stem_width()
        hw, c_in = self.hw, self.channels
        if spec.stem is StemType.CONV:
            conv_hw = (conv_out(hw[0], 7, 2, 3), conv_out(hw[1], 7, 2, 3))
            pool_hw = (conv_out(conv_hw[0], 3, 2, 1), conv_out(conv_hw[1], 3, 2, 1))
            layers = {
                "conv": LayerPlan("stem.conv", LayerKind.CONV, c_in, width, hw, conv_hw, kernel=7, stride=2, padding=3),
                "bn": self._bn("stem.bn", width, conv_hw),
                "pool": LayerPlan("stem.pool", LayerKind.MAX_POOL, width, width, conv_hw, pool_hw, kernel=3, stride=2, padding=1),
            }
            self.plan.blocks.append(BlockPlan("stem", "conv_stem", layers, c_in, width, hw, pool_hw, 4))
            self.channels, self.hw = width, pool_hw
        elif spec.stem is StemType.POINTWISE:
            layers = {"conv": self._conv1x1("stem.conv", c_in, width, hw), "bn": self._bn("stem.bn", width, hw)}
            self.plan.blocks.append(BlockPlan("stem", "pointwise_stem", layers, c_in, width, hw, hw, 1))
            self.channels = width
        else:
            pool_hw = (conv_out(hw[0], 3, 2, 1), conv_out(hw[1], 3, 2, 1))
            layers = {"pool": LayerPlan("stem.pool", LayerKind.AVG_POOL, c_in, c_in, hw, pool_hw, kernel=3, stride=2, padding=1)}
            self.plan.blocks.append(BlockPlan("stem", "pool_stem", layers, c_in, c_in, hw, pool_hw, 2))
            self.hw = pool_hw
            # the strided entry block works at twice the bottleneck of the other two
            for i, stride in enumerate((2, 1, 1)):
                bottleneck = spec.scale((4 if i == 0 else 2) * spec.stem_channels)
                self.axial_block(f"stem.block{i}", AxialBlockConfig(
                    self.channels, bottleneck, width, spec.heads, spec.stem_span, spec.stem_span,
                    stride, spec.positional_mode,
                ))

    def stages(self) -> None:
        spec = self.spec
        for i, (count, bottleneck, span) in enumerate(zip(spec.stage_blocks, spec.bottleneck_widths(), spec.spans)):
            c_out = bottleneck * spec.expansion
            for j in range(count):
                prefix = f"stage{i + 1}.block{j}"
                stride = spec.stage_strides[i] if j == 0 else 1
                if spec.block is BlockType.AXIAL:
                    self.axial_block(prefix, AxialBlockConfig(
                        self.channels, bottleneck, c_out, spec.heads, span, span, stride, spec.positional_mode,
                    ))
                elif spec.block is BlockType.PS2D:
                    self.ps_block(prefix, bottleneck, c_out, stride)
                else:
                    self.conv_block(prefix, bottleneck, c_out, stride)

    def head(self) -> None:
        spec, hw, c = self.spec, self.hw, self.channels
        layers = {
            "pool": LayerPlan("head.pool", LayerKind.GLOBAL_POOL, c, c, hw, (1, 1)),
            "fc": LayerPlan("head.fc", LayerKind.CLASSIFIER, c, spec.num_classes, (1, 1), (1, 1)),
        }
        self.plan.blocks.append(BlockPlan("head", "head", layers, c, spec.num_classes, hw, (1, 1)))


def plan_model(spec: ModelSpec, resolution: Optional[int] = None) -> ModelPlan:
    """Lay out every layer of ``spec`` at ``resolution`` (default: the spec's)."""
    resolution = resolution or spec.resolution
    if resolution < 1:
        raise ConfigError(f"resolution must be positive, got {resolution}")
    planner = _Planner(spec, resolution)
    planner.stem()
    planner.stages()
    planner.head()
    plan = planner.plan
    logger.debug(f"planned {spec.name} at {resolution}px: {len(plan.blocks)} blocks, output stride {plan.output_stride}")
    return plan


def local_spans(spec: ModelSpec, m: int) -> ModelSpec:
    """Copy of ``spec`` with every stage (and the full-axial stem) at Local(m)."""
    data = spec.to_dict()
    data["spans"] = [m] * len(spec.stage_blocks)
    if spec.stem is StemType.FULL_AXIAL:
        data["stem_span"] = m
    return ModelSpec.from_dict(data)