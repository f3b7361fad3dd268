"""Data models for axial-lab: configuration, specs and reports."""
import csv
import io
import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError

WIDTH_MULTIPLIERS = (0.375, 0.5, 0.75, 1.0, 1.25, 1.5, 2.0)


class Precision(Enum):
    """Numeric mode of a computation context."""
    FLOAT64 = "float64"
    FLOAT32 = "float32"

    @property
    def dtype(self) -> np.dtype:
        return np.dtype(self.value)

    @classmethod
    def of(cls, dtype: np.dtype) -> "Precision":
        return cls(np.dtype(dtype).name)


class Mode(Enum):
    """Forward mode for normalization layers."""
    TRAIN = "train"
    EVAL = "eval"


class Axis(Enum):
    """Spatial axis an axial layer attends along."""
    HEIGHT = "height"
    WIDTH = "width"

    @property
    def index(self) -> int:
        return 1 if self is Axis.HEIGHT else 2


class PositionalMode(Enum):
    """Which relative positional terms enter the attention."""
    NONE = "none"              # content only
    QUERY_ONLY = "query_only"  # q·r^q bias
    FULL = "full"              # q·r^q + k·r^k biases and r^v retrieval


class StemType(Enum):
    """Network entry variant."""
    CONV = "conv"
    FULL_AXIAL = "full_axial"
    POINTWISE = "pointwise"


class BlockType(Enum):
    """Spatial mixing inside the residual bottleneck."""
    AXIAL = "axial"
    CONV3X3 = "conv3x3"
    PS2D = "ps2d"


@dataclass(frozen=True)
class Span:
    """Attention extent: the whole axis (``m is None``) or a centered window of odd size m."""
    m: Optional[int] = None

    def __post_init__(self):
        if self.m is not None and (self.m < 1 or self.m % 2 == 0):
            raise ConfigError(f"local span must be a positive odd integer, got {self.m}")

    @classmethod
    def global_(cls) -> "Span":
        return cls(None)

    @classmethod
    def local(cls, m: int) -> "Span":
        return cls(int(m))

    @classmethod
    def parse(cls, value: Union[str, int, None, "Span"]) -> "Span":
        if isinstance(value, Span):
            return value
        if value is None or (isinstance(value, str) and value.lower() == "global"):
            return cls.global_()
        try:
            return cls.local(int(value))
        except (TypeError, ValueError):
            raise ConfigError(f"span must be 'global' or an odd integer, got {value!r}")

    @property
    def is_global(self) -> bool:
        return self.m is None

    @property
    def radius(self) -> Optional[int]:
        return None if self.m is None else (self.m - 1) // 2

    def to_json(self) -> Union[str, int]:
        return "global" if self.m is None else self.m

    def __str__(self) -> str:
        return "Global" if self.m is None else f"Local({self.m})"


@dataclass(frozen=True)
class AxialAttentionConfig:
    """One multi-head attention layer: sizes are per head for d_q and d_out."""
    axis: Axis
    span: Span
    heads: int
    d_in: int
    d_q: int
    d_out: int
    positional_mode: PositionalMode = PositionalMode.FULL

    def __post_init__(self):
        if self.heads < 1:
            raise ConfigError(f"heads must be >= 1, got {self.heads}")
        for name in ("d_in", "d_q", "d_out"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")

    @property
    def total_out(self) -> int:
        return self.heads * self.d_out

    def to_dict(self) -> Dict[str, Any]:
        return {
            "axis": self.axis.value,
            "span": self.span.to_json(),
            "heads": self.heads,
            "d_in": self.d_in,
            "d_q": self.d_q,
            "d_out": self.d_out,
            "positional_mode": self.positional_mode.value,
        }


@dataclass(frozen=True)
class BNPlacement:
    """Where batch normalization sits inside attention layers."""
    qkv: bool = True
    output: bool = True

    def to_dict(self) -> Dict[str, bool]:
        return {"qkv": self.qkv, "output": self.output}


@dataclass(frozen=True)
class AxialBlockConfig:
    """Residual axial block: 1x1 down, height attention, width attention, 1x1 up."""
    in_channels: int
    bottleneck_channels: int
    out_channels: int
    heads: int
    span_h: Span
    span_w: Span
    stride: int = 1
    positional_mode: PositionalMode = PositionalMode.FULL

    def __post_init__(self):
        if self.stride not in (1, 2):
            raise ConfigError(f"stride must be 1 or 2, got {self.stride}")
        if self.heads < 1 or self.bottleneck_channels % (2 * self.heads):
            raise ConfigError(
                f"bottleneck width {self.bottleneck_channels} must split into {self.heads} heads with d_out = 2*d_q"
            )

    @property
    def d_out(self) -> int:
        return self.bottleneck_channels // self.heads

    @property
    def d_q(self) -> int:
        return self.d_out // 2

    def attention(self, axis: Axis) -> AxialAttentionConfig:
        return AxialAttentionConfig(
            axis=axis,
            span=self.span_h if axis is Axis.HEIGHT else self.span_w,
            heads=self.heads,
            d_in=self.bottleneck_channels,
            d_q=self.d_q,
            d_out=self.d_out,
            positional_mode=self.positional_mode,
        )


def _spans(value: Any, stages: int) -> List[Span]:
    if isinstance(value, (list, tuple)):
        if len(value) != stages:
            raise ConfigError(f"spans lists {len(value)} entries for {stages} stages")
        return [Span.parse(v) for v in value]
    return [Span.parse(value)] * stages


@dataclass
class ModelSpec:
    """Declarative description of an Axial-ResNet (or its convolutional twin)."""
    name: str = "axial-resnet"
    stem: StemType = StemType.CONV
    block: BlockType = BlockType.AXIAL
    stage_blocks: List[int] = field(default_factory=lambda: [3, 4, 6, 3])
    stage_strides: Optional[List[int]] = None
    width_multiplier: float = 1.0
    base_width: int = 128
    expansion: int = 2
    stem_channels: int = 64
    heads: int = 8
    spans: List[Span] = field(default_factory=lambda: [Span.global_()] * 4)
    stem_span: Span = field(default_factory=lambda: Span.local(15))
    ps_span: Span = field(default_factory=lambda: Span.local(7))
    positional_mode: PositionalMode = PositionalMode.FULL
    positional_extent: int = 0  # 0 sizes each axial table from its own axis and span
    bn_placement: BNPlacement = field(default_factory=BNPlacement)
    num_classes: int = 1000
    in_channels: int = 3
    resolution: int = 224

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        if self.width_multiplier not in WIDTH_MULTIPLIERS:
            raise ConfigError(f"unknown width multiplier {self.width_multiplier}; expected one of {WIDTH_MULTIPLIERS}")
        if not self.stage_blocks or any(n < 1 for n in self.stage_blocks):
            raise ConfigError(f"stage_blocks must be positive counts, got {self.stage_blocks}")
        if self.stage_strides is None:
            self.stage_strides = [1] + [2] * (len(self.stage_blocks) - 1)
        if len(self.stage_strides) != len(self.stage_blocks) or any(s not in (1, 2) for s in self.stage_strides):
            raise ConfigError(f"stage_strides {self.stage_strides} do not fit stage_blocks {self.stage_blocks}")
        self.spans = _spans(self.spans, len(self.stage_blocks))
        if self.stem is StemType.FULL_AXIAL and (self.stem_span.is_global or any(s.is_global for s in self.spans)):
            raise ConfigError("full-axial models use Local spans in every block")
        if self.heads < 1 or self.num_classes < 1 or self.resolution < 1:
            raise ConfigError("heads, num_classes and resolution must be positive")
        if self.positional_extent < 0:
            raise ConfigError(f"positional_extent must be non-negative, got {self.positional_extent}")
        if self.block is not BlockType.CONV3X3:
            for width in self.bottleneck_widths():
                if width % (2 * self.heads):
                    raise ConfigError(f"bottleneck width {width} does not split into {self.heads} heads with d_out = 2*d_q")

    def scale(self, channels: int) -> int:
        """Apply the width multiplier, rounding to a multiple of the head count."""
        return max(self.heads, int(round(channels * self.width_multiplier / self.heads)) * self.heads)

    def bottleneck_widths(self) -> List[int]:
        return [self.scale(self.base_width * 2 ** i) for i in range(len(self.stage_blocks))]

    def stem_width(self) -> int:
        # the conv stem is the original ResNet entry and keeps its width
        if self.stem is StemType.CONV:
            return self.stem_channels
        return self.scale(self.stem_channels)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "name": self.name,
            "stem": self.stem.value,
            "block": self.block.value,
            "stage_blocks": list(self.stage_blocks),
            "stage_strides": list(self.stage_strides or []),
            "width_multiplier": self.width_multiplier,
            "base_width": self.base_width,
            "expansion": self.expansion,
            "stem_channels": self.stem_channels,
            "heads": self.heads,
            "spans": [s.to_json() for s in self.spans],
            "stem_span": self.stem_span.to_json(),
            "ps_span": self.ps_span.to_json(),
            "positional_mode": self.positional_mode.value,
            "positional_extent": self.positional_extent,
            "bn_placement": self.bn_placement.to_dict(),
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "resolution": self.resolution,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelSpec":
        data = dict(data)
        try:
            if "stem" in data:
                data["stem"] = StemType(data["stem"])
            if "block" in data:
                data["block"] = BlockType(data["block"])
            if "positional_mode" in data:
                data["positional_mode"] = PositionalMode(data["positional_mode"])
        except ValueError as e:
            raise ConfigError(str(e))
        for key in ("stem_span", "ps_span"):
            if key in data:
                data[key] = Span.parse(data[key])
        if "bn_placement" in data and isinstance(data["bn_placement"], dict):
            data["bn_placement"] = BNPlacement(**data["bn_placement"])
        if "spans" in data and not isinstance(data["spans"], (list, tuple)):
            data["spans"] = [data["spans"]] * len(data.get("stage_blocks", [3, 4, 6, 3]))
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown ModelSpec fields: {sorted(unknown)}")
        return cls(**data)

    # Presets -------------------------------------------------------------

    @classmethod
    def resnet50(cls, num_classes: int = 1000, resolution: int = 224) -> "ModelSpec":
        return cls(name="resnet50", stem=StemType.CONV, block=BlockType.CONV3X3, base_width=64,
                   expansion=4, num_classes=num_classes, resolution=resolution)

    @classmethod
    def axial_resnet(cls, multiplier: float = 1.0, stem: StemType = StemType.CONV,
                     num_classes: int = 1000, resolution: int = 224) -> "ModelSpec":
        spans: Sequence[Span] = [Span.global_()] * 4 if stem is StemType.CONV else [Span.local(15)] * 4
        # positional tables cover every offset of the input image, at every stage
        return cls(name=f"axial-resnet-{stem.value}-{multiplier:g}", stem=stem, width_multiplier=multiplier,
                   spans=list(spans), positional_extent=resolution, num_classes=num_classes, resolution=resolution)

    @classmethod
    def ps_resnet(cls, multiplier: float = 1.0, num_classes: int = 1000, resolution: int = 224) -> "ModelSpec":
        return cls(name=f"ps-resnet-{multiplier:g}", stem=StemType.CONV, block=BlockType.PS2D, base_width=64,
                   expansion=4, width_multiplier=multiplier, num_classes=num_classes, resolution=resolution)


def _render_table(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    cells = [[str(c) for c in header]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]
    lines = ["  ".join(c.rjust(w) if i else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))) for row in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _render_csv(header: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buffer.getvalue()


@dataclass
class CostRow:
    """Parameters and M-Adds of one layer."""
    layer: str
    kind: str
    params: int
    madds: int

    def to_dict(self) -> Dict[str, Any]:
        return {"layer": self.layer, "kind": self.kind, "params": self.params, "madds": self.madds}


@dataclass
class CostReport:
    """Per-layer parameter and multiply-add accounting."""
    model: str
    resolution: int
    rows: List[CostRow] = field(default_factory=list)
    convention: str = ""
    metadata: Dict[str, Any] = field(default_factory=dict)

    @property
    def total_params(self) -> int:
        return sum(r.params for r in self.rows)

    @property
    def total_madds(self) -> int:
        return sum(r.madds for r in self.rows)

    def summary(self) -> str:
        return f"{self.total_params / 1e6:.1f}M / {self.total_madds / 1e9:.1f}B"

    def _rows(self) -> List[List[Any]]:
        rows: List[List[Any]] = [[r.layer, r.kind, r.params, r.madds] for r in self.rows]
        rows.append(["total", "", self.total_params, self.total_madds])
        return rows

    def to_table(self) -> str:
        title = f"{self.model} @ {self.resolution}px: {self.summary()}\n# {self.convention}\n"
        return title + _render_table(["layer", "kind", "params", "madds"], self._rows())

    def to_csv(self) -> str:
        return _render_csv(["layer", "kind", "params", "madds"], self._rows())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model,
            "resolution": self.resolution,
            "convention": self.convention,
            "rows": [r.to_dict() for r in self.rows],
            "total_params": self.total_params,
            "total_madds": self.total_madds,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class FitResult:
    """Least-squares polynomial fit of a sweep."""
    degree: int
    coefficients: List[float]
    r_squared: float
    residuals: List[float]

    def to_dict(self) -> Dict[str, Any]:
        return {"degree": self.degree, "coefficients": self.coefficients,
                "r_squared": self.r_squared, "residuals": self.residuals}


@dataclass
class SweepResult:
    """Measured or counted cost per value of an independent variable."""
    variable: str
    values: List[float]
    measurements: List[float]
    unit: str
    fits: Dict[str, FitResult] = field(default_factory=dict)
    spread: List[float] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    metadata: Dict[str, Any] = field(default_factory=dict)

    def _rows(self) -> List[List[Any]]:
        rows = []
        for i, (value, measured) in enumerate(zip(self.values, self.measurements)):
            spread = self.spread[i] if i < len(self.spread) else ""
            rows.append([f"{value:g}", f"{measured:.6g}", spread if spread == "" else f"{spread:.3g}"])
        return rows

    def to_table(self) -> str:
        lines = [_render_table([self.variable, self.unit, "spread"], self._rows())]
        for name, fit in self.fits.items():
            coefficients = ", ".join(f"{c:.4g}" for c in fit.coefficients)
            lines.append(f"fit {name}: degree {fit.degree} [{coefficients}] R^2={fit.r_squared:.4f}")
        lines.extend(f"warning: {w}" for w in self.warnings)
        return "\n".join(lines)

    def to_csv(self) -> str:
        return _render_csv([self.variable, self.unit, "spread"], self._rows())

    def to_dict(self) -> Dict[str, Any]:
        return {
            "variable": self.variable,
            "values": self.values,
            "measurements": self.measurements,
            "unit": self.unit,
            "fits": {name: fit.to_dict() for name, fit in self.fits.items()},
            "spread": self.spread,
            "warnings": self.warnings,
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


@dataclass
class OracleReport:
    """Deviation of a fast computation from its reference."""
    kernel: str
    shapes: List[str] = field(default_factory=list)
    max_abs: float = 0.0
    max_rel: float = 0.0
    threshold: float = 0.0
    groups: Dict[str, float] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        deviation = max(self.groups.values()) if self.groups else self.max_abs
        return bool(np.isfinite(deviation)) and deviation <= self.threshold

    def to_dict(self) -> Dict[str, Any]:
        return {
            "kernel": self.kernel,
            "shapes_tested": len(self.shapes),
            "max_abs": self.max_abs,
            "max_rel": self.max_rel,
            "threshold": self.threshold,
            "groups": self.groups,
            "passed": self.passed,
            "notes": self.notes,
        }


@dataclass
class TrainRecord:
    """One logged optimization step."""
    step: int
    loss: float
    accuracy: float
    wall_time: float
    seed: int
    config_hash: str
    learning_rate: float = 0.0

    def trajectory_key(self) -> tuple:
        """Fields that must match bit-for-bit across deterministic runs."""
        return (self.step, self.loss, self.accuracy, self.seed, self.config_hash)

    def to_dict(self) -> Dict[str, Any]:
        return {
            "step": self.step,
            "loss": self.loss,
            "accuracy": self.accuracy,
            "wall_time": self.wall_time,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "learning_rate": self.learning_rate,
        }


@dataclass
class EvalResult:
    """Accuracy at one or more resolutions."""
    accuracy: float
    per_resolution: Dict[int, float] = field(default_factory=dict)
    samples: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return {"accuracy": self.accuracy,
                "per_resolution": {str(k): v for k, v in self.per_resolution.items()},
                "samples": self.samples}
