"""
Axial-ResNet assembly.

Models are built from ``plan_model``: the same plan drives the analytic
cost counters, so a built model's parameter count equals ``count_params``.
"""
import logging
from contextlib import contextmanager
from typing import Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from ..core.config import config
from ..core.errors import DimensionError
from ..core.models import BlockType, Mode, ModelSpec, Precision
from ..core.tensor import Tensor
from .blocks import Block, build_block
from .layers import AttentionLayer, BatchNorm, Layer
from .plan import LayerKind, ModelPlan, plan_model

logger = logging.getLogger(__name__)


class Model(Layer):
    """Stem, residual stages and head, run in order."""

    def __init__(self, plan: ModelPlan, rng: np.random.Generator, precision: Precision,
                 workers: Optional[int] = None):
        super().__init__(plan.spec.name)
        self.plan = plan
        self.spec = plan.spec
        self.precision = precision
        self.blocks: List[Block] = []
        for block_plan in plan.blocks:
            block = build_block(block_plan, rng, precision, workers)
            self._children[block_plan.name] = block
            self.blocks.append(block)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if x.ndim != 4 or x.shape[-1] != self.spec.in_channels:
            raise DimensionError(f"{self.name} expects (batch, height, width, {self.spec.in_channels}) input", x.shape)
        for block in self.blocks:
            x = block(x, mode)
        return x

    def attention_layers(self) -> Dict[str, AttentionLayer]:
        return {m.name: m for m in self.modules() if isinstance(m, AttentionLayer)}

    def batch_norms(self) -> List[BatchNorm]:
        return [m for m in self.modules() if isinstance(m, BatchNorm)]

    def state_dict(self) -> Dict[str, np.ndarray]:
        state = {name: t.data for name, t in self.named_parameters()}
        state.update(dict(self.named_buffers()))
        return state

    def load_state(self, state: Dict[str, np.ndarray]) -> None:
        """Copy parameters and running statistics from ``state``; every name must match."""
        params = dict(self.named_parameters())
        buffers = {name: layer for layer in self.batch_norms() for name, _ in layer.named_buffers()}
        missing = (set(params) | set(buffers)) - set(state)
        unknown = set(state) - set(params) - set(buffers)
        if missing or unknown:
            raise DimensionError(f"state does not fit {self.name}: missing {sorted(missing)[:5]}, unknown {sorted(unknown)[:5]}")
        for name, tensor in params.items():
            value = np.asarray(state[name])
            if value.shape != tensor.shape:
                raise DimensionError(f"parameter {name}", value.shape, tensor.shape)
            tensor.data = np.array(value, dtype=tensor.dtype)
        for name, layer in buffers.items():
            layer.set_buffer(name, state[name])

    @contextmanager
    def freeze_statistics(self) -> Iterator["Model"]:
        """Train-mode forwards inside the block leave running statistics untouched."""
        norms = self.batch_norms()
        previous = [bn.state.frozen for bn in norms]
        for bn in norms:
            bn.state.frozen = True
        try:
            yield self
        finally:
            for bn, flag in zip(norms, previous):
                bn.state.frozen = flag


def build_axial_resnet(spec: ModelSpec, seed: int = 0, precision: Union[Precision, str, None] = None,
                       resolution: Optional[int] = None, workers: Optional[int] = None) -> Model:
    """Instantiate ``spec``; Global-span tables are sized for ``resolution`` (default: the spec's)."""
    if not isinstance(precision, Precision):
        precision = Precision(precision or config.numerics.precision)
    plan = plan_model(spec, resolution)
    model = Model(plan, np.random.default_rng(seed), precision, workers)
    logger.info(f"built {spec.name}: {model.param_count():,} parameters at {plan.resolution}px, {precision.value}")
    return model


def conv_twin(spec: ModelSpec) -> ModelSpec:
    """Same stem, depth and widths with 3x3 convolutions in place of spatial attention."""
    data = spec.to_dict()
    data["block"] = BlockType.CONV3X3.value
    data["name"] = f"{spec.name}-conv3x3"
    return ModelSpec.from_dict(data)


def baseline_convnet(spec: ModelSpec, seed: int = 0, precision: Union[Precision, str, None] = None,
                     resolution: Optional[int] = None) -> Model:
    """Control arm: the residual bottleneck stack of ``spec`` with 3x3 convolutions."""
    return build_axial_resnet(conv_twin(spec), seed, precision, resolution)


def model_forward(model: Model, x: Union[Tensor, np.ndarray], mode: Mode = Mode.EVAL) -> Tensor:
    """Logits of shape (batch, num_classes)."""
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=model.precision.dtype)
    return model(x, mode)


def receptive_field(spec: ModelSpec, resolution: Optional[int] = None) -> Tuple[int, int]:
    """
    Extent of input pixels that can reach one final feature, per (height, width).

    A Global-span attention layer makes its axis cover the whole input.
    """
    plan = plan_model(spec, resolution)
    size = [1, 1]
    jump = [1, 1]
    covers = [False, False]
    for block in plan.blocks:
        for layer in block.layers.values():
            if layer.name.endswith((".proj", ".bn_proj")):
                continue
            if layer.kind in (LayerKind.CONV, LayerKind.MAX_POOL, LayerKind.AVG_POOL):
                for a in (0, 1):
                    size[a] += (layer.kernel - 1) * jump[a]
                    jump[a] *= layer.stride
            elif layer.kind is LayerKind.CONV1X1:
                for a in (0, 1):
                    jump[a] *= layer.stride
            elif layer.kind in (LayerKind.AXIAL_ATTENTION, LayerKind.PLANAR_ATTENTION):
                cfg = layer.attention
                axes = (0, 1) if layer.kind is LayerKind.PLANAR_ATTENTION else (cfg.axis.index - 1,)
                for a in axes:
                    if cfg.span.is_global:
                        covers[a] = True
                    else:
                        size[a] += (cfg.span.m - 1) * jump[a]
                for a in axes:
                    jump[a] *= layer.stride
    return tuple(plan.resolution if covers[a] else size[a] for a in (0, 1))
