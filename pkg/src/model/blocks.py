"""Residual bottleneck blocks, stems and the classification head."""
import logging
from typing import Dict, Optional

import numpy as np

from ..core import ops
from ..core.errors import ConfigError
from ..core.models import Mode, Precision
from ..core.tensor import Tensor
from .layers import Layer, build_layer
from .plan import BlockPlan

logger = logging.getLogger(__name__)


class Block(Layer):
    """Layers of one ``BlockPlan``, addressable by role (``conv_down``, ``attn_h``, ...)."""

    def __init__(self, plan: BlockPlan, rng: np.random.Generator, precision: Precision,
                 workers: Optional[int] = None):
        super().__init__(plan.name)
        self.plan = plan
        self.layers: Dict[str, Layer] = {
            role: self.add_child(role, build_layer(layer_plan, rng, precision, workers))
            for role, layer_plan in plan.layers.items()
        }

    def _check_channels(self, x: Tensor) -> None:
        if x.shape[-1] != self.plan.in_channels:
            raise ConfigError(f"{self.name} expects {self.plan.in_channels} input channels, got {x.shape[-1]}")


class ResidualBlock(Block):
    """
    1x1 down-projection, spatial mixing, 1x1 up-projection, residual add.

    Spatial mixing is two axial attention layers (height then width, nothing
    in between), a 3x3 convolution, or one 2D position-sensitive attention layer.
    """

    def _mix(self, h: Tensor, mode: Mode) -> Tensor:
        layers = self.layers
        if self.plan.kind == "axial":
            return ops.relu(layers["attn_w"](layers["attn_h"](h, mode), mode))
        if self.plan.kind == "ps2d":
            return ops.relu(layers["attn"](h, mode))
        return ops.relu(layers["bn_mid"](layers["conv_mid"](h, mode), mode))

    def shortcut(self, x: Tensor, mode: Mode) -> Tensor:
        if "proj" not in self.layers:
            return x
        return self.layers["bn_proj"](self.layers["proj"](x, mode), mode)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        self._check_channels(x)
        layers = self.layers
        h = ops.relu(layers["bn_down"](layers["conv_down"](x, mode), mode))
        h = self._mix(h, mode)
        h = layers["bn_up"](layers["conv_up"](h, mode), mode)
        # the sum is the output, so a zero bn_up gamma leaves exactly the shortcut
        return ops.add(h, self.shortcut(x, mode))


class Stem(Block):
    """Network entry: 7x7 conv + max-pool, pointwise projection, or the average pool ahead of stem blocks."""

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        self._check_channels(x)
        layers = self.layers
        if self.plan.kind == "pool_stem":
            return layers["pool"](x, mode)
        h = ops.relu(layers["bn"](layers["conv"](x, mode), mode))
        if "pool" in layers:
            h = layers["pool"](h, mode)
        return h


class Head(Block):
    """Global average pool and linear classifier."""

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        self._check_channels(x)
        return self.layers["fc"](self.layers["pool"](x, mode), mode)


def build_block(plan: BlockPlan, rng: np.random.Generator, precision: Precision,
                workers: Optional[int] = None) -> Block:
    if plan.kind.endswith("_stem"):
        return Stem(plan, rng, precision, workers)
    if plan.kind == "head":
        return Head(plan, rng, precision, workers)
    return ResidualBlock(plan, rng, precision, workers)
