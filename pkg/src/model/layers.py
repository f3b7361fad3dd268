"""
Layers with named parameters and buffers.

Each concrete layer is built from a ``LayerPlan``; parameter tensors are
named by their dotted path (``stage1.block0.attn_h.w_q``) so checkpoints and
attention exports can address them.
"""
import logging
from dataclasses import dataclass
from typing import Dict, Iterator, List, Optional, Tuple

import numpy as np

from ..core import ops
from ..core.errors import DimensionError, SpanOverflowError
from ..core.models import Mode, PositionalMode, Precision
from ..core.tensor import Tensor
from .attention import AttentionParams, attend_axis, attend_planar, init_attention_params, project_qkv
from .plan import LayerKind, LayerPlan

logger = logging.getLogger(__name__)

BN_MOMENTUM = 0.1
BN_EPS = 1e-5


class Layer:
    """Base class: owns parameters, buffers and child layers."""

    def __init__(self, name: str):
        self.name = name
        self._params: Dict[str, Tensor] = {}
        self._children: Dict[str, "Layer"] = {}

    def add_param(self, key: str, values: np.ndarray, precision: Precision) -> Tensor:
        tensor = Tensor(values, requires_grad=True, name=f"{self.name}.{key}", dtype=precision.dtype)
        self._params[key] = tensor
        return tensor

    def add_child(self, key: str, layer: Optional["Layer"]) -> Optional["Layer"]:
        if layer is not None:
            self._children[key] = layer
        return layer

    def named_parameters(self) -> Iterator[Tuple[str, Tensor]]:
        for tensor in self._params.values():
            yield tensor.name, tensor
        for child in self._children.values():
            yield from child.named_parameters()

    def parameters(self) -> List[Tensor]:
        return [t for _, t in self.named_parameters()]

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        for child in self._children.values():
            yield from child.named_buffers()

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        raise KeyError(name)

    def modules(self) -> Iterator["Layer"]:
        yield self
        for child in self._children.values():
            yield from child.modules()

    def param_count(self) -> int:
        return sum(t.size for _, t in self.named_parameters())

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        raise NotImplementedError

    def __call__(self, x: Tensor, mode: Mode = Mode.EVAL) -> Tensor:
        return self.forward(x, mode)

    def __repr__(self) -> str:
        return f"{type(self).__name__}({self.name!r})"


@dataclass
class BatchNormState:
    """Affine parameters and running statistics of one normalization layer."""
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = BN_MOMENTUM
    eps: float = BN_EPS
    # batch statistics are still used in train mode; only the running update is skipped
    frozen: bool = False

    @property
    def channels(self) -> int:
        return self.gamma.shape[0]


def batch_norm(x: Tensor, state: BatchNormState, mode: Mode) -> Tensor:
    """Normalize over (batch, height, width); train mode uses and records batch moments."""
    if x.shape[-1] != state.channels:
        raise DimensionError(f"batch norm over {state.channels} channels", x.shape, state.gamma.shape)
    if mode is Mode.EVAL:
        return ops.batch_norm(x, state.gamma, state.beta, state.running_mean, state.running_var, state.eps)
    mean, var = ops.moments(x.data)
    y = ops.batch_norm(x, state.gamma, state.beta, eps=state.eps)
    if not state.frozen:
        n = x.size // state.channels
        unbiased = var * (n / (n - 1)) if n > 1 else var
        m = state.momentum
        state.running_mean = ((1 - m) * state.running_mean + m * mean).astype(state.running_mean.dtype)
        state.running_var = ((1 - m) * state.running_var + m * unbiased).astype(state.running_var.dtype)
    return y


class BatchNorm(Layer):
    def __init__(self, plan: LayerPlan, precision: Precision):
        super().__init__(plan.name)
        c = plan.c_out
        gamma = self.add_param("gamma", np.zeros(c) if plan.zero_init else np.ones(c), precision)
        beta = self.add_param("beta", np.zeros(c), precision)
        self.state = BatchNormState(gamma, beta, np.zeros(c, dtype=precision.dtype), np.ones(c, dtype=precision.dtype))

    def named_buffers(self) -> Iterator[Tuple[str, np.ndarray]]:
        yield f"{self.name}.running_mean", self.state.running_mean
        yield f"{self.name}.running_var", self.state.running_var

    def set_buffer(self, name: str, value: np.ndarray) -> None:
        key = name.rsplit(".", 1)[-1]
        if key not in ("running_mean", "running_var"):
            raise KeyError(name)
        setattr(self.state, key, np.array(value, dtype=self.state.running_mean.dtype))

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return batch_norm(x, self.state, mode)


class Conv1x1(Layer):
    """Pointwise projection; stride subsamples before projecting."""

    def __init__(self, plan: LayerPlan, rng: np.random.Generator, precision: Precision):
        super().__init__(plan.name)
        self.stride = plan.stride
        self.weight = self.add_param("weight", rng.normal(0.0, plan.c_in ** -0.5, (plan.c_out, plan.c_in)), precision)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if self.stride != 1:
            x = ops.subsample(ops.subsample(x, 1, self.stride), 2, self.stride)
        return ops.linear(x, self.weight)


class Conv(Layer):
    def __init__(self, plan: LayerPlan, rng: np.random.Generator, precision: Precision):
        super().__init__(plan.name)
        k = plan.kernel
        self.stride, self.padding = plan.stride, plan.padding
        std = (k * k * plan.c_in) ** -0.5
        self.weight = self.add_param("weight", rng.normal(0.0, std, (k, k, plan.c_in, plan.c_out)), precision)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return ops.conv2d(x, self.weight, self.stride, self.padding)


class Pool(Layer):
    def __init__(self, plan: LayerPlan):
        super().__init__(plan.name)
        self.kind = plan.kind
        self.kernel, self.stride, self.padding = plan.kernel, plan.stride, plan.padding

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        if self.kind is LayerKind.MAX_POOL:
            return ops.max_pool2d(x, self.kernel, self.stride, self.padding)
        if self.kind is LayerKind.AVG_POOL:
            return ops.avg_pool2d(x, self.kernel, self.stride, self.padding)
        return ops.global_avg_pool(x)


class Classifier(Layer):
    """Zero-initialized linear head with bias."""

    def __init__(self, plan: LayerPlan, precision: Precision):
        super().__init__(plan.name)
        self.weight = self.add_param("weight", np.zeros((plan.c_out, plan.c_in)), precision)
        self.bias = self.add_param("bias", np.zeros(plan.c_out), precision)

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        return ops.add(ops.linear(x, self.weight), self.bias)


class AttentionLayer(Layer):
    """
    Multi-head position-sensitive attention along one axis (or over square
    windows for planar layers), with batch norm after the q/k/v projections and
    after aggregation. Striding subsamples the attended axis afterwards.
    """

    def __init__(self, plan: LayerPlan, rng: np.random.Generator, precision: Precision,
                 workers: Optional[int] = None):
        super().__init__(plan.name)
        self.config = plan.attention
        self.planar = plan.kind is LayerKind.PLANAR_ATTENTION
        self.stride = plan.stride
        self.workers = workers
        self.params: AttentionParams = init_attention_params(
            self.config, plan.table_length, rng, precision, planar=self.planar, name=plan.name,
            extent=plan.table_extent,
        )
        for key, tensor in self.params.named_tensors().items():
            self._params[key] = tensor
        cfg = self.config
        qk, v = cfg.heads * cfg.d_q, cfg.total_out
        placement = plan.bn
        self.bn_q = self.bn_k = self.bn_v = self.bn_out = None
        if placement is not None and placement.qkv:
            self.bn_q = self.add_child("bn_q", self._bn("bn_q", qk, precision))
            self.bn_k = self.add_child("bn_k", self._bn("bn_k", qk, precision))
            self.bn_v = self.add_child("bn_v", self._bn("bn_v", v, precision))
        if placement is not None and placement.output:
            self.bn_out = self.add_child("bn_out", self._bn("bn_out", v, precision))
        # set to a list to collect softmax weights, one (lines, heads, L, L) array per forward
        self.capture: Optional[List[np.ndarray]] = None

    def _bn(self, key: str, channels: int, precision: Precision) -> BatchNorm:
        plan = LayerPlan(f"{self.name}.{key}", LayerKind.BATCH_NORM, channels, channels, (0, 0), (0, 0))
        return BatchNorm(plan, precision)

    @property
    def axis(self):
        return self.config.axis

    @property
    def positional_mode(self) -> PositionalMode:
        return self.config.positional_mode

    def forward(self, x: Tensor, mode: Mode) -> Tensor:
        q, k, v = project_qkv(x, self.params)
        if self.bn_q is not None:
            q, k, v = self.bn_q(q, mode), self.bn_k(k, mode), self.bn_v(v, mode)
        try:
            if self.planar:
                y = attend_planar(q, k, v, self.params, self.config.span, self.positional_mode, self.workers, self.capture)
            else:
                y = attend_axis(q, k, v, self.params, self.axis, self.config.span, self.positional_mode,
                                self.workers, self.capture)
        except SpanOverflowError as e:
            raise SpanOverflowError(f"layer {self.name}: {e}") from e
        if self.bn_out is not None:
            y = self.bn_out(y, mode)
        if self.stride != 1:
            if self.planar:
                y = ops.subsample(ops.subsample(y, 1, self.stride), 2, self.stride)
            else:
                y = ops.subsample(y, self.axis.index, self.stride)
        return y


def build_layer(plan: LayerPlan, rng: np.random.Generator, precision: Precision,
                workers: Optional[int] = None) -> Layer:
    kind = plan.kind
    if kind is LayerKind.CONV1X1:
        return Conv1x1(plan, rng, precision)
    if kind is LayerKind.CONV:
        return Conv(plan, rng, precision)
    if kind is LayerKind.BATCH_NORM:
        return BatchNorm(plan, precision)
    if kind in (LayerKind.AXIAL_ATTENTION, LayerKind.PLANAR_ATTENTION):
        return AttentionLayer(plan, rng, precision, workers)
    if kind is LayerKind.CLASSIFIER:
        return Classifier(plan, precision)
    return Pool(plan)
