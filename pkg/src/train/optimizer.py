"""Momentum SGD with a linear warm-up."""
import logging
from dataclasses import dataclass, field
from typing import Dict, List, Sequence

import numpy as np

from ..core.errors import AbsentGradientError, ConfigError, DimensionError
from ..core.tensor import Tape, Tensor

logger = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    """Hyper-parameters plus one velocity buffer per parameter name."""
    learning_rate: float
    momentum: float = 0.9
    warmup_steps: int = 0
    weight_decay: float = 0.0
    step: int = 0
    velocity: Dict[str, np.ndarray] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        return {
            "optimizer": "momentum_sgd",
            "learning_rate": self.learning_rate,
            "momentum": self.momentum,
            "warmup_steps": self.warmup_steps,
            "weight_decay": self.weight_decay,
            "step": self.step,
        }


class MomentumSGD:
    """
    v <- momentum * v + (g + weight_decay * p); p <- p - lr_t * v

    ``lr_t`` ramps linearly from lr / warmup_steps to lr over the first
    ``warmup_steps`` steps and stays constant afterwards.
    """

    def __init__(self, parameters: Sequence[Tensor], learning_rate: float = 0.1, momentum: float = 0.9,
                 warmup_steps: int = 0, weight_decay: float = 0.0):
        if learning_rate < 0 or not 0 <= momentum < 1 or warmup_steps < 0 or weight_decay < 0:
            raise ConfigError(f"invalid optimizer settings: lr={learning_rate}, momentum={momentum}, "
                              f"warmup={warmup_steps}, weight_decay={weight_decay}")
        self.parameters: List[Tensor] = list(parameters)
        names = [p.name or str(p.id) for p in self.parameters]
        if len(set(names)) != len(names):
            raise ConfigError("optimizer parameters need unique names")
        self.state = OptimizerState(learning_rate, momentum, warmup_steps, weight_decay)
        for name, p in zip(names, self.parameters):
            self.state.velocity[name] = np.zeros_like(p.data)

    def current_rate(self) -> float:
        s = self.state
        if s.warmup_steps and s.step < s.warmup_steps:
            return s.learning_rate * (s.step + 1) / s.warmup_steps
        return s.learning_rate

    def step(self, tape: Tape) -> float:
        """
        Apply one update from the gradients ``tape`` holds; returns the rate used.

        Parameters the last backward never reached keep their values and velocity.
        """
        s = self.state
        rate = self.current_rate()
        skipped: List[str] = []
        for p in self.parameters:
            name = p.name or str(p.id)
            try:
                g = tape.grad(p)
            except AbsentGradientError:
                skipped.append(name)
                continue
            v = s.velocity[name]
            if g.shape != v.shape:
                raise DimensionError(f"gradient of {p.name} does not match its velocity", g.shape, v.shape)
            if s.weight_decay:
                g = g + s.weight_decay * p.data
            v *= s.momentum
            v += g
            p.data = p.data - np.asarray(rate * v, dtype=p.dtype)
        if skipped:
            logger.debug(f"step {s.step}: no gradient for {len(skipped)} parameters ({', '.join(skipped[:4])})")
        s.step += 1
        return rate

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {f"velocity.{name}": v for name, v in self.state.velocity.items()}

    def load_state_arrays(self, arrays: Dict[str, np.ndarray], step: int) -> None:
        for name, v in self.state.velocity.items():
            key = f"velocity.{name}"
            if key not in arrays or arrays[key].shape != v.shape:
                raise DimensionError(f"optimizer state has no matching {key}")
            v[...] = arrays[key]
        self.state.step = step
