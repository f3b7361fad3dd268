"""
Dense tensors and a recording tape for exact reverse-mode gradients.

Feature maps use the (batch, height, width, channel) layout. Every
differentiable primitive is a ``Function`` subclass (see ``src/core/ops.py``)
whose ``forward`` works on raw arrays and whose ``apply`` maps the output
gradient to one gradient per input.
"""
import itertools
import logging
from contextlib import contextmanager
from contextvars import ContextVar
from dataclasses import dataclass
from typing import Any, Callable, Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from .config import config
from .errors import (
    AbsentGradientError,
    ContractError,
    EvaluationError,
    NumericalError,
)
from .models import Precision

logger = logging.getLogger(__name__)

_tensor_ids = itertools.count()
_active_tape: ContextVar[Optional["Tape"]] = ContextVar("axial_active_tape", default=None)

ArrayLike = Union[np.ndarray, Sequence[Any], float, int]


class Tensor:
    """Immutable dense array with an identity on the tape."""

    __slots__ = ("data", "requires_grad", "id", "name", "_grad")

    def __init__(self, data: ArrayLike, requires_grad: bool = False, name: Optional[str] = None,
                 dtype: Optional[Union[str, np.dtype]] = None):
        if dtype is None:
            dtype = data.dtype if isinstance(data, np.ndarray) and data.dtype.kind == "f" else np.float64
        self.data = np.array(data, dtype=dtype, copy=True, order="C")
        self.requires_grad = requires_grad
        self.id = next(_tensor_ids)
        self.name = name
        self._grad: Optional[np.ndarray] = None

    @classmethod
    def wrap(cls, array: np.ndarray, requires_grad: bool = False, name: Optional[str] = None) -> "Tensor":
        """Adopt an array produced by an operation without copying it."""
        t = cls.__new__(cls)
        t.data = np.ascontiguousarray(array)
        t.requires_grad = requires_grad
        t.id = next(_tensor_ids)
        t.name = name
        t._grad = None
        return t

    @classmethod
    def zeros(cls, shape: Sequence[int], precision: Precision = Precision.FLOAT64, **kwargs) -> "Tensor":
        return cls.wrap(np.zeros(tuple(shape), dtype=precision.dtype), **kwargs)

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def grad(self) -> np.ndarray:
        """Gradient written by the last ``backward`` that reached this tensor."""
        if self._grad is None:
            raise AbsentGradientError(f"tensor {self.name or self.id} {self.shape} has no gradient")
        return self._grad

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single element, tensor has shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor.wrap(self.data, requires_grad=False, name=self.name)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype.name}, requires_grad={self.requires_grad}{label})"


@dataclass
class Node:
    """One recorded operation."""
    function: "Function"
    inputs: Tuple[Tensor, ...]
    output: Tensor


class Tape:
    """
    Computation context: fixes the precision of a graph and records its nodes.

    Used as a context manager; operations executed inside the block are
    recorded in execution order, which is a valid topological order.
    """

    def __init__(self, precision: Union[Precision, str, None] = None, check_finite: Optional[bool] = None,
                 recording: bool = True):
        if not isinstance(precision, Precision):
            precision = Precision(precision or config.numerics.precision)
        self.precision = precision
        self.check_finite = config.numerics.check_finite if check_finite is None else check_finite
        self.recording = recording
        self.nodes: List[Node] = []
        self._outputs: Dict[int, Tensor] = {}
        self._grads: Dict[int, np.ndarray] = {}
        self._graded: List[Tensor] = []
        self._done = False
        self._tokens: List[Any] = []

    @property
    def dtype(self) -> np.dtype:
        return self.precision.dtype

    def __enter__(self) -> "Tape":
        self._tokens.append(_active_tape.set(self))
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._tokens.pop())

    def __len__(self) -> int:
        return len(self.nodes)

    def record(self, function: "Function", inputs: Tuple[Tensor, ...], output: Tensor) -> None:
        if self._done:
            raise ContractError("tape already ran backward; call reset() before recording a new graph")
        self.nodes.append(Node(function, inputs, output))
        self._outputs[output.id] = output

    def grad(self, tensor: Tensor) -> np.ndarray:
        try:
            return self._grads[tensor.id]
        except KeyError:
            raise AbsentGradientError(f"tensor {tensor.name or tensor.id} {tensor.shape} received no gradient on this tape")

    def reset(self) -> None:
        """Forget recorded nodes and gradients so the tape can be reused."""
        for t in self._graded:
            t._grad = None
        self.nodes.clear()
        self._outputs.clear()
        self._grads.clear()
        self._graded.clear()
        self._done = False


def active_tape() -> Optional[Tape]:
    return _active_tape.get()


@contextmanager
def no_grad() -> Iterator[None]:
    """Evaluate without recording, whatever tape is active."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)


class Function:
    """
    Base class for differentiable operations.

    Subclasses implement ``forward(*arrays)`` and ``apply(grad_output)``;
    ``apply`` returns one gradient (or None) per input, in input order.
    """

    name = "function"

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError("Subclass must implement forward()")

    def apply(self, grad_output: np.ndarray) -> Tuple[Optional[np.ndarray], ...]:
        raise NotImplementedError("Subclass must implement apply()")

    def __call__(self, *inputs: Tensor) -> Tensor:
        tape = active_tape()
        dtype = _common_dtype(self.name, inputs)
        if tape is not None and dtype != tape.dtype:
            raise ContractError(f"{self.name}: {dtype.name} input inside a {tape.precision.value} context")
        self.dtype = dtype
        out = self.forward(*(t.data for t in inputs))
        if out.dtype != dtype:
            out = out.astype(dtype)
        check = tape.check_finite if tape is not None else config.numerics.check_finite
        if check and not np.isfinite(out).all():
            raise NumericalError(f"{self.name} produced non-finite values")
        requires_grad = tape is not None and tape.recording and any(t.requires_grad for t in inputs)
        result = Tensor.wrap(out, requires_grad=requires_grad)
        if requires_grad:
            tape.record(self, tuple(inputs), result)
        return result


def _common_dtype(name: str, inputs: Sequence[Tensor]) -> np.dtype:
    dtypes = {t.dtype for t in inputs}
    if len(dtypes) != 1:
        raise ContractError(f"{name}: mixed precisions in one graph: {sorted(d.name for d in dtypes)}")
    return dtypes.pop()


def backward(tape: Tape, loss: Tensor) -> Dict[int, np.ndarray]:
    """
    Propagate d(loss)/d(.) to every requires_grad ancestor of ``loss``.

    Returns the gradient buffers keyed by tensor id; each tensor's ``grad``
    property is populated as well.
    """
    if tape._done:
        raise ContractError("backward already ran on this tape; call reset() first")
    if loss.size != 1:
        raise ContractError(f"loss must be a scalar, got shape {loss.shape}")
    if loss.id not in tape._outputs:
        raise ContractError("loss was not produced on this tape")

    grads: Dict[int, np.ndarray] = {loss.id: np.ones(loss.shape, dtype=tape.dtype)}
    seen: Dict[int, Tensor] = {loss.id: loss}
    for node in reversed(tape.nodes):
        g = grads.get(node.output.id)
        if g is None:
            continue
        input_grads = node.function.apply(g)
        for tensor, gi in zip(node.inputs, input_grads):
            if gi is None or not tensor.requires_grad:
                continue
            if gi.shape != tensor.shape:
                raise ContractError(f"{node.function.name} returned a {gi.shape} gradient for a {tensor.shape} input")
            if tensor.id in grads:
                grads[tensor.id] = grads[tensor.id] + gi
            else:
                grads[tensor.id] = gi
                seen[tensor.id] = tensor

    for tid, tensor in seen.items():
        tensor._grad = grads[tid]
        tape._graded.append(tensor)
    tape._grads = grads
    tape._done = True
    logger.debug(f"backward over {len(tape.nodes)} nodes reached {len(grads)} tensors")
    return grads


def finite_difference_grad(f: Callable[[Tensor], Union[Tensor, float]], x: Tensor, step: float = 1e-5,
                           indices: Optional[Sequence[int]] = None) -> Tensor:
    """
    Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every element of x.

    With ``indices`` only those flat positions are differenced; the rest stay zero.
    """
    if not step > 0:
        raise ContractError(f"finite-difference step must be positive, got {step}")

    def evaluate(values: np.ndarray) -> float:
        with no_grad():
            out = f(Tensor.wrap(values))
        value = out.item() if isinstance(out, Tensor) else float(out)
        if not np.isfinite(value):
            raise EvaluationError(f"objective evaluated to {value} during finite differences")
        return value

    base = x.data
    grad = np.zeros_like(base)
    flat = grad.reshape(-1)
    for i in (range(base.size) if indices is None else indices):
        plus = base.copy()
        plus.reshape(-1)[i] += step
        minus = base.copy()
        minus.reshape(-1)[i] -= step
        flat[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)
    return Tensor.wrap(grad)
