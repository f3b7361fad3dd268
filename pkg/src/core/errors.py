"""Exception hierarchy shared by every axial-lab module."""
from typing import Iterable, Optional


class AxialError(Exception):
    """Base class for all axial-lab errors."""


class DimensionError(AxialError, ValueError):
    """Shapes or channel extents disagree."""

    def __init__(self, message: str, *shapes: Iterable[int]):
        if shapes:
            message = f"{message}: " + " vs ".join(str(tuple(s)) for s in shapes)
        super().__init__(message)


class DomainError(AxialError, ValueError):
    """An operation was asked to reduce over nothing."""


class ConfigError(AxialError, ValueError):
    """Invalid layer, model or run configuration."""


class ContractError(AxialError, RuntimeError):
    """An API was used outside its contract."""


class AbsentGradientError(ContractError):
    """A gradient was requested for a tensor that never received one."""


class NonDeterministicTargetError(ContractError):
    """Gradcheck target mutates state between evaluations."""


class NumericalError(AxialError, FloatingPointError):
    """A committed operation produced NaN or Inf."""


class EvaluationError(AxialError, ValueError):
    """An objective evaluated to a non-finite value."""


class OracleSizeError(AxialError, ValueError):
    """Oracle input exceeds the desk-scale guard."""


class SpanOverflowError(AxialError, ValueError):
    """An attended axis is longer than the layer's Global-span table."""


class LayerNotFoundError(AxialError, KeyError):
    """No attention layer matches a selector."""

    def __init__(self, selector: str, available: Iterable[str]):
        self.selector = selector
        self.available = list(available)
        super().__init__(f"no attention layer matches {selector!r}; available: {', '.join(self.available)}")

    def __str__(self) -> str:
        return str(self.args[0])


class BenchmarkError(AxialError, ValueError):
    """A benchmark request cannot produce a result."""


class TrainingDivergedError(AxialError, RuntimeError):
    """Loss became non-finite during training."""

    def __init__(self, step: int, last_good_checkpoint: Optional[str]):
        self.step = step
        self.last_good_checkpoint = last_good_checkpoint
        super().__init__(f"loss diverged at step {step}; last good checkpoint: {last_good_checkpoint or 'none'}")


class CheckpointError(AxialError, IOError):
    """Base class for checkpoint container failures."""


class FormatError(CheckpointError):
    """The file is not an axial-lab container."""


class CorruptionError(CheckpointError):
    """The container is truncated or its checksum does not verify."""


class VersionError(CheckpointError):
    """The container was written by a newer format version."""
