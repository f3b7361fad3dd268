"""
Training and evaluation loops.

A step draws a batch from a seeded generator, runs a train-mode forward on
a fresh tape, backpropagates the mean cross-entropy and applies one
optimizer update. In 64-bit single-lane mode two runs with the same seed
produce identical records.
"""
import logging
import time
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from ..core import ops
from ..core.errors import ConfigError, NumericalError, SpanOverflowError, TrainingDivergedError
from ..core.models import EvalResult, Mode, TrainRecord
from ..core.tensor import Tape, Tensor, backward, no_grad
from ..model.resnet import Model
from ..storage.checkpoint import save_model
from .optimizer import MomentumSGD
from .task import Dataset, rescale_dataset

logger = logging.getLogger(__name__)


def _batch_indices(rng: np.random.Generator, n: int, batch_size: int) -> np.ndarray:
    if batch_size >= n:
        return np.arange(n)
    return np.sort(rng.choice(n, size=batch_size, replace=False))


def _check_classes(model: Model, dataset: Dataset) -> None:
    classes = model.spec.num_classes
    if len(dataset) and int(dataset.labels.max()) >= classes:
        raise ConfigError(f"{model.name} predicts {classes} classes; labels reach {int(dataset.labels.max())}")
    if dataset.images.shape[-1] != model.spec.in_channels:
        raise ConfigError(f"{model.name} takes {model.spec.in_channels} channels; dataset has {dataset.images.shape[-1]}")


def train(model: Model, dataset: Dataset, optimizer: MomentumSGD, steps: int, seed: int = 0,
          batch_size: int = 8, checkpoint_every: int = 0, checkpoint_dir: Optional[Union[str, Path]] = None,
          config_hash: str = "", log_every: int = 50) -> List[TrainRecord]:
    """
    Run ``steps`` optimizer steps and return one record per step.

    With ``checkpoint_every > 0`` the model is saved every that many steps
    under ``checkpoint_dir``. A non-finite loss aborts with
    ``TrainingDivergedError`` naming the last checkpoint written.
    """
    if steps < 0 or batch_size < 1:
        raise ConfigError(f"steps must be >= 0 and batch_size >= 1, got {steps} and {batch_size}")
    if checkpoint_every and checkpoint_dir is None:
        raise ConfigError("checkpoint_every needs a checkpoint_dir")
    _check_classes(model, dataset)
    rng = np.random.default_rng(seed)
    dtype = model.precision.dtype
    records: List[TrainRecord] = []
    last_good: Optional[str] = None
    started = time.perf_counter()

    for step in range(1, steps + 1):
        idx = _batch_indices(rng, len(dataset), batch_size)
        x = Tensor(dataset.images[idx], dtype=dtype)
        labels = dataset.labels[idx]
        try:
            with Tape(model.precision) as tape:
                logits = model(x, Mode.TRAIN)
                loss = ops.softmax_cross_entropy(logits, labels)
            value = loss.item()
            if not np.isfinite(value):
                raise NumericalError(f"loss is {value}")
            backward(tape, loss)
        except NumericalError as e:
            logger.error(f"training diverged at step {step}: {e}; last good checkpoint {last_good}")
            raise TrainingDivergedError(step, last_good) from e
        rate = optimizer.step(tape)
        accuracy = float(np.mean(np.argmax(logits.data, axis=1) == labels))
        record = TrainRecord(step, value, accuracy, time.perf_counter() - started, seed, config_hash, rate)
        records.append(record)
        if log_every and step % log_every == 0:
            logger.info(f"step {step}/{steps}: loss {value:.4f}, accuracy {accuracy:.3f}, lr {rate:g}")
        else:
            logger.debug(f"step {step}: loss {value:.6f}")
        if checkpoint_every and step % checkpoint_every == 0:
            path = Path(checkpoint_dir) / f"{model.name}-step{step:06d}.axck"
            last_good = str(save_model(model, path, config_hash, {"step": step, "seed": seed,
                                                                   "optimizer": optimizer.state.to_dict()}))
    return records


def predict(model: Model, images: np.ndarray, batch_size: int = 64) -> np.ndarray:
    """Eval-mode class predictions."""
    out = []
    with no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = Tensor(images[start:start + batch_size], dtype=model.precision.dtype)
            out.append(np.argmax(model(x, Mode.EVAL).data, axis=1))
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def evaluate(model: Model, dataset: Dataset, resolution: Union[int, Sequence[int], None] = None,
             batch_size: int = 64) -> EvalResult:
    """
    Accuracy at the dataset's resolution or at each requested one.

    Larger resolutions rescale the images (markers included). A model whose
    Global-span tables were sized for a smaller input raises ``SpanOverflowError``.
    """
    _check_classes(model, dataset)
    if resolution is None:
        resolutions = [dataset.resolution]
    elif isinstance(resolution, int):
        resolutions = [resolution]
    else:
        resolutions = list(resolution)
    per_resolution: Dict[int, float] = {}
    for res in resolutions:
        data = rescale_dataset(dataset, res)
        predictions = predict(model, data.images, batch_size)
        per_resolution[res] = float(np.mean(predictions == data.labels))
        logger.info(f"{model.name} at {res}px: accuracy {per_resolution[res]:.4f} on {len(data)} samples")
    return EvalResult(per_resolution[resolutions[0]], per_resolution, len(dataset))


def scale_stress(models: Dict[str, Model], dataset: Dataset, resolutions: Sequence[int],
                 baseline: Optional[str] = None) -> Dict[str, Dict[str, Any]]:
    """
    Per model: accuracy at every resolution and the drop from the dataset's own resolution.

    A resolution a model cannot run at is recorded as ``None`` with the reason.
    Naming a ``baseline`` adds, for every other model and resolution, the
    ``margin`` (baseline drop minus own drop) and ``loses_less``, True when the
    model's drop is strictly smaller than the baseline's.
    """
    if baseline is not None and baseline not in models:
        raise ConfigError(f"baseline {baseline!r} is not among the models {sorted(models)}")
    base = dataset.resolution
    table: Dict[str, Dict[str, Any]] = {}
    for name, model in models.items():
        accuracy: Dict[int, Optional[float]] = {}
        notes: Dict[int, str] = {}
        for res in sorted(set([base, *resolutions])):
            try:
                accuracy[res] = evaluate(model, dataset, res).accuracy
            except SpanOverflowError as e:
                accuracy[res] = None
                notes[res] = str(e)
                logger.warning(f"{name} cannot run at {res}px: {e}")
        reference = accuracy[base]
        drop = {res: (reference - acc if reference is not None and acc is not None else None)
                for res, acc in accuracy.items()}
        table[name] = {"accuracy": accuracy, "drop": drop, "notes": notes}
    if baseline is None:
        return table

    control = table[baseline]["drop"]
    for name, row in table.items():
        if name == baseline:
            continue
        margin: Dict[int, Optional[float]] = {}
        for res, own in row["drop"].items():
            if res == base:
                continue
            margin[res] = control[res] - own if own is not None and control[res] is not None else None
        row["margin"] = margin
        row["loses_less"] = {res: (m > 0 if m is not None else None) for res, m in margin.items()}
        for res, m in margin.items():
            if m is not None:
                logger.info(f"{name} vs {baseline} at {res}px: drop {row['drop'][res]:.4f} vs {control[res]:.4f}")
    return table
