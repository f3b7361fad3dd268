"""Attention-map export: one CSV matrix per head and line, plus a JSON index."""
import io
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np

from ..core.errors import DimensionError, LayerNotFoundError
from ..core.models import Axis, Mode
from ..core.tensor import Tensor, no_grad
from ..model.layers import AttentionLayer
from ..model.resnet import Model
from .checkpoint import atomic_write

logger = logging.getLogger(__name__)


def select_layer(model: Model, selector: str) -> AttentionLayer:
    """Exact layer name, or a unique suffix such as ``stage2.block0.attn_w``."""
    layers = model.attention_layers()
    if selector in layers:
        return layers[selector]
    matches = [name for name in layers if name.endswith(selector)]
    if len(matches) != 1:
        raise LayerNotFoundError(selector, layers)
    return layers[matches[0]]


def _line_origin(layer: AttentionLayer, line: int, per_image: int) -> Dict[str, int]:
    if layer.planar:
        return {"batch": line}
    key = "row" if layer.axis is Axis.WIDTH else "column"
    return {"batch": line // per_image, key: line % per_image}


def dump_attention(model: Model, x: Union[Tensor, np.ndarray], selector: str, path: Union[str, Path],
                   heads: Optional[Sequence[int]] = None) -> Path:
    """
    Run ``x`` through ``model`` in eval mode and write the selected layer's softmax weights.

    Files are ``<layer>.head<n>.line<l>.csv`` (query rows, key columns; each
    row sums to 1) under ``path``, indexed by ``<layer>.json``.
    """
    layer = select_layer(model, selector)
    n_heads = layer.config.heads
    heads = list(range(n_heads)) if heads is None else list(heads)
    bad = [n for n in heads if not 0 <= n < n_heads]
    if bad:
        raise LayerNotFoundError(f"{layer.name} heads {bad}", [f"{layer.name} heads 0..{n_heads - 1}"])
    if not isinstance(x, Tensor):
        x = Tensor(x, dtype=model.precision.dtype)

    captured: List[np.ndarray] = []
    layer.capture = captured
    try:
        with no_grad():
            model(x, Mode.EVAL)
    finally:
        layer.capture = None
    if not captured:
        raise DimensionError(f"layer {layer.name} did not run for input", x.shape)
    weights = captured[0]
    per_image = max(1, weights.shape[0] // x.shape[0])

    out_dir = Path(path)
    out_dir.mkdir(parents=True, exist_ok=True)
    files: List[Dict[str, Any]] = []
    for n in heads:
        for line in range(weights.shape[0]):
            name = f"{layer.name}.head{n}.line{line}.csv"
            buffer = io.StringIO()
            np.savetxt(buffer, weights[line, n], delimiter=",", fmt="%.10g")
            atomic_write(out_dir / name, buffer.getvalue())
            files.append({"head": n, "line": line, "file": name, **_line_origin(layer, line, per_image)})
    index = {
        "layer": layer.name,
        "kind": "planar" if layer.planar else "axial",
        "axis": None if layer.planar else layer.axis.value,
        "span": layer.config.span.to_json(),
        "heads": heads,
        "lines": int(weights.shape[0]),
        "length": int(weights.shape[-1]),
        "input_shape": list(x.shape),
        "max_row_sum_error": float(np.max(np.abs(weights.sum(axis=-1) - 1.0))),
        "files": files,
    }
    index_path = out_dir / f"{layer.name}.json"
    atomic_write(index_path, json.dumps(index, indent=2))
    logger.info(f"exported {len(files)} attention maps of {layer.name} to {out_dir}")
    return index_path
