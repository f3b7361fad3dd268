"""
Reference attention by literal nested loops.

Nothing here calls the fast kernels or their window logic: projections,
windows, table lookups and softmax are written out with scalar Python
arithmetic in 64-bit, one output position and one key at a time.
"""
import math
from typing import List, Optional, Sequence, Union

import numpy as np

from ..core.errors import DimensionError, OracleSizeError
from ..core.models import Axis, Span
from ..core.tensor import Tensor
from ..model.attention import AttentionParams

MAX_EXTENT = 16

Vector = List[float]


def _array(x: Union[Tensor, np.ndarray]) -> np.ndarray:
    data = x.data if isinstance(x, Tensor) else np.asarray(x)
    if data.ndim != 4:
        raise DimensionError("oracles take (batch, height, width, channel) inputs", data.shape)
    if data.shape[1] > MAX_EXTENT or data.shape[2] > MAX_EXTENT:
        raise OracleSizeError(f"oracle input {data.shape} exceeds {MAX_EXTENT}x{MAX_EXTENT}")
    return data.astype(np.float64)


def _matvec(w: np.ndarray, rows: range, x: Sequence[float]) -> Vector:
    out = []
    for r in rows:
        acc = 0.0
        for c in range(len(x)):
            acc += float(w[r, c]) * float(x[c])
        out.append(acc)
    return out


def _dot(a: Sequence[float], b: Sequence[float]) -> float:
    acc = 0.0
    for i in range(len(a)):
        acc += float(a[i]) * float(b[i])
    return acc


def _softmax(logits: Vector) -> Vector:
    top = max(logits)
    exps = [math.exp(v - top) for v in logits]
    total = 0.0
    for e in exps:
        total += e
    return [e / total for e in exps]


def _span_radius(m: Union[int, Span, None]) -> Optional[int]:
    span = m if isinstance(m, Span) else Span.parse(m)
    return span.radius


def _attend(x: np.ndarray, params: AttentionParams, members, row_of, use_rq: bool, use_rk: bool, use_rv: bool) -> np.ndarray:
    """
    Shared scalar loop: ``members(i, j)`` lists the key positions of query (i, j),
    ``row_of(i, j, pi, pj)`` the table row of their offset.
    """
    b, h, w, _ = x.shape
    n_heads, d_q, d_out = params.heads, params.d_q, params.d_out
    wq, wk, wv = params.w_q.data, params.w_k.data, params.w_v.data
    rq = params.r_q.data if use_rq else None
    rk = params.r_k.data if use_rk else None
    rv = params.r_v.data if use_rv else None
    out = np.zeros((b, h, w, n_heads * d_out))
    for bi in range(b):
        for n in range(n_heads):
            q_rows = range(n * d_q, (n + 1) * d_q)
            v_rows = range(n * d_out, (n + 1) * d_out)
            q = [[_matvec(wq, q_rows, x[bi, i, j]) for j in range(w)] for i in range(h)]
            k = [[_matvec(wk, q_rows, x[bi, i, j]) for j in range(w)] for i in range(h)]
            v = [[_matvec(wv, v_rows, x[bi, i, j]) for j in range(w)] for i in range(h)]
            for i in range(h):
                for j in range(w):
                    keys = members(i, j)
                    logits = []
                    for pi, pj in keys:
                        logit = _dot(q[i][j], k[pi][pj])
                        if rq is not None:
                            logit += _dot(q[i][j], rq[row_of(i, j, pi, pj)])
                        if rk is not None:
                            logit += _dot(k[pi][pj], rk[row_of(i, j, pi, pj)])
                        logits.append(logit)
                    weights = _softmax(logits)
                    for e in range(d_out):
                        acc = 0.0
                        for a, (pi, pj) in zip(weights, keys):
                            value = v[pi][pj][e]
                            if rv is not None:
                                value += float(rv[row_of(i, j, pi, pj)][e])
                            acc += a * value
                        out[bi, i, j, n * d_out + e] = acc
    return out


def _square_members(h: int, w: int, radius: Optional[int]):
    def members(i, j):
        keys = []
        for pi in range(h):
            for pj in range(w):
                if radius is None or (abs(pi - i) <= radius and abs(pj - j) <= radius):
                    keys.append((pi, pj))
        return keys
    return members


def _planar_row(params: AttentionParams):
    side = 2 * params.table_radius + 1
    radius = params.table_radius

    def row_of(i, j, pi, pj):
        return (pi - i + radius) * side + (pj - j + radius)
    return row_of


def oracle_global_2d(x: Union[Tensor, np.ndarray], params: AttentionParams) -> Tensor:
    """Global content attention over every position of the lattice."""
    data = _array(x)
    members = _square_members(data.shape[1], data.shape[2], None)
    return Tensor(_attend(data, params, members, None, False, False, False))


def oracle_local_2d(x: Union[Tensor, np.ndarray], params: AttentionParams, m: Union[int, Span, None]) -> Tensor:
    """m x m window attention with the query positional bias q . r^q."""
    data = _array(x)
    members = _square_members(data.shape[1], data.shape[2], _span_radius(m))
    return Tensor(_attend(data, params, members, _planar_row(params), True, False, False))


def oracle_ps_2d(x: Union[Tensor, np.ndarray], params: AttentionParams, m: Union[int, Span, None]) -> Tensor:
    """m x m window attention with query, key and value positional terms."""
    data = _array(x)
    members = _square_members(data.shape[1], data.shape[2], _span_radius(m))
    return Tensor(_attend(data, params, members, _planar_row(params), True, True, True))


def oracle_axial(x: Union[Tensor, np.ndarray], params: AttentionParams, axis: Axis,
                 m: Union[int, Span, None]) -> Tensor:
    """1 x m position-sensitive attention along one axis, every line independently."""
    data = _array(x)
    h, w = data.shape[1:3]
    radius = _span_radius(m)
    table_radius = params.table_radius

    def members(i, j):
        keys = []
        if axis is Axis.WIDTH:
            for pj in range(w):
                if radius is None or abs(pj - j) <= radius:
                    keys.append((i, pj))
        else:
            for pi in range(h):
                if radius is None or abs(pi - i) <= radius:
                    keys.append((pi, j))
        return keys

    def row_of(i, j, pi, pj):
        return (pj - j if axis is Axis.WIDTH else pi - i) + table_radius

    return Tensor(_attend(data, params, members, row_of, True, True, True))
