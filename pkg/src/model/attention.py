"""
Position-sensitive attention kernels.

Every fast kernel goes through one fused operator, ``PositionalAttention``,
which works on a batch of independent lines: ``q`` and ``k`` are
(lines, positions, heads, d_q), ``v`` is (lines, positions, heads, d_out).
The relative offset of every (query, key) pair is mapped to a row of the
shared positional tables by a ``WindowIndex``; pairs outside the window are
masked out of the softmax, so clipped windows normalize over surviving
members only.
"""
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from ..core import ops
from ..core.config import config
from ..core.errors import ConfigError, DimensionError, DomainError, SpanOverflowError
from ..core.models import AxialAttentionConfig, Axis, PositionalMode, Precision, Span
from ..core.ops import contract
from ..core.tensor import Function, Tensor

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Window:
    """Members of the window centred on one position, with their relative offsets."""
    center: int
    members: Tuple[int, ...]
    offsets: Tuple[Union[int, Tuple[int, int]], ...]


@dataclass(frozen=True)
class WindowIndex:
    """
    Window members of every query laid out as fixed-width slots.

    Slot ``j`` of query ``o`` holds key ``members[o, j]`` and reads table row
    ``rows[o, j]``; ``valid`` is False where a clipped window has no member.
    When ``dense`` is set, slot ``j`` is key ``j`` for every query.
    """
    members: np.ndarray  # (P, K)
    valid: np.ndarray    # (P, K)
    rows: np.ndarray     # (P, K)
    table_rows: int
    width: int = 0       # lattice width for planar indices, 0 for a single axis
    dense: bool = False

    @property
    def positions(self) -> int:
        return self.members.shape[0]

    @property
    def slots(self) -> int:
        return self.members.shape[1]

    def _pairs(self) -> Tuple[np.ndarray, np.ndarray]:
        o, j = np.nonzero(self.valid)
        return o, self.members[o, j]

    @property
    def mask(self) -> np.ndarray:
        """(P, P) membership, True where p is in the window of o."""
        out = np.zeros((self.positions, self.positions), dtype=bool)
        out[self._pairs()] = True
        return out

    @property
    def index(self) -> np.ndarray:
        """(P, P) table row of offset p - o, 0 outside the window."""
        out = np.zeros((self.positions, self.positions), dtype=np.int64)
        out[self._pairs()] = self.rows[self.valid]
        return out

    def densify(self, slotted: np.ndarray) -> np.ndarray:
        """Scatter (..., P, K) per-slot values into (..., P, P) query-by-key matrices."""
        out = np.zeros(slotted.shape[:-2] + (self.positions, self.positions), dtype=slotted.dtype)
        o, p = self._pairs()
        out[..., o, p] = slotted[..., self.valid]
        return out

    def window(self, o: int) -> Window:
        members = tuple(int(p) for p in self.members[o][self.valid[o]])
        if self.width:
            oy, ox = divmod(o, self.width)
            offsets = tuple((p // self.width - oy, p % self.width - ox) for p in members)
        else:
            offsets = tuple(p - o for p in members)
        return Window(o, members, offsets)


def table_radius(span: Span, length: int, extent: int = 0) -> int:
    """
    Largest offset a table covers: L - 1 for Global span, m - 1 for Local(m).

    A positive ``extent`` widens the table to cover offsets up to extent - 1.
    """
    radius = length - 1 if span.is_global else span.m - 1
    return max(radius, extent - 1)


def _check_reach(length: int, span: Span, radius: int) -> None:
    reach = length - 1 if span.is_global else min(span.radius, length - 1)
    if reach > radius:
        raise SpanOverflowError(
            f"axis of length {length} needs offsets up to {reach}; positional table covers {radius}"
        )


def _check_length(length: int, span: Span, params: "AttentionParams") -> None:
    if span.is_global and params.max_length and length > params.max_length:
        raise SpanOverflowError(f"global attention built for axes up to {params.max_length} got an axis of {length}")


def window_index(length: int, span: Span, radius: int) -> WindowIndex:
    """1D windows along an axis of ``length`` positions."""
    if length < 1:
        raise DomainError("attention over an empty axis")
    _check_reach(length, span, radius)
    pos = np.arange(length)
    if span.is_global:
        members = np.broadcast_to(pos, (length, length))
        return WindowIndex(members, np.ones((length, length), dtype=bool),
                           members - pos[:, None] + radius, 2 * radius + 1, dense=True)
    reach = min(span.radius, length - 1)
    offsets = np.arange(-reach, reach + 1)
    keys = pos[:, None] + offsets[None, :]
    valid = (keys >= 0) & (keys < length)
    rows = np.where(valid, offsets[None, :] + radius, 0)
    return WindowIndex(np.clip(keys, 0, length - 1), valid, rows, 2 * radius + 1)


def window_index_2d(h: int, w: int, span: Span, radius: int) -> WindowIndex:
    """Square windows on an h x w lattice; tables are a (2R+1) x (2R+1) offset grid, row-major."""
    if h < 1 or w < 1:
        raise DomainError(f"attention over an empty {h}x{w} lattice")
    _check_reach(max(h, w), span, radius)
    side = 2 * radius + 1
    ys, xs = np.divmod(np.arange(h * w), w)
    if span.is_global:
        members = np.broadcast_to(np.arange(h * w), (h * w, h * w))
        rows = (ys[None, :] - ys[:, None] + radius) * side + (xs[None, :] - xs[:, None] + radius)
        return WindowIndex(members, np.ones((h * w, h * w), dtype=bool), rows, side * side, width=w, dense=True)
    ry, rx = min(span.radius, h - 1), min(span.radius, w - 1)
    dy, dx = (g.ravel() for g in np.meshgrid(np.arange(-ry, ry + 1), np.arange(-rx, rx + 1), indexing="ij"))
    ky = ys[:, None] + dy[None, :]
    kx = xs[:, None] + dx[None, :]
    valid = (ky >= 0) & (ky < h) & (kx >= 0) & (kx < w)
    members = np.clip(ky, 0, h - 1) * w + np.clip(kx, 0, w - 1)
    rows = np.where(valid, (dy[None, :] + radius) * side + (dx[None, :] + radius), 0)
    return WindowIndex(members, valid, rows, side * side, width=w)


@dataclass
class AttentionParams:
    """
    Projections of N heads stacked along rows, in (out, in) orientation,
    plus positional tables shared by all heads.
    """
    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    r_q: Optional[Tensor] = None
    r_k: Optional[Tensor] = None
    r_v: Optional[Tensor] = None
    heads: int = 1
    table_radius: int = 0
    planar: bool = False
    max_length: int = 0  # longest axis a Global span may attend over, 0 when the table alone bounds it

    def __post_init__(self):
        if self.w_q.shape[0] % self.heads or self.w_v.shape[0] % self.heads:
            raise ConfigError(f"projection rows do not split into {self.heads} heads")
        if self.w_q.shape != self.w_k.shape or self.w_q.shape[1] != self.w_v.shape[1]:
            raise DimensionError("query/key/value projections disagree", self.w_q.shape, self.w_k.shape, self.w_v.shape)
        rows = self.table_rows
        for name, width in (("r_q", self.d_q), ("r_k", self.d_q), ("r_v", self.d_out)):
            table = getattr(self, name)
            if table is not None and table.shape != (rows, width):
                raise DimensionError(f"{name} table must be ({rows}, {width})", table.shape)

    @property
    def d_in(self) -> int:
        return self.w_q.shape[1]

    @property
    def d_q(self) -> int:
        return self.w_q.shape[0] // self.heads

    @property
    def d_out(self) -> int:
        return self.w_v.shape[0] // self.heads

    @property
    def table_rows(self) -> int:
        side = 2 * self.table_radius + 1
        return side * side if self.planar else side

    def tables(self, mode: PositionalMode) -> List[Tensor]:
        """Tables that enter the computation in ``mode``."""
        wanted = {PositionalMode.NONE: (), PositionalMode.QUERY_ONLY: ("r_q",),
                  PositionalMode.FULL: ("r_q", "r_k", "r_v")}[mode]
        found = [getattr(self, name) for name in wanted]
        if any(t is None for t in found):
            raise ConfigError(f"{mode.value} attention needs tables {wanted}")
        return found

    def named_tensors(self) -> Dict[str, Tensor]:
        names = ("w_q", "w_k", "w_v", "r_q", "r_k", "r_v")
        return {n: getattr(self, n) for n in names if getattr(self, n) is not None}

    def head(self, n: int) -> "AttentionParams":
        """Copy of head ``n`` alone, sharing this layer's tables."""
        if not 0 <= n < self.heads:
            raise ConfigError(f"head {n} out of range for {self.heads} heads")
        q_rows = slice(n * self.d_q, (n + 1) * self.d_q)
        v_rows = slice(n * self.d_out, (n + 1) * self.d_out)
        return AttentionParams(
            w_q=Tensor(self.w_q.data[q_rows]), w_k=Tensor(self.w_k.data[q_rows]), w_v=Tensor(self.w_v.data[v_rows]),
            r_q=self.r_q, r_k=self.r_k, r_v=self.r_v, heads=1,
            table_radius=self.table_radius, planar=self.planar, max_length=self.max_length,
        )

    @classmethod
    def stack_heads(cls, heads: Sequence["AttentionParams"]) -> "AttentionParams":
        if not heads:
            raise ConfigError("at least one head is required")
        first = heads[0]
        for h in heads[1:]:
            if (h.d_out, h.d_q, h.d_in) != (first.d_out, first.d_q, first.d_in):
                raise ConfigError(f"heads disagree on sizes: d_out {first.d_out} vs {h.d_out}, d_q {first.d_q} vs {h.d_q}")
            for name in ("r_q", "r_k", "r_v"):
                a, b = getattr(first, name), getattr(h, name)
                shared = a is b or (a is not None and b is not None and np.array_equal(a.data, b.data))
                if not shared:
                    raise ConfigError(f"heads must share one {name} table")
            if (h.table_radius, h.planar, h.max_length) != (first.table_radius, first.planar, first.max_length):
                raise ConfigError("heads must share one table layout")
        return cls(
            w_q=Tensor(np.concatenate([h.w_q.data for h in heads])),
            w_k=Tensor(np.concatenate([h.w_k.data for h in heads])),
            w_v=Tensor(np.concatenate([h.w_v.data for h in heads])),
            r_q=first.r_q, r_k=first.r_k, r_v=first.r_v, heads=sum(h.heads for h in heads),
            table_radius=first.table_radius, planar=first.planar, max_length=first.max_length,
        )


def init_attention_params(cfg: AxialAttentionConfig, length: int, rng: np.random.Generator,
                          precision: Precision = Precision.FLOAT64, planar: bool = False,
                          name: str = "attention", extent: int = 0) -> AttentionParams:
    """
    Fan-in normal projections and N(0, d_q^-1/2) positional tables.

    ``length`` is the construction-time axis length that sizes Global tables
    and bounds the axes a Global span accepts later; for planar params it is
    the longer lattice side and ``cfg.axis`` is unused. A positive ``extent``
    sizes every table for offsets up to extent - 1.
    """
    dtype = precision.dtype
    n, d_in, d_q, d_out = cfg.heads, cfg.d_in, cfg.d_q, cfg.d_out

    def weight(rows: int, label: str) -> Tensor:
        return Tensor(rng.normal(0.0, d_in ** -0.5, (rows, d_in)), requires_grad=True, name=f"{name}.{label}", dtype=dtype)

    radius = table_radius(cfg.span, length, extent)
    side = 2 * radius + 1
    rows = side * side if planar else side

    def table(width: int, label: str) -> Tensor:
        return Tensor(rng.normal(0.0, d_q ** -0.5, (rows, width)), requires_grad=True, name=f"{name}.{label}", dtype=dtype)

    w_q, w_k, w_v = weight(n * d_q, "w_q"), weight(n * d_q, "w_k"), weight(n * d_out, "w_v")
    mode = cfg.positional_mode
    r_q = table(d_q, "r_q") if mode is not PositionalMode.NONE else None
    r_k = table(d_q, "r_k") if mode is PositionalMode.FULL else None
    r_v = table(d_out, "r_v") if mode is PositionalMode.FULL else None
    return AttentionParams(w_q, w_k, w_v, r_q, r_k, r_v, heads=n, table_radius=radius, planar=planar,
                           max_length=length if cfg.span.is_global else 0)


class PositionalAttention(Function):
    """
    Fused windowed attention with relative positional terms.

    logits = q.k (+ q.r_q) (+ k.r_k) over the slots of each window, softmax
    over valid slots; y = a.v (+ a.r_v). Which terms enter is fixed by ``mode``.
    Keys and values are gathered into window slots, so local work grows with
    the window size rather than the axis length.
    """
    name = "positional_attention"

    def __init__(self, windows: WindowIndex, mode: PositionalMode, workers: int = 1,
                 capture: Optional[List[np.ndarray]] = None):
        self.windows = windows
        self.mode = mode
        self.workers = max(1, workers)
        self.capture = capture
        # dense windows address keys directly, gathered ones through (query, slot)
        self.key = "ljn" if windows.dense else "lojn"

    def _gather(self, t: np.ndarray) -> np.ndarray:
        return t if self.windows.dense else t[:, self.windows.members]

    def _lines(self, q, k, v, RQ, RK, RV) -> Tuple[np.ndarray, np.ndarray]:
        kw, vw = self._gather(k), self._gather(v)
        logits = contract(f"lond,{self.key}d->lnoj", q, kw)
        if RQ is not None:
            logits = logits + contract("lond,ojd->lnoj", q, RQ)
        if RK is not None:
            logits = logits + contract(f"{self.key}d,ojd->lnoj", kw, RK)
        logits = np.where(self.windows.valid, logits, -np.inf)
        e = np.exp(logits - logits.max(axis=-1, keepdims=True))
        a = e / e.sum(axis=-1, keepdims=True)
        y = contract(f"lnoj,{self.key}e->lone", a, vw)
        if RV is not None:
            y = y + contract("lnoj,oje->lone", a, RV)
        return a, y

    def forward(self, q, k, v, *tables):
        lines, positions = q.shape[:2]
        if positions != self.windows.positions or k.shape != q.shape or v.shape[:3] != q.shape[:3]:
            raise DimensionError("attention operands disagree with the window plan", q.shape, k.shape, v.shape)
        gathered = [t[self.windows.rows] for t in tables]
        RQ = gathered[0] if self.mode is not PositionalMode.NONE else None
        RK = gathered[1] if self.mode is PositionalMode.FULL else None
        RV = gathered[2] if self.mode is PositionalMode.FULL else None
        self.saved = (q, k, v, RQ, RK, RV)
        self.table_shapes = [t.shape for t in tables]

        if self.workers > 1 and lines > 1:
            bounds = np.linspace(0, lines, min(self.workers, lines) + 1).astype(int)
            chunks = [slice(lo, hi) for lo, hi in zip(bounds[:-1], bounds[1:])]
            with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
                parts = list(pool.map(lambda s: self._lines(q[s], k[s], v[s], RQ, RK, RV), chunks))
            a = np.concatenate([p[0] for p in parts])
            y = np.concatenate([p[1] for p in parts])
        else:
            a, y = self._lines(q, k, v, RQ, RK, RV)
        self.a = a
        if self.capture is not None:
            self.capture.append(self.windows.densify(a))
        return y

    def _scatter(self, full: np.ndarray, shape: Tuple[int, int]) -> np.ndarray:
        g = np.zeros(shape, dtype=full.dtype)
        np.add.at(g, self.windows.rows[self.windows.valid], full[self.windows.valid])
        return g

    def _ungather(self, slotted: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
        if self.windows.dense:
            return slotted
        # within one slot the valid members of distinct queries are distinct keys
        g = np.zeros(shape, dtype=slotted.dtype)
        win = self.windows
        for j in range(win.slots):
            live = win.valid[:, j]
            g[:, win.members[live, j]] += slotted[:, live, j]
        return g

    def apply(self, grad_output):
        q, k, v, RQ, RK, RV = self.saved
        a = self.a
        kw, vw = self._gather(k), self._gather(v)
        g_a = contract(f"lone,{self.key}e->lnoj", grad_output, vw)
        if RV is not None:
            g_a = g_a + contract("lone,oje->lnoj", grad_output, RV)
        g_vw = contract(f"lnoj,lone->{self.key}e", a, grad_output)
        g_logit = a * (g_a - (a * g_a).sum(axis=-1, keepdims=True))
        g_q = contract(f"lnoj,{self.key}d->lond", g_logit, kw)
        g_kw = contract(f"lnoj,lond->{self.key}d", g_logit, q)
        grads: List[np.ndarray] = []
        if RQ is not None:
            g_q = g_q + contract("lnoj,ojd->lond", g_logit, RQ)
            grads.append(self._scatter(contract("lnoj,lond->ojd", g_logit, q), self.table_shapes[0]))
        if RK is not None:
            g_kw = g_kw + contract(f"lnoj,ojd->{self.key}d", g_logit, RK)
            grads.append(self._scatter(contract(f"lnoj,{self.key}d->ojd", g_logit, kw), self.table_shapes[1]))
        if RV is not None:
            grads.append(self._scatter(contract("lnoj,lone->oje", a, grad_output), self.table_shapes[2]))
        return (g_q, self._ungather(g_kw, k.shape), self._ungather(g_vw, v.shape), *grads)


def attend(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, windows: WindowIndex,
           mode: PositionalMode, workers: Optional[int] = None,
           capture: Optional[List[np.ndarray]] = None) -> Tensor:
    """Apply the fused operator to (lines, positions, heads, d) operands."""
    workers = config.numerics.workers if workers is None else workers
    tables = params.tables(mode)
    return PositionalAttention(windows, mode, workers, capture)(q, k, v, *tables)


def project_qkv(x: Tensor, params: AttentionParams) -> Tuple[Tensor, Tensor, Tensor]:
    """Per-position q = W_Q x, k = W_K x, v = W_V x for all heads at once."""
    if x.shape[-1] != params.d_in:
        raise DimensionError(f"input has {x.shape[-1]} channels, projections expect d_in={params.d_in}", x.shape, params.w_q.shape)
    return ops.linear(x, params.w_q), ops.linear(x, params.w_k), ops.linear(x, params.w_v)


def _split_heads(t: Tensor, lines: int, positions: int, heads: int) -> Tensor:
    return ops.reshape(t, (lines, positions, heads, t.shape[-1] // heads))


def attend_axis(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, axis: Axis, span: Span,
                mode: PositionalMode, workers: Optional[int] = None,
                capture: Optional[List[np.ndarray]] = None) -> Tensor:
    """
    1D attention along ``axis`` of projected (b, h, w, channels) feature maps.

    Height is handled by transposing into the width layout and back.
    """
    if axis is Axis.HEIGHT:
        q, k, v = (ops.transpose(t, (0, 2, 1, 3)) for t in (q, k, v))
    b, rows, length, _ = q.shape
    _check_length(length, span, params)
    radius = params.table_radius if mode is not PositionalMode.NONE else max(length - 1, 0)
    windows = window_index(length, span, radius)
    n = params.heads
    y = attend(*(_split_heads(t, b * rows, length, n) for t in (q, k, v)), params, windows, mode, workers, capture)
    y = ops.reshape(y, (b, rows, length, n * params.d_out))
    if axis is Axis.HEIGHT:
        y = ops.transpose(y, (0, 2, 1, 3))
    return y


def attend_planar(q: Tensor, k: Tensor, v: Tensor, params: AttentionParams, span: Span,
                  mode: PositionalMode, workers: Optional[int] = None,
                  capture: Optional[List[np.ndarray]] = None) -> Tensor:
    """2D attention over square windows of projected (b, h, w, channels) feature maps."""
    b, h, w, _ = q.shape
    _check_length(max(h, w), span, params)
    radius = params.table_radius if mode is not PositionalMode.NONE else max(h, w) - 1
    if mode is not PositionalMode.NONE and not params.planar:
        raise ConfigError("2D attention needs planar positional tables")
    windows = window_index_2d(h, w, span, radius)
    n = params.heads
    y = attend(*(_split_heads(t, b, h * w, n) for t in (q, k, v)), params, windows, mode, workers, capture)
    return ops.reshape(y, (b, h, w, n * params.d_out))


def global_attention_2d(x: Tensor, params: AttentionParams) -> Tensor:
    """Content-only attention over the whole lattice."""
    if x.ndim != 4 or x.shape[1] * x.shape[2] == 0:
        raise DomainError(f"global attention over an empty lattice, shape {x.shape}")
    q, k, v = project_qkv(x, params)
    return attend_planar(q, k, v, params, Span.global_(), PositionalMode.NONE)


def local_attention_2d(x: Tensor, params: AttentionParams, m: Union[int, Span]) -> Tensor:
    """Square-window attention with the query-dependent positional bias."""
    span = Span.parse(m)
    q, k, v = project_qkv(x, params)
    return attend_planar(q, k, v, params, span, PositionalMode.QUERY_ONLY)


def ps_attention_2d(x: Tensor, params: AttentionParams, m: Union[int, Span, None]) -> Tensor:
    """Square-window position-sensitive attention: query, key and value positional terms."""
    span = Span.parse(m)
    q, k, v = project_qkv(x, params)
    return attend_planar(q, k, v, params, span, PositionalMode.FULL)


def axial_attention(x: Tensor, params: AttentionParams, cfg: AxialAttentionConfig,
                    workers: Optional[int] = None) -> Tensor:
    """Independent 1D attention on every line along ``cfg.axis``."""
    if params.heads != cfg.heads or params.d_out != cfg.d_out or params.d_q != cfg.d_q:
        raise ConfigError(f"params ({params.heads} heads, d_q={params.d_q}, d_out={params.d_out}) do not match {cfg}")
    q, k, v = project_qkv(x, params)
    return attend_axis(q, k, v, params, cfg.axis, cfg.span, cfg.positional_mode, workers)


def multi_head(x: Tensor, heads: Sequence[AttentionParams], cfg: AxialAttentionConfig,
               workers: Optional[int] = None) -> Tensor:
    """Concatenate per-head outputs in head order; all heads share one positional table."""
    if len(heads) != cfg.heads:
        raise ConfigError(f"{len(heads)} head params given for a {cfg.heads}-head layer")
    stacked = AttentionParams.stack_heads(heads)
    return axial_attention(x, stacked, cfg, workers)
