"""Scaled dot-product attention, multi-head attention, and windowed variants.

The windowed forms restrict attention to non-overlapping ``ws x ws`` windows
of a feature grid; the shifted form cyclically shifts the grid first and
masks pairs of cells that were not spatial neighbors before the shift, which
restores information flow across window borders.  A grid-wide summary token
can be appended to every window's keys/values so each window also sees the
global context.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import ShapeError, Tensor

__all__ = [
    "AttentionConfig",
    "WindowSpec",
    "MsaWeights",
    "MASK_OFF",
    "attention",
    "split_heads",
    "merge_heads",
    "msa",
    "window_partition",
    "window_merge",
    "shift_window_mask",
    "w_msa",
    "sw_msa",
    "reset_score_counter",
    "score_counter",
]

# Additive bias for forbidden (query, key) pairs. Large enough that exp()
# underflows to exactly zero after max-subtraction.
MASK_OFF = -1e9

# Number of attention-score entries computed since the last reset. Used to
# assert the linear-in-grid-size cost of windowed attention without timing.
_SCORE_ENTRIES = 0


def reset_score_counter() -> None:
    global _SCORE_ENTRIES
    _SCORE_ENTRIES = 0


def score_counter() -> int:
    return _SCORE_ENTRIES


@dataclass(frozen=True)
class AttentionConfig:
    """Embedding width and head count; the per-head key size is d_model/n_heads."""

    d_model: int
    n_heads: int

    def __post_init__(self):
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ShapeError(
                f"head count {self.n_heads} must divide embedding size {self.d_model}"
            )

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads


@dataclass(frozen=True)
class WindowSpec:
    """Grid extents plus window side and cyclic shift."""

    grid_h: int
    grid_w: int
    window: int
    shift: int = 0

    def __post_init__(self):
        if self.window < 1:
            raise ShapeError(f"window side must be positive, got {self.window}")
        if self.grid_h % self.window or self.grid_w % self.window:
            raise ShapeError(
                f"window {self.window} must divide grid {self.grid_h}x{self.grid_w}"
            )
        if not 0 <= self.shift < self.window:
            raise ShapeError(f"shift {self.shift} must satisfy 0 <= shift < window {self.window}")

    @property
    def n_windows(self) -> int:
        return (self.grid_h // self.window) * (self.grid_w // self.window)

    @property
    def cells(self) -> int:
        return self.grid_h * self.grid_w


@dataclass
class MsaWeights:
    """Projection matrices for one multi-head attention: query, key, value, output."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor

    def tensors(self) -> list[Tensor]:
        return [self.wq, self.wk, self.wv, self.wo]


def attention(q, k, v, mask=None, return_weights: bool = False):
    """softmax(q k^T / sqrt(d_k) + mask) v over the last two axes.

    ``q``: [..., Lq, d_k]; ``k``, ``v``: [..., Lk, d_k]; ``mask``, if given,
    is an additive [..., Lq, Lk] bias of zeros and ``MASK_OFF``.
    """
    q, k, v = ad._coerce(q), ad._coerce(k), ad._coerce(v)
    if q.shape[-1] != k.shape[-1]:
        raise ShapeError(f"query/key width mismatch: {q.shape} vs {k.shape}")
    if k.shape[-2] != v.shape[-2]:
        raise ShapeError(f"key/value length mismatch: {k.shape} vs {v.shape}")
    d_k = q.shape[-1]
    global _SCORE_ENTRIES
    _SCORE_ENTRIES += int(np.prod(q.shape[:-1])) * k.shape[-2]
    scores = ad.matmul(q, ad.transpose(k, _swap_axes(k.ndim))) / float(np.sqrt(d_k))
    if mask is not None:
        mask = mask if isinstance(mask, Tensor) else Tensor(mask)
        scores = scores + mask
    weights = ad.softmax(scores, axis=-1)
    out = ad.matmul(weights, v)
    if return_weights:
        return out, weights
    return out


def _swap_axes(ndim: int) -> tuple:
    axes = list(range(ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return tuple(axes)


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """[.., L, D] -> [.., h, L, D/h] with contiguous per-head slices."""
    if x.shape[-1] % n_heads:
        raise ShapeError(f"{n_heads} heads do not divide width {x.shape[-1]}")
    d_head = x.shape[-1] // n_heads
    lead = x.shape[:-2]
    L = x.shape[-2]
    y = ad.reshape(x, lead + (L, n_heads, d_head))
    n = len(lead)
    perm = tuple(range(n)) + (n + 1, n, n + 2)
    return ad.transpose(y, perm)


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`: [.., h, L, d] -> [.., L, h*d]."""
    lead = x.shape[:-3]
    h, L, d = x.shape[-3:]
    n = len(lead)
    perm = tuple(range(n)) + (n + 1, n, n + 2)
    y = ad.transpose(x, perm)
    return ad.reshape(y, lead + (L, h * d))


def msa(q_in, k_in, v_in, weights: MsaWeights, n_heads: int, mask=None, return_weights: bool = False):
    """Multi-head attention with input projections and an output projection.

    Head ``i`` attends over the ``i``-th contiguous slice of the projected
    queries/keys/values; head outputs are concatenated back in slice order.
    ``mask`` broadcasts over heads.
    """
    q_in, k_in, v_in = ad._coerce(q_in), ad._coerce(k_in), ad._coerce(v_in)
    cfg = AttentionConfig(q_in.shape[-1], n_heads)
    q = split_heads(ad.matmul(q_in, weights.wq), cfg.n_heads)
    k = split_heads(ad.matmul(k_in, weights.wk), cfg.n_heads)
    v = split_heads(ad.matmul(v_in, weights.wv), cfg.n_heads)
    if mask is not None:
        m = np.asarray(mask.data if isinstance(mask, Tensor) else mask)
        m = m.reshape(m.shape[:-2] + (1,) + m.shape[-2:])
        mask = Tensor(m)
    out, attn = attention(q, k, v, mask=mask, return_weights=True)
    merged = ad.matmul(merge_heads(out), weights.wo)
    if return_weights:
        return merged, attn
    return merged


def window_partition(x: Tensor, window: int) -> Tensor:
    """[H, W, D] -> [n_windows, window*window, D].

    Windows are ordered row-major over the window lattice; cells within a
    window are row-major as well.
    """
    x = ad._coerce(x)
    if x.ndim != 3:
        raise ShapeError(f"window_partition expects [H, W, D], got {x.shape}")
    H, W, D = x.shape
    if H % window or W % window:
        raise ShapeError(f"window {window} must divide grid {H}x{W}")
    nh, nw = H // window, W // window
    y = ad.reshape(x, (nh, window, nw, window, D))
    y = ad.transpose(y, (0, 2, 1, 3, 4))
    return ad.reshape(y, (nh * nw, window * window, D))


def window_merge(wins: Tensor, spec: WindowSpec) -> Tensor:
    """Inverse of :func:`window_partition`: [w, ws*ws, D] -> [H, W, D]."""
    wins = ad._coerce(wins)
    ws = spec.window
    nh, nw = spec.grid_h // ws, spec.grid_w // ws
    if wins.shape[0] != nh * nw or wins.shape[1] != ws * ws:
        raise ShapeError(f"got {wins.shape}, expected [{nh * nw}, {ws * ws}, D]")
    D = wins.shape[-1]
    y = ad.reshape(wins, (nh, nw, ws, ws, D))
    y = ad.transpose(y, (0, 2, 1, 3, 4))
    return ad.reshape(y, (spec.grid_h, spec.grid_w, D))


def shift_window_mask(spec: WindowSpec) -> np.ndarray:
    """Per-window additive mask for shifted-window attention.

    After cyclically shifting the grid by ``(-shift, -shift)``, windows along
    the wrap edges mix cells that were not neighbors before the shift.  Cells
    are labeled by which side of the wrap they came from in each axis; pairs
    with different labels get ``MASK_OFF``.  Shape: [n_windows, ws^2, ws^2].
    """
    ws, ss = spec.window, spec.shift
    if ss == 0:
        return np.zeros((spec.n_windows, ws * ws, ws * ws))
    # Label each shifted-frame cell by its pre-shift wrap group per axis:
    # rows >= H - ss wrapped around, likewise columns.
    rows = (np.arange(spec.grid_h) >= spec.grid_h - ss).astype(np.int64)
    cols = (np.arange(spec.grid_w) >= spec.grid_w - ss).astype(np.int64)
    labels = rows[:, None] * 2 + cols[None, :]
    lab = labels.reshape(spec.grid_h // ws, ws, spec.grid_w // ws, ws)
    lab = lab.transpose(0, 2, 1, 3).reshape(spec.n_windows, ws * ws)
    diff = lab[:, :, None] != lab[:, None, :]
    return np.where(diff, MASK_OFF, 0.0)


def _window_attend(
    x_grid: Tensor,
    global_token: Tensor | None,
    weights: MsaWeights,
    n_heads: int,
    spec: WindowSpec,
    pair_mask: np.ndarray | None,
) -> Tensor:
    """Shared core of w_msa/sw_msa, operating in the (possibly shifted) frame.

    ``x_grid``: [m, D] row-major cells.  ``pair_mask``: optional
    [n_windows, ws^2, ws^2] additive mask between window cells.  The global
    token, when present, is appended to every window's keys and values and is
    never masked.
    """
    ws = spec.window
    D = x_grid.shape[-1]
    grid3 = ad.reshape(x_grid, (spec.grid_h, spec.grid_w, D))
    win_q = window_partition(grid3, ws)  # [w, ws^2, D]
    if global_token is not None:
        g_row = ad.reshape(global_token, (1, D))
        g_rows = ad.broadcast_to(ad.reshape(g_row, (1, 1, D)), (spec.n_windows, 1, D))
        win_kv = ad.concat([win_q, g_rows], axis=1)  # [w, ws^2 + 1, D]
        if pair_mask is not None:
            zeros = np.zeros((spec.n_windows, ws * ws, 1))
            mask = np.concatenate([pair_mask, zeros], axis=-1)
        else:
            mask = None
    else:
        win_kv = win_q
        mask = pair_mask
    out = msa(win_q, win_kv, win_kv, weights, n_heads, mask=mask)
    merged = window_merge(out, spec)
    return ad.reshape(merged, (spec.cells, D))


def w_msa(
    x_grid: Tensor,
    global_token: Tensor | None,
    weights: MsaWeights,
    n_heads: int,
    spec: WindowSpec,
) -> Tensor:
    """Windowed multi-head attention over a row-major [m, D] grid.

    Queries are each window's cells; keys/values are the same cells plus the
    global token (when given).  Output is merged back to [m, D].
    """
    return _window_attend(x_grid, global_token, weights, n_heads, spec, None)


def sw_msa(
    x_grid: Tensor,
    global_token: Tensor | None,
    weights: MsaWeights,
    n_heads: int,
    spec: WindowSpec,
) -> Tensor:
    """Shifted-window multi-head attention.

    Cyclically shifts the grid by ``(-shift, -shift)``, applies windowed
    attention with a mask forbidding pairs of cells that were not pre-shift
    neighbors, then shifts the result back.  With ``shift == 0`` this is
    exactly :func:`w_msa`.
    """
    ss = spec.shift
    if ss == 0:
        return w_msa(x_grid, global_token, weights, n_heads, spec)
    D = x_grid.shape[-1]
    grid3 = ad.reshape(x_grid, (spec.grid_h, spec.grid_w, D))
    shifted = ad.reshape(ad.roll_grid(grid3, -ss, -ss), (spec.cells, D))
    mask = shift_window_mask(spec)
    out = _window_attend(shifted, global_token, weights, n_heads, spec, mask)
    out3 = ad.reshape(out, (spec.grid_h, spec.grid_w, D))
    return ad.reshape(ad.roll_grid(out3, ss, ss), (spec.cells, D))
