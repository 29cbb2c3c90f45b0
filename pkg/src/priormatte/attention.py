"""Windowed self-attention extended with trimap prior tokens.

A prior token is the mean of all spatial tokens carrying one trimap label.
Inside each block the prior tokens join the key/value set of every local
window, get their own trailing slots in the relative-position bias table,
and (in memory mode) accumulate across the blocks of a stage so block b
attends over 3*b of them.
"""

from __future__ import annotations

from enum import Enum

import numpy as np

from . import tensor as T
from .nn import LayerNorm, Linear, Mlp, Module
from .tensor import ShapeError, Tensor
from .trimap import Region, RegionMap

MASK_FILL = -100.0


class CapacityError(ValueError):
    """Raised when more prior slots are requested than a bias table holds."""


class PriorMode(Enum):
    NONE = "none"
    GAP = "gap"
    UK = "uk"
    UK_FG_BG = "uk_fg_bg"
    UK_FG_BG_MEMORY = "uk_fg_bg_memory"


#: prior-column class labels per triple, oldest first in memory mode
TRIPLE_ORDER = ("uk", "fg", "bg")


def n_prior_for(mode: PriorMode, block_index: int) -> int:
    """Prior-token count consumed by block `block_index` (0-based)."""
    if mode is PriorMode.NONE:
        return 0
    if mode in (PriorMode.GAP, PriorMode.UK):
        return 1
    if mode is PriorMode.UK_FG_BG:
        return 3
    return 3 * (block_index + 1)


class PriorMemory:
    """Per-stage ordered store of prior-token triples, one per finished block."""

    def __init__(self, stage_index: int):
        self.stage_index = stage_index
        self.entries = []  # each a Tensor [3, d], oldest first

    def append(self, triple: Tensor):
        if triple.shape[0] != 3:
            raise ShapeError(f"prior-memory entries are triples, "
                             f"got shape {triple.shape}")
        self.entries.append(triple)

    def clear(self):
        self.entries = []

    def __len__(self):
        return len(self.entries)

    @property
    def n_tokens(self):
        return 3 * len(self.entries)


# -- prior tokens ------------------------------------------------------------


def compute_prior_tokens(tokens: Tensor, regions: RegionMap):
    """Per-region mean token (uk, fg, bg); zero vector for an empty region."""
    n, d = tokens.shape
    labels = regions.labels.ravel()
    if labels.size != n:
        raise ShapeError(f"{n} tokens vs {labels.size} region labels")
    out = []
    for q in (Region.UK, Region.FG, Region.BG):
        r = (labels == q)
        nq = int(r.sum())
        if nq == 0:
            out.append(Tensor(np.zeros(d, dtype=tokens.dtype)))
        else:
            row = Tensor((r / nq).astype(tokens.dtype).reshape(1, n))
            out.append(T.reshape(T.matmul(row, tokens), (d,)))
    return tuple(out)


def gap_token(tokens: Tensor) -> Tensor:
    """Mean over all spatial tokens, ignoring the trimap."""
    return T.tmean(tokens, axis=0)


def stack_priors(vectors):
    """Stack d-vectors into an [N_p, d] tensor."""
    return T.concat([T.reshape(v, (1, v.shape[-1])) for v in vectors], axis=0)


# -- window machinery --------------------------------------------------------


def window_partition(x: Tensor, m: int) -> Tensor:
    """[H,W,d] -> [nW, m*m, d]; bijective, inverse is window_reverse."""
    h, w, d = x.shape
    if h % m or w % m:
        raise ShapeError(f"grid {h}x{w} not divisible by window {m}")
    y = T.reshape(x, (h // m, m, w // m, m, d))
    y = T.transpose(y, (0, 2, 1, 3, 4))
    return T.reshape(y, ((h // m) * (w // m), m * m, d))


def window_reverse(windows: Tensor, m: int, h: int, w: int) -> Tensor:
    d = windows.shape[-1]
    y = T.reshape(windows, (h // m, w // m, m, m, d))
    y = T.transpose(y, (0, 2, 1, 3, 4))
    return T.reshape(y, (h, w, d))


def cyclic_shift(x: Tensor, offset: int) -> Tensor:
    """Toroidal roll by (-offset, -offset); invert with -offset."""
    out_data = np.roll(x.data, (-offset, -offset), axis=(0, 1))

    def backward(g):
        if x.requires_grad:
            x._accumulate(np.roll(g, (offset, offset), axis=(0, 1)))

    return T._make(out_data, (x,), backward)


_MASK_CACHE = {}


def shift_attention_mask(h, w, m, offset):
    """Additive [nW, m*m, m*m] mask for the shifted-window scheme.

    Zero where two tokens came from the same pre-shift region, MASK_FILL
    otherwise.  All zeros when offset is 0.  Prior-token columns are handled
    by the caller and never masked.
    """
    if offset not in (0, m // 2):
        raise ValueError(f"shift offset must be 0 or {m // 2}, got {offset}")
    key = (h, w, m, offset)
    if key in _MASK_CACHE:
        return _MASK_CACHE[key]
    n_windows = (h // m) * (w // m)
    if offset == 0:
        mask = np.zeros((n_windows, m * m, m * m), dtype=np.float32)
    else:
        img = np.zeros((h, w), dtype=np.int64)
        cnt = 0
        for hs in (slice(0, -m), slice(-m, -offset), slice(-offset, None)):
            for ws in (slice(0, -m), slice(-m, -offset), slice(-offset, None)):
                img[hs, ws] = cnt
                cnt += 1
        img = np.roll(img, (-offset, -offset), axis=(0, 1))
        wins = img.reshape(h // m, m, w // m, m).transpose(0, 2, 1, 3)
        wins = wins.reshape(n_windows, m * m)
        same = wins[:, :, None] == wins[:, None, :]
        mask = np.where(same, 0.0, MASK_FILL).astype(np.float32)
    _MASK_CACHE[key] = mask
    return mask


def _relative_index(m, table_m):
    """[m*m, m*m] lookup into the (2*table_m-1)^2 spatial bias grid."""
    coords = np.stack(np.meshgrid(np.arange(m), np.arange(m),
                                  indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :]
    return ((rel[0] + table_m - 1) * (2 * table_m - 1)
            + (rel[1] + table_m - 1))


def build_bias(table: Tensor, m: int, n_prior: int, table_m: int) -> Tensor:
    """Per-head [m*m, m*m + n_prior] bias assembled from the flat table.

    Spatial entries come from the (2*table_m-1)^2 relative-offset grid;
    the trailing n_prior table slots fill the prior columns, identical for
    every query row.
    """
    heads, length = table.shape
    spatial_len = (2 * table_m - 1) ** 2
    capacity = length - spatial_len
    if n_prior > capacity:
        raise CapacityError(
            f"bias table holds {capacity} prior slots, need {n_prior}")
    idx = _relative_index(m, table_m)
    spatial = table[:, idx]  # [heads, m*m, m*m]
    if n_prior == 0:
        return spatial
    cols = table[:, length - n_prior:]
    cols = T.broadcast_to(T.reshape(cols, (heads, 1, n_prior)),
                          (heads, m * m, n_prior))
    return T.concat([spatial, cols], axis=2)


# -- PA-WSA ------------------------------------------------------------------


class WindowAttention(Module):
    """Multi-head window attention whose key/value set is extended by priors.

    Queries come from the window's spatial tokens only; keys and values are
    the window tokens plus the (window-independent) prior tokens.
    """

    def __init__(self, dim, heads, window, n_prior, rng, dtype=np.float32):
        if dim % heads:
            raise ValueError(f"dim {dim} not divisible by {heads} heads")
        self.qkv = Linear(dim, 3 * dim, rng, dtype=dtype)
        self.proj = Linear(dim, dim, rng, dtype=dtype)
        from .nn import trunc_normal
        self.bias_table = T.Parameter(trunc_normal(
            rng, (heads, (2 * window - 1) ** 2 + n_prior), dtype=dtype))
        self.dim = dim
        self.heads = heads
        self.window = window
        self.n_prior = n_prior
        self.scale = 1.0 / np.sqrt(dim // heads)

    def _split_heads(self, qkv, rows):
        """[..., rows, 3*dim] -> three [..., heads, rows, head_dim]."""
        h, dh = self.heads, self.dim // self.heads
        lead = qkv.shape[:-2]
        y = T.reshape(qkv, lead + (rows, 3, h, dh))
        perm = tuple(range(len(lead))) + tuple(
            len(lead) + i for i in (1, 2, 0, 3))
        y = T.transpose(y, perm)  # [..., 3, heads, rows, dh]
        sl = (slice(None),) * len(lead)
        return y[sl + (0,)], y[sl + (1,)], y[sl + (2,)]

    def pa_wsa(self, windows: Tensor, priors, mask, m):
        """Attend within windows over spatial + prior keys.

        Returns the updated window tokens and the post-softmax attention
        maps (diagnostics).
        """
        n_win, t, d = windows.shape
        n_p = 0 if priors is None else priors.shape[0]
        h, dh = self.heads, d // self.heads

        q, k, v = self._split_heads(self.qkv(windows), t)
        if n_p:
            kp_q, kp_k, kp_v = self._split_heads(self.qkv(priors), n_p)
            del kp_q
            kp_k = T.broadcast_to(T.reshape(kp_k, (1, h, n_p, dh)),
                                  (n_win, h, n_p, dh))
            kp_v = T.broadcast_to(T.reshape(kp_v, (1, h, n_p, dh)),
                                  (n_win, h, n_p, dh))
            k = T.concat([k, kp_k], axis=2)
            v = T.concat([v, kp_v], axis=2)

        attn = T.mul(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale)
        attn = T.add(attn, build_bias(self.bias_table, m, n_p, self.window))
        if mask is not None:
            ext = mask
            if n_p:
                ext = np.concatenate(
                    [mask, np.zeros((n_win, t, n_p), dtype=mask.dtype)],
                    axis=2)
            attn = T.add(attn, ext[:, None])
        attn = T.softmax_last_dim(attn)

        out = T.matmul(attn, v)  # [nW, h, t, dh]
        out = T.reshape(T.transpose(out, (0, 2, 1, 3)), (n_win, t, d))
        return self.proj(out), attn

    def prior_query_attention(self, priors: Tensor, all_tokens: Tensor):
        """Each prior queries all spatial tokens plus all priors.

        Prior keys use the trailing bias-table slots, spatial keys zero bias,
        and no shift mask applies (priors are global).
        """
        n_p, d = priors.shape
        n = all_tokens.shape[0]
        h, dh = self.heads, d // self.heads

        q, _, _ = self._split_heads(self.qkv(priors), n_p)
        keys = T.concat([all_tokens, priors], axis=0)
        _, k, v = self._split_heads(self.qkv(keys), n + n_p)

        attn = T.mul(T.matmul(q, T.transpose(k, (0, 2, 1))), self.scale)
        length = self.bias_table.shape[1]
        cols = self.bias_table[:, length - n_p:]  # [h, n_p]
        zeros = Tensor(np.zeros((h, n), dtype=priors.dtype))
        bias = T.reshape(T.concat([zeros, cols], axis=1), (h, 1, n + n_p))
        attn = T.softmax_last_dim(T.add(attn, bias))

        out = T.matmul(attn, v)  # [h, n_p, dh]
        out = T.reshape(T.transpose(out, (1, 0, 2)), (n_p, d))
        return self.proj(out), attn


def update_prior_tokens(priors: Tensor, all_tokens: Tensor,
                        block: "PastBlock") -> Tensor:
    """Push prior tokens through attention + residual + norm + MLP.

    Mirrors the spatial-token path with shared weights: one global attention
    per block (not per window), since priors summarize the whole grid.
    """
    attn_out, _ = block.attn.prior_query_attention(priors, all_tokens)
    p = T.add(priors, attn_out)
    return T.add(p, block.mlp(block.norm2(p)))


# -- PAST block --------------------------------------------------------------


class PastBlock(Module):
    """norm -> PA-WSA -> residual -> norm -> MLP -> residual, plus the
    prior-token path and (memory mode) the per-stage prior-memory append."""

    def __init__(self, dim, heads, window, shifted, n_prior, rng,
                 dtype=np.float32):
        self.norm1 = LayerNorm(dim, dtype=dtype)
        self.attn = WindowAttention(dim, heads, window, n_prior, rng,
                                    dtype=dtype)
        self.norm2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(dim, rng, dtype=dtype)
        self.shifted = shifted
        self.window = window
        self.n_prior = n_prior

    def _fresh_priors(self, tokens, regions, mode):
        if mode is PriorMode.NONE:
            return None, []
        if mode is PriorMode.GAP:
            return stack_priors([gap_token(tokens)]), ["gap"]
        uk, fg, bg = compute_prior_tokens(tokens, regions)
        if mode is PriorMode.UK:
            return stack_priors([uk]), ["uk"]
        return stack_priors([uk, fg, bg]), list(TRIPLE_ORDER)

    def forward(self, x: Tensor, regions: RegionMap, memory, mode: PriorMode,
                capture=None):
        h, w, d = x.shape
        if regions.labels.shape != (h, w):
            raise ShapeError(f"region map {regions.labels.shape} does not "
                             f"match token grid {(h, w)}")
        m = min(self.window, h, w)
        if h % m or w % m:
            raise ShapeError(f"grid {h}x{w} not divisible by window {m}")
        do_shift = self.shifted and (h > m or w > m)
        offset = m // 2 if do_shift else 0

        shortcut = x
        xn = self.norm1(x)
        tokens = T.reshape(xn, (h * w, d))

        priors, classes = self._fresh_priors(tokens, regions, mode)
        if mode is PriorMode.UK_FG_BG_MEMORY:
            stored = list(memory.entries)
            if stored:
                priors = T.concat(stored + [priors], axis=0)
            classes = list(TRIPLE_ORDER) * (len(stored) + 1)

        xs = cyclic_shift(xn, offset) if do_shift else xn
        mask = shift_attention_mask(h, w, m, offset)
        windows = window_partition(xs, m)
        wout, attn = self.attn.pa_wsa(windows, priors, mask, m)
        y = window_reverse(wout, m, h, w)
        if do_shift:
            y = cyclic_shift(y, -offset)

        x = T.add(shortcut, y)
        x = T.add(x, self.mlp(self.norm2(x)))

        if mode is PriorMode.UK_FG_BG_MEMORY:
            updated = update_prior_tokens(priors, tokens, self)
            memory.append(updated[updated.shape[0] - 3:])

        if capture is not None:
            capture.append({
                "attn": attn.data.copy(),
                "classes": classes,
                "window": m,
            })
        return x
