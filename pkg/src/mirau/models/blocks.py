"""Attention building blocks shared by the student and teacher."""

from __future__ import annotations

import numpy as np

from ..errors import ConfigError
from ..ndgrad import Tensor, functional as F, roll
from ..ndgrad.nn import Conv2d, Dropout, LayerNorm, Linear, Module, Parameter

NEG = -1e4  # additive logit mask; exp underflows to exactly 0 in float32 and float64


def window_partition(x: Tensor, w: int) -> Tensor:
    """[N,H,W,C] -> [N*nW, w*w, C], windows in row-major order."""
    n, h, wd, c = x.shape
    x = x.reshape(n, h // w, w, wd // w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n * (h // w) * (wd // w), w * w, c)


def window_reverse(x: Tensor, w: int, n: int, h: int, wd: int) -> Tensor:
    c = x.shape[-1]
    x = x.reshape(n, h // w, wd // w, w, w, c).transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(n, h, wd, c)


def relative_index(w: int) -> np.ndarray:
    """[w*w, w*w] index into a (2w-1)^2 relative-offset table."""
    coords = np.stack(np.meshgrid(np.arange(w), np.arange(w), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (w - 1)
    return rel[0] * (2 * w - 1) + rel[1]


def shift_mask(h: int, wd: int, w: int, shift: int) -> np.ndarray:
    """[nW, T, T] additive mask keeping cyclically shifted windows region-local."""
    region = np.zeros((h, wd), dtype=np.int64)
    bounds = (slice(0, -w), slice(-w, -shift), slice(-shift, None))
    label = 0
    for hs in bounds:
        for ws in bounds:
            region[hs, ws] = label
            label += 1
    reg = region.reshape(h // w, w, wd // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    return np.where(reg[:, :, None] == reg[:, None, :], 0.0, NEG)


def _check_windows(h: int, wd: int, w: int) -> None:
    if h % w or wd % w:
        raise ConfigError(f"feature map {h}x{wd} not divisible into {w}x{w} windows")


class WindowAttention(Module):
    """Multi-head self-attention inside w x w windows with a learned relative bias.

    Input and output are channels-last token maps [N,H,W,C]. With ``shift`` > 0
    the map is cyclically rolled first (shifted-window variant) and tokens that
    wrapped around are masked from each other.
    """

    def __init__(self, dim: int, heads: int, window: int, shift: int, rng):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide embedding dim {dim}")
        self.dim, self.heads, self.window, self.shift = dim, heads, window, shift
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.rel_bias = Parameter((rng.normal(0, 0.02, size=((2 * window - 1) ** 2, heads)))
                                  .astype(self.qkv.weight.dtype))
        self._index = relative_index(window)

    def forward(self, x: Tensor) -> Tensor:
        n, h, wd, c = x.shape
        w, s, heads = self.window, self.shift, self.heads
        _check_windows(h, wd, w)
        if s:
            x = roll(x, (-s, -s), (1, 2))
        win = window_partition(x, w)
        b, t, _ = win.shape
        qkv = self.qkv(win).reshape(b, t, 3, heads, c // heads).transpose(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        logits = (q @ k.transpose(0, 1, 3, 2)) * (1.0 / np.sqrt(c // heads))
        bias = self.rel_bias[self._index].transpose(2, 0, 1)  # [heads, T, T]
        nw = b // n
        logits = logits.reshape(n, nw, heads, t, t) + bias.reshape(1, 1, heads, t, t)
        if s:
            logits = logits + shift_mask(h, wd, w, s).astype(x.dtype)[None, :, None]
        attn = F.softmax(logits.reshape(b, heads, t, t), axis=-1)
        out = F.merge_heads(attn @ v)
        out = window_reverse(self.proj(out), w, n, h, wd)
        if s:
            out = roll(out, (s, s), (1, 2))
        return out


class SwinBlock(Module):
    """Pre-norm (shifted-)window attention block with an MLP, on [N,H,W,C]."""

    def __init__(self, dim: int, heads: int, window: int, shift: int, rng, mlp_ratio: int = 2):
        super().__init__()
        self.norm1 = LayerNorm(dim)
        self.attn = WindowAttention(dim, heads, window, shift, rng)
        self.norm2 = LayerNorm(dim)
        self.fc1 = Linear(dim, mlp_ratio * dim, rng)
        self.fc2 = Linear(mlp_ratio * dim, dim, rng)

    def forward(self, x: Tensor) -> Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.fc2(F.gelu(self.fc1(self.norm2(x))))


class CrossAttentionFusion(Module):
    """Decoder queries attend to encoder skip features within local windows.

    The skip map is brought to the decoder width by a 1x1 conv; the attended
    result is added back to the decoder features. [N,C,H,W] in and out.
    """

    def __init__(self, dim: int, skip_dim: int, heads: int, window: int, rng):
        super().__init__()
        if dim % heads:
            raise ConfigError(f"{heads} heads do not divide embedding dim {dim}")
        self.heads, self.window = heads, window
        self.match = Conv2d(skip_dim, dim, 1, rng)
        self.norm_q = LayerNorm(dim)
        self.norm_kv = LayerNorm(dim)
        self.q = Linear(dim, dim, rng)
        self.kv = Linear(dim, 2 * dim, rng)
        self.proj = Linear(dim, dim, rng)

    def forward(self, dec: Tensor, skip: Tensor) -> Tensor:
        n, c, h, wd = dec.shape
        w, heads = self.window, self.heads
        _check_windows(h, wd, w)
        qt = window_partition(dec.transpose(0, 2, 3, 1), w)
        st = window_partition(self.match(skip).transpose(0, 2, 3, 1), w)
        b, t, _ = qt.shape
        q = F.split_heads(self.q(self.norm_q(qt)), heads)
        kv = self.kv(self.norm_kv(st)).reshape(b, t, 2, heads, c // heads).transpose(2, 0, 3, 1, 4)
        out = F.merge_heads(F.attention(q, kv[0], kv[1]))
        out = window_reverse(self.proj(out), w, n, h, wd).transpose(0, 3, 1, 2)
        return dec + out


class TransformerLayer(Module):
    """Post-norm encoder layer: LN(x + drop(attn)), LN(x + drop(ffn)), on [N,T,C]."""

    def __init__(self, dim: int, heads: int, hidden: int, dropout: float, rng):
        super().__init__()
        self.heads = heads
        self.qkv = Linear(dim, 3 * dim, rng)
        self.proj = Linear(dim, dim, rng)
        self.fc1 = Linear(dim, hidden, rng)
        self.fc2 = Linear(hidden, dim, rng)
        self.norm1 = LayerNorm(dim)
        self.norm2 = LayerNorm(dim)
        self.drop1 = Dropout(dropout)
        self.drop2 = Dropout(dropout)

    def forward(self, x: Tensor) -> Tensor:
        b, t, c = x.shape
        qkv = self.qkv(x).reshape(b, t, 3, self.heads, c // self.heads).transpose(2, 0, 3, 1, 4)
        att = F.merge_heads(F.attention(qkv[0], qkv[1], qkv[2]))
        x = self.norm1(x + self.drop1(self.proj(att)))
        return self.norm2(x + self.drop2(self.fc2(F.gelu(self.fc1(x)))))
