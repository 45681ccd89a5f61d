"""Lightweight ViT teacher with a masked-image-modeling decoder and a segmentation head."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..ndgrad import GradTape, Tensor, functional as F
from ..ndgrad.nn import Conv2d, ConvNormAct, Dropout, Linear, Module, ModuleList, Parameter
from ..ndgrad.tensor import default_dtype
from .blocks import TransformerLayer


@dataclass(frozen=True)
class TeacherConfig:
    image_size: int = 64
    patch: int = 8
    dim: int = 256
    depth: int = 4
    heads: int = 4
    ffn: int = 512
    dropout: float = 0.1
    dec_dim: int = 128
    dec_depth: int = 2
    dec_ffn: int = 256
    head_ch: int = 16


def patchify(images: np.ndarray, p: int) -> np.ndarray:
    """[N,3,H,W] -> [N, (H/p)*(W/p), p*p*3], patches row-major, pixels (row, col, channel)."""
    n, c, h, w = images.shape
    x = images.reshape(n, c, h // p, p, w // p, p).transpose(0, 2, 4, 3, 5, 1)
    return x.reshape(n, (h // p) * (w // p), p * p * c)


def sample_patch_mask(rng: np.random.Generator, n: int, grid: int, ratio: float,
                      min_masked: int = 1) -> np.ndarray:
    """Boolean [n, grid] with round(ratio*grid) patches masked per row (at least ``min_masked``)."""
    if not 0.0 <= ratio <= 1.0:
        raise ConfigError(f"mask ratio {ratio} outside [0, 1]")
    k = min(grid, max(int(np.floor(ratio * grid + 0.5)), min_masked))
    mask = np.zeros((n, grid), dtype=bool)
    for i in range(n):
        mask[i, rng.permutation(grid)[:k]] = True
    return mask


class TeacherNet(Module):
    def __init__(self, cfg: TeacherConfig = TeacherConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        self.check_size(cfg.image_size, cfg.image_size)
        rng = np.random.default_rng([seed, 0x7EA])
        p, d = cfg.patch, cfg.dim
        self.grid = (cfg.image_size // p) ** 2
        pix = p * p * 3
        dt = default_dtype()
        self.patch_embed = Linear(pix, d, rng)
        self.pos_embed = Parameter(rng.normal(0, 0.02, (1, self.grid, d)).astype(dt))
        self.mask_token = Parameter(np.zeros((1, 1, d), dtype=dt))
        self.encoder = ModuleList([TransformerLayer(d, cfg.heads, cfg.ffn, cfg.dropout, rng)
                                   for _ in range(cfg.depth)])
        # reconstruction branch
        self.dec_embed = Linear(d, cfg.dec_dim, rng)
        self.dec_pos = Parameter(rng.normal(0, 0.02, (1, self.grid, cfg.dec_dim)).astype(dt))
        self.decoder = ModuleList([TransformerLayer(cfg.dec_dim, cfg.heads, cfg.dec_ffn, 0.0, rng)
                                   for _ in range(cfg.dec_depth)])
        self.dec_head = Linear(cfg.dec_dim, pix, rng)
        # segmentation branch: tokens -> [N, head_ch, H, W] by linear un-patchify
        self.unpatch = Linear(d, cfg.head_ch * p * p, rng)
        self.seg1 = ConvNormAct(cfg.head_ch, cfg.head_ch, rng)
        self.drop1 = Dropout(cfg.dropout)
        self.seg2 = ConvNormAct(cfg.head_ch, cfg.head_ch, rng)
        self.drop2 = Dropout(cfg.dropout)
        self.seg_out = Conv2d(cfg.head_ch, 1, 1, rng)

    def check_size(self, h: int, w: int) -> None:
        p = self.cfg.patch
        if h % p or w % p:
            raise ConfigError(f"teacher input {h}x{w} not divisible by patch size {p}")
        if h != self.cfg.image_size or w != self.cfg.image_size:
            raise ConfigError(f"teacher built for {self.cfg.image_size}px inputs, got {h}x{w}")

    def encode(self, images: np.ndarray, mask: np.ndarray | None = None) -> Tensor:
        """Token features [N, P, dim]; masked positions (bool [N,P]) become the mask token."""
        self.check_size(*images.shape[-2:])
        tokens = self.patch_embed(Tensor(patchify(images, self.cfg.patch)))
        if mask is not None:
            m = mask[:, :, None].astype(tokens.dtype)
            tokens = tokens * (1.0 - m) + self.mask_token * m
        h = tokens + self.pos_embed
        for layer in self.encoder:
            h = layer(h)
        return h

    def mim_forward(self, images: np.ndarray, mask: np.ndarray) -> Tensor:
        """Predicted pixels of the masked patches only, [total masked, p*p*3].

        Rows follow ``np.nonzero(mask)`` order (image-major, then patch index).
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != (images.shape[0], self.grid):
            raise ConfigError(f"patch mask shape {mask.shape} != {(images.shape[0], self.grid)}")
        if not mask.any():
            raise ConfigError("patch mask selects no patches")
        h = self.dec_embed(self.encode(images, mask)) + self.dec_pos
        for layer in self.decoder:
            h = layer(h)
        return self.dec_head(h)[np.nonzero(mask)]

    def forward(self, images: np.ndarray) -> Tensor:
        """Segmentation probabilities [N,1,H,W]."""
        n, _, hgt, wid = images.shape
        p, c = self.cfg.patch, self.cfg.head_ch
        tok = self.unpatch(self.encode(images))  # [N, P, c*p*p]
        gh, gw = hgt // p, wid // p
        fmap = tok.reshape(n, gh, gw, c, p, p).transpose(0, 3, 1, 4, 2, 5).reshape(n, c, hgt, wid)
        x = self.drop1(self.seg1(fmap))
        x = self.drop2(self.seg2(x))
        return F.sigmoid(self.seg_out(x))

    def segment(self, images: np.ndarray, mc_dropout: bool = False, seed=0,
                pass_index: int = 0) -> np.ndarray:
        """Inference-only probability maps; with ``mc_dropout`` every dropout layer samples."""
        was = self.training
        self.eval()
        try:
            with GradTape(seed=seed, pass_index=pass_index, record=False, sample_dropout=mc_dropout):
                return self.forward(images).data
        finally:
            self.train(was)

    def mc_maps(self, images: np.ndarray, passes: int, seed) -> np.ndarray:
        """[M,N,1,H,W]; pass m uses the dropout stream ``(seed, m)``."""
        return np.stack([self.segment(images, True, seed, m) for m in range(passes)])
