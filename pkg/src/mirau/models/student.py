"""U-shaped hybrid CNN/window-attention student and its CNN-only ablation."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from ..errors import ConfigError
from ..ndgrad import GradTape, Tensor, concatenate, functional as F
from ..ndgrad.nn import Conv2d, ConvNormAct, ConvTranspose2d, Dropout, GroupNorm, Module, ModuleList
from .blocks import CrossAttentionFusion, SwinBlock


@dataclass(frozen=True)
class StudentConfig:
    base: int = 32          # stem width; stages use base, 2*base, 4*base
    heads: int = 4
    window: int = 4
    shift: int = 2
    mlp_ratio: int = 2
    dropout: float = 0.1
    cnn_only: bool = False


class ResidualConv(Module):
    """x + GELU(GN(conv3x3(x))) on [N,C,H,W]; stands in for a window block."""

    def __init__(self, ch: int, rng):
        super().__init__()
        self.body = ConvNormAct(ch, ch, rng)

    def forward(self, x: Tensor) -> Tensor:
        return x + self.body(x)


class ConcatFusion(Module):
    """Concatenate decoder and skip channels, project back with a 1x1 conv."""

    def __init__(self, dim: int, skip_dim: int, rng):
        super().__init__()
        self.conv = Conv2d(dim + skip_dim, dim, 1, rng)
        self.norm = GroupNorm(min(8, dim), dim)

    def forward(self, dec: Tensor, skip: Tensor) -> Tensor:
        return F.gelu(self.norm(self.conv(concatenate([dec, skip], axis=1))))


class UpStage(Module):
    """Transposed conv (3x3, stride 2) -> GN -> GELU, then skip fusion and a conv refine."""

    def __init__(self, cin: int, cout: int, cfg: StudentConfig, rng):
        super().__init__()
        self.up = ConvTranspose2d(cin, cout, 3, rng, stride=2, padding=1, output_padding=1)
        self.norm = GroupNorm(min(8, cout), cout)
        if cfg.cnn_only:
            self.fuse = ConcatFusion(cout, cout, rng)
        else:
            self.fuse = CrossAttentionFusion(cout, cout, cfg.heads, cfg.window, rng)
        self.refine = ConvNormAct(cout, cout, rng)

    def forward(self, x: Tensor, skip: Tensor) -> Tensor:
        x = F.gelu(self.norm(self.up(x)))
        return self.refine(self.fuse(x, skip))


class StudentNet(Module):
    """Images [N,3,H,W] in [0,1] -> foreground probabilities [N,1,H,W].

    H and W must be multiples of 8: the window blocks tile the half-resolution
    map into 4x4 windows.
    """

    def __init__(self, cfg: StudentConfig = StudentConfig(), seed: int = 0):
        super().__init__()
        self.cfg = cfg
        rng = np.random.default_rng([seed, 0x57D])
        c1, c2, c3 = cfg.base, 2 * cfg.base, 4 * cfg.base
        self.stem = ConvNormAct(3, c1, rng)
        self.down = ConvNormAct(c1, c2, rng, stride=2)
        if cfg.cnn_only:
            self.mid = ModuleList([ResidualConv(c2, rng), ResidualConv(c2, rng)])
        else:
            self.mid = ModuleList([
                SwinBlock(c2, cfg.heads, cfg.window, 0, rng, cfg.mlp_ratio),
                SwinBlock(c2, cfg.heads, cfg.window, cfg.shift, rng, cfg.mlp_ratio),
            ])
        self.bottleneck = ConvNormAct(c2, c3, rng, stride=2)
        self.up1 = UpStage(c3, c2, cfg, rng)
        self.up2 = UpStage(c2, c1, cfg, rng)
        self.drop = Dropout(cfg.dropout)
        self.head = Conv2d(c1, 1, 1, rng)

    def check_size(self, h: int, w: int) -> None:
        step = 2 * self.cfg.window
        if h < 16 or w < 16 or h % step or w % step:
            raise ConfigError(f"student input {h}x{w}: sides must be >= 16 and multiples of {step}")

    def features(self, x: Tensor) -> Tensor:
        """Everything before the dropout + 1x1 head; contains no stochastic layer."""
        x = x if isinstance(x, Tensor) else Tensor(x)
        self.check_size(*x.shape[-2:])
        s1 = self.stem(x)
        h = self.down(s1)
        if self.cfg.cnn_only:
            for blk in self.mid:
                h = blk(h)
        else:
            h = h.transpose(0, 2, 3, 1)
            for blk in self.mid:
                h = blk(h)
            h = h.transpose(0, 3, 1, 2)
        s2 = h
        h = self.bottleneck(s2)
        h = self.up1(h, s2)
        return self.up2(h, s1)

    def head_probs(self, feats: Tensor) -> Tensor:
        return F.sigmoid(self.head(self.drop(feats)))

    def forward(self, x: Tensor) -> Tensor:
        return self.head_probs(self.features(x))

    def mc_maps(self, images: np.ndarray, passes: int, seed) -> np.ndarray:
        """[M,N,1,H,W] probability maps with dropout sampled on every pass.

        The trunk is shared by all passes (it is deterministic), so only the
        head is re-evaluated; pass m draws its dropout mask from ``(seed, m)``.
        This equals a full forward under ``GradTape(seed, m, sample_dropout=True)``.
        """
        was = self.training
        self.eval()
        try:
            with GradTape(seed=seed, record=False):
                feats = self.features(images)
            out = []
            for m in range(passes):
                with GradTape(seed=seed, pass_index=m, record=False, sample_dropout=True):
                    out.append(self.head_probs(feats).data)
        finally:
            self.train(was)
        return np.stack(out)


def cnn_only_variant(cfg: StudentConfig = StudentConfig(), seed: int = 0) -> StudentNet:
    """Same surface as the hybrid student with conv blocks and concat fusion."""
    return StudentNet(replace(cfg, cnn_only=True), seed)
