"""Weak/strong augmentation views with shared geometry, and CutMix.

All images are float arrays [C,H,W] in [0,1]. The strong view is built on top
of the weak view and only changes pixel values (photometric ops and one
CutOut hole), so any map aligned with the weak view is aligned with the
strong view too.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .datasets import Sample
from .errors import ConfigError

LUMA = np.array([0.299, 0.587, 0.114])
STRONG_OPS = ("brightness", "contrast", "saturation", "posterize", "solarize",
              "sharpness", "equalize")


@dataclass(frozen=True)
class Geometry:
    """Resized crop (top, left, side in source pixels), then flips, then k*90 deg rotation."""

    size: int
    top: float = 0.0
    left: float = 0.0
    side: Optional[float] = None
    hflip: bool = False
    vflip: bool = False
    rot90: int = 0

    @property
    def crop_side(self) -> float:
        return float(self.size) if self.side is None else self.side


@dataclass(frozen=True)
class Jitter:
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0


@dataclass(frozen=True)
class StrongParams:
    ops: tuple = ()
    magnitudes: tuple = ()
    signs: tuple = ()
    hole: tuple = (0, 0, 0)  # top, left, side


@dataclass
class AugPair:
    x_w: np.ndarray
    x_s: np.ndarray
    geom: Geometry
    strong: StrongParams = field(default_factory=StrongParams)


def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


# -- geometry ----------------------------------------------------------------------

def sample_geometry(rng: np.random.Generator, size: int, scale=(0.8, 1.0),
                    rotate: bool = True) -> Geometry:
    area = rng.uniform(*scale)
    side = size * math.sqrt(area)
    top, left = rng.uniform(0, size - side, size=2)
    return Geometry(size=size, top=float(top), left=float(left), side=float(side),
                    hflip=bool(rng.random() < 0.5), vflip=bool(rng.random() < 0.5),
                    rot90=int(rng.integers(0, 4)) if rotate else 0)


def _source_coords(geom: Geometry) -> np.ndarray:
    step = geom.crop_side / geom.size
    return (np.arange(geom.size) + 0.5) * step - 0.5


def apply_geometry(x: np.ndarray, geom: Geometry, order: str = "bilinear") -> np.ndarray:
    """Resample ``x`` [C,S,S] through ``geom``; ``order`` is 'bilinear' or 'nearest'."""
    size = geom.size
    if x.shape[1:] != (size, size):
        raise ConfigError(f"geometry for size {size} applied to {x.shape}")
    rows = np.clip(_source_coords(geom) + geom.top, 0, size - 1)
    cols = np.clip(_source_coords(geom) + geom.left, 0, size - 1)
    if order == "nearest":
        out = x[:, np.floor(rows + 0.5).astype(int)][:, :, np.floor(cols + 0.5).astype(int)]
    elif order == "bilinear":
        r0 = np.floor(rows).astype(int)
        c0 = np.floor(cols).astype(int)
        r1, c1 = np.minimum(r0 + 1, size - 1), np.minimum(c0 + 1, size - 1)
        fr = (rows - r0)[None, :, None]
        fc = (cols - c0)[None, None, :]
        top = x[:, r0][:, :, c0] * (1 - fc) + x[:, r0][:, :, c1] * fc
        bot = x[:, r1][:, :, c0] * (1 - fc) + x[:, r1][:, :, c1] * fc
        out = top * (1 - fr) + bot * fr
    else:
        raise ConfigError(f"unknown interpolation {order!r}")
    if geom.hflip:
        out = out[:, :, ::-1]
    if geom.vflip:
        out = out[:, ::-1, :]
    if geom.rot90:
        out = np.rot90(out, geom.rot90, axes=(1, 2))
    return np.ascontiguousarray(out, dtype=x.dtype)


# -- photometric ops ---------------------------------------------------------------

def _luma(x: np.ndarray) -> np.ndarray:
    return np.tensordot(LUMA, x, axes=(0, 0))


def adjust_brightness(x, f):
    return x * f


def adjust_contrast(x, f):
    m = _luma(x).mean()
    return m + f * (x - m)


def adjust_saturation(x, f):
    g = _luma(x)[None]
    return g + f * (x - g)


def color_jitter(x: np.ndarray, jitter: Jitter) -> np.ndarray:
    x = adjust_brightness(x, jitter.brightness)
    x = adjust_contrast(x, jitter.contrast)
    x = adjust_saturation(x, jitter.saturation)
    return np.clip(x, 0.0, 1.0)


def posterize(x, bits: int):
    if bits >= 8:
        return x
    q = 2 ** (8 - bits)
    return np.floor(np.round(x * 255) / q) * q / 255.0


def solarize(x, threshold: float):
    return np.where(x > threshold, 1.0 - x, x)


def sharpness(x, f):
    k = np.array([[1, 1, 1], [1, 5, 1], [1, 1, 1]], dtype=np.float64) / 13.0
    smooth = x.copy()
    inner = sum(k[i, j] * x[:, i:i + x.shape[1] - 2, j:j + x.shape[2] - 2]
                for i in range(3) for j in range(3))
    smooth[:, 1:-1, 1:-1] = inner
    return smooth + f * (x - smooth)


def equalize(x, amount: float):
    out = np.empty_like(x)
    for c in range(x.shape[0]):
        levels = np.round(x[c] * 255).astype(int)
        hist = np.bincount(levels.ravel(), minlength=256)
        cdf = np.cumsum(hist) / levels.size
        out[c] = cdf[levels]
    return x + amount * (out - x)


def _apply_op(x: np.ndarray, op: str, m: float, sign: float) -> np.ndarray:
    factor = 1.0 + sign * 0.9 * m
    if op == "brightness":
        return adjust_brightness(x, factor)
    if op == "contrast":
        return adjust_contrast(x, factor)
    if op == "saturation":
        return adjust_saturation(x, factor)
    if op == "sharpness":
        return sharpness(x, factor)
    if op == "posterize":
        return posterize(x, 8 - int(round(4 * m)))
    if op == "solarize":
        return solarize(x, 1.0 - m)
    if op == "equalize":
        return equalize(x, m)
    raise ConfigError(f"unknown op {op!r}")


# -- views -------------------------------------------------------------------------

def weak_augment(image: np.ndarray, seed, geom: Optional[Geometry] = None,
                 jitter: Optional[Jitter] = None) -> tuple[np.ndarray, Geometry]:
    """Flips, resized crop (area scale [0.8,1]), 90-degree rotation, colour jitter.

    ``geom``/``jitter`` override the sampled parameters.
    """
    rng = _rng(seed)
    size = image.shape[-1]
    sampled_geom = sample_geometry(rng, size)
    lo, hi = 0.8, 1.2
    sampled_jitter = Jitter(*rng.uniform(lo, hi, size=3))
    geom = sampled_geom if geom is None else geom
    jitter = sampled_jitter if jitter is None else jitter
    view = color_jitter(apply_geometry(image, geom, "bilinear"), jitter)
    return view.astype(image.dtype), geom


def sample_strong_params(seed, size: int, n_ops: int = 2, cutout_frac: float = 0.25,
                         magnitude: Optional[float] = None) -> StrongParams:
    rng = _rng(seed)
    ops = tuple(STRONG_OPS[i] for i in rng.choice(len(STRONG_OPS), size=n_ops, replace=False))
    mags = rng.uniform(0.0, 1.0, size=n_ops)
    if magnitude is not None:
        mags = np.full(n_ops, magnitude)
    signs = tuple(float(s) for s in rng.choice([-1.0, 1.0], size=n_ops))
    side = int(math.floor(cutout_frac * size))
    top, left = (int(v) for v in rng.integers(0, size - side + 1, size=2))
    return StrongParams(ops, tuple(float(m) for m in mags), signs, (top, left, side))


def apply_strong(view: np.ndarray, params: StrongParams, fill: Sequence[float]) -> np.ndarray:
    out = view.astype(np.float64)
    for op, m, s in zip(params.ops, params.magnitudes, params.signs):
        out = np.clip(_apply_op(out, op, m, s), 0.0, 1.0)
    top, left, side = params.hole
    if side > 0:
        out[:, top:top + side, left:left + side] = np.asarray(fill, dtype=np.float64)[:, None, None]
    return out.astype(view.dtype)


def strong_augment(weak_view: np.ndarray, seed, fill: Sequence[float] = (0.5, 0.5, 0.5),
                   **overrides) -> np.ndarray:
    """Two random photometric ops at random magnitude, then one CutOut hole.

    ``fill`` should be the dataset mean colour. ``overrides`` go to
    :func:`sample_strong_params` (``n_ops``, ``cutout_frac``, ``magnitude``).
    """
    params = sample_strong_params(seed, weak_view.shape[-1], **overrides)
    return apply_strong(weak_view, params, fill)


def make_pair(image: np.ndarray, seed, fill: Sequence[float] = (0.5, 0.5, 0.5)) -> AugPair:
    """Weak and strong views of ``image`` sharing one geometry; seeds derive from ``seed``."""
    seed = tuple(np.atleast_1d(seed))
    x_w, geom = weak_augment(image, seed + (1,))
    params = sample_strong_params(seed + (2,), image.shape[-1])
    return AugPair(x_w, apply_strong(x_w, params, fill), geom, params)


def cutmix(a: Sample, b: Sample, seed, region: Optional[tuple] = None) -> Sample:
    """Paste a square of ``b`` (image and mask) into ``a``.

    The pasted area fraction is drawn from Beta(1,1); ``region`` =
    (top, left, height, width) overrides the draw.
    """
    if a.mask is None or b.mask is None:
        raise ConfigError("cutmix needs two labeled samples")
    if a.image.shape != b.image.shape:
        raise ConfigError(f"cutmix size mismatch {a.image.shape} vs {b.image.shape}")
    size = a.image.shape[-1]
    if region is None:
        rng = _rng(seed)
        frac = rng.beta(1.0, 1.0)
        side = int(round(size * math.sqrt(frac)))
        top, left = (int(v) for v in rng.integers(0, size - side + 1, size=2))
        region = (top, left, side, side)
    top, left, h, w = region
    image, mask = a.image.copy(), a.mask.copy()
    image[:, top:top + h, left:left + w] = b.image[:, top:top + h, left:left + w]
    mask[:, top:top + h, left:left + w] = b.mask[:, top:top + h, left:left + w]
    return Sample(id=f"{a.id}+{b.id}", image=image, mask=mask)
