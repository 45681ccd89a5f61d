"""Monte Carlo dropout statistics, confidence weighting and pseudo-label generation."""

from __future__ import annotations

import json
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Protocol, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError


class MCModel(Protocol):
    def mc_maps(self, images: np.ndarray, passes: int, seed) -> np.ndarray: ...


@dataclass
class UncertaintyStats:
    mean: np.ndarray
    variance: np.ndarray
    passes: int

    @property
    def std(self) -> np.ndarray:
        return np.sqrt(self.variance)


@dataclass
class PseudoLabelMap:
    target: np.ndarray
    weight: np.ndarray
    retained_fraction: float


@dataclass(frozen=True)
class PseudoConfig:
    passes: int = 8
    kappa: float = 0.1
    tau_u: float = 0.05
    mu_margin: float = 0.2
    literal_alg2: bool = False   # target = w * mean instead of mean
    filter: bool = True          # False: every pixel retained with w = 1

    def __post_init__(self) -> None:
        if self.passes < 2:
            raise ConfigError(f"MC dropout needs at least 2 passes, got {self.passes}")
        if self.kappa <= 0:
            raise ConfigError("kappa must be > 0")


def stats_from_maps(maps: np.ndarray) -> UncertaintyStats:
    """Mean and unbiased variance over axis 0 of stacked per-pass maps."""
    m = maps.shape[0]
    if m < 2:
        raise ConfigError(f"MC dropout needs at least 2 passes, got {m}")
    maps = maps.astype(np.float64)
    # work relative to the first pass so identical passes give exactly zero variance
    d = maps - maps[0]
    dmean = d.sum(axis=0) / m
    var = ((d - dmean) ** 2).sum(axis=0) / (m - 1)
    return UncertaintyStats(maps[0] + dmean, var, m)


def mc_stats(model: MCModel, image_weak: np.ndarray, passes: int, base_seed) -> UncertaintyStats:
    """M dropout-sampled forward passes; pass m uses dropout stream (base_seed, m)."""
    if passes < 2:
        raise ConfigError(f"MC dropout needs at least 2 passes, got {passes}")
    return stats_from_maps(model.mc_maps(image_weak, passes, base_seed))


def confidence_weights(stats: UncertaintyStats, kappa: float = 0.1, tau_u: float = 0.05,
                       mu_margin: float = 0.2, literal_alg2: bool = False,
                       filter: bool = True) -> PseudoLabelMap:
    """Keep pixels with std < tau_u and |mean - 0.5| >= mu_margin, weighted exp(-std/kappa)."""
    if kappa <= 0:
        raise ConfigError("kappa must be > 0")
    mu, sd = stats.mean, stats.std
    if filter:
        confident = (mu >= 0.5 + mu_margin) | (mu <= 0.5 - mu_margin)
        keep = (sd < tau_u) & confident
        w = np.where(keep, np.exp(-sd / kappa), 0.0)
    else:
        keep = np.ones(mu.shape, dtype=bool)
        w = np.ones(mu.shape)
    target = w * mu if literal_alg2 else mu.copy()
    return PseudoLabelMap(target, w, float(keep.mean()) if keep.size else 0.0)


def stream_key(seed: int, epoch: int, sample_id: str) -> int:
    """Stable 63-bit key for the per-(epoch, image) randomness."""
    ss = np.random.SeedSequence([seed, epoch, zlib.crc32(sample_id.encode())])
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


def generate_pseudo_labels(model: MCModel, views: Sequence[np.ndarray], keys: Sequence[int],
                           cfg: PseudoConfig = PseudoConfig()) -> list[PseudoLabelMap]:
    """One pseudo-label map per weak view [3,H,W]; view i uses dropout stream ``keys[i]``.

    Images are processed one at a time so each map depends only on its own key.
    """
    out = []
    for view, key in zip(views, keys):
        stats = mc_stats(model, view[None], cfg.passes, key)
        pl = confidence_weights(stats, cfg.kappa, cfg.tau_u, cfg.mu_margin, cfg.literal_alg2,
                                cfg.filter)
        out.append(PseudoLabelMap(pl.target[0], pl.weight[0], pl.retained_fraction))
    return out


# -- surrogate teachers --------------------------------------------------------------

def mask_lookup(images: Sequence[np.ndarray], masks: Sequence[np.ndarray]):
    """Callable mapping image batches [N,3,H,W] back to their masks [N,1,H,W] by content."""
    table = {np.ascontiguousarray(im).tobytes(): m for im, m in zip(images, masks)}

    def lookup(batch: np.ndarray) -> np.ndarray:
        try:
            return np.stack([table[np.ascontiguousarray(im).tobytes()] for im in batch])
        except KeyError:
            raise ConfigError("oracle teacher was given an image it has no mask for") from None

    return lookup


class OracleTeacher:
    """Returns the ground-truth mask on every pass (zero variance)."""

    def __init__(self, lookup):
        self.lookup = lookup  # views [N,3,H,W] -> masks [N,1,H,W]

    def mc_maps(self, images, passes, seed):
        gt = np.asarray(self.lookup(images), dtype=np.float64)
        return np.repeat(gt[None], passes, axis=0)


class NoisyOracleTeacher:
    """Ground truth corrupted by pixel noise whose local magnitude sets both the
    systematic error and the pass-to-pass spread.

    For each image a smooth noise-level field ``s`` in [0, max_level] is drawn
    (larger near the lesion boundary). The emitted probability on pass m is
    ``clip(gt + s*b + s*e_m, 0, 1)`` with a fixed per-pixel bias ``b`` and fresh
    per-pass noise ``e_m``, both standard normal.
    """

    def __init__(self, lookup, max_level: float = 0.6, boundary_boost: float = 0.5,
                 seed: int = 0):
        self.lookup, self.max_level, self.boundary_boost, self.seed = lookup, max_level, boundary_boost, seed

    def _fields(self, gt: np.ndarray, seed) -> tuple[np.ndarray, np.ndarray]:
        rng = np.random.default_rng([self.seed, int(seed) & 0xFFFFFFFF, 1])
        h, w = gt.shape
        coarse = rng.uniform(0, 1, (4, 4))
        level = np.clip(ndimage.zoom(coarse, (h / 4, w / 4), order=1), 0, 1)[:h, :w]
        dist = np.minimum(ndimage.distance_transform_edt(gt), ndimage.distance_transform_edt(1 - gt))
        level = np.clip(level + self.boundary_boost * np.exp(-dist / 2.0), 0, 1) * self.max_level
        return level, rng.normal(size=(h, w))

    def mc_maps(self, images, passes, seed):
        gts = np.asarray(self.lookup(images), dtype=np.float64)
        out = np.empty((passes,) + gts.shape)
        for i, gt in enumerate(gts):
            level, bias = self._fields(gt[0], seed + i)
            rng = np.random.default_rng([self.seed, int(seed + i) & 0xFFFFFFFF, 2])
            for m in range(passes):
                out[m, i, 0] = np.clip(gt[0] + level * (bias + rng.normal(size=gt[0].shape)), 0, 1)
        return out


# -- export --------------------------------------------------------------------------

def to_uint16(a: np.ndarray) -> np.ndarray:
    return np.clip(np.round(np.asarray(a, np.float64) * 65535.0), 0, 65535).astype(np.uint16)


def export_pseudo_labels(maps: Sequence[PseudoLabelMap], ids: Sequence[str], out_dir,
                         cfg: PseudoConfig = PseudoConfig()) -> None:
    """``{id}_target.png`` and ``{id}_weight.png`` (16-bit grayscale) plus ``{id}.json``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for pl, sid in zip(maps, ids):
        hw = pl.target.shape[-2:]
        Image.fromarray(to_uint16(pl.target.reshape(hw))).save(out / f"{sid}_target.png")
        Image.fromarray(to_uint16(pl.weight.reshape(hw))).save(out / f"{sid}_weight.png")
        sidecar = {"id": sid, "kappa": cfg.kappa, "tau_u": cfg.tau_u, "M": cfg.passes,
                   "mu_margin": cfg.mu_margin, "literal_alg2": cfg.literal_alg2,
                   "filter": cfg.filter, "retained_fraction": pl.retained_fraction}
        (out / f"{sid}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n")


def read_map16(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 65535.0
