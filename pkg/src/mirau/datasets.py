"""Synthetic lesion images, on-disk image/mask ingestion, labeled/unlabeled splits."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np
from PIL import Image
from scipy import ndimage

from .errors import ConfigError, DataError

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
MASK_THRESHOLD = 128
MIN_AREA, MAX_AREA = 0.05, 0.6


@dataclass
class Sample:
    """One image [3,H,W] in [0,1] with an optional binary mask [1,H,W]."""

    id: str
    image: np.ndarray
    mask: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"{self.id}: image must be [3,H,W], got {self.image.shape}")
        if self.image.min() < 0 or self.image.max() > 1:
            raise DataError(f"{self.id}: image values outside [0,1]")
        if self.mask is not None:
            if self.mask.shape != (1,) + self.image.shape[1:]:
                raise DataError(f"{self.id}: mask shape {self.mask.shape} does not match image")
            if not np.isin(self.mask, (0.0, 1.0)).all():
                raise DataError(f"{self.id}: mask is not binary")

    @property
    def labeled(self) -> bool:
        return self.mask is not None


@dataclass(frozen=True)
class UnlabeledSample:
    """Image-only view handed to the trainer; carries no mask attribute at all."""

    id: str
    image: np.ndarray


class MaskVault:
    """Holds withheld ground truth of unlabeled samples and counts every read."""

    def __init__(self, masks: dict[str, np.ndarray]):
        self._masks = masks
        self.reads = 0

    def __len__(self) -> int:
        return len(self._masks)

    def get(self, sample_id: str) -> np.ndarray:
        self.reads += 1
        return self._masks[sample_id]


# -- synthetic generation ------------------------------------------------------

def _smooth_field(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    coarse = rng.normal(size=(cells, cells))
    return ndimage.zoom(coarse, size / cells, order=3, mode="reflect")[:size, :size]


def blob_mask(size: int, center, axes, angle: float, harmonics: Sequence[tuple],
              irregularity: float) -> np.ndarray:
    """Ellipse whose boundary radius is modulated by low-frequency harmonics.

    ``harmonics`` holds (order, amplitude, phase) triples; the boundary in the
    ellipse-normalized frame sits at ``1 + irregularity * sum(a*cos(k*phi+ps))``.
    """
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - center[0], xx - center[1]
    c, s = math.cos(angle), math.sin(angle)
    u = (c * dx + s * dy) / axes[0]
    v = (-s * dx + c * dy) / axes[1]
    rho = np.hypot(u, v)
    phi = np.arctan2(v, u)
    boundary = np.ones_like(rho)
    for k, amp, phase in harmonics:
        boundary += irregularity * amp * np.cos(k * phi + phase)
    return (rho <= np.maximum(boundary, 0.3)).astype(np.float32)


def _draw_hair(img: np.ndarray, rng: np.random.Generator, size: int) -> None:
    strokes = int(rng.integers(1, 5))
    color = rng.uniform(0.05, 0.2, size=3)
    for _ in range(strokes):
        p0, p1, p2 = rng.uniform(0, size, size=(3, 2))
        ts = np.linspace(0, 1, 4 * size)[:, None]
        pts = (1 - ts) ** 2 * p0 + 2 * (1 - ts) * ts * p1 + ts ** 2 * p2
        ij = np.clip(np.round(pts).astype(int), 0, size - 1)
        img[:, ij[:, 0], ij[:, 1]] = color[:, None]


def synth_sample(size: int, seed: int, index: int, irregularity: float = 0.5,
                 hair_prob: float = 0.4) -> Sample:
    """One synthetic lesion image, deterministic in (seed, index)."""
    for attempt in range(1000):
        rng = np.random.default_rng([seed, index, attempt])
        center = rng.uniform(0.3, 0.7, size=2) * size
        axes = rng.uniform(0.12, 0.4, size=2) * size
        angle = float(rng.uniform(0, math.pi))
        harmonics = [(k, float(rng.uniform(0, 0.3) / math.sqrt(k - 1)),
                      float(rng.uniform(0, 2 * math.pi))) for k in range(2, 7)]
        mask = blob_mask(size, center, axes, angle, harmonics, irregularity)
        area = float(mask.mean())
        if MIN_AREA <= area <= MAX_AREA:
            break
    else:  # pragma: no cover - the axis ranges make this unreachable
        raise DataError(f"synthetic sample {index}: area rejection did not terminate")

    skin = np.array([0.85, 0.65, 0.55]) + rng.uniform(-0.08, 0.08, size=3)
    lesion = np.array([0.45, 0.28, 0.2]) + rng.uniform(-0.12, 0.12, size=3)
    contrast = rng.uniform(0.35, 1.0)
    lesion = skin + contrast * (lesion - skin)

    light = 1.0 + 0.08 * _smooth_field(rng, size, 3)
    texture = 0.06 * _smooth_field(rng, size, 6)
    # soft rim: the image fades across ~1.5 px while the mask stays the exact support
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(1 - mask)
    signed = np.where(mask > 0, inside - 0.5, 0.5 - outside)
    alpha = 1.0 / (1.0 + np.exp(-signed / 0.75))

    img = (skin[:, None, None] * (1 - alpha) + (lesion[:, None, None] + texture) * alpha) * light
    img = img * (1 + rng.normal(0, 0.04, size=img.shape)) + rng.normal(0, 0.015, size=img.shape)
    if rng.random() < hair_prob:
        _draw_hair(img, rng, size)
    img = np.clip(img, 0.0, 1.0).astype(np.float32)
    meta = {"center": center.tolist(), "axes": axes.tolist(), "angle": angle,
            "area": area, "contrast": float(contrast)}
    return Sample(id=f"syn{seed}_{index:05d}", image=img, mask=mask[None], meta=meta)


def generate_synthetic(count: int, size: int, seed: int, irregularity: float = 0.5,
                       start: int = 0) -> list[Sample]:
    """``count`` synthetic samples with indices ``start .. start+count-1``."""
    if size < 16:
        raise ConfigError("synthetic size must be >= 16")
    if not 0.0 <= irregularity <= 1.0:
        raise ConfigError("irregularity must lie in [0, 1]")
    return [synth_sample(size, seed, i, irregularity) for i in range(start, start + count)]


# -- directory layout -------------------------------------------------------------

def _read_image(path: Path, sample_id: str, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("RGB").resize((size, size), Image.BILINEAR)
            arr = np.asarray(im, dtype=np.float32) / 255.0
    except (OSError, ValueError) as exc:
        raise DataError(f"{sample_id}: cannot read image {path.name}: {exc}") from exc
    return arr.transpose(2, 0, 1).copy()


def _read_mask(path: Path, sample_id: str, size: int) -> np.ndarray:
    try:
        with Image.open(path) as im:
            im = im.convert("L").resize((size, size), Image.NEAREST)
            arr = np.asarray(im)
    except (OSError, ValueError) as exc:
        raise DataError(f"{sample_id}: cannot read mask {path.name}: {exc}") from exc
    return (arr >= MASK_THRESHOLD).astype(np.float32)[None]


def load_directory(root, size: int) -> list[Sample]:
    """Read ``root/images/*`` and, if present, ``root/masks/*.png`` with matching stems.

    Images are bilinearly resized and scaled to [0,1]; masks are nearest-neighbour
    resized and binarized at 128/255. Samples are returned sorted by id.
    Images without a mask (or masks without an image) are logged and skipped
    when a masks/ directory exists.
    """
    root = Path(root)
    img_dir, mask_dir = root / "images", root / "masks"
    if not img_dir.is_dir():
        raise DataError(f"{root}: no images/ directory")
    images = {p.stem: p for p in sorted(img_dir.iterdir()) if p.suffix.lower() in IMAGE_SUFFIXES}
    masks = None
    if mask_dir.is_dir():
        masks = {p.stem: p for p in sorted(mask_dir.iterdir()) if p.suffix.lower() == ".png"}
        for stem in sorted(set(masks) - set(images)):
            logger.warning("mask %s has no matching image; skipped", stem)
    samples = []
    for stem in sorted(images):
        if masks is not None and stem not in masks:
            logger.warning("image %s has no matching mask; skipped", stem)
            continue
        image = _read_image(images[stem], stem, size)
        mask = _read_mask(masks[stem], stem, size) if masks is not None else None
        samples.append(Sample(id=stem, image=image, mask=mask))
    return samples


def to_uint8(a: np.ndarray) -> np.ndarray:
    return np.clip(np.round(a * 255.0), 0, 255).astype(np.uint8)


def export_directory(samples: Iterable[Sample], root) -> None:
    """Write samples in the ``images/``/``masks/`` layout (8-bit PNG)."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    samples = list(samples)
    if any(s.mask is not None for s in samples):
        (root / "masks").mkdir(exist_ok=True)
    for s in samples:
        Image.fromarray(to_uint8(s.image.transpose(1, 2, 0))).save(root / "images" / f"{s.id}.png")
        if s.mask is not None:
            Image.fromarray(to_uint8(s.mask[0])).save(root / "masks" / f"{s.id}.png")


# -- split protocol ---------------------------------------------------------------

@dataclass(frozen=True)
class SplitPlan:
    labeled_fraction: float
    seed: int
    labeled_ids: tuple
    unlabeled_ids: tuple

    def partition(self, samples: Sequence[Sample]):
        """Labeled samples, mask-free unlabeled views, and the vault of withheld masks."""
        by_id = {s.id: s for s in samples}
        labeled = [by_id[i] for i in self.labeled_ids]
        unlabeled = [UnlabeledSample(i, by_id[i].image) for i in self.unlabeled_ids]
        vault = MaskVault({i: by_id[i].mask for i in self.unlabeled_ids
                           if by_id[i].mask is not None})
        return labeled, unlabeled, vault


def round_half_up(x: float) -> int:
    return int(math.floor(x + 0.5))


def make_split(samples: Sequence[Sample], fraction: float, seed: int) -> SplitPlan:
    if not 0.0 < fraction <= 1.0:
        raise ConfigError(f"labeled fraction {fraction} outside (0, 1]")
    ids = sorted(s.id for s in samples)
    n_lab = round_half_up(fraction * len(ids))
    if n_lab < 1:
        raise ConfigError(f"labeled fraction {fraction} of {len(ids)} samples yields no labels")
    missing = [s.id for s in samples if s.id in ids and s.mask is None]
    order = np.random.default_rng([seed, 0x5117]).permutation(len(ids))
    shuffled = [ids[i] for i in order]
    labeled = sorted(shuffled[:n_lab])
    bad = sorted(set(labeled) & set(missing))
    if bad:
        raise ConfigError(f"samples chosen as labeled have no mask: {bad[:5]}")
    return SplitPlan(fraction, seed, tuple(labeled), tuple(sorted(shuffled[n_lab:])))
