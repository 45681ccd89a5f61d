"""Per-image segmentation metrics, set evaluation and CSV/PNG reports."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
from PIL import Image

from .errors import ConfigError, DataError

METRIC_NAMES = ("dsc", "iou", "acc", "prec", "rec")


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn


def confusion(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> ConfusionCounts:
    pred, target = np.asarray(pred), np.asarray(target)
    if pred.shape != target.shape:
        raise ConfigError(f"prediction shape {pred.shape} != target shape {target.shape}")
    p = pred >= threshold
    y = target > 0.5
    tp = int(np.count_nonzero(p & y))
    fp = int(np.count_nonzero(p & ~y))
    fn = int(np.count_nonzero(~p & y))
    return ConfusionCounts(tp, fp, p.size - tp - fp - fn, fn)


def _ratio(num: int, den: int, both_empty: bool) -> float:
    if den == 0:
        return 1.0 if both_empty else 0.0
    return num / den


def evaluate(pred: np.ndarray, target: np.ndarray, threshold: float = 0.5) -> dict:
    """DSC, IoU, accuracy, precision, recall after binarizing ``pred`` at ``threshold``.

    Ratios with an empty denominator are 1.0 when prediction and target are
    both empty, 0.0 otherwise.
    """
    c = confusion(pred, target, threshold)
    empty = c.tp + c.fp + c.fn == 0
    return {
        "dsc": _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn, empty),
        "iou": _ratio(c.tp, c.tp + c.fp + c.fn, empty),
        "acc": _ratio(c.tp + c.tn, c.total, empty),
        "prec": _ratio(c.tp, c.tp + c.fp, empty),
        "rec": _ratio(c.tp, c.tp + c.fn, empty),
    }


def evaluate_set(predict: Callable[[np.ndarray], np.ndarray], samples: Sequence,
                 threshold: float = 0.5, batch_size: int = 8) -> tuple[list[dict], dict]:
    """Rows ``{id, dsc, ...}`` sorted by id and their unweighted mean.

    ``predict`` maps an image batch [N,3,H,W] to probabilities [N,1,H,W].
    """
    if not samples:
        raise ConfigError("evaluate_set needs at least one sample")
    missing = [s.id for s in samples if getattr(s, "mask", None) is None]
    if missing:
        raise DataError(f"samples without masks cannot be evaluated: {missing[:5]}")
    ordered = sorted(samples, key=lambda s: s.id)
    rows = []
    for i in range(0, len(ordered), batch_size):
        chunk = ordered[i:i + batch_size]
        probs = predict(np.stack([s.image for s in chunk]))
        for s, p in zip(chunk, probs):
            rows.append({"id": s.id, **evaluate(p, s.mask, threshold)})
    mean = {"id": "MEAN", **{k: float(np.mean([r[k] for r in rows])) for k in METRIC_NAMES}}
    return rows, mean


def write_report(rows: Sequence[dict], mean: dict, path) -> None:
    """CSV ``id,dsc,iou,acc,prec,rec`` with a trailing MEAN row."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("id",) + METRIC_NAMES)
        for r in list(rows) + [mean]:
            w.writerow([r["id"]] + [repr(float(r[k])) for k in METRIC_NAMES])


def export_masks(ids: Sequence[str], probs: Sequence[np.ndarray], out_dir,
                 threshold: float = 0.5) -> None:
    """One 8-bit PNG (0/255) per id."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for sid, p in zip(ids, probs):
        p = np.asarray(p)
        mask = (p.reshape(p.shape[-2:]) >= threshold).astype(np.uint8) * 255
        Image.fromarray(mask).save(out / f"{sid}.png")
