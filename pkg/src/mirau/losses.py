"""Loss terms for MIM pretraining and semi-supervised segmentation, plus the ramp schedule.

Probability maps are Tensors of foreground probabilities; binary masks,
pseudo-label targets and weights are plain arrays. Every term is a scalar Tensor.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields
from typing import Optional, Union

import numpy as np

from .errors import ConfigError
from .ndgrad import Tensor

CLAMP = 1e-7
ArrayOrTensor = Union[np.ndarray, Tensor]


@dataclass(frozen=True)
class LossWeights:
    lambda_d: float = 1.0
    lambda_b: float = 1.0
    lambda_u: float = 1.0
    lambda_c: float = 0.5
    gamma: float = 0.1
    kappa: float = 0.1
    ramp_length: float = 20.0  # in epochs; trainers default it to 40% of the run

    def __post_init__(self) -> None:
        for f in fields(self):
            v = getattr(self, f.name)
            if not (isinstance(v, (int, float)) and math.isfinite(v) and v >= 0):
                raise ConfigError(f"loss weight {f.name}={v!r} must be a finite number >= 0")
        if self.kappa <= 0:
            raise ConfigError("kappa must be > 0")


def _values(x: ArrayOrTensor) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x)


def _clamped(p: Tensor) -> Tensor:
    return p.clip(CLAMP, 1.0 - CLAMP)


def mim_loss(pred: Tensor, true: np.ndarray) -> Tensor:
    """Mean over masked patches of the per-patch L1 pixel sum; rows are patches."""
    true = _values(true)
    if pred.shape != true.shape:
        raise ConfigError(f"mim_loss shapes differ: {pred.shape} vs {true.shape}")
    if pred.shape[0] < 1:
        raise ConfigError("mim_loss needs at least one masked patch")
    return (pred - true).abs().sum() * (1.0 / pred.shape[0])


def dice_loss(pred: Tensor, target: np.ndarray, eps: float = 1e-6) -> Tensor:
    target = _values(target)
    inter = (pred * target).sum()
    return 1.0 - (inter * 2.0 + eps) / (pred.sum() + (float(target.sum()) + eps))


def bce_loss(pred: Tensor, target: np.ndarray) -> Tensor:
    y = _values(target)
    p = _clamped(pred)
    return -(p.log() * y + (1.0 - p).log() * (1.0 - y)).mean()


def soft_ce(target: np.ndarray, pred: Tensor) -> Tensor:
    """Pixelwise two-class cross-entropy of ``pred`` against soft targets (unreduced)."""
    p = _clamped(pred)
    return -(p.log() * target + (1.0 - p).log() * (1.0 - target))


def consistency_loss(teacher_map: ArrayOrTensor, student_map: Tensor) -> Tensor:
    """Mean CE(p_T, p_S) with the teacher map as a fixed soft target."""
    if isinstance(teacher_map, Tensor):
        assert not teacher_map.requires_grad, "teacher map must be detached from the tape"
    return soft_ce(_values(teacher_map), student_map).mean()


def entropy_loss(student_map: Tensor) -> Tensor:
    p = _clamped(student_map)
    q = 1.0 - p
    return -(p * p.log() + q * q.log()).mean()


def unsup_loss(student_strong: Tensor, target: np.ndarray, weight: np.ndarray,
               student_weak: ArrayOrTensor, lambda_u: float = 1.0,
               lambda_c: float = 0.5) -> Tensor:
    """Confidence-weighted CE to the pseudo-labels plus squared weak/strong disagreement.

    Normalized by the total weight; an all-zero weight map contributes an exact 0.
    The weak-view prediction is treated as a constant.
    """
    if isinstance(student_weak, Tensor):
        assert not student_weak.requires_grad, "weak-view prediction must be detached"
    w = _values(weight)
    total = float(w.sum())
    if total <= 0.0:
        return Tensor(np.zeros((), dtype=student_strong.dtype))
    weak = _values(student_weak)
    per_pixel = soft_ce(_values(target), student_strong) * lambda_u
    if lambda_c:
        per_pixel = per_pixel + ((student_strong - weak) ** 2) * lambda_c
    return (per_pixel * (w / total)).sum()


def ramp_beta(t: float, ramp_length: float) -> float:
    """exp(-5 (1 - min(t/T_r, 1))^2)."""
    if ramp_length <= 0:
        raise ConfigError(f"ramp length must be > 0, got {ramp_length}")
    if t < 0:
        raise ConfigError(f"ramp position must be >= 0, got {t}")
    r = 1.0 - min(t / ramp_length, 1.0)
    return math.exp(-5.0 * r * r)


def supervised_loss(pred: Tensor, target: np.ndarray, weights: LossWeights = LossWeights()) -> Tensor:
    return dice_loss(pred, target) * weights.lambda_d + bce_loss(pred, target) * weights.lambda_b


def total_loss(sup, unsup, ent, weights: LossWeights = LossWeights(), t: Optional[float] = None,
               beta: Optional[float] = None):
    """L_sup + beta * L_unsup + gamma * L_ent; ``beta`` defaults to ``ramp_beta(t)``."""
    if beta is None:
        if t is None:
            raise ConfigError("total_loss needs either t or beta")
        beta = ramp_beta(t, weights.ramp_length)
    return sup + unsup * beta + ent * weights.gamma
