"""Flat training configuration shared by the trainer and the command line."""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, fields

import numpy as np

from ..errors import ConfigError
from ..losses import LossWeights
from ..models import StudentConfig, TeacherConfig
from ..uncertainty import PseudoConfig

ABLATIONS = ("no_uncertainty_mask", "no_mim", "cnn_only", "no_entropy")


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    batch_size: int = 4
    lr: float = 1e-3
    weight_decay: float = 0.01
    ema_alpha: float = 0.99
    ema_cadence: str = "epoch"          # or "step"
    mc_passes: int = 8
    mask_ratio: float = 0.5
    seed: int = 0
    label_fraction: float = 0.5
    val_fraction: float = 0.15
    # loss weights
    lambda_d: float = 1.0
    lambda_b: float = 1.0
    lambda_u: float = 1.0
    lambda_c: float = 0.5
    gamma: float = 0.1
    kappa: float = 0.1
    ramp_length: float = 0.0            # 0 -> 40% of epochs
    add_consistency: bool = False       # extra standalone CE(teacher mean, student strong)
    # pseudo-labels
    tau_u: float = 0.05
    mu_margin: float = 0.2
    literal_alg2: bool = False
    warmup_epochs: int = 5
    # ablations
    no_uncertainty_mask: bool = False
    no_mim: bool = False
    cnn_only: bool = False
    no_entropy: bool = False
    supervised_only: bool = False       # beta = 0 and unlabeled data discarded
    cutmix_prob: float = 0.0
    # schedule
    plateau_patience: int = 10
    plateau_factor: float = 0.5
    min_lr: float = 1e-5
    pretrain_epochs: int = 20
    pretrain_lr: float = 1e-3
    # architecture
    image_size: int = 64
    student_base: int = 32
    student_dropout: float = 0.1
    teacher_dim: int = 256
    teacher_depth: int = 4
    teacher_heads: int = 4
    teacher_ffn: int = 512
    teacher_dropout: float = 0.1
    dtype: str = "float32"

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 < self.ema_alpha < 1.0:
            raise ConfigError("ema_alpha must lie in (0, 1)")
        if self.ema_cadence not in ("epoch", "step"):
            raise ConfigError(f"ema_cadence must be 'epoch' or 'step', got {self.ema_cadence!r}")
        if self.mc_passes < 2:
            raise ConfigError(f"MC dropout needs at least 2 passes, got {self.mc_passes}")
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ConfigError("mask_ratio must lie in [0, 1]")
        if not 0.0 < self.label_fraction <= 1.0:
            raise ConfigError("label_fraction must lie in (0, 1]")
        if not 0.0 <= self.val_fraction < 1.0:
            raise ConfigError("val_fraction must lie in [0, 1)")
        if not 0.0 <= self.cutmix_prob <= 1.0:
            raise ConfigError("cutmix_prob must lie in [0, 1]")
        if self.lr <= 0 or self.pretrain_lr <= 0 or self.min_lr < 0:
            raise ConfigError("learning rates must be positive")
        if not 0.0 < self.plateau_factor <= 1.0:
            raise ConfigError("plateau_factor must lie in (0, 1]")
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, got {self.dtype!r}")
        if self.image_size % 8 or self.image_size < 16:
            raise ConfigError("image_size must be a multiple of 8 and >= 16")
        self.loss_weights()  # validates the weights

    # -- derived views --------------------------------------------------------
    @property
    def np_dtype(self):
        return np.dtype(self.dtype)

    @property
    def ramp(self) -> float:
        return self.ramp_length if self.ramp_length > 0 else max(0.4 * self.epochs, 1e-9)

    def loss_weights(self) -> LossWeights:
        return LossWeights(self.lambda_d, self.lambda_b, self.lambda_u, self.lambda_c,
                           0.0 if self.no_entropy else self.gamma, self.kappa, self.ramp)

    def pseudo_config(self) -> PseudoConfig:
        return PseudoConfig(self.mc_passes, self.kappa, self.tau_u, self.mu_margin,
                            self.literal_alg2, filter=not self.no_uncertainty_mask)

    def student_config(self) -> StudentConfig:
        return StudentConfig(base=self.student_base, dropout=self.student_dropout,
                             cnn_only=self.cnn_only)

    def teacher_config(self) -> TeacherConfig:
        return TeacherConfig(image_size=self.image_size, dim=self.teacher_dim,
                             depth=self.teacher_depth, heads=self.teacher_heads,
                             ffn=self.teacher_ffn, dropout=self.teacher_dropout)

    # -- serialization --------------------------------------------------------
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name: f for f in fields(cls)}
        unknown = sorted(set(d) - set(known))
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: coerce(known[k].type, k, v) for k, v in d.items()})

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


def coerce(type_name, key: str, value):
    """Convert a text or JSON value to the declared field type."""
    t = type_name if isinstance(type_name, str) else type_name.__name__
    try:
        if t == "bool":
            if isinstance(value, bool):
                return value
            s = str(value).strip().lower()
            if s in ("1", "true", "yes", "on"):
                return True
            if s in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if t == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if t == "float":
            v = float(value)
            if not math.isfinite(v):
                raise ValueError(value)
            return v
        return str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"bad value for {key}: {value!r} (expected {t})") from None
