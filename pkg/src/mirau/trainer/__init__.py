"""Optimizer, EMA, checkpoints and the two training phases."""

from .checkpoint import Checkpoint, load as load_checkpoint, save as save_checkpoint
from .config import ABLATIONS, TrainConfig
from .loop import (
    DataSplit,
    MimPretrainer,
    SSLTrainer,
    build_models,
    predictor,
    prepare_split,
    pretrain_mim,
    train_ssl,
    write_csv,
)
from .optim import AdamW, EmaMismatchError, Plateau, adamw_step, ema_update

__all__ = [
    "ABLATIONS", "AdamW", "Checkpoint", "DataSplit", "EmaMismatchError", "MimPretrainer",
    "Plateau", "SSLTrainer", "TrainConfig", "adamw_step", "build_models", "ema_update",
    "load_checkpoint", "predictor", "prepare_split", "pretrain_mim", "save_checkpoint",
    "train_ssl", "write_csv",
]
