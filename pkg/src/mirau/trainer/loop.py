"""Phase 1 (masked-image-modeling pretraining) and Phase 2 (semi-supervised) training.

All randomness is derived from ``cfg.seed`` plus (epoch, step, sample id), so a
run resumed from a checkpoint at any step replays the remaining steps exactly.
"""

from __future__ import annotations

import csv
import logging
import math
import warnings
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from ..augment import apply_geometry, cutmix, make_pair, weak_augment
from ..datasets import MaskVault, Sample, SplitPlan, UnlabeledSample, make_split, round_half_up
from ..errors import ConfigError, ConfigMismatchError
from ..losses import (
    consistency_loss,
    entropy_loss,
    mim_loss,
    ramp_beta,
    supervised_loss,
    total_loss,
    unsup_loss,
)
from ..metrics import evaluate_set
from ..models import StudentNet, TeacherNet, patchify, sample_patch_mask
from ..ndgrad import GradTape, NonFiniteError, Tensor, precision
from ..uncertainty import generate_pseudo_labels, stream_key
from . import checkpoint as ckpt_io
from .config import TrainConfig
from .optim import AdamW, Plateau, ema_update

logger = logging.getLogger(__name__)

HISTORY_FIELDS = ("epoch", "l_sup", "l_unsup", "l_ent", "beta", "lr", "retained_frac",
                  "val_dsc", "val_iou")
MIM_FIELDS = ("epoch", "train_loss", "eval_loss")


# -- data ----------------------------------------------------------------------------

@dataclass
class DataSplit:
    plan: SplitPlan
    labeled: list            # training part of the labeled ids
    val: list                # held-out part of the labeled ids
    unlabeled: list          # UnlabeledSample views, no masks
    vault: MaskVault


def prepare_split(samples: Sequence[Sample], cfg: TrainConfig) -> DataSplit:
    """Labeled/unlabeled split, then a seeded validation subset of the labeled ids."""
    plan = make_split(samples, cfg.label_fraction, cfg.seed)
    labeled, unlabeled, vault = plan.partition(samples)
    n_val = min(round_half_up(cfg.val_fraction * len(labeled)), len(labeled) - 1)
    order = np.random.default_rng([cfg.seed, 0x7A1]).permutation(len(labeled))
    val_idx = set(order[:n_val].tolist())
    val = [s for i, s in enumerate(labeled) if i in val_idx]
    train = [s for i, s in enumerate(labeled) if i not in val_idx]
    return DataSplit(plan, train, val, unlabeled, vault)


def predictor(model) -> Callable[[np.ndarray], np.ndarray]:
    """Deterministic inference function ``[N,3,H,W] -> [N,1,H,W]``."""
    def predict(batch: np.ndarray) -> np.ndarray:
        was = model.training
        model.eval()
        try:
            with GradTape(record=False):
                return model(batch.astype(model.parameters()[0].dtype)).data
        finally:
            model.train(was)
    return predict


def _batches(order: np.ndarray, size: int) -> list:
    return [order[i:i + size].tolist() for i in range(0, len(order), size)]


def _fmt(v) -> str:
    if v is None or (isinstance(v, float) and math.isnan(v)):
        return "nan"
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


def write_csv(rows: Sequence[dict], path, columns: Sequence[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _check_hash(saved: str, cfg: TrainConfig, override: bool) -> None:
    if saved == cfg.hash():
        return
    msg = f"checkpoint config hash {saved} differs from current config {cfg.hash()}"
    if not override:
        raise ConfigMismatchError(msg + " (pass the override flag to resume anyway)")
    warnings.warn(msg + "; resuming because override was requested", stacklevel=3)


# -- phase 1 -------------------------------------------------------------------------

class MimPretrainer:
    """Optimizes the teacher's masked-patch reconstruction loss alone.

    History row 0 is the evaluation loss before any update; row e is the state
    after epoch e. The evaluation loss uses a fixed set of patch masks with
    dropout off, so rows are comparable across epochs.
    """

    def __init__(self, teacher: TeacherNet, images: Sequence[np.ndarray], cfg: TrainConfig):
        if not len(images):
            raise ConfigError("MIM pretraining needs at least one image")
        self.teacher, self.cfg = teacher, cfg
        self.images = np.stack(images).astype(cfg.np_dtype)
        self.opt = AdamW(teacher.named_parameters(), cfg.pretrain_lr, cfg.weight_decay)
        self.epoch = 0
        self.history: list[dict] = []
        rng = np.random.default_rng([cfg.seed, 0xE7A1])
        self.eval_masks = sample_patch_mask(rng, len(images), teacher.grid, cfg.mask_ratio)

    def _loss(self, x: np.ndarray, mask: np.ndarray) -> Tensor:
        target = patchify(x, self.teacher.cfg.patch)[np.nonzero(mask)]
        return mim_loss(self.teacher.mim_forward(x, mask), target)

    def eval_loss(self) -> float:
        self.teacher.eval()
        total, n = 0.0, 0
        with GradTape(record=False):
            for idx in _batches(np.arange(len(self.images)), self.cfg.batch_size):
                loss = self._loss(self.images[idx], self.eval_masks[idx])
                total += loss.item() * len(idx)
                n += len(idx)
        self.teacher.train()
        return total / n

    def run_epoch(self) -> dict:
        cfg, e = self.cfg, self.epoch
        if not self.history:
            self.history.append({"epoch": 0, "train_loss": float("nan"), "eval_loss": self.eval_loss()})
        self.teacher.train()
        order = np.random.default_rng([cfg.seed, e, 0x31]).permutation(len(self.images))
        losses = []
        for k, idx in enumerate(_batches(order, cfg.batch_size)):
            rng = np.random.default_rng([cfg.seed, e, k, 0x32])
            mask = sample_patch_mask(rng, len(idx), self.teacher.grid, cfg.mask_ratio)
            self.opt.zero_grad()
            with GradTape(seed=int(rng.integers(2 ** 62))) as tape:
                loss = self._loss(self.images[idx], mask)
                tape.backward(loss)
            self.opt.step()
            losses.append(loss.item())
        self.opt.zero_grad()
        self.epoch += 1
        row = {"epoch": self.epoch, "train_loss": float(np.mean(losses)), "eval_loss": self.eval_loss()}
        self.history.append(row)
        logger.info("mim epoch %d train %.4f eval %.4f", row["epoch"], row["train_loss"], row["eval_loss"])
        return row

    def fit(self, epochs: Optional[int] = None) -> list[dict]:
        target = self.cfg.pretrain_epochs if epochs is None else epochs
        while self.epoch < target:
            self.run_epoch()
        return self.history

    def checkpoint(self) -> ckpt_io.Checkpoint:
        arrays = ckpt_io.prefixed("teacher.", self.teacher.state_dict())
        arrays.update(ckpt_io.prefixed("opt.", self.opt.state_arrays()))
        meta = {"kind": "mim", "history": self.history, "opt_t": self.opt.t,
                "config": self.cfg.to_dict()}
        return ckpt_io.Checkpoint(arrays, self.cfg.hash(), self.epoch, meta)

    def restore(self, ck: ckpt_io.Checkpoint, override: bool = False) -> None:
        _check_hash(ck.config_hash, self.cfg, override)
        self.teacher.load_state_dict(ckpt_io.strip("teacher.", ck.arrays))
        self.opt.load_state_arrays(ckpt_io.strip("opt.", ck.arrays), ck.meta["opt_t"])
        self.history = [dict(r) for r in ck.meta["history"]]
        self.epoch = ck.epoch


def pretrain_mim(teacher: TeacherNet, images: Sequence[np.ndarray], cfg: TrainConfig) -> list[dict]:
    """Run Phase 1 for ``cfg.pretrain_epochs`` epochs; returns the loss history.

    With ``cfg.no_mim`` the teacher keeps its initialization and the history is empty.
    """
    if cfg.no_mim:
        return []
    with precision(cfg.np_dtype):
        return MimPretrainer(teacher, images, cfg).fit()


# -- phase 2 -------------------------------------------------------------------------

class SSLTrainer:
    """Semi-supervised student training with an EMA shadow of the student as teacher.

    Pseudo-labels come from the MIM teacher for epochs < ``warmup_epochs`` and
    from the EMA shadow afterwards. Each epoch runs ceil(|labeled|/batch) steps;
    step k pairs labeled batch k with an equally sized unlabeled batch drawn by
    a seeded per-epoch permutation, regenerating that batch's pseudo-labels with
    the current pseudo-label source.
    """

    def __init__(self, cfg: TrainConfig, split: DataSplit, student: StudentNet,
                 teacher: Optional[TeacherNet] = None):
        if not split.labeled:
            raise ConfigError("semi-supervised training needs at least one labeled sample")
        self.cfg, self.split, self.student, self.teacher = cfg, split, student, teacher
        self.shadow = StudentNet(student.cfg)
        self.shadow.astype(cfg.np_dtype)
        self.shadow.load_state_dict(student.state_dict())
        self.shadow.eval()
        if teacher is not None:
            teacher.eval()
            for p in teacher.parameters():
                p.grad = None
        self.opt = AdamW(student.named_parameters(), cfg.lr, cfg.weight_decay)
        self.plateau = Plateau(cfg.lr, cfg.plateau_factor, cfg.plateau_patience, cfg.min_lr)
        self.weights = cfg.loss_weights()
        self.pseudo_cfg = cfg.pseudo_config()
        self.epoch = 0
        self.step_in_epoch = 0
        self.acc = self._fresh_acc()
        self.history: list[dict] = []
        images = [s.image for s in split.labeled] + [u.image for u in split.unlabeled]
        self.fill = tuple(float(c) for c in np.mean([im.mean(axis=(1, 2)) for im in images], axis=0))

    @staticmethod
    def _fresh_acc() -> dict:
        return {"l_sup": 0.0, "l_unsup": 0.0, "l_ent": 0.0, "steps": 0, "retained": 0.0, "maps": 0}

    # -- planning ---------------------------------------------------------------
    @property
    def uses_unlabeled(self) -> bool:
        return not self.cfg.supervised_only and len(self.split.unlabeled) > 0

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(len(self.split.labeled) / self.cfg.batch_size)

    def plan(self, e: int) -> tuple[list, list]:
        cfg = self.cfg
        lab = _batches(np.random.default_rng([cfg.seed, e, 11]).permutation(len(self.split.labeled)),
                       cfg.batch_size)
        if not self.uses_unlabeled:
            return lab, [[] for _ in lab]
        need = sum(len(b) for b in lab)
        n_u = len(self.split.unlabeled)
        order, j = [], 0
        while len(order) < need:
            order.extend(np.random.default_rng([cfg.seed, e, 12, j]).permutation(n_u).tolist())
            j += 1
        unl, pos = [], 0
        for b in lab:
            unl.append(order[pos:pos + len(b)])
            pos += len(b)
        return lab, unl

    def beta(self, e: int) -> float:
        return 0.0 if self.cfg.supervised_only else ramp_beta(e, self.cfg.ramp)

    def pseudo_source(self, e: int):
        if self.teacher is not None and e < self.cfg.warmup_epochs:
            return self.teacher
        return self.shadow

    # -- one step -----------------------------------------------------------------
    def _labeled_batch(self, idx: list, e: int):
        cfg, lab = self.cfg, self.split.labeled
        xs, ys = [], []
        for i in idx:
            s = lab[i]
            key = stream_key(cfg.seed, e, s.id)
            view, geom = weak_augment(s.image, (key, 1))
            item = Sample(s.id, view, apply_geometry(s.mask, geom, "nearest"))
            rng = np.random.default_rng((key, 3))
            if cfg.cutmix_prob > 0 and rng.random() < cfg.cutmix_prob:
                other = lab[int(rng.integers(len(lab)))]
                okey = stream_key(cfg.seed, e, other.id)
                oview, ogeom = weak_augment(other.image, (okey, 1))
                partner = Sample(other.id, oview, apply_geometry(other.mask, ogeom, "nearest"))
                item = cutmix(item, partner, (key, 4))
            xs.append(item.image)
            ys.append(item.mask)
        return np.stack(xs), np.stack(ys)

    def _unlabeled_batch(self, idx: list, e: int):
        cfg = self.cfg
        weak, strong, keys = [], [], []
        for i in idx:
            u = self.split.unlabeled[i]
            key = stream_key(cfg.seed, e, u.id)
            pair = make_pair(u.image, key, self.fill)
            weak.append(pair.x_w)
            strong.append(pair.x_s)
            keys.append(key)
        pls = generate_pseudo_labels(self.pseudo_source(e), weak, keys, self.pseudo_cfg)
        return np.stack(weak), np.stack(strong), pls

    def train_step(self) -> None:
        try:
            self._train_step()
        except NonFiniteError as exc:
            raise NonFiniteError(
                f"non-finite value at epoch {self.epoch} step {self.step_in_epoch}: {exc}") from exc

    def _train_step(self) -> None:
        cfg, e, k = self.cfg, self.epoch, self.step_in_epoch
        lab_plan, unl_plan = self.plan(e)
        dt = cfg.np_dtype
        xl, yl = self._labeled_batch(lab_plan[k], e)
        n_l = len(xl)
        beta = self.beta(e)
        x = xl
        if self.uses_unlabeled:
            xw, xs, pls = self._unlabeled_batch(unl_plan[k], e)
            target = np.stack([pl.target for pl in pls]).astype(dt)
            weight = np.stack([pl.weight for pl in pls]).astype(dt)
            weak_pred = predictor(self.student)(xw)
            x = np.concatenate([xl, xs])
            self.acc["retained"] += sum(pl.retained_fraction for pl in pls)
            self.acc["maps"] += len(pls)

        self.student.train()
        self.opt.lr = self.plateau.lr
        self.opt.zero_grad()
        with GradTape(seed=stream_key(cfg.seed, e, f"step{k}")) as tape:
            p = self.student(x.astype(dt))
            sup = supervised_loss(p[:n_l], yl.astype(dt), self.weights)
            if self.uses_unlabeled:
                p_s = p[n_l:]
                unsup = unsup_loss(p_s, target, weight, weak_pred, self.weights.lambda_u,
                                   self.weights.lambda_c)
                if cfg.add_consistency:
                    unsup = unsup + consistency_loss(target, p_s) * self.weights.lambda_c
                ent = entropy_loss(p_s)
            else:
                unsup = ent = Tensor(np.zeros((), dt))
            loss = total_loss(sup, unsup, ent, self.weights, beta=beta)
            tape.backward(loss)
        self.opt.step()
        self._assert_teachers_grad_free()
        if cfg.ema_cadence == "step":
            ema_update(self.shadow, self.student, cfg.ema_alpha)
        self.acc["l_sup"] += sup.item()
        self.acc["l_unsup"] += unsup.item()
        self.acc["l_ent"] += ent.item()
        self.acc["steps"] += 1
        self.step_in_epoch += 1
        if self.step_in_epoch == len(lab_plan):
            self._end_epoch(beta)

    def _assert_teachers_grad_free(self) -> None:
        for net in (self.shadow, self.teacher):
            if net is not None:
                assert all(p.grad is None for p in net.parameters()), "teacher received a gradient"

    def _end_epoch(self, beta: float) -> None:
        cfg = self.cfg
        if cfg.ema_cadence == "epoch":
            ema_update(self.shadow, self.student, cfg.ema_alpha)
        val_dsc = val_iou = float("nan")
        if self.split.val:
            _, mean = evaluate_set(predictor(self.student), self.split.val)
            val_dsc, val_iou = mean["dsc"], mean["iou"]
        a = self.acc
        row = {"epoch": self.epoch, "l_sup": a["l_sup"] / a["steps"],
               "l_unsup": a["l_unsup"] / a["steps"], "l_ent": a["l_ent"] / a["steps"],
               "beta": beta, "lr": self.plateau.lr,
               "retained_frac": a["retained"] / a["maps"] if a["maps"] else 0.0,
               "val_dsc": val_dsc, "val_iou": val_iou}
        self.history.append(row)
        self.plateau.update(val_dsc if self.split.val else None)
        logger.info("epoch %d sup %.4f unsup %.4f ent %.4f beta %.3f retained %.3f val_dsc %.4f",
                    row["epoch"], row["l_sup"], row["l_unsup"], row["l_ent"], beta,
                    row["retained_frac"], val_dsc)
        self.epoch += 1
        self.step_in_epoch = 0
        self.acc = self._fresh_acc()

    # -- driving ------------------------------------------------------------------
    def fit(self, epochs: Optional[int] = None, on_epoch: Optional[Callable] = None) -> list[dict]:
        target = self.cfg.epochs if epochs is None else epochs
        with precision(self.cfg.np_dtype):
            while self.epoch < target:
                start = self.epoch
                self.train_step()
                if self.epoch != start and on_epoch is not None:
                    on_epoch(self, self.history[-1])
        return self.history

    def run_steps(self, n: int) -> None:
        with precision(self.cfg.np_dtype):
            for _ in range(n):
                self.train_step()

    # -- persistence --------------------------------------------------------------
    def checkpoint(self) -> ckpt_io.Checkpoint:
        arrays = ckpt_io.prefixed("student.", self.student.state_dict())
        arrays.update(ckpt_io.prefixed("shadow.", self.shadow.state_dict()))
        if self.teacher is not None:
            arrays.update(ckpt_io.prefixed("teacher.", self.teacher.state_dict()))
        arrays.update(ckpt_io.prefixed("opt.", self.opt.state_arrays()))
        meta = {"kind": "ssl", "step_in_epoch": self.step_in_epoch, "acc": self.acc,
                "history": self.history, "plateau": self.plateau.state(), "opt_t": self.opt.t,
                "config": self.cfg.to_dict(), "student": {"base": self.student.cfg.base,
                                                          "cnn_only": self.student.cfg.cnn_only},
                "rng": "derived from seed, epoch, step and sample id"}
        return ckpt_io.Checkpoint(arrays, self.cfg.hash(), self.epoch, meta)

    def restore(self, ck: ckpt_io.Checkpoint, override: bool = False) -> None:
        _check_hash(ck.config_hash, self.cfg, override)
        self.student.load_state_dict(ckpt_io.strip("student.", ck.arrays))
        self.shadow.load_state_dict(ckpt_io.strip("shadow.", ck.arrays))
        if self.teacher is not None:
            self.teacher.load_state_dict(ckpt_io.strip("teacher.", ck.arrays))
        self.opt.load_state_arrays(ckpt_io.strip("opt.", ck.arrays), ck.meta["opt_t"])
        self.plateau.load(ck.meta["plateau"])
        self.history = [dict(r) for r in ck.meta["history"]]
        self.acc = dict(ck.meta["acc"])
        self.epoch, self.step_in_epoch = ck.epoch, ck.meta["step_in_epoch"]

    def save(self, path) -> None:
        ckpt_io.save(path, self.checkpoint())


def build_models(cfg: TrainConfig) -> tuple[StudentNet, TeacherNet]:
    with precision(cfg.np_dtype):
        return StudentNet(cfg.student_config(), cfg.seed), TeacherNet(cfg.teacher_config(), cfg.seed)


def train_ssl(teacher: Optional[TeacherNet], student: StudentNet, split: DataSplit,
              cfg: TrainConfig, on_epoch: Optional[Callable] = None):
    """Phase 2; returns (teacher, student, EMA shadow, history)."""
    trainer = SSLTrainer(cfg, split, student, teacher)
    history = trainer.fit(on_epoch=on_epoch)
    return teacher, student, trainer.shadow, history
