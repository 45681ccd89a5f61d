"""Command-line entry point: ``mirau {synth,pretrain,train,pseudolabel,eval}``.

Configuration comes from a flat ``key = value`` file (``#`` starts a comment)
given with ``--config``; command-line flags override file values. Errors end
the process with one line on stderr of the form
``mirau: error: code=<n> kind=<kind> message=<text>`` and exit code 2 (usage),
3 (data) or 4 (numeric failure). Set ``MIRAU_LOG`` (e.g. ``INFO``) for
progress logging.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__
from .datasets import export_directory, generate_synthetic, load_directory
from .errors import CheckpointError, ConfigError, DataError
from .metrics import evaluate_set, export_masks, write_report
from .models import StudentNet, TeacherNet
from .ndgrad import DimensionError, NonFiniteError, precision
from .trainer import (
    ABLATIONS,
    MimPretrainer,
    SSLTrainer,
    TrainConfig,
    build_models,
    load_checkpoint,
    predictor,
    prepare_split,
    save_checkpoint,
    write_csv,
)
from .trainer import checkpoint as ckpt_io
from .trainer.config import coerce
from .trainer.loop import HISTORY_FIELDS, MIM_FIELDS
from .uncertainty import (
    OracleTeacher,
    PseudoConfig,
    export_pseudo_labels,
    generate_pseudo_labels,
    mask_lookup,
    stream_key,
)

logger = logging.getLogger("mirau")

EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 2, 3, 4
RUN_KEYS = ("data", "out")      # file keys besides the TrainConfig fields
CONFIG_FIELDS = {f.name: f for f in fields(TrainConfig)}


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config files ----------------------------------------------------------------

def read_config_file(path) -> dict:
    """Parse ``key = value`` lines; ``#`` comments and blank lines are ignored."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror}") from None
    out = {}
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{n}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in CONFIG_FIELDS and key not in RUN_KEYS:
            raise ConfigError(f"{path}:{n}: unknown config key {key!r}")
        out[key] = value
    return out


def write_config_file(cfg: TrainConfig, path, extra: Optional[dict] = None) -> None:
    lines = ["# resolved run configuration"]
    for k, v in {**(extra or {}), **cfg.to_dict()}.items():
        lines.append(f"{k} = {str(v).lower() if isinstance(v, bool) else v}")
    Path(path).write_text("\n".join(lines) + "\n")


def resolve(args, exclude: Sequence[str] = ()) -> tuple[TrainConfig, dict]:
    """Defaults < config file < flags. Returns the config and the run keys."""
    values = read_config_file(args.config) if args.config else {}
    bad = sorted(set(values) & set(exclude))
    if bad:
        raise ConfigError(f"{', '.join(bad)} is not accepted by this command")
    run = {k: values.pop(k) for k in RUN_KEYS if k in values}
    for name in CONFIG_FIELDS:
        v = getattr(args, name, None)
        if v is not None:
            values[name] = v
    for flag in getattr(args, "ablate", None) or ():
        values[flag] = True
    for k in RUN_KEYS:
        if getattr(args, k, None) is not None:
            run[k] = getattr(args, k)
    typed = {k: coerce(CONFIG_FIELDS[k].type, k, v) for k, v in values.items()}
    return TrainConfig.from_dict(typed), run


def add_config_flags(p: argparse.ArgumentParser, exclude: Sequence[str] = ()) -> None:
    g = p.add_argument_group("training configuration (override --config values)")
    defaults = TrainConfig()
    for name, f in CONFIG_FIELDS.items():
        if name in exclude:
            continue
        default = getattr(defaults, name)
        t = f.type if isinstance(f.type, str) else f.type.__name__
        flag = "--" + name.replace("_", "-")
        if t == "bool":
            g.add_argument(flag, dest=name, nargs="?", const="true", default=None, metavar="BOOL",
                           help=f"(default: {str(default).lower()})")
        else:
            g.add_argument(flag, dest=name, default=None, metavar=t.upper(),
                           help=f"(default: {default})")


# -- data --------------------------------------------------------------------------

def load_data(source, size: int):
    """A directory in the images/ masks/ layout, or ``synthetic:COUNT[:SEED]``."""
    if source is None:
        raise ConfigError("no dataset given (use --data or 'data = ...' in the config file)")
    source = str(source)
    if source.startswith("synthetic:"):
        parts = source.split(":")[1:]
        try:
            count = int(parts[0])
            seed = int(parts[1]) if len(parts) > 1 else 0
        except (IndexError, ValueError):
            raise ConfigError(f"bad synthetic source {source!r} (expected synthetic:COUNT[:SEED])") from None
        if count < 1:
            raise ConfigError("synthetic count must be >= 1")
        return generate_synthetic(count, size, seed)
    samples = load_directory(source, size)
    if not samples:
        raise DataError(f"{source}: no usable samples")
    return samples


def out_dir(run: dict) -> Path:
    if not run.get("out"):
        raise ConfigError("no output directory given (use --out or 'out = ...' in the config file)")
    path = Path(run["out"])
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(path, os.W_OK):
        raise DataError(f"output directory {path} is not writable")
    return path


def config_of(ck) -> TrainConfig:
    try:
        return TrainConfig.from_dict(ck.meta["config"])
    except KeyError:
        raise CheckpointError("checkpoint carries no training configuration") from None


def teacher_from(ck, cfg: TrainConfig) -> TeacherNet:
    with precision(cfg.np_dtype):
        teacher = TeacherNet(cfg.teacher_config(), cfg.seed)
    teacher.load_state_dict(ckpt_io.strip("teacher.", ck.arrays))
    return teacher


def student_from(ck, cfg: TrainConfig, which: str = "student") -> StudentNet:
    with precision(cfg.np_dtype):
        net = StudentNet(cfg.student_config(), cfg.seed)
    arrays = ckpt_io.strip(which + ".", ck.arrays)
    if not arrays:
        raise CheckpointError(f"checkpoint has no {which} parameters")
    net.load_state_dict(arrays)
    return net


# -- commands ------------------------------------------------------------------------

def cmd_synth(args) -> None:
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    samples = generate_synthetic(args.count, args.size, args.seed, args.irregularity)
    try:
        export_directory(samples, args.out)
    except OSError as exc:
        raise DataError(f"cannot write to {args.out}: {exc.strerror}") from None
    area = np.array([s.mask.mean() for s in samples])
    print(f"wrote {len(samples)} samples ({args.size}x{args.size}) to {args.out}; "
          f"lesion area fraction min {area.min():.3f} mean {area.mean():.3f} max {area.max():.3f}")


def cmd_pretrain(args) -> None:
    cfg, run = resolve(args, exclude=("no_mim",))
    out = out_dir(run)
    samples = load_data(run.get("data"), cfg.image_size)
    with precision(cfg.np_dtype):
        _, teacher = build_models(cfg)
        pre = MimPretrainer(teacher, [s.image for s in samples], cfg)
        if args.resume:
            pre.restore(load_checkpoint(args.resume), override=args.override)
        write_config_file(cfg, out / "config.txt", run)
        while pre.epoch < cfg.pretrain_epochs:
            pre.run_epoch()
            save_checkpoint(out / "teacher.ckpt", pre.checkpoint())
            write_csv(pre.history, out / "mim_loss.csv", MIM_FIELDS)
        if not pre.history:
            pre.history.append({"epoch": 0, "train_loss": float("nan"), "eval_loss": pre.eval_loss()})
        save_checkpoint(out / "teacher.ckpt", pre.checkpoint())
        write_csv(pre.history, out / "mim_loss.csv", MIM_FIELDS)
    first, last = pre.history[0]["eval_loss"], pre.history[-1]["eval_loss"]
    print(f"pretrained {pre.epoch} epochs on {len(samples)} images; "
          f"MIM loss {first:.4f} -> {last:.4f}; teacher checkpoint {out / 'teacher.ckpt'}")


def cmd_train(args) -> None:
    cfg, run = resolve(args)
    out = out_dir(run)
    samples = load_data(run.get("data"), cfg.image_size)
    split = prepare_split(samples, cfg)
    n_lab = len(split.labeled) + len(split.val)
    print(f"split: {n_lab}/{len(samples)} labeled (train {len(split.labeled)}, "
          f"val {len(split.val)}), {len(split.unlabeled)} unlabeled")
    (out / "split.json").write_text(json.dumps(
        {"labeled": list(split.plan.labeled_ids), "val": [s.id for s in split.val],
         "unlabeled": list(split.plan.unlabeled_ids)}, indent=1) + "\n")
    write_config_file(cfg, out / "config.txt", run)
    with precision(cfg.np_dtype):
        student, teacher = build_models(cfg)
        if cfg.supervised_only:
            teacher = None
        elif args.teacher_ckpt and not cfg.no_mim:
            teacher = teacher_from(load_checkpoint(args.teacher_ckpt), cfg)
        elif not cfg.no_mim:
            logger.info("no teacher checkpoint given; running MIM pretraining first")
            pre = MimPretrainer(teacher, [s.image for s in samples], cfg)
            pre.fit()
            write_csv(pre.history, out / "mim_loss.csv", MIM_FIELDS)
        trainer = SSLTrainer(cfg, split, student, teacher)
        if args.resume:
            trainer.restore(load_checkpoint(args.resume), override=args.override)

        def on_epoch(tr, row):
            tr.save(out / "checkpoint.ckpt")
            write_csv(tr.history, out / "history.csv", HISTORY_FIELDS)

        trainer.fit(on_epoch=on_epoch)
        trainer.save(out / "checkpoint.ckpt")
        write_csv(trainer.history, out / "history.csv", HISTORY_FIELDS)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.epoch} epochs; final val DSC {last.get('val_dsc', float('nan')):.4f}; "
          f"checkpoint {out / 'checkpoint.ckpt'}; history {out / 'history.csv'}")


def cmd_pseudolabel(args) -> None:
    pcfg = PseudoConfig(args.mc_passes, args.kappa, args.tau_u, args.mu_margin, args.literal_alg2,
                        filter=not args.no_filter)
    out = Path(args.out)
    if args.oracle:
        samples = load_data(args.data, args.size)
        if any(s.mask is None for s in samples):
            raise DataError("oracle mode needs masks for every image")
        model, dtype = OracleTeacher(mask_lookup([s.image for s in samples],
                                                 [s.mask for s in samples])), np.float32
    else:
        if not args.teacher_ckpt:
            raise UsageError("--teacher-ckpt is required unless --oracle is given")
        ck = load_checkpoint(args.teacher_ckpt)
        cfg = config_of(ck)
        dtype = cfg.np_dtype
        samples = load_data(args.data, cfg.image_size)
        kind = args.model or ("shadow" if any(k.startswith("shadow.") for k in ck.arrays) else "teacher")
        model = teacher_from(ck, cfg) if kind == "teacher" else student_from(ck, cfg, kind)
    views = [s.image.astype(dtype) for s in samples]
    keys = [stream_key(args.seed, 0, s.id) for s in samples]
    with precision(dtype):
        maps = generate_pseudo_labels(model, views, keys, pcfg)
    export_pseudo_labels(maps, [s.id for s in samples], out, pcfg)
    kept = float(np.mean([m.retained_fraction for m in maps]))
    print(f"wrote {len(maps)} pseudo-label maps to {out}; mean retained fraction {kept:.4f}")


def cmd_eval(args) -> None:
    ck = load_checkpoint(args.ckpt)
    cfg = config_of(ck)
    samples = load_data(args.data, cfg.image_size)
    if any(s.mask is None for s in samples):
        raise DataError(f"{args.data}: evaluation needs a mask for every image")
    net = student_from(ck, cfg, args.model)
    predict = predictor(net)
    with precision(cfg.np_dtype):
        rows, mean = evaluate_set(predict, samples, args.threshold)
        out = Path(args.out)
        write_report(rows, mean, out / "metrics.csv")
        if args.export_masks:
            probs = [predict(s.image[None].astype(cfg.np_dtype))[0] for s in samples]
            export_masks([s.id for s in samples], probs, out / "masks", args.threshold)
    print(f"evaluated {len(rows)} images: DSC {mean['dsc']:.4f} IoU {mean['iou']:.4f}; "
          f"report {out / 'metrics.csv'}")


# -- parser ------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    p = Parser(prog="mirau", description="Semi-supervised lesion segmentation toolkit.",
               formatter_class=fmt)
    p.add_argument("--version", action="version", version=f"mirau {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=Parser)

    s = sub.add_parser("synth", help="write a synthetic dataset", formatter_class=fmt)
    s.add_argument("--count", type=int, default=100, help="number of samples")
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--irregularity", type=float, default=0.5, help="boundary irregularity in [0,1]")
    s.add_argument("--out", required=True, help="output directory (images/, masks/)")
    s.set_defaults(func=cmd_synth)

    def common(q):
        q.add_argument("--config", help="flat key = value config file", default=None)
        q.add_argument("--data", default=None,
                       help="dataset directory or synthetic:COUNT[:SEED] (config key 'data')")
        q.add_argument("--out", default=None, help="output directory (config key 'out')")
        q.add_argument("--resume", default=None, help="checkpoint to resume from")
        q.add_argument("--override", action="store_true",
                       help="resume even if the checkpoint config hash differs")

    pt = sub.add_parser("pretrain", help="Phase 1: masked-image-modeling pretraining of the teacher",
                        formatter_class=fmt)
    common(pt)
    add_config_flags(pt, exclude=("no_mim",))
    pt.set_defaults(func=cmd_pretrain)

    tr = sub.add_parser("train", help="Phase 2: semi-supervised student training", formatter_class=fmt)
    common(tr)
    tr.add_argument("--teacher-ckpt", default=None,
                    help="pretrained teacher checkpoint (Phase 1 runs inline when omitted)")
    tr.add_argument("--ablate", action="append", choices=ABLATIONS, default=None,
                    help="ablation flag to switch on (repeatable)")
    add_config_flags(tr)
    tr.set_defaults(func=cmd_train)

    pl = sub.add_parser("pseudolabel", help="export uncertainty-filtered pseudo-labels",
                        formatter_class=fmt)
    pl.add_argument("--teacher-ckpt", default=None, help="teacher or training checkpoint")
    pl.add_argument("--model", choices=("teacher", "shadow", "student"), default=None,
                    help="network inside the checkpoint (default: shadow if present, else teacher)")
    pl.add_argument("--oracle", action="store_true",
                    help="use the ground-truth masks of --data as a zero-variance teacher")
    pl.add_argument("--data", required=True, help="dataset directory or synthetic:COUNT[:SEED]")
    pl.add_argument("--out", required=True, help="output directory")
    pl.add_argument("--size", type=int, default=64, help="image side for --oracle mode")
    pl.add_argument("--seed", type=int, default=0, help="seed of the MC dropout streams")
    d = PseudoConfig()
    pl.add_argument("--mc-passes", type=int, default=d.passes, help="MC dropout passes M (>= 2)")
    pl.add_argument("--kappa", type=float, default=d.kappa, help="uncertainty scale")
    pl.add_argument("--tau-u", type=float, default=d.tau_u, help="std threshold")
    pl.add_argument("--mu-margin", type=float, default=d.mu_margin, help="confidence margin around 0.5")
    pl.add_argument("--literal-alg2", action="store_true", help="target = weight * mean")
    pl.add_argument("--no-filter", action="store_true", help="weight 1 on every pixel")
    pl.set_defaults(func=cmd_pseudolabel)

    ev = sub.add_parser("eval", help="evaluate a training checkpoint", formatter_class=fmt)
    ev.add_argument("--ckpt", required=True, help="training checkpoint")
    ev.add_argument("--data", required=True, help="dataset directory or synthetic:COUNT[:SEED]")
    ev.add_argument("--out", required=True, help="output directory")
    ev.add_argument("--model", choices=("student", "shadow"), default="student",
                    help="network inside the checkpoint")
    ev.add_argument("--threshold", type=float, default=0.5, help="probability threshold")
    ev.add_argument("--export-masks", action="store_true", help="write one predicted PNG per id")
    ev.set_defaults(func=cmd_eval)
    return p


def fail(code: int, kind: str, message: str) -> int:
    text = " ".join(str(message).split())
    print(f"mirau: error: code={code} kind={kind} message={text}", file=sys.stderr)
    return code


def main(argv: Optional[Sequence[str]] = None) -> int:
    logging.basicConfig(level=os.environ.get("MIRAU_LOG", "WARNING").upper(),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except SystemExit as exc:      # --help / --version
        return int(exc.code or 0)
    except (UsageError, ConfigError, DimensionError) as exc:
        return fail(EXIT_USAGE, "usage", exc)
    except (DataError, CheckpointError, FileNotFoundError, OSError) as exc:
        return fail(EXIT_DATA, "data", exc)
    except NonFiniteError as exc:
        return fail(EXIT_NUMERIC, "numeric", exc)
    return 0


if __name__ == "__main__":
    sys.exit(main())
