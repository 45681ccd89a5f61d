import csv
import json
import logging
from dataclasses import fields

import numpy as np
import pytest
from PIL import Image

from mirau.cli import config_of, main, student_from
from mirau.datasets import load_directory
from mirau.metrics import evaluate_set
from mirau.trainer import TrainConfig, load_checkpoint, predictor

TINY = """# tiny run
image_size = 16
student_base = 8
teacher_dim = 16   # small teacher
teacher_depth = 1
teacher_heads = 2
teacher_ffn = 32
mc_passes = 2
batch_size = 2
epochs = 2
pretrain_epochs = 2
warmup_epochs = 1
"""


@pytest.fixture
def conf(tmp_path):
    path = tmp_path / "run.cfg"
    path.write_text(TINY)
    return path


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def assert_error_line(err, code):
    lines = err.strip().splitlines()
    assert len(lines) == 1 and lines[0].startswith(f"mirau: error: code={code} kind=")


def test_help_documents_every_flag(capsys):
    code, out, _ = run(capsys, "train", "--help")
    assert code == 0
    for f in fields(TrainConfig):
        assert "--" + f.name.replace("_", "-") in out
    assert "(default: 0.001)" in out and "(default: 0.99)" in out
    for cmd in ("synth", "pretrain", "pseudolabel", "eval"):
        code, out, _ = run(capsys, cmd, "--help")
        assert code == 0 and "default" in out


def test_synth_is_deterministic_and_loads_back(tmp_path, capsys, caplog):
    for name in ("a", "b"):
        code, out, _ = run(capsys, "synth", "--count", 10, "--size", 64, "--seed", 1,
                           "--out", tmp_path / name)
        assert code == 0 and "area fraction" in out
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.png"))
    assert len(files) == 20
    for f in files:
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    with caplog.at_level(logging.WARNING):
        samples = load_directory(tmp_path / "a", 64)
    assert len(samples) == 10 and not caplog.records


def test_synth_count_zero_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "synth", "--count", 0, "--out", tmp_path / "x")
    assert code == 2
    assert_error_line(err, 2)


def test_unknown_config_key_rejected(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("epochs = 2\nlearning_rate = 0.1\n")
    code, _, err = run(capsys, "train", "--config", bad, "--data", "synthetic:4", "--out", tmp_path)
    assert code == 2 and "learning_rate" in err
    assert_error_line(err, 2)


def test_bad_flag_is_single_line_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "train", "--no-such-flag")
    assert code == 2
    assert_error_line(err, 2)


def test_pretrain_descends_and_resumes(tmp_path, conf, capsys):
    code, out, _ = run(capsys, "pretrain", "--config", conf, "--data", "synthetic:6",
                       "--out", tmp_path / "full")
    assert code == 0
    rows = list(csv.DictReader((tmp_path / "full" / "mim_loss.csv").open()))
    assert [r["epoch"] for r in rows] == ["0", "1", "2"]
    assert float(rows[-1]["eval_loss"]) < float(rows[0]["eval_loss"])

    assert run(capsys, "pretrain", "--config", conf, "--data", "synthetic:6",
               "--pretrain-epochs", 1, "--out", tmp_path / "half")[0] == 0
    assert run(capsys, "pretrain", "--config", conf, "--data", "synthetic:6", "--out",
               tmp_path / "resumed", "--resume", tmp_path / "half" / "teacher.ckpt",
               "--override")[0] == 0
    full = load_checkpoint(tmp_path / "full" / "teacher.ckpt")
    resumed = load_checkpoint(tmp_path / "resumed" / "teacher.ckpt")
    for k, v in full.arrays.items():
        assert np.array_equal(v, resumed.arrays[k]), k


def test_pretrain_rejects_no_mim(tmp_path, conf, capsys):
    code, _, err = run(capsys, "pretrain", "--config", conf, "--no-mim", "--data", "synthetic:4",
                       "--out", tmp_path)
    assert code == 2
    assert_error_line(err, 2)
    conf.write_text(TINY + "no_mim = true\n")
    assert run(capsys, "pretrain", "--config", conf, "--data", "synthetic:4", "--out", tmp_path)[0] == 2


def test_train_split_counts(tmp_path, conf, capsys):
    code, out, _ = run(capsys, "train", "--config", conf, "--data", "synthetic:450",
                       "--label-fraction", 0.5, "--supervised-only", "--epochs", 1,
                       "--batch-size", 32, "--out", tmp_path)
    assert code == 0
    assert "225/450 labeled" in out
    split = json.loads((tmp_path / "split.json").read_text())
    assert len(split["labeled"]) == len(split["unlabeled"]) == 225


def test_train_twice_identical_history(tmp_path, conf, capsys):
    for name in ("a", "b"):
        code, _, _ = run(capsys, "train", "--config", conf, "--data", "synthetic:8", "--ablate",
                         "no_entropy", "--out", tmp_path / name)
        assert code == 0
    a = (tmp_path / "a" / "history.csv").read_bytes()
    assert a == (tmp_path / "b" / "history.csv").read_bytes()
    assert a.startswith(b"epoch,l_sup,l_unsup,l_ent,beta,lr,retained_frac,val_dsc,val_iou\n")
    cfg = config_of(load_checkpoint(tmp_path / "a" / "checkpoint.ckpt"))
    assert cfg.no_entropy and cfg.loss_weights().gamma == 0.0


def test_train_with_teacher_checkpoint_and_resume(tmp_path, conf, capsys):
    assert run(capsys, "pretrain", "--config", conf, "--data", "synthetic:8",
               "--out", tmp_path / "pre")[0] == 0
    args = ["train", "--config", conf, "--data", "synthetic:8", "--teacher-ckpt",
            tmp_path / "pre" / "teacher.ckpt"]
    assert run(capsys, *args, "--out", tmp_path / "full")[0] == 0
    assert run(capsys, *args, "--epochs", 1, "--out", tmp_path / "one")[0] == 0
    assert run(capsys, *args, "--out", tmp_path / "two", "--resume",
               tmp_path / "one" / "checkpoint.ckpt", "--override")[0] == 0
    assert ((tmp_path / "full" / "history.csv").read_bytes()
            == (tmp_path / "two" / "history.csv").read_bytes())
    code, _, err = run(capsys, *args, "--lr", 0.01, "--out", tmp_path / "x", "--resume",
                       tmp_path / "one" / "checkpoint.ckpt")
    assert code == 3 and "hash" in err


def test_numeric_failure_exit_code(tmp_path, conf, capsys):
    code, _, err = run(capsys, "train", "--config", conf, "--data", "synthetic:8",
                       "--lr", 1e37, "--weight-decay", 0, "--out", tmp_path)
    assert code == 4
    assert_error_line(err, 4)


@pytest.fixture
def trained(tmp_path_factory):
    root = tmp_path_factory.mktemp("trained")
    (root / "run.cfg").write_text(TINY)
    assert main(["train", "--config", str(root / "run.cfg"), "--data", "synthetic:8",
                 "--no-mim", "--out", str(root)]) == 0
    assert main(["synth", "--count", "5", "--size", "16", "--seed", "9",
                 "--out", str(root / "test")]) == 0
    return root


def test_eval_matches_evaluate_set(trained, capsys):
    code, _, _ = run(capsys, "eval", "--ckpt", trained / "checkpoint.ckpt", "--data",
                     trained / "test", "--out", trained / "ev", "--export-masks")
    assert code == 0
    rows = list(csv.DictReader((trained / "ev" / "metrics.csv").open()))
    ck = load_checkpoint(trained / "checkpoint.ckpt")
    cfg = config_of(ck)
    samples = load_directory(trained / "test", 16)
    ref_rows, ref_mean = evaluate_set(predictor(student_from(ck, cfg)), samples)
    assert [r["id"] for r in rows[:-1]] == [r["id"] for r in ref_rows]
    assert float(rows[-1]["dsc"]) == ref_mean["dsc"]
    pngs = sorted(p.stem for p in (trained / "ev" / "masks").glob("*.png"))
    assert pngs == sorted(s.id for s in samples)


def test_eval_missing_masks_is_data_error(trained, capsys):
    for p in (trained / "test" / "masks").glob("*.png"):
        p.unlink()
    (trained / "test" / "masks").rmdir()
    code, _, err = run(capsys, "eval", "--ckpt", trained / "checkpoint.ckpt", "--data",
                       trained / "test", "--out", trained / "ev")
    assert code == 3 and "mask" in err
    assert_error_line(err, 3)


def test_pseudolabel_exports_and_sidecar(trained, capsys):
    code, _, _ = run(capsys, "pseudolabel", "--teacher-ckpt", trained / "checkpoint.ckpt",
                     "--data", trained / "test", "--out", trained / "pl", "--mc-passes", 3)
    assert code == 0
    sidecars = sorted((trained / "pl").glob("*.json"))
    assert len(sidecars) == 5
    meta = json.loads(sidecars[0].read_text())
    assert {"kappa", "tau_u", "M", "retained_fraction"} <= set(meta) and meta["M"] == 3


def test_pseudolabel_passes_below_two_rejected(trained, capsys):
    code, _, err = run(capsys, "pseudolabel", "--teacher-ckpt", trained / "checkpoint.ckpt",
                       "--data", trained / "test", "--out", trained / "pl", "--mc-passes", 1)
    assert code == 2
    assert_error_line(err, 2)


def test_pseudolabel_oracle_weights_are_one(trained, capsys):
    code, _, _ = run(capsys, "pseudolabel", "--oracle", "--size", 16, "--data", trained / "test",
                     "--out", trained / "oracle")
    assert code == 0
    for p in (trained / "oracle").glob("*_weight.png"):
        assert np.asarray(Image.open(p)).min() == 65535
