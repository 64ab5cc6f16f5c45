import os
import subprocess
import sys

import numpy as np
import pytest

from cresunet.cli import (
    EXIT_CHECKPOINT,
    EXIT_CONFIG,
    EXIT_DATA,
    EXIT_GRADCHECK,
    EXIT_MISSING,
    EXIT_OK,
    EXIT_USAGE,
    main,
)
from cresunet.dataio import read_gray, synthetic_samples, write_busi_layout, write_png
from cresunet.model import ModelSpec, build, save

TINY_INI = """
[model]
encoder_filters = 4, 4, 8, 8, 16
bottleneck_filters = 16
decoder_filters = 4, 4, 4, 4, 8
[train]
epochs = 2
batch_size = 4
input_size = 32
denoise = false
val_fraction = 0.0
[data]
synthetic = 8
k = 2
"""


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("run")
    (root / "tiny.ini").write_text(TINY_INI)
    rc = main(["train", "--config", str(root / "tiny.ini"), "--fold", "0", "--out", str(root / "out")])
    assert rc == EXIT_OK
    return root


class TestTrainEval:
    def test_train_outputs(self, run_dir):
        out = run_dir / "out"
        for name in ("fold_plan.tsv", "config.ini", "fold0.crun", "fold0.manifest.json",
                     "fold0.history.csv", "fold0.history.png", "fold0.metrics.txt", "fold0.example.png"):
            assert (out / name).is_file(), name

    def test_eval_uses_manifest(self, run_dir, capsys):
        out = run_dir / "out"
        assert main(["eval", "--checkpoint", str(out / "fold0.crun"), "--fold", "0"]) == EXIT_OK
        assert "DSC" in capsys.readouterr().out
        assert (out / "eval_fold0.metrics.csv").is_file()
        assert (out / "eval_fold0.summary.png").is_file()

    def test_eval_refuses_leaked_fold(self, run_dir, capsys):
        out = run_dir / "out"
        # fold 1's test ids are fold 0's training ids
        ids = (out / "fold0.train_ids.txt").read_text().split()
        (out / "fold1.train_ids.txt").write_text("\n".join(ids))
        rc = main(["eval", "--checkpoint", str(out / "fold0.crun"), "--fold", "1"])
        assert rc == EXIT_DATA
        assert "appears in the training audit" in capsys.readouterr().err

    def test_eval_spec_mismatch(self, run_dir):
        out = run_dir / "out"
        rc = main(["eval", "--checkpoint", str(out / "fold0.crun"), "--fold", "0",
                   "--config", str(run_dir / "tiny.ini"), "--set", "model.bottleneck_filters=32"])
        assert rc == EXIT_CHECKPOINT

    def test_cv_subset(self, run_dir):
        rc = main(["cv", "--config", str(run_dir / "tiny.ini"), "--folds", "1", "--out", str(run_dir / "cv")])
        assert rc == EXIT_OK
        assert (run_dir / "cv" / "cv_summary.csv").is_file()


class TestPredict:
    def test_full_size_mask(self, tmp_path):
        ckpt = tmp_path / "m.crun"
        save(build(ModelSpec(), seed=0), ckpt)
        img = synthetic_samples(1, 256, seed=3)[0].image
        write_png(tmp_path / "in.png", img)
        rc = main(["predict", "--checkpoint", str(ckpt), "--image", str(tmp_path / "in.png"),
                   "--out", str(tmp_path / "mask.png"), "--prob", str(tmp_path / "prob.png")])
        assert rc == EXIT_OK
        mask = read_gray(tmp_path / "mask.png")
        assert mask.shape == (256, 256)
        assert set(np.unique(mask)) <= {0, 255}
        assert read_gray(tmp_path / "prob.png").shape == (256, 256)

    def test_other_sizes_resized_back(self, run_dir, tmp_path):
        write_png(tmp_path / "in.png", np.random.default_rng(0).random((45, 70)))
        rc = main(["predict", "--checkpoint", str(run_dir / "out" / "fold0.crun"), "--image", str(tmp_path / "in.png"),
                   "--out", str(tmp_path / "mask.png"), "--figure", str(tmp_path / "fig.png")])
        assert rc == EXIT_OK
        assert read_gray(tmp_path / "mask.png").shape == (45, 70)
        assert (tmp_path / "fig.png").is_file()


class TestSmallCommands:
    def test_split(self, tmp_path, capsys):
        write_busi_layout(tmp_path / "data", synthetic_samples(6, 16, classes=("benign", "malignant")))
        assert main(["split", "--data", str(tmp_path / "data"), "--k", "3", "--out", str(tmp_path / "plan.tsv")]) == EXIT_OK
        assert "6 records in 3 folds" in capsys.readouterr().out
        assert (tmp_path / "plan.tsv").read_text().startswith("# k=3")

    def test_split_empty_dataset(self, tmp_path):
        (tmp_path / "empty").mkdir()
        assert main(["split", "--data", str(tmp_path / "empty"), "--out", str(tmp_path / "p.tsv")]) == EXIT_DATA

    def test_denoise(self, tmp_path):
        write_png(tmp_path / "a.png", np.random.default_rng(1).random((24, 24)))
        assert main(["denoise", "--in", str(tmp_path / "a.png"), "--out", str(tmp_path / "b.png"),
                     "--patch", "3", "--window", "7"]) == EXIT_OK
        assert read_gray(tmp_path / "b.png").shape == (24, 24)
        assert main(["denoise", "--in", str(tmp_path / "a.png"), "--out", str(tmp_path / "b.png"),
                     "--patch", "4"]) == EXIT_USAGE

    def test_inspect_band(self, capsys):
        assert main(["inspect"]) == EXIT_OK
        out = capsys.readouterr().out
        assert "9,424,601" in out and "within band" in out

    def test_gradcheck_pass(self, capsys):
        assert main(["gradcheck", "--op", "relu,conv2d", "--cases", "2"]) == EXIT_OK
        assert capsys.readouterr().out.count("PASS") == 2

    def test_gradcheck_unknown_op(self):
        assert main(["gradcheck", "--op", "nope"]) == EXIT_USAGE


class TestExitCodes:
    def test_missing_checkpoint(self, tmp_path):
        rc = main(["predict", "--checkpoint", str(tmp_path / "x.crun"), "--image", "a.png", "--out", "b.png"])
        assert rc == EXIT_MISSING

    def test_bad_config_key(self, tmp_path):
        assert main(["inspect", "--set", "train.bogus=1"]) == EXIT_CONFIG

    def test_corrupt_checkpoint(self, tmp_path):
        (tmp_path / "x.crun").write_bytes(b"garbage")
        write_png(tmp_path / "a.png", np.zeros((8, 8)))
        rc = main(["predict", "--checkpoint", str(tmp_path / "x.crun"), "--image", str(tmp_path / "a.png"),
                   "--out", str(tmp_path / "b.png")])
        assert rc == EXIT_CHECKPOINT

    def test_usage_error(self):
        with pytest.raises(SystemExit) as e:
            main(["train"])
        assert e.value.code == EXIT_USAGE

    def test_fold_out_of_range(self, run_dir):
        rc = main(["train", "--config", str(run_dir / "tiny.ini"), "--fold", "5", "--out", str(run_dir / "bad")])
        assert rc == EXIT_USAGE


def test_broken_backward_detected_by_gradcheck_subprocess():
    env = dict(os.environ, CRESUNET_BREAK_OP="relu")
    proc = subprocess.run(
        [sys.executable, "-m", "cresunet.cli", "gradcheck", "--op", "relu", "--cases", "2"],
        env=env, capture_output=True, text=True, timeout=300,
    )
    assert proc.returncode == EXIT_GRADCHECK, proc.stdout + proc.stderr
    assert "FAIL" in proc.stdout
