import re
import subprocess
import sys

import numpy as np
import pytest

from pmoe.archive import load_archive
from pmoe.harness.cli import main
from pmoe.harness.data import load_task, write_idx

SMALL = """\
image_h = 16
image_w = 16
embed_dim = 16
num_layers = 2
num_prompts = 2
epochs = 2
batch_size = 8
learning_rate = 0.01
samples_per_class = 4
test_per_class = 2
"""


@pytest.fixture
def cfg(tmp_path):
    p = tmp_path / "exp.cfg"
    p.write_text(SMALL)
    return p


def run(*argv):
    return main([str(a) for a in argv])


def test_missing_config_exits_1(tmp_path, capsys):
    assert run("train", "--config", tmp_path / "nope.cfg", "--out", tmp_path / "o") == 1
    assert "config file not found" in capsys.readouterr().err


def test_usage_errors_exit_1(capsys):
    assert run() == 1
    assert run("train") == 1
    assert run("frobnicate") == 1


def test_unknown_key_exits_1(tmp_path, capsys):
    p = tmp_path / "bad.cfg"
    p.write_text("num_prompts = 2\nwidth = 9\n")
    assert run("gen-data", "--config", p, "--out", tmp_path / "d") == 1
    assert "unknown config key: width" in capsys.readouterr().err


def test_gen_train_eval_trace(tmp_path, cfg, capsys):
    data = tmp_path / "task.pmwa"
    assert run("gen-data", "--config", cfg, "--out", data) == 0
    task = load_task(data)
    assert len(task.train) == 16 and len(task.test) == 8

    with open(cfg, "a") as fh:
        fh.write(f"data = {data.name}\n")
    out = tmp_path / "run"
    assert run("train", "--config", cfg, "--out", out) == 0
    lines = (out / "metrics.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,train_acc,eval_acc" and len(lines) == 2 + 2
    assert "config" in load_archive(out / "model.pmwa")

    capsys.readouterr()
    assert run("eval", "--checkpoint", out / "model.pmwa", "--data", data, "--split", "train") == 0
    acc = float(re.search(r"accuracy ([0-9.]+)", capsys.readouterr().out).group(1))
    assert 0 <= acc <= 1

    csv = tmp_path / "trace.csv"
    assert run("trace", "--checkpoint", out / "model.pmwa", "--data", data, "--limit", 3, "--out", csv) == 0
    rows = csv.read_text().splitlines()
    assert rows[0] == "layer,expert,token,argmax,w0,w1"
    assert len(rows) - 1 == 3 * 2 * 2 * 2  # forwards x layers x K x N_p


def test_train_is_reproducible(tmp_path, cfg):
    for name in ("a", "b"):
        assert run("train", "--config", cfg, "--out", tmp_path / name) == 0
    assert (tmp_path / "a" / "metrics.csv").read_bytes() == (tmp_path / "b" / "metrics.csv").read_bytes()
    assert (tmp_path / "a" / "model.pmwa").read_bytes() == (tmp_path / "b" / "model.pmwa").read_bytes()


def test_env_seed_changes_run(tmp_path, cfg, monkeypatch):
    assert run("train", "--config", cfg, "--out", tmp_path / "a") == 0
    monkeypatch.setenv("PMOE_SEED", "5")
    assert run("train", "--config", cfg, "--out", tmp_path / "b") == 0
    assert (tmp_path / "a" / "model.pmwa").read_bytes() != (tmp_path / "b" / "model.pmwa").read_bytes()


def test_bad_data_exits_2(tmp_path, cfg):
    (tmp_path / "junk.pmwa").write_bytes(b"JUNKJUNKJUNK")
    with open(cfg, "a") as fh:
        fh.write("data = junk.pmwa\n")
    assert run("train", "--config", cfg, "--out", tmp_path / "o") == 2


def test_idx_training_and_eval(tmp_path):
    rng = np.random.default_rng(0)
    imgs = rng.integers(0, 256, (8, 16, 16)).astype(np.uint8)
    write_idx(tmp_path / "ti", tmp_path / "tl", imgs, np.arange(8) % 4)
    p = tmp_path / "idx.cfg"
    p.write_text(SMALL + "train_images = ti\ntrain_labels = tl\ntest_images = ti\ntest_labels = tl\n")
    assert run("train", "--config", p, "--out", tmp_path / "o") == 0
    assert run("eval", "--checkpoint", tmp_path / "o" / "model.pmwa", "--images", tmp_path / "ti", "--labels", tmp_path / "tl") == 0
    (tmp_path / "empty").write_bytes(b"")
    assert run("eval", "--checkpoint", tmp_path / "o" / "model.pmwa", "--images", tmp_path / "empty", "--labels", tmp_path / "tl") == 2


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_exits_3(tmp_path, cfg):
    p = tmp_path / "hot.cfg"
    p.write_text(SMALL.replace("learning_rate = 0.01", "learning_rate = 1e300"))
    assert run("train", "--config", p, "--out", tmp_path / "o") == 3


def test_grad_check_small_config(tmp_path, capsys):
    p = tmp_path / "g.cfg"
    p.write_text("image_h = 8\nimage_w = 8\nembed_dim = 8\nnum_layers = 2\nnum_prompts = 2\nnum_classes = 3\n")
    assert run("grad-check", "--config", p) == 0
    err = float(re.search(r"max relative error ([0-9.e+-]+)", capsys.readouterr().out).group(1))
    assert err < 1e-4


def test_module_entry_point():
    proc = subprocess.run([sys.executable, "-m", "pmoe", "--help"], capture_output=True, text=True)
    assert proc.returncode == 0 and "grad-check" in proc.stdout
