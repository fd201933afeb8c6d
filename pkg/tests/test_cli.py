import json
import subprocess
import sys
from pathlib import Path

import pytest

from matrn.checkpoint import load_checkpoint
from matrn.cli import EXIT_CHECKPOINT, EXIT_CONFIG, EXIT_DATA, EXIT_USAGE, main

CONFIGS = Path(__file__).resolve().parent.parent / "configs"
SMALL_DATA = ["--words", "6", "--per-word", "3"]


def error_line(capsys):
    return json.loads(capsys.readouterr().err.strip().splitlines()[-1])


@pytest.fixture
def micro_cfg_file(tmp_path):
    p = tmp_path / "micro.cfg"
    p.write_text("[model]\nd_model = 8\nmax_len = 10\nheads = 2\nblocks = 1\nlm_blocks = 1\nffn = 16\n"
                 "stem_width = 4\nbackbone_widths = 4, 8, 8, 8\nunet_channels = 4\n"
                 "[train]\nbatch_size = 8\n")
    return p


def test_params_ratio(capsys):
    assert main(["params", "--config", str(CONFIGS / "paper.cfg")]) == 0
    full = json.loads(capsys.readouterr().out)["total"]
    assert main(["params", "--config", str(CONFIGS / "ablation-baseline.cfg")]) == 0
    base = json.loads(capsys.readouterr().out)["total"]
    assert full / base == pytest.approx(1.20, abs=0.05)


def test_train_zero_epochs_then_eval(tmp_path, capsys, micro_cfg_file):
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(micro_cfg_file), "--epochs", "0", "--out", str(ckpt)] + SMALL_DATA) == 0
    model, header, _ = load_checkpoint(ckpt)
    assert header["config"]["epochs"] == 0
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt), "--split", "all"] + SMALL_DATA) == 0
    rec = json.loads(capsys.readouterr().out)
    assert rec["split"] == "all" and 0.0 <= rec["word_accuracy"] <= 1.0


def test_train_and_resume(tmp_path, capsys, micro_cfg_file):
    ckpt, metrics = tmp_path / "m.ckpt", tmp_path / "m.jsonl"
    args = ["--metrics", str(metrics)] + SMALL_DATA
    assert main(["train", "--config", str(micro_cfg_file), "--epochs", "1", "--out", str(ckpt)] + args) == 0
    assert main(["train", "--resume", str(ckpt), "--epochs", "2", "--out", str(ckpt)] + args) == 0
    epochs = [json.loads(l)["epoch"] for l in metrics.read_text().splitlines()]
    assert epochs == [0, 0, 1, 1]
    _, header, optim = load_checkpoint(ckpt)
    assert header["extra"]["epoch"] == 2 and optim


def test_gen_data_and_train_from_dir(tmp_path, capsys, micro_cfg_file):
    out = tmp_path / "data"
    assert main(["gen-data", "--out", str(out), "--words", "4", "--per-word", "2"]) == 0
    assert json.loads(capsys.readouterr().out)["images"] == 8
    assert (out / "labels.tsv").exists()
    ckpt = tmp_path / "m.ckpt"
    assert main(["train", "--config", str(micro_cfg_file), "--epochs", "0", "--out", str(ckpt),
                 "--data", str(out)]) == 0


def test_dump_attn_header(tmp_path, capsys, micro_cfg_file):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--config", str(micro_cfg_file), "--epochs", "0", "--out", str(ckpt)] + SMALL_DATA)
    out = tmp_path / "attn.csv"
    assert main(["dump-attn", "--checkpoint", str(ckpt), "--split", "all", "--out", str(out)] + SMALL_DATA) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "pos,row,col,score"
    assert len(lines) == 1 + 10 * 4 * 16


def test_gradcheck_exit_zero(capsys):
    assert main(["gradcheck", "--precision", "f64", "--seeds", "1"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines and all(l.endswith("ok") for l in lines)


def test_unknown_flag(capsys):
    assert main(["train", "--bogus"]) == EXIT_USAGE
    err = error_line(capsys)
    assert err["exit_code"] == EXIT_USAGE and err["error"] == "usage"


def test_malformed_config(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("[model\nd_model = x\n")
    assert main(["params", "--config", str(bad)]) == EXIT_CONFIG
    assert error_line(capsys)["error"] == "config"


def test_corrupt_checkpoint(tmp_path, capsys, micro_cfg_file):
    ckpt = tmp_path / "m.ckpt"
    main(["train", "--config", str(micro_cfg_file), "--epochs", "0", "--out", str(ckpt)] + SMALL_DATA)
    blob = bytearray(ckpt.read_bytes())
    blob[-1] ^= 0x01
    ckpt.write_bytes(bytes(blob))
    capsys.readouterr()
    assert main(["eval", "--checkpoint", str(ckpt)] + SMALL_DATA) == EXIT_CHECKPOINT
    assert "checksum" in error_line(capsys)["message"]


def test_bad_dataset_dir(tmp_path, capsys, micro_cfg_file):
    assert main(["train", "--config", str(micro_cfg_file), "--epochs", "0", "--out", str(tmp_path / "m"),
                 "--data", str(tmp_path / "nothing")]) == EXIT_DATA


def test_exit_codes_distinct():
    assert len({EXIT_USAGE, EXIT_CONFIG, EXIT_CHECKPOINT, EXIT_DATA}) == 4


def test_bad_log_level(monkeypatch, capsys):
    monkeypatch.setenv("MATRN_LOG", "loud")
    assert main(["params"]) == EXIT_USAGE


def test_console_script_entry():
    out = subprocess.run([sys.executable, "-m", "matrn", "params"], capture_output=True, text=True)
    assert out.returncode == 0 and json.loads(out.stdout)["total"] == 504_879
