import json

import pytest

from matrn.ablation import GRIDS, CellResult, format_csv, format_table, lookup, run_ablation
from matrn.cli import EXIT_USAGE, main
from matrn.data import build_dataset, builtin_lexicon

from conftest import micro_config


@pytest.fixture(scope="module")
def tiny_data():
    return build_dataset(builtin_lexicon()[:4], per_word=3, seed=0, img_h=8, img_w=16, val_fraction=0.25)


def test_cell_stats():
    r = CellResult("fe", "none", [0.5, 0.7, 0.9])
    assert r.mean == pytest.approx(0.7) and r.std == pytest.approx(0.163299, abs=1e-6)
    assert CellResult("fe", "x", [0.4]).std == 0.0


def test_grids_cover_every_variant():
    assert [l for l, _ in GRIDS["fe"]] == ["none", "semantic", "visual", "multimodal"]
    assert [l for l, _ in GRIDS["ses"]] == ["none", "sequential_pe", "ses"]
    assert [l for l, _ in GRIDS["mask"]] == ["none", "semantic", "visual_random", "visual_clue"]


def test_run_writes_once_and_reuses(tmp_path, tiny_data):
    cfg = micro_config(epochs=1)
    cells = {"fe": ["none", "multimodal"], "mask": ["none"]}
    report = run_ablation(cfg, tiny_data, grids=("fe", "mask"), seeds=(0, 1), out_dir=tmp_path, cells=cells)
    files = sorted(p.name for p in tmp_path.glob("*.json"))
    # fe/multimodal and mask/none are the same configuration, trained once
    assert len(files) == 4
    record = json.loads((tmp_path / files[0]).read_text())
    assert record["epochs"] == 1 and len(record["history"]) == 2
    stamps = {p.name: p.stat().st_mtime_ns for p in tmp_path.glob("*.json")}
    again = run_ablation(cfg, tiny_data, grids=("fe", "mask"), seeds=(0, 1), out_dir=tmp_path, cells=cells)
    assert [r.accuracies for r in again] == [r.accuracies for r in report]
    assert stamps == {p.name: p.stat().st_mtime_ns for p in tmp_path.glob("*.json")}
    assert lookup(report, "mask", "none").accuracies == lookup(report, "fe", "multimodal").accuracies
    table, csv_text = format_table(report), format_csv(report)
    assert "multimodal" in table and csv_text.splitlines()[0] == "grid,cell,mean,std,seed_0,seed_1"


def test_stale_results_are_recomputed(tmp_path, tiny_data):
    cells = {"fe": ["none"]}
    run_ablation(micro_config(epochs=1), tiny_data, grids=("fe",), seeds=(0,), out_dir=tmp_path, cells=cells)
    run_ablation(micro_config(epochs=2), tiny_data, grids=("fe",), seeds=(0,), out_dir=tmp_path, cells=cells)
    (path,) = tmp_path.glob("*.json")
    assert json.loads(path.read_text())["epochs"] == 2


def test_unknown_grid_or_cell(tiny_data):
    with pytest.raises(KeyError):
        run_ablation(micro_config(epochs=1), tiny_data, grids=("nope",))
    with pytest.raises(KeyError):
        run_ablation(micro_config(epochs=1), tiny_data, grids=("fe",), cells={"fe": ["bogus"]})


def test_cli_ablate(tmp_path, capsys):
    cfg = tmp_path / "micro.cfg"
    cfg.write_text("[model]\nd_model = 8\nheads = 2\nblocks = 1\nlm_blocks = 1\nffn = 16\nstem_width = 4\n"
                   "backbone_widths = 4, 8, 8, 8\nunet_channels = 4\n[train]\nbatch_size = 8\n")
    out = tmp_path / "abl"
    args = ["ablate", "--config", str(cfg), "--out", str(out), "--grids", "fe", "--cells", "fe:none",
            "--seeds", "0", "--epochs", "1", "--words", "4", "--per-word", "3"]
    assert main(args) == 0
    assert (out / "report.txt").exists() and (out / "report.csv").read_text().startswith("grid,cell")
    assert main(args[:6] + ["--cells", "fe"] + args[8:]) == EXIT_USAGE
