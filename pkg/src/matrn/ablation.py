"""Desk-scale ablation grids: FE variants, semantic spatial encoding, masking targets.

Every (cell, seed) pair trains an independent model on the same dataset and
writes its own result file once; re-running skips finished pairs. Cells that
describe the same configuration across grids are trained only once.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import statistics
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

from .config import TrainConfig
from .data import Dataset

log = logging.getLogger(__name__)

# (grid, label) -> overrides applied on top of the base config
GRIDS: dict[str, list[tuple[str, dict]]] = {
    "fe": [
        ("none", dict(fe_variant="none", ses_mode="none", mask_mode="none")),
        ("semantic", dict(fe_variant="semantic", ses_mode="ses", mask_mode="none")),
        ("visual", dict(fe_variant="visual", ses_mode="ses", mask_mode="none")),
        ("multimodal", dict(fe_variant="multimodal", ses_mode="ses", mask_mode="none")),
    ],
    "ses": [
        ("none", dict(fe_variant="multimodal", ses_mode="none", mask_mode="none")),
        ("sequential_pe", dict(fe_variant="multimodal", ses_mode="sequential_pe", mask_mode="none")),
        ("ses", dict(fe_variant="multimodal", ses_mode="ses", mask_mode="none")),
    ],
    "mask": [
        ("none", dict(fe_variant="multimodal", ses_mode="ses", mask_mode="none")),
        ("semantic", dict(fe_variant="multimodal", ses_mode="ses", mask_mode="semantic")),
        ("visual_random", dict(fe_variant="multimodal", ses_mode="ses", mask_mode="visual_random")),
        ("visual_clue", dict(fe_variant="multimodal", ses_mode="ses", mask_mode="visual_clue")),
    ],
}
DEFAULT_SEEDS = (0, 1, 2)


@dataclass
class CellResult:
    grid: str
    label: str
    accuracies: list[float]

    @property
    def mean(self) -> float:
        return statistics.fmean(self.accuracies)

    @property
    def std(self) -> float:
        return statistics.pstdev(self.accuracies) if len(self.accuracies) > 1 else 0.0


def cell_key(overrides: dict) -> str:
    return "fe-{fe_variant}_ses-{ses_mode}_mask-{mask_mode}".format(**overrides)


def dataset_fingerprint(dataset: Dataset) -> str:
    h = hashlib.sha256(dataset.images.tobytes())
    h.update("\n".join(dataset.labels).encode())
    h.update(dataset.val_idx.tobytes())
    return h.hexdigest()[:16]


def _cached(path: Path, cfg_dict: dict, epochs: int, fingerprint: str) -> float | None:
    """Accuracy stored in ``path`` if it was produced by exactly this run, else None."""
    try:
        record = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError):
        return None
    if record.get("config") != cfg_dict or record.get("epochs") != epochs \
            or record.get("dataset") != fingerprint:
        log.warning("ignoring stale ablation result %s", path)
        return None
    return record["val_word_accuracy"]


def _cell_config(base_dict: dict, overrides: dict, seed: int) -> TrainConfig:
    return TrainConfig.from_dict({**base_dict, **overrides, "seed": seed,
                                  "backbone_widths": tuple(base_dict["backbone_widths"])})


def _run_one(args) -> float:
    base_dict, overrides, seed, dataset, epochs, out_file, fingerprint = args
    from .model import MATRN
    from .training import fit

    cfg = _cell_config(base_dict, overrides, seed)
    model = MATRN(cfg)
    history = fit(model, dataset, epochs=epochs)
    acc = [r for r in history if r.split == "val"][-1].word_accuracy
    record = {"config": cfg.to_dict(), "seed": seed, "epochs": epochs, "dataset": fingerprint,
              "val_word_accuracy": acc,
              "history": [json.loads(r.to_json()) for r in history]}
    tmp = Path(str(out_file) + ".tmp")
    tmp.write_text(json.dumps(record, sort_keys=True))
    tmp.replace(out_file)
    return acc


def run_ablation(base: TrainConfig, dataset: Dataset, grids=("fe", "mask"), seeds=DEFAULT_SEEDS,
                 epochs: int | None = None, out_dir: str | Path | None = None,
                 jobs: int = 1, cells: dict[str, list[str]] | None = None) -> list[CellResult]:
    """Train every cell of the requested grids for each seed; return mean/std per cell.

    ``cells`` optionally restricts a grid to some of its labels, e.g.
    ``{"mask": ["none", "visual_clue"]}``.
    """
    epochs = base.epochs if epochs is None else epochs
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    base_dict = base.to_dict()
    fingerprint = dataset_fingerprint(dataset)
    selected: dict[str, list[tuple[str, dict]]] = {}
    for g in grids:
        if g not in GRIDS:
            raise KeyError(f"unknown ablation grid {g!r}; choose from {sorted(GRIDS)}")
        wanted = (cells or {}).get(g)
        selected[g] = [(label, ov) for label, ov in GRIDS[g] if wanted is None or label in wanted]
        if wanted is not None and len(selected[g]) != len(set(wanted)):
            raise KeyError(f"unknown cell in {wanted} for grid {g!r}")
    unique: dict[tuple[str, int], dict] = {}
    for g in grids:
        for _, ov in selected[g]:
            for s in seeds:
                unique[(cell_key(ov), s)] = ov

    results: dict[tuple[str, int], float] = {}
    todo = []
    for (key, seed), ov in unique.items():
        path = out / f"{key}_seed{seed}.json" if out is not None else None
        if path is not None and path.exists():
            acc = _cached(path, _cell_config(base_dict, ov, seed).to_dict(), epochs, fingerprint)
            if acc is not None:
                results[(key, seed)] = acc
                continue
        todo.append(((key, seed), (base_dict, ov, seed, dataset, epochs, path or _devnull_path(), fingerprint)))

    if jobs > 1 and len(todo) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            for (ident, _), acc in zip(todo, pool.map(_run_one, [a for _, a in todo])):
                results[ident] = acc
    else:
        for ident, args in todo:
            results[ident] = _run_one(args)
            log.info("ablation %s seed %d: %.4f", ident[0], ident[1], results[ident])

    report = []
    for g in grids:
        for label, ov in selected[g]:
            report.append(CellResult(g, label, [results[(cell_key(ov), s)] for s in seeds]))
    return report


def _devnull_path() -> Path:
    import os
    import tempfile

    fd, name = tempfile.mkstemp(suffix=".json")
    os.close(fd)
    return Path(name)


def format_table(report: list[CellResult]) -> str:
    lines = [f"{'grid':<6} {'cell':<14} {'mean acc':>9} {'std':>7}  per-seed"]
    for r in report:
        seeds = " ".join(f"{a * 100:6.2f}" for a in r.accuracies)
        lines.append(f"{r.grid:<6} {r.label:<14} {r.mean * 100:8.2f}% {r.std * 100:6.2f}  {seeds}")
    return "\n".join(lines)


def format_csv(report: list[CellResult]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    n = max(len(r.accuracies) for r in report) if report else 0
    w.writerow(["grid", "cell", "mean", "std"] + [f"seed_{i}" for i in range(n)])
    for r in report:
        w.writerow([r.grid, r.label, f"{r.mean:.6f}", f"{r.std:.6f}"] + [f"{a:.6f}" for a in r.accuracies])
    return buf.getvalue()


def lookup(report: list[CellResult], grid: str, label: str) -> CellResult:
    for r in report:
        if r.grid == grid and r.label == label:
            return r
    raise KeyError((grid, label))
