"""Command-line entry point.

Subcommands: gen-data, train, eval, gradcheck, ablate, dump-attn, params.
Errors are reported as a single JSON line on stderr with a distinct exit code.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .errors import CheckpointError, ConfigError, IngestionError, MatrnError

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_USAGE = 2
EXIT_CONFIG = 3
EXIT_CHECKPOINT = 4
EXIT_DATA = 5
EXIT_CHECK_FAILED = 6

log = logging.getLogger("matrn")


class CliError(Exception):
    def __init__(self, code: int, kind: str, message: str):
        super().__init__(message)
        self.code, self.kind = code, kind


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliError(EXIT_USAGE, "usage", message)


def _setup_logging() -> None:
    level = os.environ.get("MATRN_LOG", "error").lower()
    levels = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}
    if level not in levels:
        raise CliError(EXIT_USAGE, "usage", f"MATRN_LOG must be one of {sorted(levels)}, got {level!r}")
    logging.basicConfig(level=levels[level], stream=sys.stderr, format="%(levelname)s %(name)s: %(message)s")


def _config(args):
    from .config import desk_config, load_config

    cfg = load_config(args.config) if getattr(args, "config", None) else desk_config()
    changes = {}
    if getattr(args, "seed", None) is not None:
        changes["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        changes["epochs"] = args.epochs
    return cfg.replace(**changes) if changes else cfg


def _dataset(args, cfg):
    from .data import build_dataset, builtin_lexicon, load_dataset

    if args.data:
        return load_dataset(args.data, img_h=cfg.img_h, img_w=cfg.img_w, channels=cfg.channels,
                            seed=cfg.seed, max_len=cfg.max_len)
    words = builtin_lexicon()[:args.words]
    return build_dataset(words, per_word=args.per_word, seed=cfg.seed, img_h=cfg.img_h, img_w=cfg.img_w,
                         channels=cfg.channels, max_len=cfg.max_len)


def _add_data_args(p) -> None:
    p.add_argument("--data", help="dataset directory written by gen-data (default: generate in memory)")
    p.add_argument("--words", type=int, default=200, help="lexicon size when generating in memory")
    p.add_argument("--per-word", type=int, default=10, help="images per word when generating in memory")


# -- commands ----------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    from .data import build_dataset, builtin_lexicon, save_dataset

    if args.lexicon:
        try:
            words = [w.strip().lower() for w in Path(args.lexicon).read_text().split() if w.strip()]
        except OSError as exc:
            raise IngestionError(f"{args.lexicon}: {exc}") from exc
    else:
        words = builtin_lexicon()
    words = words[:args.words]
    ds = build_dataset(words, per_word=args.per_word, seed=args.seed, img_h=args.img_h, img_w=args.img_w,
                       channels=args.channels, augment_strength=args.augment)
    save_dataset(ds, args.out)
    print(json.dumps({"images": len(ds), "words": len(words), "out": str(args.out)}))
    return EXIT_OK


def cmd_train(args) -> int:
    from .checkpoint import load_checkpoint, save_checkpoint
    from .model import MATRN
    from .training import fit, jsonl_writer, new_train_state, restore_train_state

    if args.resume:
        model, header, optim_state = load_checkpoint(args.resume)
        cfg = model.cfg
        if args.epochs is not None:
            cfg.epochs = args.epochs
        state = restore_train_state(model, header.get("extra", {}), optim_state)
    else:
        cfg = _config(args)
        model = MATRN(cfg)
        state = new_train_state(model)
    dataset = _dataset(args, cfg)
    out = Path(args.out)

    def checkpoint(st):
        save_checkpoint(out, model, extra=st.extra(model), optimizer=st.optimizer)

    stream = open(args.metrics, "a") if args.metrics else sys.stdout
    try:
        fit(model, dataset, epochs=cfg.epochs, on_record=jsonl_writer(stream), state=state,
            on_epoch_end=checkpoint)
    finally:
        if args.metrics:
            stream.close()
    checkpoint(state)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .checkpoint import load_checkpoint
    from .training import evaluate

    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    if args.seed is not None:
        cfg.seed = args.seed
    images, labels = _dataset(args, cfg).split(args.split)
    rec = evaluate(model, images, labels, split=args.split)
    print(rec.to_json())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    report = run_suite(args.precision, seeds=range(args.seed, args.seed + args.seeds))
    for line in report.lines():
        print(line)
    return EXIT_OK if report.passed else EXIT_CHECK_FAILED


def cmd_ablate(args) -> int:
    from .ablation import format_csv, format_table, run_ablation

    cfg = _config(args)
    dataset = _dataset(args, cfg)
    seeds = [int(s) for s in args.seeds.split(",")]
    cells = {}
    for spec in args.cells or []:
        grid, sep, labels = spec.partition(":")
        if not sep or not labels:
            raise CliError(EXIT_USAGE, "usage", f"--cells expects grid:label,label, got {spec!r}")
        cells[grid] = labels.split(",")
    try:
        report = run_ablation(cfg, dataset, grids=args.grids.split(","), seeds=seeds, epochs=cfg.epochs,
                              out_dir=args.out, jobs=args.jobs, cells=cells or None)
    except KeyError as exc:
        raise CliError(EXIT_USAGE, "usage", str(exc.args[0])) from None
    table = format_table(report)
    out = Path(args.out)
    (out / "report.txt").write_text(table + "\n")
    (out / "report.csv").write_text(format_csv(report))
    print(table)
    return EXIT_OK


def cmd_dump_attn(args) -> int:
    from .checkpoint import load_checkpoint
    from .tensor import no_grad

    model, _, _ = load_checkpoint(args.checkpoint)
    cfg = model.cfg
    images, labels = _dataset(args, cfg).split(args.split)
    if not 0 <= args.index < len(labels):
        raise CliError(EXIT_USAGE, "usage", f"--index {args.index} outside [0, {len(labels)})")
    model.eval()
    with no_grad():
        res = model(images[args.index:args.index + 1])
    attn = res.attn.data[0]                     # T x (h*w)
    w = cfg.feat_w
    writer = csv.writer(sys.stdout if args.out == "-" else open(args.out, "w", newline=""), lineterminator="\n")
    writer.writerow(["pos", "row", "col", "score"])
    for t in range(attn.shape[0]):
        for n in range(attn.shape[1]):
            writer.writerow([t, n // w, n % w, f"{attn[t, n]:.8g}"])
    log.info("label %r", labels[args.index])
    return EXIT_OK


def cmd_params(args) -> int:
    from .params import breakdown

    cfg = _config(args)
    parts = breakdown(cfg)
    print(json.dumps({"total": sum(parts.values()), "breakdown": parts}, sort_keys=True))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="matrn", description="Multi-modal text recogniser: data, training and checks.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="render a synthetic word-image dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--lexicon", help="whitespace-separated word list (default: built-in)")
    p.add_argument("--words", type=int, default=200)
    p.add_argument("--per-word", type=int, default=10)
    p.add_argument("--img-h", type=int, default=16)
    p.add_argument("--img-w", type=int, default=64)
    p.add_argument("--channels", type=int, choices=(1, 3), default=1)
    p.add_argument("--augment", type=float, default=1.0, help="augmentation strength (0 disables)")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="checkpoint path (rewritten after every epoch)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--epochs", type=int, help="total epochs (0 writes the initialised model)")
    p.add_argument("--metrics", help="append JSON-lines metrics here instead of stdout")
    p.add_argument("--seed", type=int)
    _add_data_args(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="word accuracy of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--seed", type=int)
    _add_data_args(p)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="finite-difference checks of every primitive")
    p.add_argument("--precision", choices=("f32", "f64"), default="f64")
    p.add_argument("--seeds", type=int, default=10, help="number of seeds per op")
    p.add_argument("--seed", type=int, default=0, help="first seed")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", help="train ablation grids over several seeds")
    p.add_argument("--config")
    p.add_argument("--out", required=True, help="directory for per-run results and reports")
    p.add_argument("--grids", default="fe,mask", help="comma list from fe,ses,mask")
    p.add_argument("--seeds", default="0,1,2")
    p.add_argument("--epochs", type=int)
    p.add_argument("--cells", action="append", metavar="GRID:LABELS",
                   help="restrict a grid to some cells, e.g. mask:none,visual_clue (repeatable)")
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--seed", type=int, help="dataset seed")
    _add_data_args(p)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("dump-attn", help="write the seed attention map of one image as CSV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--index", type=int, default=0)
    p.add_argument("--split", choices=("train", "val", "all"), default="val")
    p.add_argument("--out", default="-")
    p.add_argument("--seed", type=int)
    _add_data_args(p)
    p.set_defaults(func=cmd_dump_attn)

    p = sub.add_parser("params", help="analytic parameter count for a config")
    p.add_argument("--config")
    p.set_defaults(func=cmd_params)
    return parser


def _classify(exc: Exception) -> tuple[int, str]:
    if isinstance(exc, CliError):
        return exc.code, exc.kind
    if isinstance(exc, CheckpointError):
        return EXIT_CHECKPOINT, "checkpoint"
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG, "config"
    if isinstance(exc, IngestionError):
        return EXIT_DATA, "data"
    if isinstance(exc, MatrnError):
        return EXIT_INTERNAL, type(exc).__name__
    return EXIT_INTERNAL, "internal"


def main(argv=None) -> int:
    try:
        _setup_logging()
        args = build_parser().parse_args(argv)
        return args.func(args)
    except SystemExit as exc:      # --help
        return int(exc.code or 0)
    except Exception as exc:       # noqa: BLE001 - every failure becomes one JSON line
        code, kind = _classify(exc)
        if logging.getLogger().isEnabledFor(logging.DEBUG):
            log.exception("command failed")
        print(json.dumps({"error": kind, "message": str(exc), "exit_code": code}), file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
