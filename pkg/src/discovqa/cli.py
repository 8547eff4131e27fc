"""Command line entry point: ``discovqa {gen,train,eval,predict,gradcheck}``.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import logging
import sys
from pathlib import Path

from .config import ConfigError, TrainConfig, load_config, parse_config_text
from .features import (FeatureFileError, ManifestError, SyntheticSpec, generate_corpus, load_manifest,
                       parse_spec_text, read_feature_file)
from .quality import multi_sample_predict, remap
from .trainer import (CheckpointError, NumericalError, evaluate, load_checkpoint, save_checkpoint, train,
                      _rng)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _sizes(text: str) -> tuple[int, int, int]:
    parts = [int(p) for p in text.split(",")]
    if len(parts) != 3:
        raise argparse.ArgumentTypeError("expected three comma-separated counts")
    return tuple(parts)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="discovqa", description="Distortion/content aware video quality model on pre-extracted features.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="write a synthetic feature corpus")
    g.add_argument("--spec", type=Path, help="generator settings (key=value lines); defaults if omitted")
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--out", type=Path, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--sizes", type=_sizes, help="explicit train,val,test counts instead of 6:2:2")

    t = sub.add_parser("train", help="train and write a checkpoint plus a JSON-lines log")
    t.add_argument("--manifest", type=Path, required=True)
    t.add_argument("--config", type=Path)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--log", type=Path, help="defaults to the checkpoint path with a .jsonl suffix")
    t.add_argument("--seed", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
    t.add_argument("-v", "--verbose", action="store_true")

    e = sub.add_parser("eval", help="metrics and per-video predictions on one split")
    e.add_argument("--ckpt", type=Path, required=True)
    e.add_argument("--manifest", type=Path, required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--sm", type=int, default=8)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--predictions", type=Path, help="CSV output; defaults next to the checkpoint")

    r = sub.add_parser("predict", help="score one feature file")
    r.add_argument("--ckpt", type=Path, required=True)
    r.add_argument("--features", type=Path, required=True)
    r.add_argument("--sm", type=int, help="defaults to the checkpoint's s_m")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--dump-attention", type=Path, help="CSV of sampled frames, d, w and M_QK")

    c = sub.add_parser("gradcheck", help="finite-difference check of every op and the full model")
    c.add_argument("--seeds", type=int, default=20)
    c.add_argument("--corrupt", help=argparse.SUPPRESS)
    return p


def cmd_gen(args) -> int:
    spec = SyntheticSpec()
    if args.spec is not None:
        try:
            spec = parse_spec_text(args.spec.read_text(encoding="utf-8"), source=str(args.spec))
        except OSError as exc:
            raise UsageError(f"cannot read spec: {exc}") from None
        except ValueError as exc:
            raise UsageError(str(exc)) from None
    if args.count < 0:
        raise UsageError("--count must be >= 0")
    try:
        entries = generate_corpus(spec, args.count, args.out, seed=args.seed, sizes=args.sizes)
    except OSError as exc:
        raise DataError(f"cannot write corpus: {exc}") from None
    print(f"wrote {len(entries)} clips to {args.out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    cfg = load_config(args.config) if args.config is not None else TrainConfig()
    overrides = "\n".join(args.set)
    cfg = parse_config_text(overrides, base=cfg, source="--set")
    if args.seed is not None:
        cfg = cfg.updated(seed=args.seed)
    if args.epochs is not None:
        cfg = cfg.updated(epochs=args.epochs)
    return cfg


def cmd_train(args) -> int:
    if args.config is not None and not args.config.exists():
        raise UsageError(f"config file not found: {args.config}")
    cfg = _train_config(args)
    entries = load_manifest(args.manifest)
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    log_path = args.log or args.out.with_suffix(".jsonl")
    args.out.parent.mkdir(parents=True, exist_ok=True)
    result = train(cfg, entries, log_path=log_path)
    save_checkpoint(result.checkpoint, args.out)
    ck = result.checkpoint
    print(f"epochs run {len(result.log)}; best val srocc {ck.best_val_srocc:.4f} at epoch {ck.epoch}")
    print(f"checkpoint {args.out}; log {log_path}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    entries = [e for e in load_manifest(args.manifest) if e.split == args.split]
    if not entries:
        raise DataError(f"split {args.split!r} is empty in {args.manifest}")
    report, preds = evaluate(ckpt, entries, s_m=args.sm, seed=args.seed)
    out = args.predictions or args.ckpt.with_name(f"{args.ckpt.stem}.{args.split}.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["video_id", "mos", "q_raw", "q_mapped"])
        for e, p in zip(entries, preds):
            w.writerow([e.video_id, repr(e.mos), repr(p.q_raw), repr(p.q_mapped)])
    print(f"split={args.split} s_m={args.sm} n={report.n} "
          f"srocc={report.srocc:.4f} plcc={report.plcc:.4f} krocc={report.krocc:.4f}")
    print(f"predictions {out}")
    return EXIT_OK


def cmd_predict(args) -> int:
    ckpt = load_checkpoint(args.ckpt)
    clip = read_feature_file(args.features)
    model = ckpt.build_model()
    s_m = args.sm or ckpt.config.s_m
    if s_m < 1:
        raise UsageError("--sm must be >= 1")
    try:
        stde = model.tokens(clip)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    pred = multi_sample_predict(model, stde, s_m, _rng(args.seed, 5))
    q_hat = remap(pred.q_raw, ckpt.remap_stats(), ckpt.config.literal_eq15_sign)
    print(f"q_hat={q_hat:.6f} q_raw={pred.q_raw:.6f} s_m={s_m}")
    if args.dump_attention is not None:
        rows = _attention_rows(model, stde, s_m, args.seed)
        with open(args.dump_attention, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["sample", "position", "frame", "d", "w", "m_qk"])
            w.writerows(rows)
    return EXIT_OK


def _attention_rows(model, stde, s_m: int, seed: int) -> list[list]:
    """Replays the prediction's draws and records each sampled frame."""
    rng = _rng(seed, 5)
    d_all = model.frame_qualities(stde)
    rows = []
    for s in range(s_m):
        out = model.forward_tokens(stde, rng, d=d_all)
        frames = out.selection.indices if out.selection is not None else range(stde.shape[0])
        for pos, frame in enumerate(frames):
            w = "" if out.w is None else repr(float(out.w.data[pos, 0]))
            m = "" if out.m_qk is None else repr(float(out.m_qk.data[0, pos]))
            rows.append([s, pos, frame, repr(float(out.d.data[pos, 0])), w, m])
    return rows


def cmd_gradcheck(args) -> int:
    import contextlib
    import time

    from .gradcheck import corrupted, format_table, run_suite

    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    guard = corrupted(args.corrupt) if args.corrupt else contextlib.nullcontext()
    start = time.perf_counter()
    try:
        with guard:
            results = run_suite(args.seeds)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    print(format_table(results))
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} ok over {args.seeds} seeds "
          f"in {time.perf_counter() - start:.1f}s")
    return EXIT_NUMERICAL if failed else EXIT_OK


COMMANDS = {"gen": cmd_gen, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "gradcheck": cmd_gradcheck}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"discovqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as exc:
        print(f"discovqa {args.command}: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (DataError, FeatureFileError, ManifestError, CheckpointError, FileNotFoundError, ValueError) as exc:
        print(f"discovqa {args.command}: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
