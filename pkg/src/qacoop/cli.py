"""Command line entry point: ``qacoop <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from . import datasets as ds
from .agents import count_parameters, load_checkpoint
from .dialog import STRONG_BASELINE, UPDATE_MODES, run_dialog, shuffle_records, write_transcripts
from .metrics import EVAL_MODES, evaluate_standard
from .training import ABLATIONS, PAPER_PARAMETER_COUNT, TrainConfig, apply_ablation, train

DATA_ENV = "QACOOP_DATA"


class UsageError(Exception):
    pass


def _data_dir(args):
    data = args.data or os.environ.get(DATA_ENV)
    if not data:
        raise UsageError(f"--data is required (or set ${DATA_ENV})")
    if not Path(data).is_dir():
        raise UsageError(f"data directory {data} does not exist")
    return Path(data)


def _split(splits, name):
    if name not in splits:
        raise UsageError(f"split {name!r} not found; available: {sorted(splits)}")
    return splits[name]


def cmd_synth(args):
    if args.n < 1:
        raise UsageError("--n must be >= 1")
    n_train = args.n - args.val - args.test
    if n_train < 1 or args.val < 0 or args.test < 0:
        raise UsageError("--val and --test must leave at least one training record")
    sizes = {"train": n_train, "val": args.val, "test": args.test}
    records, features, _ = ds.synth_dataset(args.n, args.seed, {k: v for k, v in sizes.items() if v})
    out = Path(args.out)
    try:
        ds.write_corpus(out, records, features, ds.build_vocabulary(records))
    except OSError as exc:
        raise UsageError(f"cannot write to {out}: {exc}") from exc
    print(f"wrote {len(records)} dialogs and {2 * len(records)} feature files to {out}")


def cmd_ingest(args):
    data = _data_dir(args)
    splits, store = ds.load_corpus(data)
    missing = [r.video_id for recs in splits.values() for r in recs if r.video_id not in store]
    if missing:
        raise UsageError(f"{len(missing)} videos lack feature files, e.g. {missing[0]}")
    for recs in splits.values():
        for r in recs:
            store[r.video_id]   # validates shapes
    vocab = ds.build_vocabulary([r for recs in splits.values() for r in recs], args.min_count)
    vocab.save(data / "vocab.json")
    for name, recs in splits.items():
        print(f"{name:<6} {len(recs):>6} dialogs")
    print(f"vocabulary: {len(vocab)} tokens -> {data / 'vocab.json'}")


def _load_config(args):
    cfg = TrainConfig()
    if args.config:
        cfg = TrainConfig.from_json(json.loads(Path(args.config).read_text()))
    for item in args.set or []:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        try:
            cfg.override(key.strip(), value.strip())
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    if args.epochs is not None:
        cfg.override("epochs", args.epochs)
    if args.seed is not None:
        cfg.override("seed", args.seed)
    return cfg


def cmd_train(args):
    cfg = _load_config(args)
    splits, store = ds.load_corpus(_data_dir(args))
    train_recs = _split(splits, "train")
    val_recs = splits.get("val") or train_recs
    result = train(cfg, train_recs, store, val_recs, out_dir=args.out)
    print(f"trained {len(result.log)} steps; best val perplexity "
          f"{result.best_perplexity:.3f} at epoch {result.best_epoch}")
    print(f"checkpoints in {args.out}")


def _checkpoint(args, **overrides):
    try:
        return load_checkpoint(args.checkpoint, **overrides)
    except FileNotFoundError as exc:
        raise UsageError(str(exc)) from exc


def cmd_rollout(args):
    if args.strong:
        start = STRONG_BASELINE
    elif args.start_round is None or not 1 <= args.start_round <= 10:
        raise UsageError("--start-round must be in 1..10 (use --strong for the full GT dialog)")
    else:
        start = args.start_round
    model, vocab, _ = _checkpoint(args)
    splits, store = ds.load_corpus(_data_dir(args))
    by_id = {r.video_id: r for recs in splits.values() for r in recs}
    if args.video not in by_id:
        raise UsageError(f"unknown video_id {args.video!r}")
    t = run_dialog(model, vocab, by_id[args.video], store, start, args.update_mode)
    line = json.dumps(t.to_json())
    if args.out:
        write_transcripts(args.out, [t])
    print(line)


def _evaluate(model, vocab, records, store, args, mode, update_mode):
    report, outputs = evaluate_standard(model, vocab, records, store, mode, update_mode,
                                        workers=args.workers)
    print(report.table(args.label or mode))
    if args.out:
        report.save(args.out)
    if args.transcripts and mode != "basic":
        write_transcripts(args.transcripts, outputs)
    return report


def cmd_evaluate(args):
    model, vocab, _ = _checkpoint(args)
    splits, store = ds.load_corpus(_data_dir(args))
    _evaluate(model, vocab, _split(splits, args.split), store, args, args.mode, args.update_mode)


def cmd_ablate(args):
    _, vocab, meta = _checkpoint(args)
    cfg = TrainConfig.from_json(meta["train"]) if "train" in meta else TrainConfig()
    for switch in args.switch:
        apply_ablation(cfg, switch)
    if args.epochs is not None:
        cfg.override("epochs", args.epochs)
    splits, store = ds.load_corpus(_data_dir(args))
    train_recs = _split(splits, "train")
    result = train(cfg, train_recs, store, splits.get("val"), vocab=vocab)
    test = _split(splits, args.split)
    if cfg.shuffle_qa:
        test = shuffle_records(test, cfg.seed)
    _evaluate(result.model, vocab, test, store, args, "standard", cfg.update_mode)


def cmd_inspect(args):
    if args.checkpoint:
        model, vocab, meta = _checkpoint(args)
        n = count_parameters(model)
        print(f"vocabulary size : {len(vocab)}")
        print(f"parameters      : {n:,}")
        print(f"paper reference : ~{PAPER_PARAMETER_COUNT:,} (vocabulary-size dependent; "
              f"the reference used the full AVSD vocabulary)")
        print(json.dumps(meta.get("model", {}), indent=1))
    if args.data or os.environ.get(DATA_ENV):
        splits, store = ds.load_corpus(_data_dir(args))
        for name, recs in splits.items():
            print(f"{name:<6} {len(recs):>6} dialogs")
        print(f"feature files   : {2 * len(store)}")
    if not args.checkpoint and not (args.data or os.environ.get(DATA_ENV)):
        raise UsageError("inspect needs --checkpoint and/or --data")


def build_parser():
    p = argparse.ArgumentParser(
        prog="qacoop",
        description="Synthesize corpora, train the cooperative agents, roll out dialogs and score them.",
        epilog=f"The data directory defaults to ${DATA_ENV} when --data is omitted.",
    )
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--n", type=int, required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.add_argument("--val", type=int, default=0, help="records assigned to the val split")
    s.add_argument("--test", type=int, default=0, help="records assigned to the test split")
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("ingest", help="validate a corpus and write its vocabulary")
    s.add_argument("--data")
    s.add_argument("--min-count", type=int, default=1)
    s.set_defaults(func=cmd_ingest)

    s = sub.add_parser("train", help="cooperative training")
    s.add_argument("--config", help="JSON file with TrainConfig fields")
    s.add_argument("--data")
    s.add_argument("--out", required=True)
    s.add_argument("--set", nargs="+", metavar="KEY=VALUE", help="override config fields")
    s.add_argument("--epochs", type=int)
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("rollout", help="one dialog + description as JSON lines")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--data")
    s.add_argument("--video", required=True)
    s.add_argument("--start-round", type=int)
    s.add_argument("--strong", action="store_true", help="give all ten ground-truth pairs")
    s.add_argument("--update-mode", choices=UPDATE_MODES, default="full")
    s.add_argument("--out")
    s.set_defaults(func=cmd_rollout)

    for name, func, helptext in (("evaluate", cmd_evaluate, "score a checkpoint"),
                                 ("ablate", cmd_ablate, "retrain under ablations and score")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("--checkpoint", required=True)
        s.add_argument("--data")
        s.add_argument("--split", default="test")
        s.add_argument("--workers", type=int, default=1)
        s.add_argument("--out", help="report JSON path")
        s.add_argument("--transcripts", help="transcript JSON-lines path")
        s.add_argument("--label")
        if name == "evaluate":
            s.add_argument("--mode", choices=EVAL_MODES, default="standard")
            s.add_argument("--update-mode", choices=UPDATE_MODES, default="full")
        else:
            s.add_argument("--switch", action="append", required=True, choices=sorted(ABLATIONS))
            s.add_argument("--epochs", type=int)
        s.set_defaults(func=func)

    s = sub.add_parser("inspect", help="describe a checkpoint and/or corpus")
    s.add_argument("--checkpoint")
    s.add_argument("--data")
    s.set_defaults(func=cmd_inspect)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except (UsageError, ds.ManifestError, ds.FeatureFileError, ds.MissingFeatureError) as exc:
        print(f"qacoop {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
