"""Command-line experiment driver.

Subcommands map to pipeline stages: gen-data, pretrain, finetune,
evaluate, sweep, report. Every output directory receives the resolved
config that produced it; rerunning a command with the same config
reproduces its outputs byte-identically. Relative output paths resolve
under $LABELAWARE_OUTPUT_ROOT when that variable is set.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from pathlib import Path

from . import evalkit, experiments, langsim
from . import trainer as tr
from .config import ConfigError, parse_config, write_resolved

OUTPUT_ROOT_ENV = "LABELAWARE_OUTPUT_ROOT"


def _out_dir(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    p.mkdir(parents=True, exist_ok=True)
    return p


def _load_corpus_for_training(args, cfg):
    corpus = langsim.load_corpus(args.corpus)
    corr = cfg["corruption"]
    corpus, plan = experiments.corrupt_for_run(
        corpus, corr["mode"], corr["fraction"], corr["seed"], cfg["pretrain"]["seed"]
    )
    return corpus, plan


def cmd_gen_data(args) -> int:
    cfg = parse_config(args.config)
    out = _out_dir(args.out)
    corpus = experiments.corpus_from_config(cfg)
    langsim.save_corpus(corpus, out)
    write_resolved(cfg, out)
    print(f"corpus: {len(corpus.languages)} languages, "
          f"{sum(len(v) for v in corpus.splits.values())} utterances -> {out}")
    return 0


def cmd_pretrain(args) -> int:
    cfg = parse_config(args.config)
    out = _out_dir(args.out)
    corpus, plan = _load_corpus_for_training(args, cfg)
    if plan is not None:
        plan.save(out / "corruption_plan.json")
    ckpt = tr.pretrain(
        corpus,
        cfg.train_config(),
        encoder_config=cfg.encoder_config(),
        log_path=out / "pretrain_log.csv",
        checkpoint_dir=out,
    )
    write_resolved(cfg, out)
    print(f"pretrained {ckpt.step} steps -> {out / 'final.ckpt'}")
    return 0


def cmd_finetune(args) -> int:
    cfg = parse_config(args.config)
    out = _out_dir(args.out)
    corpus = langsim.load_corpus(args.corpus)
    ckpt = tr.Checkpoint.load(args.checkpoint)
    model = tr.finetune(ckpt, corpus, cfg.finetune_config(),
                        log_path=out / "finetune_log.csv")
    model.save(out / "model.ckpt")
    write_resolved(cfg, out)
    print(f"finetuned -> {out / 'model.ckpt'}")
    return 0


def cmd_evaluate(args) -> int:
    cfg = parse_config(args.config)
    out = _out_dir(args.out)
    corpus = langsim.load_corpus(args.corpus)
    model = tr.Checkpoint.load(args.model)
    trials, report = experiments.evaluate_model(model, corpus, split=args.split)
    evalkit.trials_to_csv(trials, out / "trials.csv")
    evalkit.report_to_csv(report, out / "metrics.csv")
    write_resolved(cfg, out)
    print(evalkit.format_report(report), end="")
    return 0


def cmd_sweep(args) -> int:
    cfg = parse_config(args.config)
    out = _out_dir(args.out)
    corpus = (
        langsim.load_corpus(args.corpus) if args.corpus
        else experiments.corpus_from_config(cfg)
    )
    rows = experiments.sweep_rows(cfg, args.axis, corpus=corpus)
    columns = ["axis", "value", "seed"] + experiments.report_columns()
    sweep_path = out / f"sweep_{args.axis}.csv"
    with open(sweep_path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns)
        writer.writeheader()
        for row in rows:
            writer.writerow(
                {k: (repr(v) if isinstance(v, float) else "" if v is None else v)
                 for k, v in row.items()}
            )
    write_resolved(cfg, out)
    print(f"sweep over {args.axis}: {len(rows)} rows -> {sweep_path}")
    return 0


def cmd_report(args) -> int:
    for path in args.metrics:
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            table = list(reader)
        widths = [max(len(str(c)) for c in col) for col in zip(*table)]
        print(f"== {path}")
        for row in table:
            print("  ".join(str(c).ljust(w) for c, w in zip(row, widths)))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="labelaware",
        description="label-aware pre-training experiments on synthetic multilingual data",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate and serialize a corpus")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_gen_data)

    p = sub.add_parser("pretrain", help="run pre-training on a corpus directory")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", help="fine-tune a checkpoint for classification")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", help="score a model on a corpus split")
    p.add_argument("--config", required=True)
    p.add_argument("--corpus", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--split", default="test", choices=list(langsim.SPLITS))
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("sweep", help="run an ablation sweep")
    p.add_argument("--config", required=True)
    p.add_argument("--axis", required=True, choices=["lambda", "noise", "loss"])
    p.add_argument("--corpus", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(fn=cmd_sweep)

    p = sub.add_parser("report", help="pretty-print metric or sweep CSVs")
    p.add_argument("metrics", nargs="+")
    p.set_defaults(fn=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, tr.TrainingError, ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
