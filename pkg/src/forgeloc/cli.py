"""Command-line entry point: ``forgeloc <command> ...``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiments as ex
from .dataset_synth import CorpusConfig, build_corpus, load_corpus
from .trainer import TrainConfig, evaluate, fit, load_checkpoint, write_predictions


def _config(path) -> TrainConfig:
    return TrainConfig.load(path) if path else TrainConfig()


def cmd_gen_data(args) -> int:
    cfg = CorpusConfig(args.train, args.seen, args.unseen, args.size, args.seed)
    corpus = build_corpus(cfg, args.out, workers=args.workers)
    counts = {k: len(v) for k, v in corpus.splits.items()}
    print(f"wrote {sum(counts.values())} samples to {args.out} {counts}")
    return 0


def cmd_train(args) -> int:
    cfg = _config(args.config)
    trainer = fit(cfg, load_corpus(args.data), args.out, resume=args.resume)
    last = trainer.history[-1] if trainer.history else {}
    print(f"trained {trainer.step} steps; last losses {json.dumps(last)}; checkpoint {Path(args.out) / 'last.ckpt'}")
    return 0


def cmd_eval(args) -> int:
    corpus = load_corpus(args.data)
    trainer = load_checkpoint(args.ckpt)
    report, preds, recs = evaluate(trainer, corpus.load(args.split), args.split, args.mode)
    out = Path(args.out) if args.out else Path(args.ckpt).parent / f"eval_{args.split}"
    write_predictions(out, preds, report, recs)
    (out / "report.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "report.md").write_text(ex.metrics_markdown(report))
    a = report.aggregate
    print(f"{args.split}: mIoU {a['miou']:.4f} F1 {a['f1']:.4f} ({report.mode}); wrote {out}")
    return 0


def cmd_ablate(args) -> int:
    settings = [s.strip() for s in args.settings.split(",") if s.strip()]
    rep = ex.run_ablation(settings, _config(args.config), load_corpus(args.data), args.seeds, args.out, args.split)
    print(rep.to_markdown())
    return 0


def cmd_prompt_sweep(args) -> int:
    rep = ex.run_prompt_sweep(_config(args.config), load_corpus(args.data), args.seeds, args.out, args.split)
    print(rep.to_markdown())
    return 0


def cmd_generalize(args) -> int:
    rep = ex.run_generalization(_config(args.config), load_corpus(args.data), args.seeds, args.out)
    print(rep.to_markdown())
    return 0


def cmd_report(args) -> int:
    rep = ex.load_report(args.runs)
    if args.format == "json":
        print(json.dumps(rep.to_dict(), indent=2, sort_keys=True))
    else:
        print(rep.to_markdown(), end="")
    if args.write:
        rep.save(args.runs)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="forgeloc", description="Toy [SEG]-token forgery localization.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress at INFO level")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic corpus")
    g.add_argument("--out", required=True)
    g.add_argument("--train", type=int, default=32)
    g.add_argument("--seen", type=int, default=16)
    g.add_argument("--unseen", type=int, default=16)
    g.add_argument("--size", type=int, default=64)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--workers", type=int, default=1)
    g.set_defaults(fn=cmd_gen_data)

    t = sub.add_parser("train", help="train one model")
    t.add_argument("--config", help="TrainConfig JSON (field names as in TrainConfig)")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--resume", help="checkpoint to continue from")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="seen")
    e.add_argument("--mode", choices=("per-image", "pooled"), default="per-image")
    e.add_argument("--out", help="output directory (default: <ckpt dir>/eval_<split>)")
    e.set_defaults(fn=cmd_eval)

    for name, fn, seeds, help_ in (
        ("ablate", cmd_ablate, 3, "settings A-D over paired seeds"),
        ("prompt-sweep", cmd_prompt_sweep, 1, "setting D for each prompt condition"),
        ("generalize", cmd_generalize, 1, "setting D on seen and unseen edit families"),
    ):
        a = sub.add_parser(name, help=help_)
        a.add_argument("--config")
        a.add_argument("--data", required=True)
        a.add_argument("--seeds", type=int, default=seeds)
        a.add_argument("--out", required=True)
        if name != "generalize":
            a.add_argument("--split", default="seen")
        if name == "ablate":
            a.add_argument("--settings", default="A,B,C,D")
        a.set_defaults(fn=fn)

    r = sub.add_parser("report", help="render an experiment directory")
    r.add_argument("--runs", required=True)
    r.add_argument("--format", choices=("md", "json"), default="md")
    r.add_argument("--write", action="store_true", help="also rewrite report.json and report.md")
    r.set_defaults(fn=cmd_report)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except (FileNotFoundError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
