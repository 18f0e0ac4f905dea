"""Command line entry point: ``sttod {run,augment,check,synth}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import harness
from .corpus import few_shot_split, save_jsonl
from .gradaug import gradaug
from .selftrain import train_mlm_for, warmup_teacher


def cmd_run(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    overrides = {}
    if args.variant:
        overrides["variants"] = tuple(args.variant)
    if args.selector:
        overrides["selectors"] = tuple(args.selector)
    if overrides:
        config = replace(config, **overrides)
    out = Path(args.out or config.output_dir)
    agg = harness.run_experiment(config, out)
    for name, row in agg["rows"].items():
        cells = ", ".join(f"{m}={s['mean']:.4f}" + (f"±{s['std']:.4f}" if "std" in s else "")
                          for m, s in row["metrics"].items() if not m.startswith("warmup_"))
        failed = f" (failed seeds: {row['failed_seeds']})" if row["failed_seeds"] else ""
        print(f"{name}: {cells}{failed}")
    print(f"reports written to {out}")
    return 0 if agg["completed"] else 1


def cmd_augment(args) -> int:
    config = harness.ExperimentConfig.load(args.config)
    seed = config.seeds[0]
    dataset = harness.load_dataset(config)
    split = few_shot_split(dataset, config.labeled_fraction, seed)
    st = replace(config.st, seed=seed)
    mlm = train_mlm_for(dataset, list(split.labeled) + list(split.unlabeled), st)
    teacher, _ = warmup_teacher(dataset, split.labeled, st)
    dump: list = []
    augmented = gradaug(split.labeled, teacher, mlm, replace(st.gradaug, seed=seed), dump=dump,
                        vocab=dataset.vocab)
    out = Path(args.out or config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "augment.jsonl"
    with open(path, "w", encoding="utf-8") as fh:
        for rec in dump:
            fh.write(json.dumps(rec) + "\n")
    print(f"{len(split.labeled)} labeled -> {len(augmented)} after augmentation; audit log at {path}")
    return 0


def cmd_check(args) -> int:
    from .selfcheck import run_checks
    return 0 if run_checks() else 1


def cmd_synth(args) -> int:
    kwargs = {"seed": args.seed}
    if args.size is not None:
        kwargs["size"] = args.size
    dataset = harness.SYNTH_KINDS[args.task](**kwargs)
    save_jsonl(dataset, args.out)
    print(f"wrote {len(dataset.examples)} examples to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sttod", description="Self-training with gradient-guided augmentation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run an experiment config")
    p.add_argument("--config", required=True)
    p.add_argument("--variant", action="append", choices=harness.VARIANTS)
    p.add_argument("--selector", action="append", choices=("topk", "randomk", "leastk", "selectall"))
    p.add_argument("--out")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("augment", help="augment the labeled pool of the first seed and dump an audit log")
    p.add_argument("--config", required=True)
    p.add_argument("--out")
    p.set_defaults(func=cmd_augment)

    p = sub.add_parser("check", help="run the numerical self-tests")
    p.set_defaults(func=cmd_check)

    p = sub.add_parser("synth", help="write a synthetic corpus as JSONL plus ontology")
    p.add_argument("--task", choices=sorted(harness.SYNTH_KINDS), default="intent")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--size", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (harness.ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
