"""Command line entry point: ``kgpoison <subcommand> [--config FILE] [--out DIR] ...``."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import yaml

from . import harness
from .edits import merge_edits, write_provenance
from .evaluation import evaluate, write_metrics, write_ranks
from .graph import DatasetFormatError, EditError, apply_edits, read_edits, write_edits, write_graph
from .models import load_checkpoint
from .synthetic import SyntheticKgConfig, generate_synthetic_kg


def _common(p: argparse.ArgumentParser, config_required: bool = True) -> None:
    p.add_argument("--config", required=config_required, help="experiment YAML file")
    p.add_argument("--out", help="output directory (overrides config and $KGPOISON_OUT)")
    p.add_argument("--seed", type=int, help="override the experiment seed")
    p.add_argument("--workers", type=int, help="worker cap (overrides $KGPOISON_WORKERS)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="kgpoison", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    _common(sub.add_parser("train", help="train a model and write a checkpoint"))

    p = sub.add_parser("eval", help="filtered ranking evaluation of a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", default="test", choices=["train", "valid", "test"])

    p = sub.add_parser("attack", help="select targets and compute adversarial edits")
    _common(p)
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("poison", help="apply an edits file to the dataset")
    _common(p)
    p.add_argument("--edits", required=True)

    _common(sub.add_parser("pipeline", help="train, attack, poison, retrain, report"))
    _common(sub.add_parser("oracle", help="leave-one-out or brute-force addition oracle"))

    p = sub.add_parser("synth", help="generate a synthetic dataset with planted patterns")
    _common(p, config_required=False)
    p.add_argument("--synthetic", help="YAML file with SyntheticKgConfig fields "
                                       "(defaults to the config's dataset.synthetic)")
    return parser


def _config(args) -> harness.ExperimentConfig:
    overrides = {"out": args.out, "seed": args.seed, "workers": args.workers}
    return harness.load_config(args.config, overrides)


def _load_model(path, kg, require_train):
    model, header = load_checkpoint(path)
    harness.check_compatible(header, kg, require_train)
    return model


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (harness.ConfigError, harness.IncompatibleCheckpointError, DatasetFormatError,
            EditError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "synth":
        if args.synthetic:
            with open(args.synthetic) as fh:
                syn = yaml.safe_load(fh) or {}
        else:
            syn = _config(args).dataset.synthetic or {}
        if args.seed is not None:
            syn["seed"] = args.seed
        kg = generate_synthetic_kg(SyntheticKgConfig(**syn))
        out = Path(args.out or harness.load_config(None).out)
        write_graph(kg, out)
        print(f"wrote {kg.summary()} to {out}")
        return 0

    cfg = _config(args)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    if args.command == "pipeline":
        report = harness.run_pipeline(cfg, out)
        for k, v in report.summary().items():
            print(f"{k}={v}")
        return 0
    if args.command == "oracle":
        for path in harness.run_oracle(cfg, out):
            print(path)
        return 0

    kg = harness.build_dataset(cfg)
    if args.command == "train":
        harness.save_config(cfg, out / "config.yaml")
        harness.train_stage(kg, cfg, out)
        print(out / "model.npz")
        return 0
    if args.command == "eval":
        model = _load_model(args.checkpoint, kg, require_train=False)
        report = evaluate(model, kg, getattr(kg, args.split))
        write_ranks(report, out / "ranks.tsv")
        write_metrics(report.metrics, out / "metrics.txt")
        for k, v in report.metrics.items():
            print(f"{k}={v}")
        return 0
    if args.command == "attack":
        model = _load_model(args.checkpoint, kg, require_train=True)
        targets = harness.pick_targets(model, kg, cfg)
        harness.write_targets(kg, targets, out / "targets.tsv")
        results = harness.run_attack(model, kg, targets, cfg)
        deletions, additions = merge_edits(results)
        write_edits(kg, deletions, additions, out / "edits.tsv")
        write_provenance(results, out / "provenance.csv", kg, timing=cfg.record_timing)
        print(f"{len(deletions)} deletions, {len(additions)} additions for {len(targets)} targets")
        return 0
    if args.command == "poison":
        deletions, additions = read_edits(kg, args.edits)
        poisoned, n_applied = apply_edits(kg, deletions, additions)
        write_graph(poisoned, out / "dataset")
        print(f"deleted {len(deletions)}, added {n_applied} of {len(additions)}")
        return 0
    raise AssertionError(args.command)


if __name__ == "__main__":
    sys.exit(main())
