"""Command-line front end for the experiment runner.

Subcommands: train-teacher, distill, probe, grid, sweep, matrix, eval. The
output root defaults to $NTLDFKD_OUT (falling back to ./runs); every numeric
default is visible via --print-config.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from ..atesc import AttackConfig
from ..domains import make_toy_domains
from .checkpoints import checkpoint_load
from .metrics import evaluate, export_decision_grid, robustness_consistency
from .runner import (
    ConfigError,
    DEFAULT_CONFIG,
    _atesc_config,
    _metric_row,
    _toy_spec,
    _write_metrics_csv,
    load_config,
    run_experiment,
    run_single,
    _derived_seeds,
)


def _out_root() -> Path:
    return Path(os.environ.get("NTLDFKD_OUT", "runs"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="ntldfkd",
        description="toy lab for non-transferable teachers, data-free "
        "distillation, and adversarial trap escaping",
    )
    parser.add_argument(
        "--print-config",
        action="store_true",
        help="print the fully resolved config (defaults plus --config) and exit",
    )
    parser.add_argument("--config", help="path to a JSON config", default=None)
    parser.add_argument("--seed", type=int, default=None, help="seed override")
    parser.add_argument("--out", default=None, help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes")

    sub = parser.add_subparsers(dest="command")
    for name, doc in [
        ("train-teacher", "train a teacher variant, no distillation"),
        ("distill", "train (or load) a teacher and run the configured distiller"),
        ("probe", "robustness-consistency curves on the test splits"),
        ("grid", "decision grid of a checkpointed model"),
        ("sweep", "epsilon or lambda sweep over seeds"),
        ("matrix", "all teacher variants x all distillers"),
        ("eval", "metrics of a checkpointed model on the toy domains"),
    ]:
        p = sub.add_parser(name, help=doc)
        if name in ("grid", "eval"):
            p.add_argument("--ckpt", required=True, help="model checkpoint path")
    return parser


def _resolved(args) -> dict:
    cfg = load_config(args.config) if args.config else load_config({})
    if args.seed is not None:
        cfg["seed"] = int(args.seed)
    return cfg


def _out_dir(args, default_name: str) -> Path:
    return Path(args.out) if args.out else _out_root() / default_name


def _cmd_probe(cfg: dict, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    domain_seed = _derived_seeds(int(cfg["seed"]))[0]
    pair = make_toy_domains(_toy_spec(cfg, domain_seed))
    if cfg["teacher"]["checkpoint"]:
        teacher, _ = checkpoint_load(cfg["teacher"]["checkpoint"])
    else:
        run_single(dict(cfg, distiller="none"), out)
        teacher, _ = checkpoint_load(out / "teacher.ckpt")
    atk = _atesc_config(cfg, ckd_only=False).attack
    grid = [int(k) for k in cfg["eval"]["consistency_steps"]]
    with open(out / "consistency.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["set", "steps", "consistency"])
        for name, split in [("id_test", pair.id_test), ("ood_test", pair.ood_test)]:
            for k, value in robustness_consistency(teacher, split, atk, grid):
                writer.writerow([name, k, f"{value:.12g}"])


def _cmd_grid(cfg: dict, ckpt: str, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    model, _ = checkpoint_load(ckpt)
    domain_seed = _derived_seeds(int(cfg["seed"]))[0]
    pair = make_toy_domains(_toy_spec(cfg, domain_seed))
    res = int(cfg["eval"]["grid_resolution"])
    export_decision_grid(model, pair.bounding_box, res, out / "grid.csv")


def _cmd_eval(cfg: dict, ckpt: str, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    model, _ = checkpoint_load(ckpt)
    domain_seed = _derived_seeds(int(cfg["seed"]))[0]
    pair = make_toy_domains(_toy_spec(cfg, domain_seed))
    row = _metric_row(
        model, pair, "model", cfg["teacher"]["variant"], cfg["distiller"],
        int(cfg["seed"]), -1,
    )
    _write_metrics_csv([row], out / "metrics.csv")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _resolved(args)
        if args.print_config:
            json.dump(cfg, sys.stdout, indent=2, sort_keys=True)
            print()
            return 0
        if args.command is None:
            parser.print_help()
            return 2
        if args.command == "train-teacher":
            cfg["mode"], cfg["distiller"] = "single", "none"
            run_single(cfg, _out_dir(args, "teacher"))
        elif args.command == "distill":
            cfg["mode"] = "single"
            run_single(cfg, _out_dir(args, "distill"))
        elif args.command == "probe":
            _cmd_probe(cfg, _out_dir(args, "probe"))
        elif args.command == "grid":
            _cmd_grid(cfg, args.ckpt, _out_dir(args, "grid"))
        elif args.command == "eval":
            _cmd_eval(cfg, args.ckpt, _out_dir(args, "eval"))
        elif args.command == "sweep":
            cfg["mode"] = "sweep"
            run_experiment(cfg, _out_dir(args, "sweep"), jobs=args.jobs)
        elif args.command == "matrix":
            cfg["mode"] = "matrix"
            run_experiment(cfg, _out_dir(args, "matrix"), jobs=args.jobs)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
