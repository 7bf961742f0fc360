"""Command-line entry point: ``fedleak <stage> [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import experiment as exp


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON experiment config; flags override it")
    common.add_argument("--workdir", type=Path, help="artifact root (must exist)")
    common.add_argument("--seed", type=int)
    common.add_argument("--profile", choices=sorted(exp.PROFILES))
    common.add_argument("--jobs", type=int, help="worker processes for the attack stage (0: all cores)")
    common.add_argument("--lambda-dummy", type=float, dest="lambda_dummy")
    common.add_argument("--scenario", choices=sorted(exp.SCENARIOS))
    common.add_argument("--dry-run", action="store_true", help="print the stage plan and exit")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="fedleak", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)
    for name, help_ in [
        ("gen-data", "synthesize layout masks and SEM-like images"),
        ("train", "run the federation and save intercepted snapshots"),
        ("attack", "invert intercepted updates under each candidate label"),
        ("eval", "threshold pooled scores and write the report"),
        ("ablate", "sweep lambda_dummy over the configured scenarios"),
        ("pipeline", "gen-data, train, attack and eval in order"),
    ]:
        sp = sub.add_parser(name, parents=[common], help=help_)
        if name == "eval":
            sp.add_argument("--scores", type=Path, help="scores CSV (default: from the config)")
    return p


def build_config(args) -> exp.ExperimentConfig:
    raw = json.loads(args.config.read_text()) if args.config else {}
    for key in ("workdir", "seed", "profile", "jobs", "lambda_dummy", "scenario"):
        val = getattr(args, key)
        if val is not None:
            raw[key] = str(val) if key == "workdir" else val
    if args.seed is not None:
        raw.setdefault("fl", {})["seed"] = args.seed
    return exp.ExperimentConfig.from_dict(raw)


def _plan(cfg, command) -> list[str]:
    plan = exp.stage_plan(cfg)
    if command == "pipeline":
        return plan
    if command == "ablate":
        return [f"ablate: scenarios={','.join(cfg.ablate_scenarios)} "
                f"lambda_dummy={','.join(f'{v:g}' for v in cfg.lambda_sweep)} "
                f"-> {cfg.root / 'reports' / 'ablation.csv'}"]
    return [plan[exp.STAGES.index(command)]]


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        stream=sys.stderr,
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="level=%(levelname)s %(message)s",
    )
    try:
        cfg = build_config(args)
    except (OSError, ValueError, TypeError) as exc:
        print(f"fedleak: bad configuration: {exc}", file=sys.stderr)
        return 2
    if args.dry_run:
        for line in _plan(cfg, args.command):
            print(line)
        return 0
    try:
        if args.command == "gen-data":
            exp.cmd_gen_data(cfg)
        elif args.command == "train":
            exp.cmd_train(cfg)
        elif args.command == "attack":
            exp.cmd_attack(cfg)
        elif args.command == "eval":
            exp._require_workdir(cfg)
            scores = args.scores or exp.scores_path(cfg, cfg.scenario, cfg.lambda_dummy)
            exp.cmd_eval(scores, cfg.root / "reports")
        elif args.command == "ablate":
            exp.cmd_ablate(cfg)
        else:
            exp.cmd_pipeline(cfg)
    except exp.StageError as exc:
        print(f"fedleak: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"fedleak: {args.command} failed: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
