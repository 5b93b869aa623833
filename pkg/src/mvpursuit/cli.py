"""Command-line front end: train, eval, gen-map, inspect-buffer, dump-trace, config."""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from pathlib import Path

from .baseline import greedy_baseline_policy
from .config import ConfigError, dump_config, load_config
from .evaluation import evaluate, rows_to_csv
from .neural import CheckpointError
from .roadnet import MapFormatError, generate_grid, load_map, save_map, serialize_map
from .trainer import (
    GRID_DEFAULTS, SCENARIOS, STREAM_EVAL, TrainConfig, Trainer, derive_rng, derive_seed, parse_blocks,
    write_jsonl,
)

ABLATIONS = ("none", "no-prioritization", "no-cognition")
AUDIT_FIELDS = ("epoch", "agent", "entry", "gain", "q", "P", "omega", "sampled")


class UsageError(Exception):
    pass


def _add_scenario_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="key = value configuration file")
    p.add_argument("--seed", type=int)
    p.add_argument("--scenario", choices=sorted(SCENARIOS), help="pursuer/evader counts")
    g = p.add_mutually_exclusive_group()
    g.add_argument("--map", help="map file")
    g.add_argument("--blocks", help="grid size in blocks, e.g. 3x3")
    p.add_argument("--lane-length", type=float)
    p.add_argument("--background", type=int, help="number of background vehicles")
    p.add_argument("--st", type=int, help="step limit per episode")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mvpursuit", description="Multi-vehicle pursuit training harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train agents and write logs and a checkpoint")
    _add_scenario_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    p.add_argument("--separate-test-episode", action="store_true")
    p.add_argument("--cotrain-cognition", action="store_true")
    p.add_argument("--resume", help="checkpoint directory to continue from")
    p.add_argument("--out", default="run")

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    _add_scenario_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_true", help="evaluate the scripted baseline instead")
    p.add_argument("--episodes", type=int, default=100)
    p.add_argument("--out", default=None)

    p = sub.add_parser("gen-map", help="write a grid map file")
    p.add_argument("--blocks", required=True)
    p.add_argument("--lane-length", type=float, default=None)
    p.add_argument("--out", default=None, help="output file (stdout when omitted)")

    p = sub.add_parser("inspect-buffer", help="print the replay buffer of a checkpoint as JSON")
    p.add_argument("--checkpoint", required=True)

    p = sub.add_parser("dump-trace", help="write per-step JSON-lines traces of greedy episodes")
    _add_scenario_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--baseline", action="store_true")
    p.add_argument("--episodes", type=int, default=1)
    p.add_argument("--out", default=".")

    p = sub.add_parser("config", help="print the effective configuration")
    _add_scenario_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--ablation", choices=ABLATIONS, default=None)
    return parser


def resolve_config(args, base: TrainConfig | None = None) -> TrainConfig:
    """Defaults, then the config file, then flags."""
    cfg = base or TrainConfig()
    if getattr(args, "config", None):
        cfg = load_config(args.config, cfg)
    upd = {}
    if args.seed is not None:
        upd["seed"] = args.seed
    if args.scenario:
        upd["scenario"] = args.scenario
        upd["N"], upd["M"] = SCENARIOS[args.scenario]
    if args.map:
        upd["map_path"] = args.map
    if args.blocks:
        parse_blocks(args.blocks)
        upd["blocks"] = args.blocks
        upd["map_path"] = ""
        if args.blocks in GRID_DEFAULTS:
            upd["lane_length"], upd["B"] = GRID_DEFAULTS[args.blocks]
    if args.lane_length is not None:
        upd["lane_length"] = args.lane_length
    if args.background is not None:
        upd["B"] = args.background
    if args.st is not None:
        upd["st"] = args.st
    if getattr(args, "epochs", None) is not None:
        upd["max_epoch"] = args.epochs
    ablation = getattr(args, "ablation", None)
    if ablation is not None:
        upd["disable_prioritization"] = ablation == "no-prioritization"
        upd["disable_cognition"] = ablation == "no-cognition"
    if getattr(args, "separate_test_episode", False):
        upd["separate_test_episode"] = True
    if getattr(args, "cotrain_cognition", False):
        upd["cotrain_cognition"] = True
    return dataclasses.replace(cfg, **upd).validate()


def _scenario_given(args) -> bool:
    return any(getattr(args, k, None) is not None for k in ("scenario", "map", "blocks", "lane_length", "background"))


def _load_for_eval(args) -> Trainer:
    if args.baseline and not args.checkpoint:
        return Trainer(resolve_config(args))
    if not args.checkpoint:
        raise UsageError(f"{args.command} needs --checkpoint (or --baseline)")
    tr = Trainer.load_checkpoint(args.checkpoint)
    if _scenario_given(args) or args.st is not None:
        want = resolve_config(args, tr.config)
        probe = Trainer(dataclasses.replace(want, max_epoch=1))
        if probe.net.L != tr.net.L or want.M != tr.config.M or want.N != tr.config.N:
            raise UsageError(f"scenario (L={probe.net.L}, N={want.N}, M={want.M}) does not match checkpoint "
                             f"(L={tr.net.L}, N={tr.config.N}, M={tr.config.M})")
        tr.config = want
        tr.net = probe.net
    return tr


def cmd_train(args) -> int:
    if args.resume:
        tr = Trainer.load_checkpoint(args.resume)
        if args.epochs is not None:
            tr.config = dataclasses.replace(tr.config, max_epoch=args.epochs)
    else:
        tr = Trainer(resolve_config(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.txt").write_text(dump_config(tr.config), encoding="utf-8")
    log_path = out / "train_log.jsonl"
    mode = "a" if args.resume else "w"
    with open(log_path, mode, encoding="utf-8") as fh:
        def log(rep):
            fh.write(json.dumps(rep.to_dict(), sort_keys=True) + "\n")
            fh.flush()
        reports = tr.train(log=log)
    with open(out / "priority_audit.csv", mode, newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=AUDIT_FIELDS, lineterminator="\n")
        if mode == "w":
            w.writeheader()
        w.writerows(tr.audit)
    tr.save_checkpoint(out / "checkpoint")
    last = reports[-1].to_dict() if reports else {}
    print(json.dumps({"epochs": tr.epoch, "last": last}, sort_keys=True))
    return 0


def cmd_eval(args) -> int:
    tr = _load_for_eval(args)
    if args.episodes < 1:
        raise UsageError("--episodes must be at least 1")
    seed = tr.config.seed if args.seed is None else args.seed
    policy = greedy_baseline_policy if args.baseline else None
    metrics, rows = evaluate(tr, args.episodes, seed, policy=policy)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.csv").write_text(rows_to_csv(rows), encoding="utf-8")
        (out / "summary.json").write_text(json.dumps(metrics.to_dict(), sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps(metrics.to_dict(), sort_keys=True))
    return 0


def cmd_gen_map(args) -> int:
    bx, by = parse_blocks(args.blocks)
    length = args.lane_length
    if length is None:
        length = GRID_DEFAULTS.get(f"{bx}x{by}", (500.0, 0))[0]
    net = generate_grid(bx, by, length)
    if args.out:
        save_map(net, args.out)
        print(f"junctions {len(net.junctions)} lanes {net.L}")
    else:
        sys.stdout.write(serialize_map(net))
    return 0


def cmd_inspect_buffer(args) -> int:
    tr = Trainer.load_checkpoint(args.checkpoint)
    print(json.dumps(tr.buffer.snapshot(), indent=2, sort_keys=True))
    return 0


def cmd_dump_trace(args) -> int:
    if args.checkpoint or args.baseline:
        tr = _load_for_eval(args)
    else:
        tr = Trainer(resolve_config(args))
    seed = tr.config.seed if args.seed is None else args.seed
    policy = greedy_baseline_policy if args.baseline else None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for i in range(args.episodes):
        rngs = [derive_rng(seed, STREAM_EVAL, i, n) for n in range(tr.config.N)]
        res = tr.rollout(derive_seed(seed, STREAM_EVAL, i), 0.0, rngs, trace=True, policy=policy)
        write_jsonl(out / f"trace_{i}.jsonl", res.trace)
        print(f"trace_{i}.jsonl: {len(res.trace)} records, {res.captures} captures")
    return 0


def cmd_config(args) -> int:
    sys.stdout.write(dump_config(resolve_config(args)))
    return 0


COMMANDS = {"train": cmd_train, "eval": cmd_eval, "gen-map": cmd_gen_map, "inspect-buffer": cmd_inspect_buffer,
            "dump-trace": cmd_dump_trace, "config": cmd_config}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"mvpursuit {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (ConfigError, MapFormatError, CheckpointError, ValueError, OSError) as exc:
        print(f"mvpursuit {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
