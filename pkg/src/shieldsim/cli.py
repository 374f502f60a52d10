"""Command-line entry point: ``shieldsim <command> [--config FILE] [--out DIR]``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time

from .campaign import (CampaignConfig, build_plan, replay, run_campaign, run_trial,
                       sensitivity_sweep)
from .errors import ConfigurationError
from .faults import FaultPlan
from .numerics import DType
from .systolic import ArrayGeometry, Mode, component_latencies, configure_shields, pipeline_schedule

log = logging.getLogger("shieldsim")


def _config(args) -> CampaignConfig:
    cfg = CampaignConfig.load(args.config) if args.config else CampaignConfig()
    if getattr(args, "trials", None) is not None:
        cfg.trials = args.trials
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "workers", None) is not None:
        cfg.workers = args.workers
    if getattr(args, "rate", None) is not None:
        cfg.faults.rates = [args.rate]
    return cfg


def _print_events(result, stream=sys.stdout) -> None:
    for e in result.events:
        index = ":".join(map(str, e.index))
        print(f"pass {e.pass_index:4d}  cycle {e.cycle:8d}  {e.site:16s} {e.target:10s} "
              f"[{index}] bit {e.bit:2d}  {e.outcome:9s} {e.status}", file=stream)


def cmd_configure(args) -> int:
    if args.config:
        geometry = CampaignConfig.load(args.config).geometry
    else:
        try:
            geometry = ArrayGeometry(args.tiles, args.pes_per_tile, Mode(args.mode))
        except ValueError as exc:
            raise ConfigurationError(str(exc)) from None
    shield = configure_shields(geometry)
    doc = {"shield": shield.to_dict(), "latency_cycles": component_latencies(shield)}
    if args.groups:
        doc["timing"] = json.loads(pipeline_schedule(args.groups, shield).to_json())
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_simulate(args) -> int:
    cfg = _config(args)
    plan = build_plan(cfg, float(cfg.faults.rates[0]), args.trial)
    result = run_trial(cfg, plan, trial=args.trial)
    _print_events(result)
    outcomes = [e.outcome for e in result.events]
    print(f"events {len(outcomes)}: " + ", ".join(
        f"{k} {outcomes.count(k)}" for k in ("corrected", "detected", "missed", "unexposed")))
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        with open(os.path.join(args.out, "plan.json"), "w") as fh:
            fh.write(plan.to_json() + "\n")
    return 0


def cmd_campaign(args) -> int:
    cfg = _config(args)
    start = time.perf_counter()
    report = run_campaign(cfg)
    report.write(args.out)
    for r in report.rates:
        print(f"rate {r['rate']:.0e}: consequential {r['consequential']}, "
              f"detection {r['detection_coverage']}, correction {r['correction_coverage']}, "
              f"accuracy {r['accuracy_protected']} (unprotected {r['accuracy_unprotected']})")
    log.info("wrote %s in %.1f s", args.out, time.perf_counter() - start)
    return 0


def cmd_sensitivity(args) -> int:
    try:
        dtype = DType.parse(args.dtype)
    except ValueError as exc:
        raise ConfigurationError(str(exc)) from None
    table = sensitivity_sweep(dtype, classes=args.classes, rates=args.rates, runs=args.runs,
                              seed=args.seed, samples=args.samples)
    os.makedirs(args.out, exist_ok=True)
    with open(os.path.join(args.out, "sensitivity.json"), "w") as fh:
        json.dump(table.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    with open(os.path.join(args.out, "sensitivity.csv"), "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["class", "rate", "accuracy", "drop"])
        for row in table.rows:
            writer.writerow([row["class"], row["rate"], row["accuracy"], row["drop"]])
    print(f"baseline {table.baseline_accuracy}")
    for row in table.rows:
        print(f"{row['class']:14s} rate {row['rate']:.0e}  accuracy {row['accuracy']:8.4f}  "
              f"drop {row['drop']:8.4f}")
    return 0


def cmd_replay(args) -> int:
    cfg = _config(args)
    try:
        with open(args.plan) as fh:
            plan = FaultPlan.from_json(fh.read())
    except (OSError, ValueError, KeyError, TypeError) as exc:
        raise ConfigurationError(f"cannot load fault plan {args.plan}: {exc}") from None
    protected, unprotected = replay(cfg, plan)
    _print_events(protected)
    changed = int((protected.predictions != unprotected.predictions).sum())
    print(f"predictions differing between protected and unprotected runs: {changed}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shieldsim", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default):
        p.add_argument("--config", help="campaign config JSON")
        p.add_argument("--out", default=out_default, help="output directory")

    p = sub.add_parser("configure", help="print the shield configuration for a geometry")
    common(p, None)
    p.add_argument("--tiles", type=int, default=16)
    p.add_argument("--pes-per-tile", type=int, default=1)
    p.add_argument("--mode", choices=[m.value for m in Mode], default="ws")
    p.add_argument("--groups", type=int, default=0, help="also print timing for this many tile-groups")
    p.set_defaults(func=cmd_configure)

    p = sub.add_parser("simulate", help="run one trial and print its event log")
    common(p, None)
    p.add_argument("--trial", type=int, default=0)
    p.add_argument("--rate", type=float)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("campaign", help="run a full sweep and write report.json, trials.csv, events.csv")
    common(p, "shieldsim_out")
    p.add_argument("--trials", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--workers", type=int)
    p.set_defaults(func=cmd_campaign)

    p = sub.add_parser("sensitivity", help="accuracy under flips restricted to one bit class")
    common(p, "shieldsim_out")
    p.add_argument("--dtype", default="fp32")
    p.add_argument("--classes", nargs="+")
    p.add_argument("--rates", type=float, nargs="+", default=[0.0, 1e-6, 1e-5, 1e-4])
    p.add_argument("--runs", type=int, default=10)
    p.add_argument("--samples", type=int, default=512)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_sensitivity)

    p = sub.add_parser("replay", help="re-run a serialised fault plan with protection on and off")
    common(p, None)
    p.add_argument("plan", help="fault plan JSON written by simulate")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except ConfigurationError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
    except FileNotFoundError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return 2
