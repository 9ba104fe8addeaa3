"""Command line entry point: ``merge-coord {run,sweep,report,presets}``.

Exit codes: 0 success, 1 validation error, 2 I/O error.
"""

from __future__ import annotations

import argparse
import csv
import io
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from decimal import Decimal, InvalidOperation
from typing import List, Optional, Sequence

from .radio import ChannelConfig
from .scenario import (PRESET_NAMES, ScenarioConfig, ScenarioError, UnknownPreset,
                       load_scenario, preset)
from .sim import run as run_scenario
from .trace import TraceFormatError, metrics, read_trace

EXIT_OK, EXIT_VALIDATION, EXIT_IO = 0, 1, 2


class GridError(ValueError):
    pass


def parse_grid(text: str) -> List[float]:
    """``start:stop:step`` inclusive of both ends, e.g. ``0:0.5:0.1`` -> 6 values."""
    parts = text.split(":")
    if len(parts) == 1:
        parts = [parts[0], parts[0], "1"]
    if len(parts) != 3:
        raise GridError(f"grid must be start:stop:step, got {text!r}")
    try:
        start, stop, step = (Decimal(p) for p in parts)
    except InvalidOperation:
        raise GridError(f"grid must be numeric, got {text!r}") from None
    if step <= 0 or stop < start:
        raise GridError(f"grid needs step > 0 and stop >= start, got {text!r}")
    n = int((stop - start) / step)
    return [float(start + k * step) for k in range(n + 1)]


def _add_overrides(p: argparse.ArgumentParser):
    p.add_argument("--seed", type=int, help="RNG seed (default: $MERGE_COORD_SEED or scenario)")
    p.add_argument("--loss", type=float, help="per-receiver loss probability")
    p.add_argument("--range", type=float, dest="range_m", help="radio range in meters")
    p.add_argument("--latency", type=int, help="channel latency in ms")
    p.add_argument("--headway", type=float, help="minimum merge headway in seconds")
    p.add_argument("--noise", type=float, help="position noise sigma in meters")
    p.add_argument("--duration", type=float, help="simulated seconds")
    p.add_argument("--no-advisories", action="store_true",
                   help="run the protocol but ignore advisories when driving")


def _load(args) -> ScenarioConfig:
    if args.preset:
        return preset(args.preset)
    return load_scenario(args.scenario)


def _apply_overrides(cfg: ScenarioConfig, args) -> ScenarioConfig:
    sim, ch, pr = cfg.sim, cfg.sim.channel, cfg.sim.protocol
    ch = ChannelConfig(
        args.range_m if args.range_m is not None else ch.range_m,
        args.loss if args.loss is not None else ch.loss_prob,
        args.latency if args.latency is not None else ch.latency_ms)
    if args.headway is not None:
        pr = replace(pr, headway_s=args.headway)
    sim = replace(sim, channel=ch, protocol=pr,
                  seed=args.seed if args.seed is not None else sim.seed,
                  bsm_noise_sigma_m=args.noise if args.noise is not None else sim.bsm_noise_sigma_m,
                  duration_s=args.duration if args.duration is not None else sim.duration_s,
                  advisories_enabled=sim.advisories_enabled and not args.no_advisories)
    return replace(cfg, sim=sim)


def cmd_run(args) -> int:
    cfg = _apply_overrides(_load(args), args)
    trace, summary = run_scenario(cfg)
    trace.write(args.out)
    sys.stdout.write(summary.to_text())
    return EXIT_OK


def _sweep_one(job):
    cfg, loss, seed = job
    sim = replace(cfg.sim, seed=seed, channel=replace(cfg.sim.channel, loss_prob=loss))
    _, rep = run_scenario(replace(cfg, sim=sim))
    return rep.protocol_completed, rep.completion_latency_ms, rep.min_merge_gap_s


def sweep_rows(cfg: ScenarioConfig, losses: Sequence[float], runs: int, base_seed: int,
               jobs: int = 1) -> List[dict]:
    """One row per loss value: completion rate, mean latency, mean minimum merge gap."""
    work = [(cfg, loss, base_seed + i) for loss in losses for i in range(runs)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_sweep_one, work, chunksize=max(1, runs // jobs)))
    else:
        results = [_sweep_one(w) for w in work]
    rows = []
    for k, loss in enumerate(losses):
        chunk = results[k * runs:(k + 1) * runs]
        lat = [r[1] for r in chunk if r[0] and r[1] is not None]
        gaps = [r[2] for r in chunk if r[2] is not None]
        rows.append({
            "loss": loss,
            "completion_rate": sum(1 for r in chunk if r[0]) / runs,
            "mean_latency_ms": sum(lat) / len(lat) if lat else None,
            "mean_min_gap_s": sum(gaps) / len(gaps) if gaps else None,
        })
    return rows


def format_csv(rows: List[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["loss", "completion_rate", "mean_latency_ms", "mean_min_gap_s"])
    for r in rows:
        w.writerow([f"{r['loss']:g}", f"{r['completion_rate']:.4f}",
                    "" if r["mean_latency_ms"] is None else f"{r['mean_latency_ms']:.1f}",
                    "" if r["mean_min_gap_s"] is None else f"{r['mean_min_gap_s']:.4f}"])
    return buf.getvalue()


def cmd_sweep(args) -> int:
    losses = parse_grid(args.loss_grid)
    cfg = _apply_overrides(_load(args), args)
    if args.runs < 1:
        raise GridError("--runs must be at least 1")
    rows = sweep_rows(cfg, losses, args.runs, cfg.sim.seed, args.jobs)
    text = format_csv(rows)
    if args.out:
        with open(args.out, "w", encoding="ascii", newline="") as fh:
            fh.write(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_report(args) -> int:
    sys.stdout.write(metrics(read_trace(args.trace)).to_text())
    return EXIT_OK


def cmd_presets(args) -> int:
    for name in PRESET_NAMES:
        print(name)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="merge-coord",
                                     description="Cooperative on-ramp merge simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one scenario and write its trace")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario file")
    src.add_argument("--preset", help="built-in preset name")
    p.add_argument("--out", default="./trace.log", help="trace output path")
    _add_overrides(p)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", help="completion statistics over a loss grid (CSV)")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--scenario", help="scenario file")
    src.add_argument("--preset", help="built-in preset name")
    p.add_argument("--loss-grid", required=True, help="start:stop:step, e.g. 0:0.5:0.1")
    p.add_argument("--runs", type=int, default=20, help="seeded runs per loss value")
    p.add_argument("--jobs", type=int, default=1, help="worker processes")
    p.add_argument("--out", help="CSV path (default: standard output)")
    _add_overrides(p)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("report", help="recompute the summary from a trace file")
    p.add_argument("trace")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("presets", help="list built-in presets")
    p.set_defaults(func=cmd_presets)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except UnknownPreset as exc:
        print(f"error: unknown preset {exc.args[0]!r}; see 'merge-coord presets'",
              file=sys.stderr)
        return EXIT_VALIDATION
    except (ScenarioError, TraceFormatError, GridError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
