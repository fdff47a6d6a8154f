"""Command line entry point: simulate, analyze, report, verify."""
from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

from . import harness, traces


def _config(args) -> harness.ExperimentConfig:
    cfg = harness.load_config(args.config)
    if args.seed is not None:
        cfg.base = cfg.base.with_(rng_seed=args.seed)
    if args.out is not None:
        cfg = replace(cfg, out_dir=args.out)
    return cfg


def cmd_simulate(args) -> int:
    cfg = _config(args)
    rows = harness.run_experiment(cfg, workers=args.workers, traces=args.traces)
    path = harness.write_csv(rows, Path(cfg.out_dir) / "metrics.csv")
    print(f"wrote {len(rows)} rows to {path}")
    if any(r.outcome_total != r.generated for r in rows):
        print("conservation audit failed", file=sys.stderr)
        return 1
    return 0


def cmd_analyze(args) -> int:
    cfg = _config(args)
    records = harness.analyze(cfg)
    path = harness.write_analysis_csv(records, Path(cfg.out_dir) / "analysis.csv")
    print(f"wrote {len(records)} rows to {path}")
    return 0


def cmd_report(args) -> int:
    rows = []
    for p in args.csv:
        rows.extend(harness.read_csv(p))
    text = harness.compare_report(rows)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.txt").write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_verify(args) -> int:
    root = Path(args.traces_dir)
    dirs = sorted(p.parent for p in root.rglob("meta.json"))
    if not dirs:
        print(f"no round traces under {root}", file=sys.stderr)
        return 2
    failed = 0
    for d in dirs:
        rep = traces.replay(traces.read_round(d))
        status = "ok" if rep.ok else "FAIL"
        print(f"{status} {d} packets={rep.packets} collisions_checked={rep.collisions_checked}")
        if not rep.ok:
            failed += 1
            print(json.dumps(rep.failures, indent=1))
    print(f"{len(dirs) - failed}/{len(dirs)} rounds passed")
    return 1 if failed else 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cidc", description="CIDC / DCF broadcast MAC simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, workers=False):
        p.add_argument("--config", help="key = value config file (defaults if omitted)")
        p.add_argument("--out", help="output directory (overrides out_dir)")
        p.add_argument("--seed", type=int, help="base seed (overrides rng_seed)")
        if workers:
            p.add_argument("--workers", type=int, default=1, help="parallel worker processes")
            p.add_argument("--traces", action="store_true", help="write per-round trace files")

    p = sub.add_parser("simulate", help="run the configured sweep and write metrics.csv")
    common(p, workers=True)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("analyze", help="model tables only, written to analysis.csv")
    common(p)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("report", help="compare CIDC and DCF rows from metrics CSV files")
    p.add_argument("csv", nargs="+", help="metrics.csv files")
    p.add_argument("--out", help="also write report.txt here")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("verify", help="replay invariants over trace directories")
    p.add_argument("traces_dir", help="directory containing round traces")
    p.set_defaults(func=cmd_verify)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except harness.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
