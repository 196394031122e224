"""``mt2st`` command line: run strategy comparisons, validate configs, emit series."""

from __future__ import annotations

import argparse
import logging
import math
import statistics
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from .config import ConfigError, ExperimentConfig, load_config
from .cost import compression_rate
from .reporting import (
    REPORT_COLUMNS,
    SERIES_KINDS,
    emit_series,
    format_report_csv,
    load_run_records,
    report_row,
    run_dir_name,
    run_summary,
    write_json,
    write_step_stream,
)
from .trainer import TrainingDiverged, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DIVERGED = 3

logger = logging.getLogger("mt2st")

_AGG_COLUMNS = [c for c in REPORT_COLUMNS if c not in ("strategy", "seed")]


class CellFailed(RuntimeError):
    def __init__(self, strategy: str, seed: int, cause: Exception):
        super().__init__(f"cell (strategy={strategy!r}, seed={seed}) failed: {cause}")
        self.strategy, self.seed = strategy, seed


def run_cell(cfg: ExperimentConfig, strategy_index: int, seed: int):
    """Train one (strategy, seed) cell. Returns (name, seed, summary, records)."""
    strat = cfg.strategies[strategy_index]
    suite = cfg.suite.build(seed)
    try:
        run = train(
            suite,
            strat.build(),
            cfg.train_config(seed),
            cfg.feedback,
            hidden_dims=cfg.model.hidden_dims,
            activation=cfg.model.activation,
        )
    except TrainingDiverged as exc:
        raise CellFailed(strat.name, seed, exc) from None
    # same-seed STL baseline: identical init and architecture, so identical cost constants
    stl_flops = cfg.train.total_steps * run.cost.c_stl
    return strat.name, seed, run_summary(run, stl_flops), run.records


def _aggregate(rows: list[dict]) -> dict:
    out = {}
    for name in dict.fromkeys(r["strategy"] for r in rows):
        mine = [r for r in rows if r["strategy"] == name]
        stats = {}
        for col in _AGG_COLUMNS:
            vals = [float(r[col]) for r in mine if r[col] is not None]
            stats[col] = {
                "mean": statistics.fmean(vals) if vals else None,
                "std": statistics.pstdev(vals) if len(vals) > 1 else (0.0 if vals else None),
                "n": len(vals),
            }
        out[name] = stats
    return out


def run_experiment(cfg: ExperimentConfig, out_dir: Path, jobs: int = 1) -> list[dict]:
    """Execute every cell and write results; returns the report rows in config order."""
    cells = [(i, seed) for i in range(len(cfg.strategies)) for seed in cfg.seeds]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_cell, cfg, i, seed) for i, seed in cells]
            results = [f.result() for f in futures]
    else:
        results = [run_cell(cfg, i, seed) for i, seed in cells]

    out_dir.mkdir(parents=True, exist_ok=True)
    rows, per_run = [], {}
    for name, seed, summary, records in results:
        run_dir = out_dir / "runs" / run_dir_name(name, seed)
        run_dir.mkdir(parents=True, exist_ok=True)
        write_step_stream(records, run_dir / "steps.jsonl", include_timing=cfg.record_timing)
        write_json({"strategy": name, "seed": seed, **summary}, run_dir / "summary.json")
        rows.append(report_row(name, seed, summary))
        per_run[run_dir_name(name, seed)] = summary

    with open(out_dir / "results.csv", "w", encoding="utf-8", newline="\n") as fh:
        fh.write(format_report_csv(rows))
    write_json(
        {
            "strategies": [{"name": s.name, "schedule": s.spec} for s in cfg.strategies],
            "seeds": list(cfg.seeds),
            "total_steps": cfg.train.total_steps,
            "aggregate": _aggregate(rows),
            "rows": rows,
        },
        out_dir / "summary.json",
    )
    return rows


def check_report(rows: list[dict], tol: float = 1e-9) -> None:
    """Every compression cell must recompute from the FLOPs columns."""
    for r in rows:
        for mode in ("expected", "realized"):
            again = compression_rate(float(r[f"flops_{mode}"]), float(r["flops_stl"]))
            if not math.isclose(float(r[f"compression_{mode}"]), again, rel_tol=0.0, abs_tol=tol):
                raise AssertionError(f"compression_{mode} mismatch for {r['strategy']} seed {r['seed']}")


def _cmd_run(args) -> int:
    cfg = load_config(args.config)
    out = cfg.resolved_output_dir(Path(args.config).resolve().parent)
    try:
        rows = run_experiment(cfg, out, jobs=args.jobs)
    except CellFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    print(f"wrote {len(rows)} rows to {out / 'results.csv'}")
    return EXIT_OK


def _cmd_validate(args) -> int:
    cfg = load_config(args.config)
    print(
        f"ok: {len(cfg.strategies)} strategies x {len(cfg.seeds)} seeds, "
        f"K={cfg.suite.n_aux}, T={cfg.train.total_steps}"
    )
    return EXIT_OK


def _cmd_series(args) -> int:
    try:
        records = load_run_records(args.run_dir)
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    text = emit_series(records, args.kind)
    if args.output:
        Path(args.output).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mt2st", description="Multi-task to single-task training experiments.")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run every (strategy, seed) cell of a config")
    p.add_argument("config")
    p.add_argument("--jobs", type=int, default=1, help="worker processes (default 1)")
    p.set_defaults(func=_cmd_run)

    p = sub.add_parser("validate", help="parse and validate a config without running it")
    p.add_argument("config")
    p.set_defaults(func=_cmd_validate)

    p = sub.add_parser("series", help="print a plot-ready column series for one run directory")
    p.add_argument("run_dir")
    p.add_argument("--kind", required=True, choices=SERIES_KINDS)
    p.add_argument("-o", "--output", help="write to a file instead of stdout")
    p.set_defaults(func=_cmd_series)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    if getattr(args, "jobs", 1) < 1:
        parser.error("--jobs must be >= 1")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
