"""Serialisation of runs: step-record streams, run summaries and plot-ready series."""

from __future__ import annotations

import csv
import io
import json
from pathlib import Path
from typing import Iterable

from .cost import compression_rate
from .trainer import RunResult, StepRecord

SERIES_KINDS = ("loss", "gamma", "alignment")
REPORT_SCHEMA = "mt2st-report/1"
REPORT_COLUMNS = (
    "strategy",
    "seed",
    "primary_accuracy",
    "primary_loss",
    "convergence_epoch",
    "total_epochs",
    "switch_step",
    "flops_expected",
    "flops_realized",
    "flops_stl",
    "compression_expected",
    "compression_realized",
)
STEP_FIELDS = ("step", "losses", "gammas", "grad_norms", "alignment", "flops_expected", "flops_realized")


def _dumps(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def write_step_stream(records: Iterable[StepRecord], path, include_timing: bool = False) -> None:
    """One JSON object per line, keys sorted."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(_dumps(r.to_dict(include_timing)) + "\n")


def read_step_stream(path) -> list[dict]:
    with open(path, encoding="utf-8") as fh:
        return [json.loads(line) for line in fh if line.strip()]


def run_summary(run: RunResult, stl_flops: float) -> dict:
    """Final metrics, convergence epoch and compression against the same-seed STL cost."""
    primary = run.final_metrics[0]
    return {
        "final_metrics": run.final_metrics,
        "primary_loss": primary["loss"],
        "primary_accuracy": primary.get("accuracy"),
        "convergence_epoch": run.convergence_epoch,
        "total_epochs": run.total_epochs,
        "epoch_val_losses": run.epoch_val_losses,
        "switch_step": run.switch_step_effective,
        "feedback_step": run.feedback_step,
        "steps": len(run.records),
        "flops": {
            "expected": run.flops_expected,
            "realized": run.flops_realized,
            "stl": stl_flops,
        },
        "compression_rate": {
            "expected": compression_rate(run.flops_expected, stl_flops),
            "realized": compression_rate(run.flops_realized, stl_flops),
        },
        "cost_model": {
            "c_stl": run.cost.c_stl,
            "c_marginal": list(run.cost.c_marginal),
            "source": run.cost.source,
        },
    }


def write_json(obj, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(json.dumps(obj, sort_keys=True, indent=2, allow_nan=False) + "\n")


def report_row(strategy: str, seed: int, summary: dict) -> dict:
    return {
        "strategy": strategy,
        "seed": seed,
        "primary_accuracy": summary["primary_accuracy"],
        "primary_loss": summary["primary_loss"],
        "convergence_epoch": summary["convergence_epoch"],
        "total_epochs": summary["total_epochs"],
        "switch_step": summary["switch_step"],
        "flops_expected": summary["flops"]["expected"],
        "flops_realized": summary["flops"]["realized"],
        "flops_stl": summary["flops"]["stl"],
        "compression_expected": summary["compression_rate"]["expected"],
        "compression_realized": summary["compression_rate"]["realized"],
    }


def _cell(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


def format_report_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    buf.write(f"# schema: {REPORT_SCHEMA} columns={','.join(REPORT_COLUMNS)}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(REPORT_COLUMNS)
    for row in rows:
        writer.writerow([_cell(row[c]) for c in REPORT_COLUMNS])
    return buf.getvalue()


def parse_report_csv(text: str) -> list[dict]:
    lines = text.splitlines()
    if not lines or not lines[0].startswith(f"# schema: {REPORT_SCHEMA} "):
        raise ValueError("missing or unknown report schema line")
    declared = lines[0].split("columns=", 1)[1].split(",")
    reader = csv.DictReader(lines[1:])
    if tuple(reader.fieldnames or ()) != tuple(declared):
        raise ValueError("CSV header does not match the schema line")
    return list(reader)


def emit_series(run, which: str) -> str:
    """Whitespace-separated columns: ``step`` then one column per task or weight.

    ``run`` is a RunResult, a list of StepRecord, or a list of step dicts as
    read back from a stream.
    """
    if which not in SERIES_KINDS:
        raise ValueError(f"unknown series {which!r}; expected one of {SERIES_KINDS}")
    records = run.records if isinstance(run, RunResult) else list(run)
    if not records:
        raise ValueError("run has no step records")
    rows = [r if isinstance(r, dict) else r.to_dict() for r in records]
    if which == "loss":
        header = ["step"] + [f"loss_{k}" for k in range(len(rows[0]["losses"]))]
        values = [[r["losses"][k] for k in range(len(rows[0]["losses"]))] for r in rows]
    elif which == "gamma":
        header = ["step"] + [f"gamma_{k}" for k in range(1, len(rows[0]["gammas"]) + 1)]
        values = [r["gammas"] for r in rows]
    else:
        header = ["step", "alignment", "primary_grad_norm_sq"]
        values = [[r["alignment"], r["grad_norms"][0] ** 2] for r in rows]
    out = [" ".join(header)]
    for r, vals in zip(rows, values):
        out.append(" ".join([str(r["step"])] + [repr(float(v)) for v in vals]))
    return "\n".join(out) + "\n"


def run_dir_name(strategy: str, seed: int) -> str:
    safe = "".join(c if c.isalnum() or c in "-_." else "_" for c in strategy)
    return f"{safe}__seed{seed}"


def load_run_records(run_dir) -> list[dict]:
    path = Path(run_dir) / "steps.jsonl"
    if not path.exists():
        raise FileNotFoundError(f"no steps.jsonl in {run_dir}")
    return read_step_stream(path)
