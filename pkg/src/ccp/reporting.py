"""Metrics, report and trace files, plus sweep aggregation."""

from __future__ import annotations

import csv
import json
import math
import statistics
from pathlib import Path

from .engine import IterationMetrics, PipelineResult

METRICS_FILE = "metrics.csv"
REPORT_FILE = "report.json"
TRACE_FILE = "traces.csv"


class ReportError(ValueError):
    pass


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else repr(v)
    return str(v)


def write_metrics(path, history: list[IterationMetrics]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(IterationMetrics.FIELDS)
        for m in history:
            w.writerow([_fmt(getattr(m, f)) for f in IterationMetrics.FIELDS])


def read_metrics(path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise ReportError(f"{path}: {exc}") from exc
    if not rows or tuple(rows[0]) != IterationMetrics.FIELDS:
        raise ReportError(f"{path}: malformed metrics header")
    out = []
    for n, r in enumerate(rows[1:], start=2):
        if len(r) != len(IterationMetrics.FIELDS):
            raise ReportError(f"{path}: line {n} has {len(r)} fields")
        try:
            rec = {f: float(v) for f, v in zip(IterationMetrics.FIELDS, r)}
        except ValueError as exc:
            raise ReportError(f"{path}: line {n}: {exc}") from exc
        for f in ("iteration", "epochs_run", "p_chosen"):
            rec[f] = int(rec[f])
        out.append(rec)
    return out


def write_traces(path, traces, num_classes: int, history: list[IterationMetrics]) -> None:
    """Rows of ``sample_id,epoch,q_0..q_{K-1}``; epochs are numbered across iterations."""
    offset = {}
    total = 0
    for m in history:
        offset[m.iteration] = total
        total += m.epochs_run
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["sample_id", "epoch"] + [f"q_{k}" for k in range(num_classes)])
        for it, row, epoch, vec in traces:
            w.writerow([row, offset.get(it, 0) + epoch] + [repr(float(v)) for v in vec])


def run_report(result: PipelineResult, scenario: str, severity: int, seed: int) -> dict:
    rep = {
        "scenario": scenario,
        "severity": severity,
        "seed": seed,
        "baseline_test_acc": result.baseline_test_acc,
    }
    if result.ccp_test_acc is not None:
        rep["ccp_test_acc"] = result.ccp_test_acc
        rep["iterations"] = [
            {f: _jsonable(getattr(m, f)) for f in IterationMetrics.FIELDS} for m in result.history
        ]
    return rep


def _jsonable(v):
    if isinstance(v, float) and math.isnan(v):
        return None
    return v


def write_run(out_dir, result: PipelineResult, scenario: str, severity: int, seed: int, num_classes: int) -> dict:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rep = run_report(result, scenario, severity, seed)
    (out_dir / REPORT_FILE).write_text(json.dumps(rep, indent=2, sort_keys=True) + "\n")
    if result.ccp_test_acc is not None:
        write_metrics(out_dir / METRICS_FILE, result.history)
    if result.traces:
        write_traces(out_dir / TRACE_FILE, result.traces, num_classes, result.history)
    return rep


def read_report(path) -> dict:
    path = Path(path)
    try:
        rep = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ReportError(f"{path}: {exc}") from exc
    for key in ("scenario", "severity", "seed", "baseline_test_acc"):
        if key not in rep:
            raise ReportError(f"{path}: missing {key!r}")
    return rep


def aggregate(reports: list[dict], failed: list[dict] | None = None) -> dict:
    """Median baseline / CCP accuracy per (scenario, severity) and a flag where CCP is below."""
    cells: dict[tuple, dict] = {}
    for rep in reports:
        key = (rep["scenario"], rep["severity"])
        c = cells.setdefault(key, {"baseline": [], "ccp": [], "seeds": []})
        c["seeds"].append(rep["seed"])
        c["baseline"].append(rep["baseline_test_acc"])
        if rep.get("ccp_test_acc") is not None:
            c["ccp"].append(rep["ccp_test_acc"])
    rows = []
    for (scen, sev), c in sorted(cells.items()):
        base = statistics.median(c["baseline"])
        ccp = statistics.median(c["ccp"]) if c["ccp"] else None
        rows.append(
            {
                "scenario": scen,
                "severity": sev,
                "seeds": sorted(c["seeds"]),
                "baseline_runs": c["baseline"],
                "ccp_runs": c["ccp"],
                "median_baseline": base,
                "median_ccp": ccp,
                "below_baseline": None if ccp is None else ccp < base,
                "status": "ok",
            }
        )
    for f in failed or []:
        rows.append({"scenario": f["scenario"], "severity": f["severity"], "seeds": [f["seed"]],
                     "status": "failed", "error": f["error"]})
    return {"cells": rows}


AGG_FIELDS = ("scenario", "severity", "median_baseline", "median_ccp", "below_baseline", "status")


def write_aggregate(out_dir, agg: dict) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "aggregate.json").write_text(json.dumps(agg, indent=2, sort_keys=True) + "\n")
    with open(out_dir / "aggregate.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(AGG_FIELDS)
        for row in agg["cells"]:
            w.writerow([_fmt(row.get(f)) if row.get(f) is not None else "" for f in AGG_FIELDS])


def collect_series(run_dirs) -> tuple[list[list], list[list]]:
    """Accuracy and strength series, one row per iteration of every metrics file found."""
    acc_rows, strength_rows = [], []
    for d in run_dirs:
        d = Path(d)
        if d.is_file():
            files = [] if d.name == REPORT_FILE else [d]
        else:
            files = sorted(d.rglob(METRICS_FILE))
        for f in files:
            run = str(f.parent)
            for rec in read_metrics(f):
                acc_rows.append([run, rec["iteration"], _fmt(rec["pseudo_label_accuracy"])])
                strength_rows.append(
                    [run, rec["iteration"], _fmt(rec["mean_strength_correct"]), _fmt(rec["mean_strength_incorrect"])]
                )
    return acc_rows, strength_rows
