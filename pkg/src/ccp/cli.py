"""Command-line entry point: ``ccp generate | run | baseline | sweep | report``."""

from __future__ import annotations

import argparse
import csv
import logging
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .engine import run_full_pipeline
from .propagation import BatchContractError
from .reporting import (
    REPORT_FILE,
    ReportError,
    aggregate,
    collect_series,
    read_report,
    write_aggregate,
    write_run,
)
from .scenarios import (
    SCENARIOS,
    UNLABELED,
    ScenarioDataset,
    DatasetContractError,
    load_dataset,
    make_scenario,
    save_dataset,
)
from .subsampling import DegenerateDistributionError

log = logging.getLogger("ccp")

EXIT_OK, EXIT_CONTRACT, EXIT_USAGE = 0, 1, 2
CONTRACT_ERRORS = (DatasetContractError, BatchContractError, DegenerateDistributionError)
PERTURBED = ("few-label", "open-set", "noisy-label", "imbalance-U", "imbalance-L")


def full_grid() -> list[tuple[str, int]]:
    return [("base", 1)] + [(s, v) for s in PERTURBED for v in (1, 2, 3)]


def test_split_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.stem + ".test.csv")


def _build_config(args) -> cfgmod.ExperimentConfig:
    cfg = cfgmod.load(args.config) if getattr(args, "config", None) else cfgmod.ExperimentConfig()
    if getattr(args, "scenario", None):
        cfg.scenario = args.scenario
    if getattr(args, "severity", None):
        cfg.severity = args.severity
    if getattr(args, "seed", None) is not None:
        cfg.seeds = [args.seed]
    if getattr(args, "out", None):
        cfg.out = args.out
    if getattr(args, "dataset", None):
        if not Path(args.dataset).is_file():
            raise cfgmod.ConfigError(f"dataset file not found: {args.dataset}")
        cfg.dataset = args.dataset
    run = cfg.run
    if getattr(args, "single_iteration", False):
        run = replace(run, single_iteration=True)
    if getattr(args, "no_subsample", False):
        run = replace(run, subsample=False)
    if getattr(args, "no_pretrain", False):
        run = replace(run, pretrain=False)
    cfg.run = run
    cfg.__post_init__()
    return cfg


def _dataset(cfg: cfgmod.ExperimentConfig, seed: int, scenario: str, severity: int):
    if cfg.dataset is None:
        return make_scenario(cfg.spec(seed, scenario, severity))
    ds = load_dataset(cfg.dataset, num_classes=cfg.synthetic.get("num_classes"))
    test = test_split_path(cfg.dataset)
    if not test.is_file():
        raise cfgmod.ConfigError(f"held-out split not found next to dataset: {test}")
    held = load_dataset(test, num_classes=ds.num_classes)
    ds.x_test, ds.y_test = held.x, held.true_label
    return ds


def run_cell(cfg: cfgmod.ExperimentConfig, scenario: str, severity: int, seed: int, out_dir, baseline_only=False) -> dict:
    ds = _dataset(cfg, seed, scenario, severity)
    run = cfg.run_config(scenario)
    result = run_full_pipeline(ds, run, seed, baseline_only=baseline_only)
    return write_run(out_dir, result, scenario, severity, seed, ds.num_classes)


def cmd_generate(args) -> int:
    cfg = _build_config(args)
    seed = cfg.seeds[0]
    ds = make_scenario(cfg.spec(seed))
    out = Path(args.out or ".")
    if out.suffix != ".csv":
        out = out / f"{cfg.scenario}-{cfg.severity}-seed{seed}.csv"
    out.parent.mkdir(parents=True, exist_ok=True)
    save_dataset(ds, out)
    n_test = ds.y_test.shape[0]
    held = ScenarioDataset(
        x=ds.x_test,
        given_label=np.full(n_test, UNLABELED),
        true_label=ds.y_test,
        is_ood=np.zeros(n_test, dtype=bool),
        num_classes=ds.num_classes,
    )
    save_dataset(held, test_split_path(out))
    print(f"wrote {out} ({ds.x.shape[0]} rows) and {test_split_path(out)}")
    return EXIT_OK


def _run(args, baseline_only: bool) -> int:
    cfg = _build_config(args)
    root = Path(cfg.out)
    for seed in cfg.seeds:
        rep = run_cell(cfg, cfg.scenario, cfg.severity, seed, root / f"seed_{seed}", baseline_only)
        line = f"{cfg.scenario} severity={cfg.severity} seed={seed} baseline={rep['baseline_test_acc']:.4f}"
        if "ccp_test_acc" in rep:
            line += f" ccp={rep['ccp_test_acc']:.4f}"
        print(line)
    return EXIT_OK


def cmd_run(args) -> int:
    return _run(args, baseline_only=False)


def cmd_baseline(args) -> int:
    return _run(args, baseline_only=True)


def parse_cells(text: str | None) -> list[tuple[str, int]]:
    if not text:
        return full_grid()
    cells = []
    for item in text.split(","):
        scen, _, sev = item.partition(":")
        if scen not in SCENARIOS or sev not in ("1", "2", "3"):
            raise cfgmod.ConfigError(f"bad grid cell {item!r}; expected <scenario>:<1|2|3>")
        cells.append((scen, int(sev)))
    return cells


def _sweep_job(job):
    cfg_text, scen, sev, seed, out_dir = job
    cfg = cfgmod.loads(cfg_text)
    try:
        return run_cell(cfg, scen, sev, seed, out_dir), None
    except CONTRACT_ERRORS + (ValueError,) as exc:
        return None, {"scenario": scen, "severity": sev, "seed": seed, "error": f"{type(exc).__name__}: {exc}"}


def sweep(cfg: cfgmod.ExperimentConfig, cells, workers: int = 1) -> dict:
    root = Path(cfg.out)
    text = cfg.dumps()
    jobs = [(text, s, v, seed, root / f"{s}-{v}" / f"seed_{seed}") for s, v in cells for seed in cfg.seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_sweep_job, jobs))
    else:
        results = [_sweep_job(j) for j in jobs]
    reports = [r for r, _ in results if r is not None]
    failed = [f for _, f in results if f is not None]
    agg = aggregate(reports, failed)
    write_aggregate(root, agg)
    return agg


def sweep_workers() -> int:
    raw = os.environ.get("CCP_THREADS")
    if raw:
        try:
            return max(1, int(raw))
        except ValueError as exc:
            raise cfgmod.ConfigError(f"CCP_THREADS must be an integer, got {raw!r}") from exc
    return min(4, os.cpu_count() or 1)


def cmd_sweep(args) -> int:
    cfg = _build_config(args)
    agg = sweep(cfg, parse_cells(args.cells), sweep_workers())
    for row in agg["cells"]:
        if row["status"] != "ok":
            print(f"{row['scenario']:>12} {row['severity']}  FAILED  {row['error']}")
            continue
        flag = " below baseline" if row["below_baseline"] else ""
        print(
            f"{row['scenario']:>12} {row['severity']}  baseline={row['median_baseline']:.4f}"
            f"  ccp={row['median_ccp']:.4f}{flag}"
        )
    return EXIT_OK


def cmd_report(args) -> int:
    out = Path(args.out) if args.out else None
    acc, strength = collect_series(args.run_dirs)
    reports = []
    for d in args.run_dirs:
        d = Path(d)
        if not d.exists():
            raise ReportError(f"{d}: no such run directory")
        files = [d] if d.is_file() and d.name == REPORT_FILE else sorted(d.rglob(REPORT_FILE))
        reports.extend(read_report(f) for f in files)
    agg = aggregate(reports)
    if out is None:
        w = csv.writer(sys.stdout, lineterminator="\n")
        w.writerow(["run", "iteration", "pseudo_label_accuracy"])
        w.writerows(acc)
        return EXIT_OK
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "accuracy_series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "iteration", "pseudo_label_accuracy"])
        w.writerows(acc)
    with open(out / "strength_series.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["run", "iteration", "mean_strength_correct", "mean_strength_incorrect"])
        w.writerows(strength)
    write_aggregate(out, agg)
    print(f"{len(reports)} runs, {len(acc)} iteration rows -> {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ccp", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, dataset=True):
        sp.add_argument("--config", help="JSON experiment config")
        sp.add_argument("--seed", type=int)
        sp.add_argument("--out")
        sp.add_argument("--scenario", choices=SCENARIOS)
        sp.add_argument("--severity", type=int, choices=(1, 2, 3))
        if dataset:
            sp.add_argument("--dataset", help="delimited-text dataset instead of synthetic data")
            sp.add_argument("--single-iteration", action="store_true")
            sp.add_argument("--no-subsample", action="store_true")
            sp.add_argument("--no-pretrain", action="store_true")

    g = sub.add_parser("generate", help="write a synthetic scenario dataset")
    common(g, dataset=False)
    g.set_defaults(func=cmd_generate)
    for name, fn in (("run", cmd_run), ("baseline", cmd_baseline)):
        r = sub.add_parser(name, help=f"{name} one scenario for every configured seed")
        common(r)
        r.set_defaults(func=fn)
    s = sub.add_parser("sweep", help="run a grid of scenario cells and aggregate medians")
    common(s)
    s.add_argument("--cells", help="comma list of scenario:severity (default: full grid)")
    s.set_defaults(func=cmd_sweep)
    rp = sub.add_parser("report", help="collect plot-ready series from run directories")
    rp.add_argument("run_dirs", nargs="*")
    rp.add_argument("--out")
    rp.set_defaults(func=cmd_report)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except CONTRACT_ERRORS as exc:
        print(f"contract violation: {exc}", file=sys.stderr)
        return EXIT_CONTRACT
    except (cfgmod.ConfigError, ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
