"""Run the full desk grid (16 cells x seeds) and print the median table.

    python scripts/run_grid.py --config configs/desk_grid.json --out runs/grid

Equivalent to ``ccp sweep``; parallelism follows CCP_THREADS.
"""

import argparse
import sys
import time

from ccp import cli
from ccp import config as cfgmod


def main() -> int:
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", default="configs/desk_grid.json")
    p.add_argument("--out", default=None)
    p.add_argument("--cells", default=None, help="comma list of scenario:severity")
    args = p.parse_args()
    cfg = cfgmod.load(args.config)
    if args.out:
        cfg.out = args.out
    start = time.perf_counter()
    agg = cli.sweep(cfg, cli.parse_cells(args.cells), cli.sweep_workers())
    print(f"{'cell':>16}  {'baseline':>8}  {'ccp':>8}  {'delta':>7}")
    for row in agg["cells"]:
        name = f"{row['scenario']}-{row['severity']}"
        if row["status"] != "ok":
            print(f"{name:>16}  failed: {row['error']}")
            continue
        b, c = row["median_baseline"], row["median_ccp"]
        print(f"{name:>16}  {b:8.4f}  {c:8.4f}  {100 * (c - b):+7.2f}")
    print(f"{time.perf_counter() - start:.0f}s, results in {cfg.out}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
