"""Run all three ablation axes against one trained teacher and print the tables.

    python3 scripts/run_ablation.py --out runs/ablation [--set KEY=VALUE ...]
"""

import argparse
import csv
from pathlib import Path

from distillkit.experiment import AXES, format_table, load_datasets, load_experiment, run_ablation, run_teacher


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--out", default="runs/ablation")
    ap.add_argument("--axis", choices=AXES, action="append", help="default: every axis")
    args = ap.parse_args()

    cfg = load_experiment(args.config, args.overrides, out=args.out)
    datasets = load_datasets(cfg)
    run_teacher(cfg, datasets)
    for axis in args.axis or AXES:
        rows = run_ablation(cfg, axis, datasets=datasets, progress=lambda m: print(m, flush=True))
        text, table = format_table(rows, cfg.train.seeds)
        with (Path(cfg.out_dir) / f"ablate-{axis}" / "table.csv").open("w", newline="") as fh:
            csv.writer(fh).writerows(table)
        print(f"\n[{axis}]\n{text}\n")


if __name__ == "__main__":
    main()
