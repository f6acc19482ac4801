"""Desk-scale efficacy run: teacher, then plain / SKR-only / SKR+PEA students
for each seed. Prints the per-seed table and the pass/fail verdicts.

    python3 scripts/run_efficacy.py --out runs/efficacy [--set KEY=VALUE ...]
"""

import argparse
import json
import logging
import statistics
from pathlib import Path

from distillkit.experiment import load_experiment, run_efficacy


def main():
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--config", type=Path)
    ap.add_argument("--set", dest="overrides", action="append", default=[])
    ap.add_argument("--out", default="runs/efficacy")
    args = ap.parse_args()
    logging.basicConfig(level=logging.WARNING)

    cfg = load_experiment(args.config, args.overrides, out=args.out)
    res = run_efficacy(cfg, progress=lambda m: print(m, flush=True))
    print(f"\n{'seed':>6} {'plain':>8} {'SKR':>8} {'SKR+PEA':>8}")
    for s, a, b, c in zip(cfg.train.seeds, res.plain, res.skr, res.skr_pea):
        print(f"{s:>6} {a:8.2f} {b:8.2f} {c:8.2f}")
    print(f"{'median':>6} {statistics.median(res.plain):8.2f} {statistics.median(res.skr):8.2f} "
          f"{statistics.median(res.skr_pea):8.2f}")
    print(f"teacher {res.teacher_miou:.2f}, gain {res.gain:+.2f}, "
          f"SKR+PEA >= SKR in {res.pea_wins}/{len(res.skr)} seeds, {res.seconds:.0f} s")
    (Path(cfg.out_dir) / "efficacy.json").write_text(json.dumps(res.to_dict(), indent=2))


if __name__ == "__main__":
    main()
