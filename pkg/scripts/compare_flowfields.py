"""Pressure drop, objective and mean |eta| of the reference and optimized designs.

Usage: python scripts/compare_flowfields.py RUN_DIR [OUT_DIR]

RUN_DIR is an optimize output directory. Its config.cfg fixes the grid, and the
designs are evaluated at 1, 5, 10 and 15 mL/s.
"""
import csv
import sys
from pathlib import Path

from vrfb_topopt.cli import main

run_dir = Path(sys.argv[1])
out = Path(sys.argv[2]) if len(sys.argv) > 2 else run_dir / "compare"
status = main(["sweep", "--config", str(run_dir / "config.cfg"), "--out", str(out),
               "--run", str(run_dir), "--design", "parallel", "--design", "interdigitated",
               "--design", "optimized", "--flowrate", "1e-6", "5e-6", "1e-5", "1.5e-5"])
with open(out / "sweep.csv") as fh:
    for row in csv.DictReader(fh):
        print(f"{row['design']:>15} Q={float(row['Q']) * 1e6:5.1f} mL/s  dp={float(row['dp']):9.2f} Pa  "
              f"F={float(row['F']):8.3f}  |eta|={float(row['mean_abs_eta']):.5f} V  {row['status']}")
sys.exit(status)
