"""Power loss of the interdigitated and optimized designs against applied current.

Usage: python scripts/power_loss_sweep.py RUN_DIR [OUT_DIR]

Porosity 0.68, currents 2 to 10 A, flow rates 1 and 15 mL/s.
"""
import sys
from pathlib import Path

from vrfb_topopt.cli import main

run_dir = Path(sys.argv[1])
out = Path(sys.argv[2]) if len(sys.argv) > 2 else run_dir / "power_loss"
sys.exit(main(["sweep", "--config", str(run_dir / "config.cfg"), "--out", str(out),
               "--run", str(run_dir), "--design", "interdigitated", "--design", "optimized",
               "--porosity", "0.68", "--current", "2", "4", "6", "8", "10",
               "--flowrate", "1e-6", "1.5e-5"]))
