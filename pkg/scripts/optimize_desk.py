"""Desk-scale optimization run on the 48x48 grid used by the acceptance suite.

Usage: python scripts/optimize_desk.py [OUT_DIR] [key=value ...]
"""
import sys
import tempfile
from pathlib import Path

from vrfb_topopt.cli import main
from vrfb_topopt.config import CaseConfig, dump_config

DESK = dict(nx=48, ny=48, nz_channel=2, nz_electrode=4, max_iter=100)


def run(out: Path, overrides: list[str]) -> int:
    cfg = CaseConfig(**DESK)
    text = dump_config(cfg) + "".join(f"{kv.replace('=', ' = ', 1)}\n" for kv in overrides)
    with tempfile.NamedTemporaryFile("w", suffix=".cfg", delete=False) as fh:
        fh.write(text)
    return main(["optimize", "--config", fh.name, "--out", str(out), "-v"])


if __name__ == "__main__":
    out = Path(sys.argv[1]) if len(sys.argv) > 1 else Path("runs/desk")
    sys.exit(run(out, sys.argv[2:]))
