"""Command-line entry point: ``vrfb-topopt {optimize,evaluate,sweep,gradcheck}``.

Every command writes into one run directory (``--out``): the effective
configuration (``config.cfg``), its CSV/VTK/snapshot outputs and
``manifest.json``. Config keys can also be overridden through environment
variables named ``VRFB_<key>``.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .config import CaseConfig, ConfigError, dump_config, parse_config, parse_config_text
from .flowfields import (FieldKind, ReferenceFieldSpec, generate_reference, report, solve_operating_point,
                         sweep, write_reports)
from .geometry import Grid, build_grid
from .topopt import DensityField, HelmholtzFilter, filter_radius, gradcheck, optimize
from .vtkio import export_vtk, read_snapshot

log = logging.getLogger("vrfb_topopt")

GRADCHECK_TOL = 1e-4
DEFAULT_FLOWRATES = (1e-6, 5e-6, 10e-6, 15e-6)

EXIT_OK, EXIT_FAILED, EXIT_USAGE = 0, 1, 2


@dataclass
class RunManifest:
    command: list
    config_hash: str
    version: str = __version__
    started: str = ""
    finished: str = ""
    status: int = EXIT_OK
    iterations: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def write(self, out_dir: Path) -> Path:
        missing = [f for f in self.outputs if not (out_dir / f).is_file()]
        if missing:
            raise FileNotFoundError(f"manifest lists missing outputs: {missing}")
        path = out_dir / "manifest.json"
        path.write_text(json.dumps(asdict(self), indent=2) + "\n")
        return path


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


class UsageError(Exception):
    pass


# -- design resolution ------------------------------------------------------------------

def _latest_snapshot(run_dir: Path) -> Path:
    snaps = sorted(run_dir.glob("density_*.bin"))
    if not snaps:
        raise UsageError(f"no density snapshots in {run_dir}")
    return snaps[-1]


def load_design(name: str, grid: Grid, config: CaseConfig, run_dir: Path | None = None) -> DensityField:
    """``parallel``, ``interdigitated``, ``optimized`` (last snapshot of ``run_dir``) or ``file:<path>``."""
    if name in (k.value for k in FieldKind):
        return generate_reference(ReferenceFieldSpec(name, thickness=grid.t_c), grid)
    filt = HelmholtzFilter(grid, filter_radius(grid, config))
    if name == "optimized":
        if run_dir is None:
            raise UsageError("--design optimized needs --run pointing at an optimize output directory")
        path = _latest_snapshot(run_dir)
    elif name.startswith("file:"):
        path = Path(name[5:])
        if path.is_dir():
            path = _latest_snapshot(path)
    else:
        raise UsageError(f"unknown design {name!r}")
    if not path.is_file():
        raise UsageError(f"design file {path} not found")
    rho = np.load(path) if path.suffix == ".npy" else read_snapshot(path).rho
    if rho.shape != filt.shape:
        raise UsageError(f"design {path} has shape {rho.shape}, the design layer is {filt.shape}")
    return DensityField.from_rho(rho, filt)


def export_fields(out_dir: Path, grid: Grid, density: DensityField, flow, electro) -> list:
    """Whole-domain fields to ``fields.vtk``, electrode-only fields to ``electrode.vtk``."""
    spacing = (grid.hx, grid.hy, float(grid.hz[0]))
    nze = grid.nz_electrode
    rho = np.ones(grid.shape)
    rho[:, :, nze:] = density.filtered
    export_vtk(out_dir / "fields.vtk", {"rho_filtered": rho, "p": flow.p, "u": flow.cell_velocity(),
                                        "c2": electro.c2, "c3": electro.c3},
               spacing, z_edges=grid.z_edges, binary=True)
    export_vtk(out_dir / "electrode.vtk", {"phi_s": electro.phi_s, "phi_e": electro.phi_e, "j": electro.j,
                                           "eta": electro.eta, "c3s": electro.c3s},
               spacing, z_edges=grid.z_edges[: nze + 1], binary=True)
    return ["fields.vtk", "electrode.vtk"]


# -- commands -----------------------------------------------------------------------------

def cmd_optimize(args, cfg: CaseConfig, grid: Grid, out: Path, manifest: RunManifest):
    resume = None
    if args.resume:
        resume = Path(args.resume)
        if resume.is_dir():
            resume = _latest_snapshot(resume)
    last = {}

    def keep(it, res):
        last["res"] = res

    density, trace = optimize(grid, cfg, out_dir=out, resume=resume, callback=keep)
    manifest.iterations = {"optimization": len(trace.records), "converged": trace.converged}
    if "res" in last:
        res = last["res"]
        manifest.iterations["final_newton"] = res.electro.iterations
        manifest.outputs += export_fields(out, grid, density, res.flow, res.electro)
    manifest.outputs += sorted(p.name for p in out.glob("density_*")) + ["trace.csv"]
    first, final = trace.records[0], trace.records[-1]
    print(f"iterations {len(trace.records)}  F {first.F:.6g} -> {final.F:.6g}  converged {trace.converged}")
    return EXIT_OK


def cmd_evaluate(args, cfg: CaseConfig, grid: Grid, out: Path, manifest: RunManifest):
    if len(args.design) != 1:
        raise UsageError("evaluate takes exactly one --design")
    name = args.design[0]
    density = load_design(name, grid, cfg, args.run)
    flowrate = args.flowrate[0] if args.flowrate else None
    flow, electro = solve_operating_point(density, grid, cfg, flowrate=flowrate, dp=args.pressure_drop)
    rep = report(name, cfg, flow, electro, grid)
    write_reports(out / "evaluate.csv", [rep])
    manifest.outputs.append("evaluate.csv")
    manifest.iterations = {"newton": electro.iterations}
    if args.vtk:
        manifest.outputs += export_fields(out, grid, density, flow, electro)
    print((out / "evaluate.csv").read_text(), end="")
    return EXIT_OK


def cmd_sweep(args, cfg: CaseConfig, grid: Grid, out: Path, manifest: RunManifest):
    designs = {name: load_design(name, grid, cfg, args.run) for name in args.design}
    currents = args.current or [cfg.I]
    porosities = args.porosity or [cfg.eps]
    flowrates = args.flowrate or list(DEFAULT_FLOWRATES)
    points = [(I, eps, Q) for eps in porosities for I in currents for Q in flowrates]
    reports = sweep(designs, points, grid, cfg, csv_path=out / "sweep.csv")
    manifest.outputs.append("sweep.csv")
    failed = sum(r is None for r in reports)
    manifest.iterations = {"cells": len(reports), "failed": failed}
    print((out / "sweep.csv").read_text(), end="")
    return EXIT_FAILED if failed else EXIT_OK


def cmd_gradcheck(args, cfg: CaseConfig, grid: Grid, out: Path, manifest: RunManifest):
    res = gradcheck(grid, cfg, n_cells=args.cells, step=args.step, seed=args.seed)
    with open(out / "gradcheck.csv", "w") as fh:
        fh.write("i,j,k,adjoint,finite_difference,rel_error\n")
        for cell, a, f, e in zip(res.cells, res.adjoint, res.finite_difference, res.rel_error):
            fh.write(",".join(map(str, cell)) + f",{float(a)!r},{float(f)!r},{float(e)!r}\n")
    manifest.outputs.append("gradcheck.csv")
    manifest.iterations = {"cells": len(res.cells)}
    print(f"max relative error {res.max_rel_error:.3e}")
    return EXIT_OK if res.max_rel_error < GRADCHECK_TOL else EXIT_FAILED


COMMANDS = {"optimize": cmd_optimize, "evaluate": cmd_evaluate, "sweep": cmd_sweep, "gradcheck": cmd_gradcheck}


def _operating_flags(p, many=False):
    nargs = "+" if many else None
    p.add_argument("--current", type=float, nargs=nargs, help="applied current(s), A")
    p.add_argument("--porosity", type=float, nargs=nargs, help="electrode porosity (porosities)")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="key = value case file (defaults when omitted)")
    common.add_argument("--out", type=Path, default=Path("run"), help="run directory (default: run)")
    common.add_argument("--threads", type=int, default=1, help="BLAS threads (default 1, serial)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="vrfb-topopt", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", parents=[common], help="density-based flow-field optimization")
    _operating_flags(p)
    p.add_argument("--resume", help="snapshot file, or a run directory to resume from its last snapshot")

    design_help = "parallel | interdigitated | optimized | file:<snapshot or .npy>"
    p = sub.add_parser("evaluate", parents=[common], help="one design at one operating point")
    p.add_argument("--design", action="append", default=None, help=design_help)
    p.add_argument("--flowrate", type=float, nargs=1, help="target flow rate, m^3/s")
    p.add_argument("--pressure-drop", type=float, help="pressure drop, Pa (instead of --flowrate)")
    p.add_argument("--run", type=Path, help="optimize output directory for --design optimized")
    p.add_argument("--vtk", action="store_true", help="also write fields.vtk and electrode.vtk")
    _operating_flags(p)

    p = sub.add_parser("sweep", parents=[common], help="designs x operating points to sweep.csv")
    p.add_argument("--design", action="append", default=None, help=design_help + " (repeatable)")
    p.add_argument("--flowrate", type=float, nargs="+", help="flow rates, m^3/s (default 1, 5, 10, 15 mL/s)")
    p.add_argument("--run", type=Path, help="optimize output directory for --design optimized")
    _operating_flags(p, many=True)

    p = sub.add_parser("gradcheck", parents=[common], help="adjoint against central differences")
    p.add_argument("--cells", type=int, default=10)
    p.add_argument("--step", type=float, default=1e-5)
    p.add_argument("--seed", type=int)
    _operating_flags(p)
    return parser


def load_case(args) -> CaseConfig:
    """Config file (or defaults) plus environment overrides; scalar --current/--porosity on top."""
    cfg = parse_config(args.config) if args.config is not None else parse_config_text("", dict(os.environ))
    changes = {}
    for flag, key in (("current", "I"), ("porosity", "eps")):
        value = getattr(args, flag)
        if isinstance(value, float):
            changes[key] = value
    return cfg.replace(**changes) if changes else cfg


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    if getattr(args, "design", None) is None:
        args.design = ["parallel"] if args.command == "evaluate" else ["parallel", "interdigitated"]
    try:
        cfg = load_case(args)
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        (out / "config.cfg").write_text(dump_config(cfg))
    except (ConfigError, OSError) as exc:
        print(f"vrfb-topopt: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    manifest = RunManifest(command=["vrfb-topopt"] + list(sys.argv[1:] if argv is None else argv),
                           config_hash=cfg.hash(), started=_now(), outputs=["config.cfg"])
    t0 = time.perf_counter()
    try:
        with threadpool_limits(limits=args.threads):
            status = COMMANDS[args.command](args, cfg, build_grid(cfg), out, manifest)
    except UsageError as exc:
        print(f"vrfb-topopt: error: {exc}", file=sys.stderr)
        status = EXIT_USAGE
    except Exception as exc:  # noqa: BLE001 - report solver failures as a status, not a traceback
        log.debug("command failed", exc_info=True)
        print(f"vrfb-topopt: {args.command} failed: {exc}", file=sys.stderr)
        status = EXIT_FAILED
    manifest.status = status
    manifest.finished = _now()
    manifest.iterations["wall_seconds"] = round(time.perf_counter() - t0, 3)
    manifest.outputs = [f for f in dict.fromkeys(manifest.outputs) if (out / f).is_file()]
    manifest.write(out)
    return status


if __name__ == "__main__":
    sys.exit(main())
