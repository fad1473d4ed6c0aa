"""Reference flow fields, design evaluation and operating-point sweeps.

Reference patterns are rasterized in cell-index space: a channel of width
``w`` occupies ``max(1, round(w / h))`` cells and channels repeat every
``round(pitch / h)`` cells, so the pattern stays regular on coarse grids.
Inlet and outlet manifolds are one channel wide along the x0 and x1 edges.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import asdict, dataclass
from enum import Enum
from pathlib import Path

import numpy as np
from scipy import ndimage

from .config import CaseConfig
from .electrochem import solve_electrochem
from .flow import BrinkmanOperator, solve_flow, solve_flow_at_rate
from .geometry import Grid, Patch
from .topopt import DensityField, objective

log = logging.getLogger(__name__)


class FieldKind(str, Enum):
    PARALLEL = "parallel"
    INTERDIGITATED = "interdigitated"


class FlowFieldError(ValueError):
    pass


@dataclass(frozen=True)
class ReferenceFieldSpec:
    kind: FieldKind
    width: float = 3.0e-3
    pitch: float = 9.0e-3
    thickness: float = 3.0e-3
    manifold_width: float = 3.0e-3

    def __post_init__(self):
        if min(self.width, self.pitch, self.thickness, self.manifold_width) <= 0:
            raise FlowFieldError("channel width, pitch and thickness must be positive")
        if self.pitch <= self.width:
            raise FlowFieldError("channel pitch must exceed the channel width")
        object.__setattr__(self, "kind", FieldKind(self.kind))


def _cells(length: float, h: float) -> int:
    return max(1, int(round(length / h)))


def channel_count(n_cells: int, width_cells: int, pitch_cells: int) -> int:
    return (n_cells - width_cells) // pitch_cells + 1


def generate_reference(spec: ReferenceFieldSpec, grid: Grid) -> DensityField:
    """Binary density raster (1 = channel) for a parallel or interdigitated field."""
    if abs(spec.thickness - grid.t_c) > 1e-9 * grid.t_c:
        raise FlowFieldError(f"channel thickness {spec.thickness} differs from the design-layer thickness {grid.t_c}")
    w = _cells(spec.width, grid.hy)
    p = _cells(spec.pitch, grid.hy)
    m = _cells(spec.manifold_width, grid.hx)
    if p <= w:
        raise FlowFieldError("channel pitch collapses onto the channel width at this resolution")
    if w > grid.ny or 2 * m >= grid.nx:
        raise FlowFieldError("reference pattern does not fit in the footprint")
    n = channel_count(grid.ny, w, p)
    span = (n - 1) * p + w
    offset = (grid.ny - span) // 2
    plan = np.zeros((grid.nx, grid.ny))
    plan[:m, :] = 1.0
    plan[grid.nx - m:, :] = 1.0
    gap = p - w  # dead-end clearance, one rib width
    for k in range(n):
        rows = slice(offset + k * p, offset + k * p + w)
        if spec.kind is FieldKind.PARALLEL:
            plan[:, rows] = 1.0
        elif k % 2 == 0:
            plan[: grid.nx - m - gap, rows] = 1.0
        else:
            plan[m + gap:, rows] = 1.0
    if spec.kind is FieldKind.INTERDIGITATED and grid.nx - 2 * m - gap <= 0:
        raise FlowFieldError("interdigitated fingers do not fit between the manifolds")
    rho = np.repeat(plan[:, :, None], grid.nz_channel, axis=2)
    return DensityField.binary(rho)


# -- connectivity -------------------------------------------------------------------

def _port_cells(grid: Grid, patch: Patch) -> np.ndarray:
    """Design-layer cells adjacent to a patch, as a boolean mask."""
    mask = np.zeros((grid.nx, grid.ny, grid.nz_channel), dtype=bool)
    ze = grid.nz_electrode
    sel = {"x0": (0, None), "x1": (-1, None), "y0": (None, 0), "y1": (None, -1)}
    for face, (i, j) in sel.items():
        hit = grid.patches[face][:, ze:] == patch
        if not hit.any():
            continue
        if i is not None:
            mask[i][hit] = True
        else:
            mask[:, j][hit] = True
    return mask


@dataclass(frozen=True)
class Connectivity:
    through: bool
    inlet_branches: int
    outlet_branches: int
    labels: np.ndarray


def _branches(fluid2d: np.ndarray, comp2d: np.ndarray) -> int:
    """Channel branches of one component: maximal channel runs across the mid column."""
    col = comp2d[fluid2d.shape[0] // 2]
    runs = np.diff(np.concatenate([[0], col.astype(int), [0]]))
    return int(np.sum(runs == 1))


def connectivity(density, grid: Grid, threshold: float = 0.5) -> Connectivity:
    """Flood fill of the thresholded fluid domain from inlet to outlet (6-connectivity)."""
    rho = getattr(density, "filtered", density)
    fluid = np.asarray(rho) >= threshold
    labels, _ = ndimage.label(fluid)
    inl = set(np.unique(labels[_port_cells(grid, Patch.INLET) & fluid])) - {0}
    out = set(np.unique(labels[_port_cells(grid, Patch.OUTLET) & fluid])) - {0}
    plan = fluid.any(axis=2)
    in2d = np.isin(labels, list(inl)).any(axis=2) if inl else np.zeros_like(plan)
    out2d = np.isin(labels, list(out)).any(axis=2) if out else np.zeros_like(plan)
    return Connectivity(bool(inl & out), _branches(plan, in2d), _branches(plan, out2d), labels)


# -- evaluation -----------------------------------------------------------------

@dataclass(frozen=True)
class PerformanceReport:
    design: str
    I: float
    eps: float
    Q: float
    dp: float
    mean_abs_eta: float
    F: float
    polarization_loss: float
    pumping_loss: float
    P_loss: float

    @classmethod
    def build(cls, design, I, eps, Q, dp, mean_abs_eta, F) -> "PerformanceReport":
        pol = I * mean_abs_eta
        pump = Q * dp
        return cls(design, I, eps, Q, dp, mean_abs_eta, F, pol, pump, pol + pump)


REPORT_COLUMNS = ("design", "I", "eps", "Q", "dp", "mean_abs_eta", "F", "polarization_loss", "pumping_loss",
                  "P_loss", "status")


def solve_operating_point(density, grid: Grid, config: CaseConfig, flowrate: float | None = None,
                          dp: float | None = None, operator: BrinkmanOperator | None = None):
    """Flow and electrochemistry at one operating point; returns ``(flow, electro)``.

    Exactly one of ``flowrate`` (m^3/s, matched by secant on the inlet
    pressure) or ``dp`` (Pa) may be given; neither means ``config.p_in``.
    The current and porosity are taken from ``config``.
    """
    if flowrate is not None and dp is not None:
        raise ValueError("give either a flow rate or a pressure drop, not both")
    if flowrate is not None:
        flow = solve_flow_at_rate(grid, density, config, flowrate, operator=operator)
    else:
        p_in = config.p_in if dp is None else config.p_out + dp
        flow = solve_flow(grid, density, config, operator=operator, p_in=p_in)
    return flow, solve_electrochem(grid, flow, config)


def report(name: str, config: CaseConfig, flow, electro, grid: Grid) -> PerformanceReport:
    return PerformanceReport.build(name, config.I, config.eps, flow.Q, flow.dp, electro.mean_abs_eta(),
                                   objective(electro, grid))


def evaluate_design(density, grid: Grid, config: CaseConfig, flowrate: float | None = None,
                    dp: float | None = None, name: str = "design",
                    operator: BrinkmanOperator | None = None) -> PerformanceReport:
    flow, electro = solve_operating_point(density, grid, config, flowrate, dp, operator)
    return report(name, config, flow, electro, grid)


def write_reports(path, rows):
    """CSV with the fixed column order of ``REPORT_COLUMNS``."""
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(REPORT_COLUMNS)
        for row in rows:
            if isinstance(row, PerformanceReport):
                d = asdict(row)
                wr.writerow([d["design"]] + [repr(float(d[c])) for c in REPORT_COLUMNS[1:-1]] + ["ok"])
            else:
                wr.writerow(row)
    return Path(path)


def sweep(designs: dict, operating_points: list, grid: Grid, config: CaseConfig, csv_path=None):
    """Evaluate every design at every ``(I, eps, Q)`` point.

    A failed cell is logged and recorded as a row with ``status`` set to the
    error; the sweep continues.
    """
    if not designs or not operating_points:
        raise ValueError("sweep needs at least one design and one operating point")
    reports, rows = [], []
    for I, eps, Q in operating_points:
        cfg = config.replace(I=float(I), eps=float(eps))
        operator = BrinkmanOperator(grid, cfg.mu)
        for name, density in designs.items():
            try:
                rep = evaluate_design(density, grid, cfg, flowrate=Q, name=name, operator=operator)
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the sweep
                log.warning("sweep cell %s (I=%g, eps=%g, Q=%g) failed: %s", name, I, eps, Q, exc)
                reports.append(None)
                rows.append([name, repr(float(I)), repr(float(eps)), repr(float(Q))] + [""] * 6
                            + [f"error: {exc}"])
                continue
            reports.append(rep)
            rows.append(rep)
    if csv_path is not None:
        write_reports(csv_path, rows)
    return reports
