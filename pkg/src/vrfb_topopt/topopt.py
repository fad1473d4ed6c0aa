"""Density-method flow-field optimization.

Design variables live on the channel-layer cells. Each iteration filters
the densities with a Helmholtz PDE filter, maps them to an inverse
permeability, solves flow and electrochemistry, evaluates the mean surface
V3+ concentration over the electrode, back-propagates through the discrete
adjoint and takes a sequential-linear-programming step.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import linprog

from .config import CaseConfig
from .electrochem import (ElectrochemError, ElectroState, JacobianLU, mass_transfer_coeff_derivative,
                          solve_electrochem)
from .flow import BrinkmanOperator, FlowState, alpha_fic_derivative, solve_flow
from .geometry import Grid
from .vtkio import export_vtk, read_snapshot, write_snapshot

log = logging.getLogger(__name__)


class OptimizationError(RuntimeError):
    pass


# -- filter ----------------------------------------------------------------------

class HelmholtzFilter:
    """``-r^2 lap(rho_f) + rho_f = rho`` on the design layer with zero-flux walls.

    Discretized as ``(V + r^2 L) rho_f = V rho`` with the finite-volume
    Laplacian ``L``; the matrix is symmetric, so its factor also applies
    the adjoint.
    """

    def __init__(self, grid: Grid, radius: float):
        if radius < 0:
            raise ValueError("filter radius must be nonnegative")
        self.shape = (grid.nx, grid.ny, grid.nz_channel)
        self.radius = float(radius)
        hz = np.asarray(grid.hz[grid.nz_electrode:])
        self.volumes = (grid.hx * grid.hy * hz)[None, None, :] * np.ones(self.shape)
        self._lu = None
        if self.radius == 0.0:
            return
        n = int(np.prod(self.shape))
        idx = np.arange(n).reshape(self.shape)
        h = [np.full(grid.nx, grid.hx), np.full(grid.ny, grid.hy), hz]
        rows, cols, vals = [], [], []
        for a in range(3):
            others = [b for b in range(3) if b != a]
            area = np.ones(self.shape)
            for b in others:
                s = [1, 1, 1]
                s[b] = -1
                area = area * h[b].reshape(s)
            s = [1, 1, 1]
            s[a] = -1
            hc = np.broadcast_to(h[a].reshape(s), self.shape)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a], hi[a] = slice(0, self.shape[a] - 1), slice(1, self.shape[a])
            lo, hi = tuple(lo), tuple(hi)
            g = (area[lo] / (0.5 * hc[lo] + 0.5 * hc[hi])).ravel() * self.radius**2
            P, N = idx[lo].ravel(), idx[hi].ravel()
            rows += [P, N, P, N]
            cols += [P, N, N, P]
            vals += [g, g, -g, -g]
        L = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(n, n))
        self.matrix = (L + sp.diags(self.volumes.ravel())).tocsc()
        self._lu = spla.splu(self.matrix)

    def apply(self, rho):
        rho = np.asarray(rho, dtype=float).reshape(self.shape)
        if self._lu is None:
            return rho.copy()
        out = self._lu.solve((self.volumes * rho).ravel()).reshape(self.shape)
        # the discrete filter is an M-matrix average; clip rounding excursions only
        return np.clip(out, 0.0, 1.0) if rho.min() >= 0 and rho.max() <= 1 else out

    def adjoint(self, g):
        g = np.asarray(g, dtype=float).reshape(self.shape)
        if self._lu is None:
            return g.copy()
        return self.volumes * self._lu.solve(g.ravel()).reshape(self.shape)


def filter_radius(grid: Grid, config: CaseConfig) -> float:
    return config.filter_radius_cells * min(grid.hx, grid.hy)


def pde_filter(rho, grid: Grid, r: float):
    """Filtered density field for radius ``r`` (m)."""
    return HelmholtzFilter(grid, r).apply(rho)


@dataclass(frozen=True, eq=False)
class DensityField:
    rho: np.ndarray
    filtered: np.ndarray
    radius: float

    @classmethod
    def from_rho(cls, rho, filt: HelmholtzFilter) -> "DensityField":
        rho = np.asarray(rho, dtype=float).reshape(filt.shape)
        if rho.min() < 0.0 or rho.max() > 1.0:
            raise ValueError("design densities must lie in [0, 1]")
        return cls(rho.copy(), filt.apply(rho), filt.radius)

    @classmethod
    def binary(cls, rho) -> "DensityField":
        """Unfiltered raster (reference flow fields, thresholded designs)."""
        rho = np.asarray(rho, dtype=float)
        return cls(rho.copy(), rho.copy(), 0.0)

    def thresholded(self, level: float = 0.5) -> "DensityField":
        return DensityField.binary((self.filtered >= level).astype(float))


# -- forward model, objective, adjoint --------------------------------------------

def objective(electro: ElectroState, grid: Grid | None = None) -> float:
    """Electrode-volume average of the surface V3+ concentration (mol/m^3)."""
    return electro.mean_c3s()


@dataclass(eq=False)
class ForwardResult:
    density: DensityField
    flow: FlowState
    electro: ElectroState
    F: float


def forward(grid: Grid, density: DensityField, config: CaseConfig, operator: BrinkmanOperator | None = None,
            initial=None) -> ForwardResult:
    flow = solve_flow(grid, density, config, operator=operator)
    electro = solve_electrochem(grid, flow, config, initial=initial)
    return ForwardResult(density, flow, electro, objective(electro, grid))


def _face_areas(grid: Grid):
    hz = np.asarray(grid.hz)
    return ((grid.hy * hz)[None, None, :], (grid.hx * hz)[None, None, :], grid.hx * grid.hy)


def adjoint_sensitivities(grid: Grid, flow: FlowState, electro: ElectroState, density: DensityField,
                          config: CaseConfig, filt: HelmholtzFilter | None = None) -> np.ndarray:
    """Gradient of the objective with respect to the unfiltered design densities."""
    pr = electro.problem
    cfg = config
    y = electro.y
    _, J = pr.residual(y)
    kin, _ = pr.kinetics(y)
    c2, c3, ps, pe = pr.unpack(y)
    c2e, c3e = c2[pr.ecell], c3[pr.ecell]
    vt = cfg.thermal_voltage
    w = pr.Ve / pr.Ve.sum()

    # electrochemistry adjoint
    dFdy = np.zeros(pr.size)
    g2 = np.zeros(pr.N)
    g3 = np.zeros(pr.N)
    g2[pr.ecell] = w * (kin.c3s_c2 + kin.c3s_eta * vt / c2e)
    g3[pr.ecell] = w * (kin.c3s_c3 - kin.c3s_eta * vt / c3e)
    dFdy[pr.sl["c2"]] = g2
    dFdy[pr.sl["c3"]] = g3
    dFdy[pr.sl["ps"]] = w * kin.c3s_eta
    dFdy[pr.sl["pe"]] = -w * kin.c3s_eta
    try:
        lu = JacobianLU(J)
    except ElectrochemError as exc:
        raise OptimizationError(f"electrochemistry adjoint is singular: {exc}") from exc
    lam = lu.solve(-dFdy, trans="T")
    l2, l3, ls, le = pr.unpack(lam)
    ls = ls.copy()
    ls[pr.pin] = 0.0

    # through the mass-transfer coefficient
    g_km = w * kin.c3s_km + pr.Ve * kin.j_km * ((l3[pr.ecell] - l2[pr.ecell]) / cfg.F - ls + le)
    g_speed = np.zeros(grid.shape)
    g_speed[:, :, : grid.nz_electrode] = (g_km * mass_transfer_coeff_derivative(pr.speed, cfg.u_floor)).reshape(
        pr.eshape)
    vel = flow.cell_velocity()
    speed = np.linalg.norm(vel, axis=-1)
    safe = np.where(speed > 0, speed, 1.0)
    shapes = [flow.ux.shape, flow.uy.shape, flow.uz.shape]
    gu = [np.zeros(s) for s in shapes]
    for a in range(3):
        gc = np.where(speed > 0, g_speed * vel[..., a] / safe, 0.0) * 0.5
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[a], hi[a] = slice(0, -1), slice(1, None)
        gu[a][tuple(lo)] += gc
        gu[a][tuple(hi)] += gc

    # through the advective face fluxes
    areas = _face_areas(grid)
    s2 = pr.t2.flux_sensitivity(c2, l2, shapes)
    s3 = pr.t3.flux_sensitivity(c3, l3, shapes)
    for a in range(3):
        gu[a] += (s2[a] + s3[a]) * areas[a]

    # flow adjoint (symmetric system)
    system = flow.system
    op = system.operator
    gx = np.zeros(op.layout.ntotal)
    gx[: op.layout.nvel] = np.concatenate([g.ravel() for g in gu])
    flu = flow.lu if flow.lu is not None else system.factorize()
    mu_free = flu.solve(gx[op.free])
    mu = op.expand(mu_free)
    nvel = op.layout.nvel
    dF_dalpha = -(op.drag.T @ (mu[:nvel] * flow.x[:nvel])).reshape(grid.shape)

    g_rhof = dF_dalpha[:, :, grid.nz_electrode:] * alpha_fic_derivative(density.filtered, cfg)
    if filt is None:
        return g_rhof
    return filt.adjoint(g_rhof)


# -- SLP ----------------------------------------------------------------------

def slp_update(rho, gradient, move_limit: float, config: CaseConfig | None = None, volumes=None):
    """One SLP step maximizing the linearized objective inside the move-limit box.

    Without a volume constraint the LP separates and its solution is the
    box-clamped signed step. With ``config.volume_fraction > 0`` the
    linearized constraint ``sum V rho <= vf * sum V`` is added and the LP is
    solved with HiGHS.
    """
    rho = np.asarray(rho, dtype=float)
    g = np.asarray(gradient, dtype=float)
    if rho.shape != g.shape:
        raise ValueError(f"density shape {rho.shape} and gradient shape {g.shape} differ")
    if not 0.0 < move_limit <= 1.0:
        raise ValueError("move limit must lie in (0, 1]")
    lo = np.maximum(-move_limit, -rho)
    hi = np.minimum(move_limit, 1.0 - rho)
    vf = 0.0 if config is None else config.volume_fraction
    if vf <= 0.0:
        step = np.where(g > 0, hi, np.where(g < 0, lo, 0.0))
        return np.clip(rho + step, 0.0, 1.0)
    v = np.ones_like(rho) if volumes is None else np.broadcast_to(volumes, rho.shape)
    res = linprog(-g.ravel(), A_ub=v.ravel()[None, :], b_ub=[vf * v.sum() - (v * rho).sum()],
                  bounds=list(zip(lo.ravel(), hi.ravel())), method="highs")
    if res.status != 0:
        raise OptimizationError(f"SLP subproblem failed: {res.message}")
    return np.clip(rho + res.x.reshape(rho.shape), 0.0, 1.0)


# -- loop -----------------------------------------------------------------------

TRACE_COLUMNS = ("iteration", "F", "dp", "Q", "mean_abs_eta", "max_drho", "move_limit")


@dataclass
class TraceRecord:
    iteration: int
    F: float
    dp: float
    Q: float
    mean_abs_eta: float
    max_drho: float
    move_limit: float


@dataclass
class OptimizationTrace:
    records: list = field(default_factory=list)
    converged: bool = False

    def append(self, rec: TraceRecord):
        self.records.append(rec)

    def __len__(self):
        return len(self.records)

    @property
    def objectives(self) -> np.ndarray:
        return np.array([r.F for r in self.records])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(TRACE_COLUMNS)
            for r in self.records:
                d = asdict(r)
                wr.writerow([d["iteration"]] + [repr(float(d[c])) for c in TRACE_COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path) -> "OptimizationTrace":
        out = cls()
        with open(path, newline="") as fh:
            for row in csv.DictReader(fh):
                out.append(TraceRecord(int(row["iteration"]), *(float(row[c]) for c in TRACE_COLUMNS[1:])))
        return out


def _relchange(a, b):
    return abs(a - b) / max(abs(a), 1e-300)


def converged(trace: OptimizationTrace, config: CaseConfig) -> bool:
    F = trace.objectives
    n = config.conv_window
    if len(F) < n + 1:
        return False
    return all(_relchange(F[-i], F[-i - 1]) < config.conv_tol for i in range(1, n + 1))


def _write_snapshot(out_dir: Path, density: DensityField, grid: Grid, it: int, move_limit: float, worse: int):
    hz = float(grid.hz[grid.nz_electrode])
    spacing = (grid.hx, grid.hy, hz)
    stem = out_dir / f"density_{it:04d}"
    write_snapshot(stem.with_suffix(".bin"), density.rho, spacing, it, move_limit, worse)
    export_vtk(stem.with_suffix(".vtk"), {"rho": density.rho, "rho_filtered": density.filtered}, spacing,
               z_edges=grid.z_edges[grid.nz_electrode:], binary=True)


def optimize(grid: Grid, config: CaseConfig, out_dir=None, resume=None, callback=None):
    """Run the SLP loop; returns ``(final DensityField, OptimizationTrace)``.

    With ``out_dir`` a snapshot (``density_NNNN.bin`` / ``.vtk``) is written
    for every iterate together with ``trace.csv``. ``resume`` names a
    snapshot file; the loop continues from it using the trace stored next
    to it.

    The move limit is halved once two consecutive iterates fall short of
    the best objective seen so far.
    """
    filt = HelmholtzFilter(grid, filter_radius(grid, config))
    operator = BrinkmanOperator(grid, config.mu)
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        out_dir.mkdir(parents=True, exist_ok=True)
    trace = OptimizationTrace()
    move_limit, worse, start = config.move_limit, 0, 0
    rho = np.full(filt.shape, config.rho_init)
    last_step = 0.0
    if resume is not None:
        snap = read_snapshot(resume)
        if snap.rho.shape != filt.shape:
            raise OptimizationError(f"snapshot dims {snap.rho.shape} do not match design layer {filt.shape}")
        rho, move_limit, worse, start = snap.rho, snap.move_limit, snap.worse_count, snap.iteration
        tpath = Path(resume).parent / "trace.csv"
        if tpath.is_file():
            trace.records = [r for r in OptimizationTrace.read_csv(tpath).records if r.iteration < start]
        prev = Path(resume).parent / f"density_{start - 1:04d}.bin"
        if start > 0 and prev.is_file():
            last_step = float(np.max(np.abs(rho - read_snapshot(prev).rho)))

    density = DensityField.from_rho(rho, filt)
    for it in range(start, config.max_iter):
        try:
            res = forward(grid, density, config, operator=operator)
        except Exception as exc:
            raise OptimizationError(f"forward solve failed at iteration {it}: {exc}") from exc
        F = res.F
        # snapshots carry the counters this iterate started with, so a resume replays the update
        entry = (move_limit, worse)
        if trace.records:
            # measured against the best iterate, so an alternating sequence also counts
            best = max(r.F for r in trace.records)
            worse = worse + 1 if F < best else 0
            if worse >= 2:
                move_limit *= 0.5
                worse = 0
        trace.append(TraceRecord(it, F, res.flow.dp, res.flow.Q, res.electro.mean_abs_eta(), last_step, move_limit))
        log.info("iter %3d  F=%.6f  Q=%.4g  dp=%.4g  |eta|=%.4g  step=%.3g  ml=%.3g", it, F, res.flow.Q,
                 res.flow.dp, res.electro.mean_abs_eta(), last_step, move_limit)
        if out_dir is not None:
            _write_snapshot(out_dir, density, grid, it, *entry)
            trace.write_csv(out_dir / "trace.csv")
        if callback is not None:
            callback(it, res)
        if converged(trace, config):
            trace.converged = True
            break
        if it == config.max_iter - 1:
            break
        try:
            grad = adjoint_sensitivities(grid, res.flow, res.electro, density, config, filt)
        except Exception as exc:
            raise OptimizationError(f"adjoint solve failed at iteration {it}: {exc}") from exc
        new_rho = slp_update(density.rho, grad, move_limit, config, filt.volumes)
        last_step = float(np.max(np.abs(new_rho - density.rho)))
        density = DensityField.from_rho(new_rho, filt)
    return density, trace


# -- gradient check ------------------------------------------------------------------

@dataclass
class GradCheckResult:
    cells: list
    adjoint: np.ndarray
    finite_difference: np.ndarray
    rel_error: np.ndarray

    @property
    def max_rel_error(self) -> float:
        return float(np.max(self.rel_error))


def gradcheck(grid: Grid, config: CaseConfig, rho=None, n_cells: int = 10, step: float = 1e-5,
              seed: int | None = None) -> GradCheckResult:
    """Compare adjoint derivatives with central differences on random design cells.

    The relative error of each sampled cell is ``|adjoint - fd| / |fd|``.
    """
    rng = np.random.default_rng(config.seed if seed is None else seed)
    filt = HelmholtzFilter(grid, filter_radius(grid, config))
    operator = BrinkmanOperator(grid, config.mu)
    if rho is None:
        rho = rng.uniform(0.2, 0.8, filt.shape)
    density = DensityField.from_rho(rho, filt)
    base = forward(grid, density, config, operator=operator)
    grad = adjoint_sensitivities(grid, base.flow, base.electro, density, config, filt)
    flat = rng.choice(grad.size, size=min(n_cells, grad.size), replace=False)
    fd = np.empty(len(flat))
    for n, idx in enumerate(flat):
        vals = []
        for sgn in (1.0, -1.0):
            r = density.rho.copy().ravel()
            r[idx] += sgn * step
            d = DensityField.from_rho(np.clip(r, 0, 1).reshape(filt.shape), filt)
            vals.append(forward(grid, d, config, operator=operator, initial=base.electro.y_physical).F)
        fd[n] = (vals[0] - vals[1]) / (2 * step)
    adj = grad.ravel()[flat]
    rel = np.abs(adj - fd) / np.maximum(np.abs(fd), 1e-300)
    cells = [tuple(int(v) for v in np.unravel_index(i, filt.shape)) for i in flat]
    return GradCheckResult(cells, adj, fd, rel)
