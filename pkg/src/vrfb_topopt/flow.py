"""Stationary Brinkman flow on a staggered (MAC) finite-volume grid.

Velocity components live on cell faces, pressure at cell centres. The
discrete system is the symmetric saddle point

    [ A + diag(B alpha)   G ] [u]   [b]
    [ G^T                 0 ] [p] = [0]

where ``A`` is the viscous operator, ``G`` the face-area weighted gradient
(its transpose is minus the discrete divergence) and ``B`` distributes half
of each cell's volume to its six faces so that the drag term is
``sum_c alpha_c V_c / 2`` per face. Pressure is prescribed on inlet and
outlet patches; every other boundary is no-slip.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .config import CaseConfig
from .geometry import FACES, Grid, Patch, permeability

log = logging.getLogger(__name__)


class FlowError(RuntimeError):
    pass


def alpha_max(config: CaseConfig) -> float:
    """Fictitious inverse permeability used for solid design cells."""
    return config.alpha_fic_factor * config.mu / permeability(config)


def alpha_fic(rho, config: CaseConfig, amax: float | None = None):
    """Inverse permeability interpolated from the (filtered) density.

    ``q (1 - rho) / (rho + q) * alpha_max``: zero for fluid (rho = 1) and
    ``alpha_max`` for solid (rho = 0).
    """
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0.0) or np.any(rho > 1.0):
        raise ValueError("density must lie in [0, 1]")
    amax = alpha_max(config) if amax is None else amax
    q = config.q
    out = q * (1.0 - rho) / (rho + q) * amax
    return out if out.ndim else float(out)


def alpha_fic_derivative(rho, config: CaseConfig, amax: float | None = None):
    amax = alpha_max(config) if amax is None else amax
    q = config.q
    return -amax * q * (1.0 + q) / (np.asarray(rho, dtype=float) + q) ** 2


def alpha_field(grid: Grid, rho_filtered, config: CaseConfig) -> np.ndarray:
    """Per-cell inverse permeability: mu/K in the electrode, fictitious in the design layer."""
    alpha = np.empty(grid.shape)
    alpha[grid.electrode_mask] = config.mu / permeability(config)
    if grid.nz_channel:
        rho_f = np.asarray(rho_filtered, dtype=float).reshape(grid.nx, grid.ny, grid.nz_channel)
        alpha[:, :, grid.nz_electrode:] = alpha_fic(rho_f, config)
    return alpha


def _b(arr, axis):
    shape = [1, 1, 1]
    shape[axis] = -1
    return np.asarray(arr, dtype=float).reshape(shape)


def _spacings(grid: Grid):
    return [np.full(grid.nx, grid.hx), np.full(grid.ny, grid.hy), np.asarray(grid.hz, dtype=float)]


def _face_shape(shape, a):
    s = list(shape)
    s[a] += 1
    return tuple(s)


def _cv_length(h):
    lcv = np.empty(len(h) + 1)
    lcv[0], lcv[-1] = 0.5 * h[0], 0.5 * h[-1]
    lcv[1:-1] = 0.5 * (h[:-1] + h[1:])
    return lcv


def _is_pressure(labels):
    return (labels == Patch.INLET) | (labels == Patch.OUTLET)


class _Layout:
    """Index bookkeeping for face velocities and cell pressures."""

    def __init__(self, grid: Grid):
        self.shape = grid.shape
        self.face_shapes = [_face_shape(grid.shape, a) for a in range(3)]
        sizes = [int(np.prod(s)) for s in self.face_shapes]
        self.offsets = np.concatenate([[0], np.cumsum(sizes)])
        self.nvel = int(self.offsets[3])
        self.ncell = grid.ncells
        self.ntotal = self.nvel + self.ncell

    def face_index(self, a):
        return (np.arange(self.offsets[a + 1] - self.offsets[a]) + self.offsets[a]).reshape(self.face_shapes[a])

    def cell_index(self):
        return (np.arange(self.ncell) + self.nvel).reshape(self.shape)

    def split(self, vel):
        return [vel[self.offsets[a]:self.offsets[a + 1]].reshape(self.face_shapes[a]) for a in range(3)]


def _boundary_slice(a, end):
    idx = [slice(None)] * 3
    idx[a] = end
    return tuple(idx)


class BrinkmanOperator:
    """Alpha-independent part of the discrete Brinkman system for one grid.

    Building this once and adding the drag diagonal per design keeps the
    optimization loop from re-assembling the viscous and gradient blocks.
    """

    def __init__(self, grid: Grid, mu: float):
        self.grid = grid
        self.mu = mu
        self.layout = lay = _Layout(grid)
        h = _spacings(grid)
        n = grid.shape
        rows, cols, vals = [], [], []

        def pair(i, j, c):
            i, j, c = np.broadcast_arrays(i, j, c)
            i, j, c = i.ravel(), j.ravel(), c.ravel()
            rows.extend([i, j, i, j])
            cols.extend([i, j, j, i])
            vals.extend([c, c, -c, -c])

        def diag(i, c):
            i, c = np.broadcast_arrays(i, c)
            rows.append(i.ravel())
            cols.append(i.ravel())
            vals.append(c.ravel())

        fixed = np.zeros(lay.ntotal, dtype=bool)
        rhs_parts = []  # (face indices, signed area, label array)
        self.pressure_faces = {}
        cell = lay.cell_index()
        for a in range(3):
            idx = lay.face_index(a)
            others = [b for b in range(3) if b != a]
            area = _b(h[others[0]], others[0]) * _b(h[others[1]], others[1])
            lcv = _b(_cv_length(h[a]), a)
            # axial viscous coupling through each cell
            sl0 = [slice(None)] * 3
            sl1 = [slice(None)] * 3
            sl0[a], sl1[a] = slice(0, n[a]), slice(1, n[a] + 1)
            pair(idx[tuple(sl0)], idx[tuple(sl1)], mu * area / _b(h[a], a))
            # transverse viscous coupling
            for b in others:
                c_ax = [x for x in others if x != b][0]
                t0 = [slice(None)] * 3
                t1 = [slice(None)] * 3
                t0[b], t1[b] = slice(0, n[b] - 1), slice(1, n[b])
                dist = 0.5 * (h[b][:-1] + h[b][1:])
                coef = mu * lcv * _b(h[c_ax], c_ax) / _b(dist, b)
                pair(idx[tuple(t0)], idx[tuple(t1)], coef)
                for end, face in ((0, f"{'xyz'[b]}0"), (n[b] - 1, f"{'xyz'[b]}1")):
                    wall_cells = ~_is_pressure(grid.patches[face])  # over axes `others` of b
                    wall_cells = np.expand_dims(wall_cells, b)
                    pad = [(0, 0)] * 3
                    pad[a] = (1, 1)
                    wpad = np.pad(wall_cells, pad, constant_values=False)
                    lo = [slice(None)] * 3
                    hi = [slice(None)] * 3
                    lo[a], hi[a] = slice(0, n[a] + 1), slice(1, n[a] + 2)
                    noslip = wpad[tuple(lo)] | wpad[tuple(hi)]
                    sel = _boundary_slice(b, slice(end, end + 1))
                    coef_w = mu * lcv * _b(h[c_ax], c_ax) / (0.5 * h[b][end])
                    coef_w = np.broadcast_to(coef_w, idx.shape)[sel] * noslip
                    diag(idx[sel], coef_w)
            # pressure gradient and divergence (symmetric)
            area_f = np.broadcast_to(area, idx.shape)
            for side, sign in ((slice(0, n[a]), +1.0), (slice(1, n[a] + 1), -1.0)):
                fsl = _boundary_slice(a, side)
                i = idx[fsl].ravel()
                j = cell.ravel()
                c = sign * area_f[fsl].ravel()
                rows.extend([i, j])
                cols.extend([j, i])
                vals.extend([c, c])
            # boundary faces normal to a
            for end, face, sgn in ((0, f"{'xyz'[a]}0", +1.0), (n[a], f"{'xyz'[a]}1", -1.0)):
                sel = _boundary_slice(a, end)
                labels = grid.patches[face]
                bidx = idx[sel]
                fixed[bidx[~_is_pressure(labels)]] = True
                pmask = _is_pressure(labels)
                self.pressure_faces[face] = (bidx[pmask], area_f[sel][pmask], labels[pmask], sgn)

        self.base = sp.csr_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
            shape=(lay.ntotal, lay.ntotal))
        self.fixed = fixed
        self.free = np.flatnonzero(~fixed)
        self.free_vel = self.free[self.free < lay.nvel]
        if not any(len(v[0]) for v in self.pressure_faces.values()):
            raise FlowError("singular Brinkman system: no pressure boundary (inlet/outlet) present")

        # drag distribution: each cell gives half its volume to each of its faces
        vol = grid.volumes
        brow, bcol, bval = [], [], []
        for a in range(3):
            idx = lay.face_index(a)
            for side in (slice(0, n[a]), slice(1, n[a] + 1)):
                brow.append(idx[_boundary_slice(a, side)].ravel())
                bcol.append(np.arange(grid.ncells))
                bval.append(0.5 * vol.ravel())
        self.drag = sp.csr_matrix(
            (np.concatenate(bval), (np.concatenate(brow), np.concatenate(bcol))),
            shape=(lay.nvel, grid.ncells))
        self.base_free = self.base[self.free][:, self.free].tocsr()
        self._pos = np.full(lay.ntotal, -1)
        self._pos[self.free] = np.arange(len(self.free))

    def rhs(self, p_in: float, p_out: float) -> np.ndarray:
        b = np.zeros(self.layout.ntotal)
        for bidx, area, labels, sgn in self.pressure_faces.values():
            pval = np.where(labels == Patch.INLET, p_in, p_out)
            b[bidx] += sgn * area * pval
        return b[self.free]

    def matrix(self, alpha: np.ndarray) -> sp.csc_matrix:
        d = np.zeros(self.layout.ntotal)
        d[: self.layout.nvel] = self.drag @ np.asarray(alpha, dtype=float).ravel()
        return (self.base_free + sp.diags(d[self.free])).tocsc()

    def expand(self, x_free: np.ndarray) -> np.ndarray:
        x = np.zeros(self.layout.ntotal)
        x[self.free] = x_free
        return x


@dataclass(frozen=True, eq=False)
class BrinkmanSystem:
    operator: BrinkmanOperator
    alpha: np.ndarray
    matrix: sp.csc_matrix
    p_in: float
    p_out: float

    @property
    def rhs(self) -> np.ndarray:
        return self.operator.rhs(self.p_in, self.p_out)

    def factorize(self) -> "SaddleSolver":
        return SaddleSolver(self.matrix, len(self.operator.free_vel))

    def solve(self, lu=None) -> "FlowState":
        lu = self.factorize() if lu is None else lu
        x = lu.solve(self.rhs)
        if not np.all(np.isfinite(x)):
            raise FlowError("Brinkman solve produced non-finite values")
        return FlowState.from_solution(self, self.operator.expand(x), lu)


class SaddleSolver:
    """Direct solver for the symmetric Brinkman saddle point.

    A small negative shift on the pressure block makes the matrix
    quasi-definite, so it can be factorized in a fill-reducing symmetric
    order without pivoting. Iterative refinement against the unshifted
    matrix removes the shift's effect. It runs until the correction is at
    round-off, not merely until the residual is small: stopping at a
    residual threshold lets the number of sweeps, and with it the solution
    at the 1e-9 level, jump between neighbouring designs, which spoils
    finite-difference checks. The matrix is symmetric, so the same factors
    serve adjoint solves.
    """

    shift = 1e-8
    max_refine = 20

    def __init__(self, matrix: sp.spmatrix, nvel: int):
        self.matrix = matrix.tocsr()
        A = self.matrix[:nvel, :nvel]
        G = self.matrix[:nvel, nvel:]
        schur_diag = np.asarray(G.multiply(G).T @ (1.0 / A.diagonal())).ravel()
        d = np.zeros(matrix.shape[0])
        d[nvel:] = -self.shift * np.median(schur_diag)
        try:
            self._lu = spla.splu((self.matrix + sp.diags(d)).tocsc(), permc_spec="MMD_AT_PLUS_A",
                                 diag_pivot_thresh=0.0, options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise FlowError(f"singular Brinkman system: {exc}") from exc
        self._fallback = None

    def solve(self, rhs: np.ndarray, trans: str = "N") -> np.ndarray:
        if self._fallback is not None:
            return self._fallback.solve(rhs)
        bnorm = np.linalg.norm(rhs)
        if bnorm == 0.0:
            return np.zeros_like(rhs)
        x = self._lu.solve(rhs)
        floor = 8.0 * np.finfo(float).eps
        for _ in range(self.max_refine):
            dx = self._lu.solve(rhs - self.matrix @ x)
            x += dx
            if np.max(np.abs(dx)) <= floor * np.max(np.abs(x)):
                return x
        if np.linalg.norm(rhs - self.matrix @ x) <= 1e-10 * bnorm:
            return x
        log.warning("quasi-definite refinement stalled; falling back to pivoted LU")
        try:
            self._fallback = spla.splu(self.matrix.tocsc())
        except RuntimeError as exc:
            raise FlowError(f"singular Brinkman system: {exc}") from exc
        return self._fallback.solve(rhs)


def assemble_brinkman(grid: Grid, alpha_field, config: CaseConfig, operator: BrinkmanOperator | None = None,
                      p_in: float | None = None, p_out: float | None = None) -> BrinkmanSystem:
    """Assemble the discrete Brinkman system for a given inverse-permeability field."""
    alpha = np.asarray(alpha_field, dtype=float)
    if alpha.shape != grid.shape:
        alpha = alpha.reshape(grid.shape)
    if np.any(alpha < 0):
        raise ValueError("inverse permeability must be nonnegative")
    op = operator if operator is not None else BrinkmanOperator(grid, config.mu)
    return BrinkmanSystem(op, alpha, op.matrix(alpha),
                          config.p_in if p_in is None else p_in,
                          config.p_out if p_out is None else p_out)


@dataclass(frozen=True, eq=False)
class FlowState:
    ux: np.ndarray
    uy: np.ndarray
    uz: np.ndarray
    p: np.ndarray
    Q_in: float
    Q_out: float
    p_in: float
    p_out: float
    system: BrinkmanSystem = field(repr=False)
    x: np.ndarray = field(repr=False)
    lu: object = field(repr=False, default=None)

    @property
    def dp(self) -> float:
        return self.p_in - self.p_out

    @property
    def Q(self) -> float:
        return 0.5 * (self.Q_in + self.Q_out)

    @property
    def velocity_dofs(self) -> np.ndarray:
        return self.x[: self.system.operator.layout.nvel]

    def cell_velocity(self) -> np.ndarray:
        """Cell-centred velocity (face averages), shape ``grid.shape + (3,)``."""
        return np.stack([0.5 * (self.ux[1:] + self.ux[:-1]),
                         0.5 * (self.uy[:, 1:] + self.uy[:, :-1]),
                         0.5 * (self.uz[:, :, 1:] + self.uz[:, :, :-1])], axis=-1)

    def speed(self) -> np.ndarray:
        return np.linalg.norm(self.cell_velocity(), axis=-1)

    def divergence(self) -> np.ndarray:
        """Net volumetric outflow per cell (m^3/s)."""
        g = self.system.operator.grid
        h = _spacings(g)
        ax = self.ux * (h[1][None, :, None] * h[2][None, None, :])
        ay = self.uy * (h[0][:, None, None] * h[2][None, None, :])
        az = self.uz * (h[0][:, None, None] * h[1][None, :, None])
        return (ax[1:] - ax[:-1]) + (ay[:, 1:] - ay[:, :-1]) + (az[:, :, 1:] - az[:, :, :-1])

    @classmethod
    def from_solution(cls, system: BrinkmanSystem, x: np.ndarray, lu=None) -> "FlowState":
        op = system.operator
        ux, uy, uz = op.layout.split(x[: op.layout.nvel])
        p = x[op.layout.nvel:].reshape(op.grid.shape)
        q_in = q_out = 0.0
        for bidx, area, labels, sgn in op.pressure_faces.values():
            flux = sgn * area * x[bidx]  # positive = into the domain
            q_in += flux[labels == Patch.INLET].sum()
            q_out -= flux[labels == Patch.OUTLET].sum()
        return cls(ux=ux, uy=uy, uz=uz, p=p, Q_in=float(q_in), Q_out=float(q_out),
                   p_in=system.p_in, p_out=system.p_out, system=system, x=x, lu=lu)


def _rho_filtered(density):
    return getattr(density, "filtered", density)


def solve_flow(grid: Grid, density, config: CaseConfig, operator: BrinkmanOperator | None = None,
               p_in: float | None = None) -> FlowState:
    """Solve the Brinkman system for a density field (or its filtered values)."""
    alpha = alpha_field(grid, _rho_filtered(density), config)
    system = assemble_brinkman(grid, alpha, config, operator=operator, p_in=p_in)
    return system.solve()


def solve_flow_at_rate(grid: Grid, density, config: CaseConfig, flowrate: float,
                       operator: BrinkmanOperator | None = None, max_iter: int = 20) -> FlowState:
    """Secant iteration on the inlet pressure until the inlet flow rate matches ``flowrate``.

    The flow model is linear, so one factorization serves every iterate.
    """
    if flowrate <= 0:
        raise ValueError("target flow rate must be positive")
    alpha = alpha_field(grid, _rho_filtered(density), config)
    system = assemble_brinkman(grid, alpha, config, operator=operator)
    lu = system.factorize()
    p_out = config.p_out

    def run(pin):
        s = BrinkmanSystem(system.operator, system.alpha, system.matrix, pin, p_out)
        return s.solve(lu)

    p0, q0 = p_out, 0.0
    p1 = config.p_in if config.p_in > p_out else p_out + 1.0
    st = run(p1)
    for _ in range(max_iter):
        if abs(st.Q_in - flowrate) <= config.flowrate_tol * flowrate:
            return st
        if st.Q_in == q0:
            raise FlowError("flow rate insensitive to inlet pressure")
        p2 = p1 + (flowrate - st.Q_in) * (p1 - p0) / (st.Q_in - q0)
        p0, q0, p1 = p1, st.Q_in, p2
        st = run(p1)
    if abs(st.Q_in - flowrate) > config.flowrate_tol * flowrate:
        raise FlowError(f"flow-rate targeting did not converge (Q={st.Q_in:.4g}, target {flowrate:.4g})")
    return st
