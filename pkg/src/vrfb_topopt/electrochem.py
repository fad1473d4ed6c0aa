"""Species transport, charge conservation and Butler-Volmer kinetics.

Given a converged flow field, the unknowns are the bulk concentrations of
V2+ and V3+ on every cell and the solid/electrolyte potentials on electrode
cells. The coupled steady system is solved by damped Newton iteration with
an analytic Jacobian; the same Jacobian drives the adjoint in
:mod:`vrfb_topopt.topopt`.

Sign conventions: ``j > 0`` is V3+ reduction (charging). V2+ is produced at
``j/F`` per unit volume and V3+ consumed at the same rate. Reduction
moves current from the electrolyte into the solid, so ``div(i_e) = -j``
and ``div(i_s) = j``: the applied current enters the electrolyte through
the membrane face and leaves the solid through the electrode face under
the flow-field plate.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.optimize import brentq

from .config import CaseConfig
from .geometry import Grid, Patch

log = logging.getLogger(__name__)

KM_PREFACTOR = 1.6e-4
KM_EXPONENT = 0.4
# Newton stops early once updates are this small and the residual no longer drops
STAGNATION_UPDATE = 1e-6
# largest overpotential change per Newton step, in thermal voltages
ETA_STEP_LIMIT = 2.0
# Newton gives up when the merit has not halved over this many iterations
STALL_WINDOW = 6
# smallest current increment tried by the continuation, as a fraction of I
MIN_CONTINUATION_STEP = 1.0 / 256


class ElectrochemError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


# -- pointwise closures --------------------------------------------------------

def mass_transfer_coeff(speed, u_floor: float = 1e-9):
    """Local mass-transfer coefficient ``1.6e-4 * |u|^0.4`` (m/s), floored at ``u_floor``."""
    speed = np.asarray(speed, dtype=float)
    if np.any(speed < 0):
        raise ValueError("speed must be nonnegative")
    out = KM_PREFACTOR * np.maximum(speed, u_floor) ** KM_EXPONENT
    return out if out.ndim else float(out)


def mass_transfer_coeff_derivative(speed, u_floor: float = 1e-9):
    speed = np.asarray(speed, dtype=float)
    s = np.maximum(speed, u_floor)
    return np.where(speed > u_floor, KM_EXPONENT * KM_PREFACTOR * s ** (KM_EXPONENT - 1.0), 0.0)


def _check_positive(*arrays):
    for arr in arrays:
        if np.any(np.asarray(arr) <= 0):
            raise ValueError("concentrations must be positive")


def _exp_factors(eta, config: CaseConfig):
    """exp(alpha_a f eta), exp(-alpha_c f eta) with the argument clamp, plus d/d eta."""
    f = config.f
    lim = config.eta_clamp
    arg_a = config.alpha_a * f * np.asarray(eta, dtype=float)
    arg_c = -config.alpha_c * f * np.asarray(eta, dtype=float)
    clipped = (np.abs(arg_a) > lim) | (np.abs(arg_c) > lim)
    ea = np.exp(np.clip(arg_a, -lim, lim))
    ec = np.exp(np.clip(arg_c, -lim, lim))
    dea = np.where(np.abs(arg_a) > lim, 0.0, config.alpha_a * f * ea)
    dec = np.where(np.abs(arg_c) > lim, 0.0, -config.alpha_c * f * ec)
    return ea, ec, dea, dec, clipped


def _mp(c2, c3, k_m, ea, ec, config):
    r = config.k / k_m
    M = r * c2 ** (config.alpha_c - 1.0) * c3**config.alpha_a * ea
    P = r * c2**config.alpha_c * c3 ** (config.alpha_a - 1.0) * ec
    return M, P


def surface_concentrations(c2, c3, eta, k_m, config: CaseConfig):
    """Surface concentrations of V2+ and V3+ for finite mass transfer.

    Returns ``(c2_s, c3_s)``; their sum always equals ``c2 + c3``.
    """
    c2, c3, k_m = (np.asarray(v, dtype=float) for v in (c2, c3, k_m))
    _check_positive(c2, c3)
    if np.any(k_m <= 0):
        raise ValueError("mass transfer coefficient must be positive")
    ea, ec, *_ = _exp_factors(eta, config)
    M, P = _mp(c2, c3, k_m, ea, ec, config)
    S = 1.0 + M + P
    c2s = (P * c3 + (1.0 + P) * c2) / S
    c3s = (M * c2 + (1.0 + M) * c3) / S
    return c2s, c3s


def exchange_current_density(c2, c3, config: CaseConfig):
    return config.a * config.F * config.k * np.asarray(c2) ** config.alpha_c * np.asarray(c3) ** config.alpha_a


def butler_volmer(c2, c3, c2s, c3s, eta, config: CaseConfig):
    """Volumetric transfer current density (A/m^3) from bulk and surface concentrations."""
    c2, c3 = np.asarray(c2, dtype=float), np.asarray(c3, dtype=float)
    _check_positive(c2, c3)
    ea, ec, _, _, clipped = _exp_factors(eta, config)
    if np.any(clipped):
        log.warning("Butler-Volmer exponent clamped at |%g| in %d cells", config.eta_clamp, int(np.sum(clipped)))
    i0 = exchange_current_density(c2, c3, config)
    return i0 * (np.asarray(c3s) / c3 * ec - np.asarray(c2s) / c2 * ea)


def open_circuit_potential(c2, c3, config: CaseConfig):
    """Nernst potential of the negative half-cell (V)."""
    c2, c3 = np.asarray(c2, dtype=float), np.asarray(c3, dtype=float)
    _check_positive(c2, c3)
    out = config.U0 + config.thermal_voltage * np.log(c3 / c2)
    return out if out.ndim else float(out)


def effective_diffusivities(config: CaseConfig):
    b = config.eps**1.5
    return b * config.D2, b * config.D3


def effective_ionic_conductivity(c2, c3, config: CaseConfig, mode: str | None = None):
    """Electrolyte conductivity in the electrode (S/m).

    ``computed``: ``F^2/(RT) * sum z_i^2 D_i^eff c_i`` over the two vanadium
    species; ``constant``: the fixed ``kappa_e`` value.
    """
    mode = config.kappa_mode if mode is None else mode
    if mode == "constant":
        return np.full(np.shape(c2), config.kappa_e) if np.ndim(c2) else config.kappa_e
    if mode != "computed":
        raise ValueError(f"unknown conductivity mode {mode!r}")
    d2, d3 = effective_diffusivities(config)
    pre = config.F**2 / (config.R * config.T)
    return pre * (config.z2**2 * d2 * np.asarray(c2) + config.z3**2 * d3 * np.asarray(c3))


@dataclass(frozen=True)
class EffectiveProperties:
    D2_electrode: float
    D3_electrode: float
    D2_channel: float
    D3_channel: float
    sigma_s: float
    kappa_mode: str

    @classmethod
    def from_config(cls, config: CaseConfig) -> "EffectiveProperties":
        d2, d3 = effective_diffusivities(config)
        return cls(d2, d3, config.D2, config.D3, (1.0 - config.eps) ** 1.5 * config.sigma_s, config.kappa_mode)


@dataclass
class KineticsDerivatives:
    """Transfer current and surface V3+ concentration with partial derivatives."""
    j: np.ndarray
    c3s: np.ndarray
    j_c2: np.ndarray
    j_c3: np.ndarray
    j_eta: np.ndarray
    j_km: np.ndarray
    c3s_c2: np.ndarray
    c3s_c3: np.ndarray
    c3s_eta: np.ndarray
    c3s_km: np.ndarray
    clipped: int


def kinetics_with_derivatives(c2, c3, eta, k_m, config: CaseConfig) -> KineticsDerivatives:
    """Closed form ``j = i0 (exp(-ac f eta) - exp(aa f eta)) / (1 + M + P)``.

    Algebraically identical to Butler-Volmer evaluated at the mass-transfer
    corrected surface concentrations, but cheaper to differentiate.
    """
    ac, aa = config.alpha_c, config.alpha_a
    ea, ec, dea, dec, clipped = _exp_factors(eta, config)
    M, P = _mp(c2, c3, k_m, ea, ec, config)
    S = 1.0 + M + P
    M_c2, M_c3, M_eta, M_km = (ac - 1.0) * M / c2, aa * M / c3, M * dea / ea, -M / k_m
    P_c2, P_c3, P_eta, P_km = ac * P / c2, (aa - 1.0) * P / c3, P * dec / ec, -P / k_m
    S_c2, S_c3, S_eta, S_km = M_c2 + P_c2, M_c3 + P_c3, M_eta + P_eta, M_km + P_km
    i0 = exchange_current_density(c2, c3, config)
    N = ec - ea
    j = i0 * N / S
    j_c2 = ac * j / c2 - j * S_c2 / S
    j_c3 = aa * j / c3 - j * S_c3 / S
    j_eta = i0 * (dec - dea) / S - j * S_eta / S
    j_km = -j * S_km / S
    csum = c2 + c3
    Y = M * csum + c3
    c3s = Y / S
    c3s_c2 = (M_c2 * csum + M - c3s * S_c2) / S
    c3s_c3 = (M_c3 * csum + M + 1.0 - c3s * S_c3) / S
    c3s_eta = (M_eta * csum - c3s * S_eta) / S
    c3s_km = (M_km * csum - c3s * S_km) / S
    return KineticsDerivatives(j, c3s, j_c2, j_c3, j_eta, j_km, c3s_c2, c3s_c3, c3s_eta, c3s_km,
                               int(np.sum(clipped)))


# -- advection-diffusion flux (Scharfetter-Gummel) -----------------------------

def bernoulli(x):
    """B(x) = x / (exp(x) - 1), smooth through x = 0."""
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    big = np.where(small, 1.0, xs / np.expm1(np.minimum(xs, 700.0)))
    big = np.where(xs > 700.0, 0.0, big)
    ser = 1.0 - x / 2.0 + x**2 / 12.0 - x**4 / 720.0
    return np.where(small, ser, big)


def bernoulli_derivative(x):
    x = np.asarray(x, dtype=float)
    small = np.abs(x) < 1e-3
    xs = np.where(small, 1.0, x)
    b = bernoulli(xs)
    pos = xs > 0
    g = np.where(pos, -1.0 / np.expm1(-np.where(pos, xs, 1.0)),
                 np.exp(np.where(pos, -1.0, xs)) / np.expm1(np.where(pos, -1.0, xs)))
    big = b / xs - b * g
    ser = -0.5 + x / 6.0 - x**3 / 180.0
    return np.where(small, ser, big)


# -- discrete problem ----------------------------------------------------------

def _face_fluxes(flow, grid: Grid):
    hy, hx, hz = grid.hy, grid.hx, grid.hz
    return (flow.ux * (hy * hz)[None, None, :],
            flow.uy * (hx * hz)[None, None, :],
            flow.uz * (hx * hy))


class _Transport:
    """Linear advection-diffusion operator for one species on all cells."""

    def __init__(self, grid: Grid, fluxes, D_cell, c_in):
        n = grid.shape
        cell = np.arange(grid.ncells).reshape(n)
        h = [np.full(grid.nx, grid.hx), np.full(grid.ny, grid.hy), np.asarray(grid.hz)]
        P_l, N_l, F_l, Dp_l, fax, fflat = [], [], [], [], [], []
        bP, bF, bD, bkind, bax, bflat, bsgn = [], [], [], [], [], [], []
        for a in range(3):
            fidx = np.arange(fluxes[a].size).reshape(fluxes[a].shape)
            others = [b for b in range(3) if b != a]
            shp = [1, 1, 1]
            area = np.ones(n)
            for b in others:
                s = [1, 1, 1]
                s[b] = -1
                area = area * h[b].reshape(s)
            s = [1, 1, 1]
            s[a] = -1
            hcell = np.broadcast_to(h[a].reshape(s), n)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a], hi[a] = slice(0, n[a] - 1), slice(1, n[a])
            lo, hi = tuple(lo), tuple(hi)
            fint = [slice(None)] * 3
            fint[a] = slice(1, n[a])
            Fa = fluxes[a][tuple(fint)]
            Dp = area[lo] / (0.5 * hcell[lo] / D_cell[lo] + 0.5 * hcell[hi] / D_cell[hi])
            P_l.append(cell[lo].ravel())
            N_l.append(cell[hi].ravel())
            F_l.append(Fa.ravel())
            Dp_l.append(Dp.ravel())
            fflat.append(fidx[tuple(fint)].ravel())
            fax.append(np.full(Fa.size, a))
            for end, cend, face, sgn in ((0, 0, f"{'xyz'[a]}0", -1.0), (n[a], n[a] - 1, f"{'xyz'[a]}1", 1.0)):
                fs = [slice(None)] * 3
                cs = [slice(None)] * 3
                fs[a], cs[a] = end, cend
                labels = grid.patches[face]
                active = (labels == Patch.INLET) | (labels == Patch.OUTLET)
                if not active.any():
                    continue
                cidx = cell[tuple(cs)][active]
                bP.append(cidx)
                bF.append(sgn * fluxes[a][tuple(fs)][active])  # outward
                bD.append((area[tuple(cs)] / (0.5 * hcell[tuple(cs)]) * D_cell[tuple(cs)])[active])
                bkind.append(labels[active])
                bax.append(np.full(active.sum(), a))
                bflat.append(fidx[tuple(fs)][active])
                bsgn.append(np.full(active.sum(), sgn))
        self.P = np.concatenate(P_l)
        self.N = np.concatenate(N_l)
        self.F = np.concatenate(F_l)
        self.Dp = np.concatenate(Dp_l)
        self.f_axis, self.f_flat = np.concatenate(fax), np.concatenate(fflat)
        cat = lambda v, dt=float: np.concatenate(v) if v else np.zeros(0, dt)  # noqa: E731
        self.b_axis, self.b_flat, self.b_sgn = cat(bax, int), cat(bflat, int), cat(bsgn)
        self.bP = np.concatenate(bP) if bP else np.zeros(0, int)
        self.bF = np.concatenate(bF) if bF else np.zeros(0)
        self.bD = np.concatenate(bD) if bD else np.zeros(0)
        self.bkind = np.concatenate(bkind) if bkind else np.zeros(0, int)
        self.inlet = self.bkind == Patch.INLET
        self.c_in = c_in
        ncell = grid.ncells
        pe = self.F / self.Dp
        self.DB = self.Dp * bernoulli(pe)
        self.dDB_dF = bernoulli_derivative(pe)
        bpe = np.where(self.inlet, self.bF / np.where(self.bD > 0, self.bD, 1.0), 0.0)
        self.bDB = np.where(self.inlet, self.bD * bernoulli(bpe), 0.0)
        self.bdDB_dF = np.where(self.inlet, bernoulli_derivative(bpe), 0.0)
        cP = self.F + self.DB
        rows = np.concatenate([self.P, self.P, self.N, self.N, self.bP])
        cols = np.concatenate([self.P, self.N, self.P, self.N, self.bP])
        vals = np.concatenate([cP, -self.DB, -cP, self.DB, self.bF + self.bDB])
        self.matrix = sp.csr_matrix((vals, (rows, cols)), shape=(ncell, ncell))
        self.rhs = np.bincount(self.bP, weights=self.bDB * c_in, minlength=ncell)

    def boundary_flux(self, c):
        """Outward species flux per active boundary face (mol/s)."""
        cp = c[self.bP]
        return self.bF * cp + self.bDB * (cp - np.where(self.inlet, self.c_in, cp))

    def flux_sensitivity(self, c, lam, shapes):
        """``lam^T dR/dF`` scattered onto the three face-flux arrays."""
        cP, cN = c[self.P], c[self.N]
        dJ = cP + self.dDB_dF * (cP - cN)
        g_int = (lam[self.P] - lam[self.N]) * dJ
        cb = c[self.bP]
        dJb = cb + self.bdDB_dF * (cb - np.where(self.inlet, self.c_in, cb))
        g_b = self.b_sgn * lam[self.bP] * dJb
        out = []
        for a in range(3):
            g = np.zeros(int(np.prod(shapes[a])))
            m = self.f_axis == a
            np.add.at(g, self.f_flat[m], g_int[m])
            mb = self.b_axis == a
            np.add.at(g, self.b_flat[mb], g_b[mb])
            out.append(g.reshape(shapes[a]))
        return out


class _Problem:
    """Index maps and linear operators shared by the solver and the adjoint."""

    def __init__(self, grid: Grid, flow, config: CaseConfig):
        self.grid = grid
        self.config = config
        self.props = EffectiveProperties.from_config(config)
        n = grid.shape
        self.N = grid.ncells
        emask = grid.electrode_mask
        self.ecell = np.flatnonzero(emask.ravel())
        self.Ne = len(self.ecell)
        self.eshape = (grid.nx, grid.ny, grid.nz_electrode)
        self.V = grid.volumes.ravel()
        self.Ve = self.V[self.ecell]
        self.fluxes = _face_fluxes(flow, grid)
        self.speed = flow.speed()[:, :, : grid.nz_electrode].ravel()
        self.km = mass_transfer_coeff(self.speed, config.u_floor)
        D2 = np.where(emask, self.props.D2_electrode, self.props.D2_channel)
        D3 = np.where(emask, self.props.D3_electrode, self.props.D3_channel)
        self.t2 = _Transport(grid, self.fluxes, D2, config.c2_in)
        self.t3 = _Transport(grid, self.fluxes, D3, config.c3_in)
        # electrode-only conduction graph
        ecell = np.arange(self.Ne).reshape(self.eshape)
        h = [np.full(grid.nx, grid.hx), np.full(grid.ny, grid.hy), np.asarray(grid.hz[: grid.nz_electrode])]
        P_l, N_l, A_l, hP_l, hN_l = [], [], [], [], []
        for a in range(3):
            others = [b for b in range(3) if b != a]
            area = np.ones(self.eshape)
            for b in others:
                s = [1, 1, 1]
                s[b] = -1
                area = area * h[b].reshape(s)
            s = [1, 1, 1]
            s[a] = -1
            hcell = np.broadcast_to(h[a].reshape(s), self.eshape)
            lo = [slice(None)] * 3
            hi = [slice(None)] * 3
            lo[a], hi[a] = slice(0, self.eshape[a] - 1), slice(1, self.eshape[a])
            lo, hi = tuple(lo), tuple(hi)
            P_l.append(ecell[lo].ravel())
            N_l.append(ecell[hi].ravel())
            A_l.append(area[lo].ravel())
            hP_l.append(hcell[lo].ravel())
            hN_l.append(hcell[hi].ravel())
        self.eP, self.eN = np.concatenate(P_l), np.concatenate(N_l)
        self.eA, self.ehP, self.ehN = np.concatenate(A_l), np.concatenate(hP_l), np.concatenate(hN_l)
        self.top = ecell[:, :, -1].ravel()
        self.bottom = ecell[:, :, 0].ravel()
        self.set_current(config.I)
        sig = self.props.sigma_s
        self.sig_face = self.eA / (0.5 * self.ehP / sig + 0.5 * self.ehN / sig)
        self.Ls = self._laplacian(self.sig_face)
        self.pin = int(ecell[0, 0, -1])
        self.pin_scale = float(self.Ls.diagonal()[self.pin])
        self.phi_e_ref = 0.0
        self.sl = {
            "c2": slice(0, self.N), "c3": slice(self.N, 2 * self.N),
            "ps": slice(2 * self.N, 2 * self.N + self.Ne),
            "pe": slice(2 * self.N + self.Ne, 2 * self.N + 2 * self.Ne),
        }
        self.size = 2 * self.N + 2 * self.Ne
        dkappa = effective_ionic_conductivity(1.0, 0.0, config), effective_ionic_conductivity(0.0, 1.0, config)
        self.dkappa = (0.0, 0.0) if config.kappa_mode == "constant" else (float(dkappa[0]), float(dkappa[1]))

    def set_current(self, current: float):
        """Applied current (A) entering through the membrane and leaving through the plate face."""
        self.current = float(current)
        flux = self.current / self.config.electrode_area * self.grid.hx * self.grid.hy
        self.collector = np.bincount(self.top, weights=np.full(len(self.top), flux), minlength=self.Ne)
        self.membrane = np.bincount(self.bottom, weights=np.full(len(self.bottom), flux), minlength=self.Ne)

    def _laplacian(self, coef):
        rows = np.concatenate([self.eP, self.eN, self.eP, self.eN])
        cols = np.concatenate([self.eP, self.eN, self.eN, self.eP])
        vals = np.concatenate([coef, coef, -coef, -coef])
        return sp.csr_matrix((vals, (rows, cols)), shape=(self.Ne, self.Ne))

    def unpack(self, y):
        return (y[self.sl["c2"]], y[self.sl["c3"]], y[self.sl["ps"]], y[self.sl["pe"]])

    def kappa_faces(self, c2e, c3e):
        kap = effective_ionic_conductivity(c2e, c3e, self.config)
        kap = np.broadcast_to(kap, c2e.shape)
        kP, kN = kap[self.eP], kap[self.eN]
        denom = 0.5 * self.ehP / kP + 0.5 * self.ehN / kN
        kf = self.eA / denom
        dkf_dkP = kf**2 * 0.5 * self.ehP / (self.eA * kP**2)
        dkf_dkN = kf**2 * 0.5 * self.ehN / (self.eA * kN**2)
        return kf, dkf_dkP, dkf_dkN

    def eta(self, c2e, c3e, ps, pe):
        return ps - (pe + self.phi_e_ref) - open_circuit_potential(c2e, c3e, self.config)

    def to_internal(self, y_phys):
        """Electrolyte potential relative to ``phi_e_ref``.

        With a highly conductive electrolyte the potential is nearly uniform;
        removing its offset keeps the face differences free of cancellation.
        """
        y = np.array(y_phys, dtype=float)
        y[self.sl["pe"]] -= self.phi_e_ref
        return y

    def to_physical(self, y):
        y = np.array(y, dtype=float)
        y[self.sl["pe"]] += self.phi_e_ref
        return y

    def kinetics(self, y, km=None):
        c2, c3, ps, pe = self.unpack(y)
        c2e, c3e = c2[self.ecell], c3[self.ecell]
        eta = self.eta(c2e, c3e, ps, pe)
        return kinetics_with_derivatives(c2e, c3e, eta, self.km if km is None else km, self.config), eta

    def residual(self, y, with_jacobian=True):
        cfg = self.config
        c2, c3, ps, pe = self.unpack(y)
        c2e, c3e = c2[self.ecell], c3[self.ecell]
        kin, eta = self.kinetics(y)
        jV = kin.j * self.Ve
        Fc = cfg.F
        r2 = self.t2.matrix @ c2 - self.t2.rhs
        r3 = self.t3.matrix @ c3 - self.t3.rhs
        np.subtract.at(r2, self.ecell, jV / Fc)
        np.add.at(r3, self.ecell, jV / Fc)
        kf, dkP, dkN = self.kappa_faces(c2e, c3e)
        Le = self._laplacian(kf)
        # cathodic j moves current from the electrolyte into the solid
        rs = self.Ls @ ps + self.collector - jV
        re = Le @ pe - self.membrane + jV
        rs[self.pin] = self.pin_scale * ps[self.pin]
        R = np.concatenate([r2, r3, rs, re])
        if not with_jacobian:
            return R, None
        # chain through eta = ps - pe - U(c2, c3)
        vt = cfg.thermal_voltage
        eta_c2, eta_c3 = vt / c2e, -vt / c3e
        dj_c2 = (kin.j_c2 + kin.j_eta * eta_c2) * self.Ve
        dj_c3 = (kin.j_c3 + kin.j_eta * eta_c3) * self.Ve
        dj_ps = kin.j_eta * self.Ve
        dj_pe = -kin.j_eta * self.Ve
        N, Ne = self.N, self.Ne
        o2, o3, os_, oe = 0, N, 2 * N, 2 * N + Ne
        ec = self.ecell
        er = np.arange(Ne)
        rows, cols, vals = [], [], []

        def put(r, c, v):
            rows.append(r)
            cols.append(c)
            vals.append(v)

        for mat, off in ((self.t2.matrix, o2), (self.t3.matrix, o3)):
            m = mat.tocoo()
            put(m.row + off, m.col + off, m.data)
        for roff, sign in ((o2, -1.0 / Fc), (o3, 1.0 / Fc)):
            put(ec + roff, ec + o2, sign * dj_c2)
            put(ec + roff, ec + o3, sign * dj_c3)
            put(ec + roff, er + os_, sign * dj_ps)
            put(ec + roff, er + oe, sign * dj_pe)
        keep = er != self.pin
        Lsc = self.Ls.tocoo()
        ks = Lsc.row != self.pin
        put(Lsc.row[ks] + os_, Lsc.col[ks] + os_, Lsc.data[ks])
        put(er[keep] + os_, ec[keep] + o2, -dj_c2[keep])
        put(er[keep] + os_, ec[keep] + o3, -dj_c3[keep])
        put(er[keep] + os_, er[keep] + os_, -dj_ps[keep])
        put(er[keep] + os_, er[keep] + oe, -dj_pe[keep])
        put(np.array([self.pin + os_]), np.array([self.pin + os_]), np.array([self.pin_scale]))
        Lec = Le.tocoo()
        put(Lec.row + oe, Lec.col + oe, Lec.data)
        put(er + oe, ec + o2, dj_c2)
        put(er + oe, ec + o3, dj_c3)
        put(er + oe, er + os_, dj_ps)
        put(er + oe, er + oe, dj_pe)
        if self.dkappa != (0.0, 0.0):
            dphi = pe[self.eP] - pe[self.eN]
            for k_idx, cell_e, dk in ((0, self.eP, dkP), (1, self.eN, dkN)):
                w = dphi * dk
                for off, dkc in ((o2, self.dkappa[0]), (o3, self.dkappa[1])):
                    # face term w*(pe_P - pe_N) enters row P with + and row N with -
                    put(self.eP + oe, ec[cell_e] + off, w * dkc)
                    put(self.eN + oe, ec[cell_e] + off, -w * dkc)
        J = sp.csc_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(self.size, self.size))
        return R, J

    def initial_guess(self, current: float | None = None):
        cfg = self.config
        I = cfg.I if current is None else current
        c2 = np.full(self.N, cfg.c2_in)
        c3 = np.full(self.N, cfg.c3_in)
        U = open_circuit_potential(cfg.c2_in, cfg.c3_in, cfg)
        eta0 = 0.0
        if I > 0:
            target = I / self.grid.electrode_volume
            km = np.full(1, np.mean(self.km))

            def g(e):
                k = kinetics_with_derivatives(np.array([cfg.c2_in]), np.array([cfg.c3_in]), np.array([e]), km, cfg)
                return float(k.j[0]) - target
            lo = -cfg.eta_clamp / (cfg.alpha_c * cfg.f) * 0.999
            eta0 = brentq(g, lo, 0.0) if g(lo) > 0 else lo
        ps = np.zeros(self.Ne)
        pe = np.full(self.Ne, -(eta0 + U))
        return np.concatenate([c2, c3, ps, pe])


@dataclass(frozen=True, eq=False)
class ElectroState:
    grid: Grid = field(repr=False)
    c2: np.ndarray
    c3: np.ndarray
    phi_s: np.ndarray
    phi_e: np.ndarray
    j: np.ndarray
    eta: np.ndarray
    U: np.ndarray
    i0: np.ndarray
    c2s: np.ndarray
    c3s: np.ndarray
    km: np.ndarray
    M: np.ndarray
    P: np.ndarray
    iterations: int
    history: list = field(repr=False)
    problem: _Problem = field(repr=False)
    y: np.ndarray = field(repr=False)

    @property
    def y_physical(self) -> np.ndarray:
        """Unknown vector in absolute potentials; suitable as a warm start."""
        return self.problem.to_physical(self.y)

    @property
    def Rsb2(self):
        return self.c2s / self.c2[:, :, : self.grid.nz_electrode]

    @property
    def Rsb3(self):
        return self.c3s / self.c3[:, :, : self.grid.nz_electrode]

    def _ve(self):
        return self.grid.volumes[:, :, : self.grid.nz_electrode]

    def total_current(self) -> float:
        """Volume integral of the transfer current over the electrode (A)."""
        return float(np.sum(self.j * self._ve()))

    def mean_abs_eta(self) -> float:
        v = self._ve()
        return float(np.sum(np.abs(self.eta) * v) / v.sum())

    def mean_c3s(self) -> float:
        v = self._ve()
        return float(np.sum(self.c3s * v) / v.sum())

    def plane_currents(self):
        """Upward electronic and ionic current through each horizontal plane of the electrode.

        Index 0 is the membrane face, the last entry the face under the plate.
        """
        pr = self.problem
        nze = self.grid.nz_electrode
        area = self.grid.hx * self.grid.hy
        hz = self.grid.hz[:nze]
        sig = pr.props.sigma_s
        kap = np.broadcast_to(effective_ionic_conductivity(
            self.c2[:, :, :nze], self.c3[:, :, :nze], pr.config), self.phi_e.shape)
        i_s = np.zeros(nze + 1)
        i_e = np.zeros(nze + 1)
        i_s[-1] = pr.config.I
        i_e[0] = pr.config.I
        for k in range(1, nze):
            gs = sig / (0.5 * hz[k - 1] + 0.5 * hz[k])
            ke = 1.0 / (0.5 * hz[k - 1] / kap[:, :, k - 1] + 0.5 * hz[k] / kap[:, :, k])
            i_s[k] = np.sum(gs * (self.phi_s[:, :, k - 1] - self.phi_s[:, :, k])) * area
            i_e[k] = np.sum(ke * (self.phi_e[:, :, k - 1] - self.phi_e[:, :, k])) * area
        return i_s, i_e

    def species_balance(self):
        """(inflow, outflow) of total vanadium through inlet/outlet patches (mol/s)."""
        pr = self.problem
        c2, c3 = self.c2.ravel(), self.c3.ravel()
        f = pr.t2.boundary_flux(c2) + pr.t3.boundary_flux(c3)
        return float(-f[pr.t2.inlet].sum()), float(f[~pr.t2.inlet].sum())

    def outlet_average(self, species: int) -> float:
        pr = self.problem
        t = pr.t2 if species == 2 else pr.t3
        c = (self.c2 if species == 2 else self.c3).ravel()
        out = ~t.inlet
        flux = t.boundary_flux(c)[out]
        return float(flux.sum() / t.bF[out].sum())

    def summary(self) -> dict:
        return {"mean_abs_eta": self.mean_abs_eta(), "mean_c3s": self.mean_c3s(),
                "total_current": self.total_current()}


def _merit(R, scale):
    return float(np.sqrt(np.mean((R * scale) ** 2)))


class JacobianLU:
    """Sparse LU of the equilibrated Jacobian, with transposed solves for the adjoint.

    Rows and columns are scaled to unit max-norm, then factorized in a
    symmetric fill-reducing order with weak diagonal pivoting; the
    species/potential coupling is structurally symmetric, which keeps the
    fill well below that of a column ordering.
    """

    def __init__(self, J):
        J = J.tocsr()
        self.dr = 1.0 / np.asarray(abs(J).max(axis=1).todense()).ravel()
        Js = sp.diags(self.dr) @ J
        self.dc = 1.0 / np.asarray(abs(Js).max(axis=0).todense()).ravel()
        Js = (Js @ sp.diags(self.dc)).tocsc()
        try:
            self._lu = spla.splu(Js, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.01,
                                 options=dict(SymmetricMode=True))
        except RuntimeError as exc:
            raise ElectrochemError(f"singular electrochemistry Jacobian: {exc}") from exc

    def solve(self, b, trans: str = "N"):
        if trans == "N":
            return self.dc * self._lu.solve(self.dr * b)
        return self.dr * self._lu.solve(self.dc * b, trans="T")


def _newton(problem: _Problem, y0: np.ndarray, config: CaseConfig, max_iter: int | None = None):
    max_iter = config.electro_max_iter if max_iter is None else max_iter
    y = y0.copy()
    sl = problem.sl
    history = []
    vt = config.thermal_voltage

    R, J = problem.residual(y)
    scale = None
    prev_merit = None
    merits = []
    for it in range(1, max_iter + 1):
        try:
            lu = JacobianLU(J)
        except ElectrochemError as exc:
            raise ElectrochemError(str(exc), history) from exc
        dy = -lu.solve(R)
        if not np.all(np.isfinite(dy)):
            raise ElectrochemError("non-finite Newton update", history)
        if scale is None:
            scale = 1.0 / np.maximum(np.abs(J.diagonal()), 1e-300)
        merit = _merit(R, scale)
        c = np.concatenate([y[sl["c2"]], y[sl["c3"]]])
        dc = np.concatenate([dy[sl["c2"]], dy[sl["c3"]]])
        upd_c = np.max(np.abs(dc) / np.maximum(np.abs(c), 1e-300))
        upd_p = np.max(np.abs(dy[2 * problem.N:])) / max(np.max(np.abs(y[2 * problem.N:])), vt)
        upd = max(upd_c, upd_p)
        if upd < config.electro_tol:
            # converged: the full step is below the update tolerance
            y = y + dy
            R, J = problem.residual(y)
            history.append((it, float(np.max(np.abs(R) * scale)), float(upd), 1.0))
            return y, R, J, it, history
        if upd < STAGNATION_UPDATE and prev_merit is not None and merit > 0.5 * prev_merit:
            # residual at round-off level; further steps only move within the noise
            history.append((it, float(merit), float(upd), 0.0))
            return y, R, J, it, history
        prev_merit = merit
        # keep concentrations positive
        neg = dc < 0
        step = 1.0
        if neg.any():
            step = min(1.0, 0.9 * float(np.min(-c[neg] / dc[neg])))
        # limit the overpotential change to a few thermal voltages per step
        c2, c3, _, _ = problem.unpack(y)
        d2, d3, dps, dpe = problem.unpack(dy)
        ce2, ce3 = c2[problem.ecell], c3[problem.ecell]
        deta = dps - dpe - vt * (d3[problem.ecell] / ce3 - d2[problem.ecell] / ce2)
        dmax = float(np.max(np.abs(deta))) if len(deta) else 0.0
        if dmax > ETA_STEP_LIMIT * vt:
            step = min(step, ETA_STEP_LIMIT * vt / dmax)
        while True:
            y_try = y + step * dy
            R_try, _ = problem.residual(y_try, with_jacobian=False)
            m_try = _merit(R_try, scale)
            if np.isfinite(m_try) and (m_try < merit or m_try < 1e-11 or step < 1e-3):
                break
            step *= 0.5
        y = y_try
        history.append((it, float(m_try), float(upd), step))
        merits.append(m_try)
        if len(merits) > STALL_WINDOW and m_try > 0.5 * merits[-STALL_WINDOW - 1]:
            raise ElectrochemError(f"Newton iteration stalled at iteration {it} (merit {m_try:.3g})", history)
        R, J = problem.residual(y)
    raise ElectrochemError(
        f"Newton iteration did not converge in {max_iter} iterations "
        f"(last update {history[-1][2]:.3g})", history)


def solve_electrochem(grid: Grid, flow, config: CaseConfig, initial: np.ndarray | None = None) -> ElectroState:
    """Solve the coupled species/charge/kinetics system for a converged flow field."""
    problem = _Problem(grid, flow, config)
    y0 = initial if initial is not None and len(initial) == problem.size else problem.initial_guess()
    problem.phi_e_ref = float(np.mean(y0[problem.sl["pe"]]))
    try:
        y, R, J, its, hist = _newton(problem, problem.to_internal(y0), config)
    except ElectrochemError as first:
        log.info("Newton failed from the direct start (%s); continuing in the applied current", first)
        y, its, hist = _continuation(problem, config, list(first.history))
    return _build_state(problem, y, its, hist)


def _continuation(problem: _Problem, config: CaseConfig, history):
    """Adaptive continuation in the applied current from the no-current equilibrium."""
    target = config.I
    y = problem.to_internal(problem.initial_guess(0.0))
    done, frac = 0.0, 0.25
    its = 0
    try:
        while done < 1.0:
            trial = min(1.0, done + frac)
            problem.set_current(trial * target)
            try:
                y_new, _, _, its, h = _newton(problem, y, config)
            except ElectrochemError as exc:
                history += exc.history
                frac *= 0.5
                if frac < MIN_CONTINUATION_STEP:
                    raise ElectrochemError(
                        f"current continuation stalled at I = {done * target:.4g} A of {target:.4g} A",
                        history) from exc
                continue
            history += h
            y, done = y_new, trial
            frac = min(2.0 * frac, 1.0)
    finally:
        problem.set_current(target)
    return y, its, history


def _build_state(problem: _Problem, y: np.ndarray, iterations: int, history) -> ElectroState:
    cfg = problem.config
    grid = problem.grid
    c2, c3, ps, pe = problem.unpack(y)
    if np.any(c2 <= 0) or np.any(c3 <= 0):
        bad = int(np.flatnonzero((c2 <= 0) | (c3 <= 0))[0])
        raise ElectrochemError(f"concentration positivity violated in cell {np.unravel_index(bad, grid.shape)}",
                               history)
    es = problem.eshape
    c2e, c3e = c2[problem.ecell], c3[problem.ecell]
    eta = problem.eta(c2e, c3e, ps, pe)
    ea, ec, *_ = _exp_factors(eta, cfg)
    M, P = _mp(c2e, c3e, problem.km, ea, ec, cfg)
    c2s, c3s = surface_concentrations(c2e, c3e, eta, problem.km, cfg)
    j = butler_volmer(c2e, c3e, c2s, c3s, eta, cfg)
    return ElectroState(
        grid=grid, c2=c2.reshape(grid.shape), c3=c3.reshape(grid.shape),
        phi_s=ps.reshape(es), phi_e=(pe + problem.phi_e_ref).reshape(es), j=j.reshape(es), eta=eta.reshape(es),
        U=open_circuit_potential(c2e, c3e, cfg).reshape(es),
        i0=exchange_current_density(c2e, c3e, cfg).reshape(es),
        c2s=c2s.reshape(es), c3s=c3s.reshape(es), km=problem.km.reshape(es),
        M=M.reshape(es), P=P.reshape(es), iterations=iterations, history=history,
        problem=problem, y=y)
