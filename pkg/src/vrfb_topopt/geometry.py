"""Structured two-layer half-cell grid and the Kozeny-Carman permeability.

Cells are indexed ``(i, j, k)`` along ``(x, y, z)`` and flattened in C order.
The porous electrode occupies the bottom ``nz_electrode`` layers
(``z in [0, t_e]``); the flow-field design layer sits on top of it.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import IntEnum

import numpy as np

from .config import CaseConfig


class Region(IntEnum):
    ELECTRODE = 0
    DESIGN = 1


class Patch(IntEnum):
    SIDE_WALL = 0
    INLET = 1
    OUTLET = 2
    COLLECTOR_WALL = 3
    MEMBRANE_WALL = 4


FACES = ("x0", "x1", "y0", "y1", "z0", "z1")


class GridError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class Grid:
    nx: int
    ny: int
    nz_channel: int
    nz_electrode: int
    L: float
    W: float
    t_c: float
    t_e: float
    hz: np.ndarray
    region: np.ndarray
    patches: dict

    @property
    def nz(self) -> int:
        return self.nz_channel + self.nz_electrode

    @property
    def shape(self) -> tuple:
        return (self.nx, self.ny, self.nz)

    @property
    def ncells(self) -> int:
        return self.nx * self.ny * self.nz

    @property
    def hx(self) -> float:
        return self.L / self.nx

    @property
    def hy(self) -> float:
        return self.W / self.ny

    @property
    def height(self) -> float:
        return float(self.hz.sum())

    @property
    def z_edges(self) -> np.ndarray:
        return np.concatenate([[0.0], np.cumsum(self.hz)])

    @property
    def z_centers(self) -> np.ndarray:
        e = self.z_edges
        return 0.5 * (e[1:] + e[:-1])

    @property
    def x_centers(self) -> np.ndarray:
        return (np.arange(self.nx) + 0.5) * self.hx

    @property
    def y_centers(self) -> np.ndarray:
        return (np.arange(self.ny) + 0.5) * self.hy

    @property
    def volumes(self) -> np.ndarray:
        return np.broadcast_to(self.hx * self.hy * self.hz, self.shape).copy()

    @property
    def electrode_mask(self) -> np.ndarray:
        return self.region == Region.ELECTRODE

    @property
    def design_mask(self) -> np.ndarray:
        return self.region == Region.DESIGN

    @property
    def electrode_volume(self) -> float:
        return float(self.volumes[self.electrode_mask].sum())

    def face_areas(self, face: str) -> np.ndarray:
        """Areas of the boundary faces on one side, shaped like ``patches[face]``."""
        if face in ("x0", "x1"):
            return np.broadcast_to(self.hy * self.hz, (self.ny, self.nz)).copy()
        if face in ("y0", "y1"):
            return np.broadcast_to(self.hx * self.hz, (self.nx, self.nz)).copy()
        return np.full((self.nx, self.ny), self.hx * self.hy)

    def patch_mask(self, face: str, patch: Patch) -> np.ndarray:
        return self.patches[face] == patch

    def patch_area(self, patch: Patch) -> float:
        return float(sum(self.face_areas(f)[self.patch_mask(f, patch)].sum() for f in FACES))

    def boundary_area(self) -> float:
        return float(sum(self.face_areas(f).sum() for f in FACES))

    def describe(self) -> dict:
        return {
            "nx": self.nx, "ny": self.ny, "nz_channel": self.nz_channel,
            "nz_electrode": self.nz_electrode, "L": self.L, "W": self.W,
            "t_c": self.t_c, "t_e": self.t_e, "ncells": self.ncells,
            "inlet_faces": int(sum(self.patch_mask(f, Patch.INLET).sum() for f in FACES)),
            "outlet_faces": int(sum(self.patch_mask(f, Patch.OUTLET).sum() for f in FACES)),
        }

    @classmethod
    def box(cls, nx, ny, nz, lx, ly, lz, region=Region.DESIGN):
        """Single-region box with the whole x0 face as inlet and x1 face as outlet.

        Used for verification problems (ducts, Darcy columns).
        """
        patches = _wall_patches(nx, ny, nz)
        patches["x0"][:] = Patch.INLET
        patches["x1"][:] = Patch.OUTLET
        nz_e = nz if region == Region.ELECTRODE else 0
        return cls(nx=nx, ny=ny, nz_channel=nz - nz_e, nz_electrode=nz_e, L=lx, W=ly,
                   t_c=lz if nz_e == 0 else 0.0, t_e=lz if nz_e else 0.0,
                   hz=np.full(nz, lz / nz), region=np.full((nx, ny, nz), int(region), dtype=np.int8),
                   patches=patches)


def _wall_patches(nx, ny, nz) -> dict:
    return {
        "x0": np.zeros((ny, nz), dtype=np.int8), "x1": np.zeros((ny, nz), dtype=np.int8),
        "y0": np.zeros((nx, nz), dtype=np.int8), "y1": np.zeros((nx, nz), dtype=np.int8),
        "z0": np.zeros((nx, ny), dtype=np.int8), "z1": np.zeros((nx, ny), dtype=np.int8),
    }


def _side_patch(face, center, width, nx, ny, hx, hy, L, W, nz_e, nz, name):
    n, h, extent = (ny, hy, W) if face in ("x0", "x1") else (nx, hx, L)
    lo, hi = center * extent - 0.5 * width, center * extent + 0.5 * width
    tol = 1e-12 * extent
    if lo < -tol or hi > extent + tol:
        raise GridError(f"{name} patch [{lo:.4g}, {hi:.4g}] m lies outside the face extent {extent:.4g} m")
    centers = (np.arange(n) + 0.5) * h
    sel = np.abs(centers - center * extent) <= 0.5 * width + tol
    if not sel.any():
        sel[np.argmin(np.abs(centers - center * extent))] = True
    mask = np.zeros((n, nz), dtype=bool)
    mask[np.ix_(sel, np.arange(nz_e, nz))] = True
    return mask


def build_grid(config: CaseConfig) -> Grid:
    nx, ny, nzc, nze = config.nx, config.ny, config.nz_channel, config.nz_electrode
    if min(nx, ny, nzc, nze) < 1:
        raise GridError("cell counts must be positive")
    if min(config.L, config.W, config.t_c, config.t_e) <= 0:
        raise GridError("dimensions must be positive")
    nz = nzc + nze
    hz = np.concatenate([np.full(nze, config.t_e / nze), np.full(nzc, config.t_c / nzc)])
    region = np.full((nx, ny, nz), int(Region.ELECTRODE), dtype=np.int8)
    region[:, :, nze:] = Region.DESIGN

    patches = _wall_patches(nx, ny, nz)
    patches["z0"][:] = Patch.MEMBRANE_WALL
    patches["z1"][:] = Patch.COLLECTOR_WALL
    args = (nx, ny, config.L / nx, config.W / ny, config.L, config.W, nze, nz)
    inlet = _side_patch(config.inlet_face, config.inlet_center, config.inlet_width, *args, "inlet")
    outlet = _side_patch(config.outlet_face, config.outlet_center, config.outlet_width, *args, "outlet")
    if config.inlet_face == config.outlet_face and (inlet & outlet).any():
        raise GridError("inlet and outlet patches overlap")
    patches[config.inlet_face][inlet] = Patch.INLET
    patches[config.outlet_face][outlet] = Patch.OUTLET
    return Grid(nx=nx, ny=ny, nz_channel=nzc, nz_electrode=nze, L=config.L, W=config.W,
                t_c=config.t_c, t_e=config.t_e, hz=hz, region=region, patches=patches)


def permeability(config: CaseConfig) -> float:
    """Kozeny-Carman permeability of the fibrous electrode (m^2)."""
    eps = config.eps
    if not 0.0 < eps < 1.0:
        raise ValueError(f"porosity must lie in (0, 1), got {eps}")
    return config.d_f**2 * eps**3 / (16.0 * config.K_ck * (1.0 - eps) ** 2)
