import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from vrfb_topopt.config import CaseConfig
from vrfb_topopt.flow import (FlowError, alpha_fic, alpha_fic_derivative, alpha_field, alpha_max,
                              assemble_brinkman, solve_flow, solve_flow_at_rate)
from vrfb_topopt.geometry import Grid, Region, build_grid, permeability

CFG = CaseConfig()


def poiseuille_error(nz):
    """Max deviation from the analytic plate profile, relative to the peak velocity."""
    L, h, dp = 0.02, 1.0e-3, 10.0
    grid = Grid.box(4, 1, nz, L, 1.0, h)
    flow = assemble_brinkman(grid, np.zeros(grid.shape), CFG, p_in=dp, p_out=0.0).solve()
    z = grid.z_centers
    exact = dp * z * (h - z) / (2.0 * CFG.mu * L)
    return np.max(np.abs(flow.ux[2, 0, :] - exact)) / exact.max()


@pytest.mark.parametrize("nz", [8, 16])
def test_poiseuille_profile(nz):
    assert poiseuille_error(nz) <= 0.05


def test_poiseuille_converges_under_refinement():
    assert poiseuille_error(16) < poiseuille_error(8)


def test_darcy_column():
    # large cross-section cells make the viscous wall term negligible next to mu/K
    L, dp = 0.05, 200.0
    grid = Grid.box(10, 3, 3, L, 0.03, 0.03, region=Region.ELECTRODE)
    alpha = np.full(grid.shape, CFG.mu / permeability(CFG))
    flow = assemble_brinkman(grid, alpha, CFG, p_in=dp, p_out=0.0).solve()
    exact = permeability(CFG) * dp / (CFG.mu * L)
    assert np.max(np.abs(flow.ux[:, 1, 1] / exact - 1.0)) < 1e-6


def test_alpha_fic_values():
    amax = alpha_max(CFG)
    assert amax == pytest.approx(5.0 * CFG.mu / permeability(CFG))
    assert alpha_fic(1.0, CFG) == 0.0
    assert alpha_fic(0.0, CFG) == pytest.approx(amax)
    assert alpha_fic(0.5, CFG) == pytest.approx(0.01 * 0.5 / 0.51 * amax)
    assert alpha_fic(0.5, CFG) / amax == pytest.approx(0.0098, abs=5e-5)
    for bad in (-0.1, 1.1):
        with pytest.raises(ValueError):
            alpha_fic(bad, CFG)


@given(st.floats(0.0, 1.0))
def test_alpha_fic_derivative_matches_difference(rho):
    h = 1e-8
    lo, hi = max(rho - h, 0.0), min(rho + h, 1.0)
    fd = (alpha_fic(hi, CFG) - alpha_fic(lo, CFG)) / (hi - lo)
    assert alpha_fic_derivative(rho, CFG) == pytest.approx(fd, rel=1e-5)
    assert alpha_fic_derivative(rho, CFG) < 0


def test_alpha_field_nonnegative_and_zero_only_in_fluid(small_grid):
    rho = np.linspace(0, 1, small_grid.nx * small_grid.ny * small_grid.nz_channel)
    alpha = alpha_field(small_grid, rho, CFG)
    assert (alpha >= 0).all()
    zero = alpha == 0
    assert not zero[small_grid.electrode_mask].any()
    assert np.array_equal(np.flatnonzero(zero[:, :, small_grid.nz_electrode:]), np.flatnonzero(rho == 1.0))


def test_blocking_slab_stops_flow():
    grid = Grid.box(20, 1, 4, 0.1, 0.01, 3e-3)
    open_q = solve_flow(grid, np.ones(grid.shape), CFG).Q
    rho = np.ones(grid.shape)
    rho[10] = 0.0
    assert solve_flow(grid, rho, CFG).Q < 0.01 * open_q


def test_missing_pressure_boundary_reported():
    grid = Grid.box(3, 3, 3, 0.01, 0.01, 0.01)
    for face in ("x0", "x1"):
        grid.patches[face][:] = 0
    with pytest.raises(FlowError):
        assemble_brinkman(grid, np.zeros(grid.shape), CFG).solve()


@pytest.fixture(scope="module")
def grid():
    # ports two cells wide, so the grid is mirror symmetric in y
    return build_grid(CaseConfig(nx=12, ny=12, nz_channel=2, nz_electrode=3, inlet_width=0.02, outlet_width=0.02))


def test_conservation_and_walls(grid):
    flow = solve_flow(grid, np.ones(grid.nx * grid.ny * grid.nz_channel) * 0.7, CFG)
    assert abs(flow.Q_in - flow.Q_out) / flow.Q_in < 1e-6
    assert np.max(np.abs(flow.divergence())) < 1e-9 * flow.Q_in
    assert np.all(flow.uz[:, :, 0] == 0) and np.all(flow.uz[:, :, -1] == 0)
    assert np.all(flow.uy[:, 0] == 0) and np.all(flow.uy[:, -1] == 0)
    wall = grid.patches["x0"] == 0
    assert np.all(flow.ux[0][wall] == 0)
    assert flow.dp == pytest.approx(CFG.p_in - CFG.p_out)


def test_open_layer_carries_flow(grid):
    flow = solve_flow(grid, np.ones(grid.nx * grid.ny * grid.nz_channel), CFG)
    speed = flow.speed()
    assert speed[:, :, grid.nz_electrode:].mean() > 100 * speed[:, :, : grid.nz_electrode].mean()
    solid = solve_flow(grid, np.zeros(grid.nx * grid.ny * grid.nz_channel), CFG)
    assert solid.Q < flow.Q


def test_mirror_symmetry(grid, rng):
    half = rng.random((grid.nx, grid.ny // 2, grid.nz_channel))
    rho = np.concatenate([half, half[:, ::-1]], axis=1)
    flow = solve_flow(grid, rho, CFG)
    scale = np.abs(flow.ux).max()
    assert np.max(np.abs(flow.ux - flow.ux[:, ::-1])) < 1e-8 * scale
    assert np.max(np.abs(flow.uy + flow.uy[:, ::-1])) < 1e-8 * scale
    assert np.max(np.abs(flow.p - flow.p[:, ::-1])) < 1e-8 * CFG.p_in


def test_pressure_drop_linear_in_flowrate(grid):
    rho = np.ones(grid.nx * grid.ny * grid.nz_channel)
    a = solve_flow_at_rate(grid, rho, CFG, 1e-6)
    b = solve_flow_at_rate(grid, rho, CFG, 5e-6)
    assert a.Q_in == pytest.approx(1e-6, rel=5e-3) and b.Q_in == pytest.approx(5e-6, rel=5e-3)
    assert (b.dp / b.Q_in) == pytest.approx(a.dp / a.Q_in, rel=1e-2)
    with pytest.raises(ValueError):
        solve_flow_at_rate(grid, rho, CFG, 0.0)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1))
def test_more_resistance_never_more_flow(seed):
    grid = build_grid(CaseConfig(nx=6, ny=6, nz_channel=1, nz_electrode=1))
    rng = np.random.default_rng(seed)
    rho = rng.random((6, 6, 1))
    denser = rho * rng.random((6, 6, 1))  # pointwise lower density, higher alpha
    assert solve_flow(grid, denser, CFG).Q <= solve_flow(grid, rho, CFG).Q * (1 + 1e-10)
