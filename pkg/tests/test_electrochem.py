import numpy as np
import pytest
from hypothesis import given, strategies as st

from vrfb_topopt.config import CaseConfig
from vrfb_topopt.electrochem import (_Problem, bernoulli, bernoulli_derivative, butler_volmer,
                                     effective_ionic_conductivity, exchange_current_density,
                                     kinetics_with_derivatives, mass_transfer_coeff, open_circuit_potential,
                                     solve_electrochem, surface_concentrations)
from vrfb_topopt.flow import solve_flow
from vrfb_topopt.geometry import build_grid

CFG = CaseConfig()
conc = st.floats(1e-3, 2e3)
eta_s = st.floats(-0.5, 0.5)
km_s = st.floats(1e-8, 1e-3)


def test_mass_transfer_coefficient():
    assert mass_transfer_coeff(0.01) == pytest.approx(1.6e-4 * 10 ** (-0.8))
    assert mass_transfer_coeff(0.01) == pytest.approx(2.54e-5, rel=2e-3)
    assert mass_transfer_coeff(1.0) == pytest.approx(1.6e-4)
    assert mass_transfer_coeff(0.0) == pytest.approx(1.6e-4 * 1e-9**0.4) and mass_transfer_coeff(0.0) > 0
    with pytest.raises(ValueError):
        mass_transfer_coeff(-1.0)


def test_surface_identity_on_random_inputs(rng):
    n = 10_000
    c2, c3 = rng.uniform(1e-2, 1.5e3, n), rng.uniform(1e-2, 1.5e3, n)
    eta, km = rng.uniform(-0.4, 0.4, n), 10 ** rng.uniform(-9, -3, n)
    c2s, c3s = surface_concentrations(c2, c3, eta, km, CFG)
    total = c2 + c3
    assert np.max(np.abs(c2s + c3s - total) / total) <= 4 * np.finfo(float).eps
    assert (c2s >= 0).all() and (c3s >= 0).all()


def test_surface_limits():
    c2s, c3s = surface_concentrations(300.0, 900.0, 0.1, 1e30, CFG)
    assert (c2s, c3s) == pytest.approx((300.0, 900.0))
    c2s, c3s = surface_concentrations(750.0, 750.0, 0.0, 1e-5, CFG)
    assert (c2s, c3s) == pytest.approx((750.0, 750.0), rel=1e-14)
    with pytest.raises(ValueError):
        surface_concentrations(0.0, 750.0, 0.0, 1e-5, CFG)


def test_butler_volmer_values():
    assert butler_volmer(750.0, 750.0, 750.0, 750.0, 0.0, CFG) == 0.0
    # a F k c with c2 = c3 = 750 and symmetric transfer coefficients
    assert exchange_current_density(750.0, 750.0, CFG) == pytest.approx(1.62e4 * 96485.33212 * 1.7e-7 * 750)
    assert exchange_current_density(750.0, 750.0, CFG) == pytest.approx(1.99e5, rel=5e-3)
    assert butler_volmer(750.0, 750.0, 750.0, 750.0, -0.05, CFG) > 0
    assert butler_volmer(750.0, 750.0, 750.0, 750.0, 0.05, CFG) < 0


@given(conc, conc)
def test_open_circuit_potential(c2, c3):
    vt = 8.314462618 * 298.0 / 96485.33212
    assert open_circuit_potential(c2, c2, CFG) == pytest.approx(-0.255, abs=1e-15)
    u, swapped = open_circuit_potential(c2, c3, CFG), open_circuit_potential(c3, c2, CFG)
    assert u - CFG.U0 == pytest.approx(-(swapped - CFG.U0), abs=1e-12)
    assert open_circuit_potential(c2, np.e * c2, CFG) == pytest.approx(-0.255 + vt, abs=1e-12)


def test_open_circuit_potential_thermal_voltage():
    assert open_circuit_potential(1.0, np.e, CFG) - CFG.U0 == pytest.approx(0.02568, abs=1e-5)
    with pytest.raises(ValueError):
        open_circuit_potential(-1.0, 1.0, CFG)


def test_ionic_conductivity():
    assert effective_ionic_conductivity(750.0, 750.0, CFG, mode="constant") == 7.8
    deff = 0.929**1.5 * 2.4e-4
    expected = 96485.33212**2 / (8.314462618 * 298.0) * (4 * deff * 750 + 9 * deff * 750)
    assert effective_ionic_conductivity(750.0, 750.0, CFG) == pytest.approx(expected, rel=1e-12)
    assert effective_ionic_conductivity(1500.0, 1500.0, CFG) == pytest.approx(2 * expected)
    with pytest.raises(ValueError):
        effective_ionic_conductivity(750.0, 750.0, CFG, mode="fancy")


@given(conc, conc, eta_s, km_s)
def test_closed_form_matches_butler_volmer(c2, c3, eta, km):
    kin = kinetics_with_derivatives(np.array(c2), np.array(c3), np.array(eta), np.array(km), CFG)
    c2s, c3s = surface_concentrations(c2, c3, eta, km, CFG)
    j = butler_volmer(c2, c3, c2s, c3s, eta, CFG)
    scale = exchange_current_density(c2, c3, CFG) * (1 + abs(np.exp(20 * abs(eta))))
    assert abs(kin.j - j) <= 1e-12 * scale
    assert kin.c3s == pytest.approx(c3s, rel=1e-12, abs=1e-12 * (c2 + c3))


@given(conc, conc, km_s)
def test_current_strictly_decreasing_in_overpotential(c2, c3, km):
    eta = np.linspace(-0.3, 0.3, 201)
    kin = kinetics_with_derivatives(np.full_like(eta, c2), np.full_like(eta, c3), eta, np.full_like(eta, km), CFG)
    assert np.all(np.diff(kin.j) < 0)
    assert np.all(kin.j_eta < 0)


@given(conc, conc, eta_s, km_s)
def test_kinetics_derivatives(c2, c3, eta, km):
    x0 = np.array([c2, c3, eta, km])
    # round-off in j and c3s sets the floor of what a difference quotient can resolve
    j_noise = 64 * np.finfo(float).eps * exchange_current_density(c2, c3, CFG) * np.exp(20 * abs(eta))
    c_noise = 64 * np.finfo(float).eps * (c2 + c3)

    def ev(x):
        return kinetics_with_derivatives(*(np.array(v) for v in x), CFG)

    base = ev(x0)
    for i, name in enumerate(("c2", "c3", "eta", "km")):
        h = 1e-6 * (1e-2 if name == "eta" else x0[i])
        xp, xm = x0.copy(), x0.copy()
        xp[i] += h
        xm[i] -= h
        kp, kn = ev(xp), ev(xm)
        fd_j = (kp.j - kn.j) / (2 * h)
        fd_c = (kp.c3s - kn.c3s) / (2 * h)
        assert getattr(base, f"j_{name}") == pytest.approx(fd_j, rel=1e-4, abs=j_noise / h)
        assert getattr(base, f"c3s_{name}") == pytest.approx(fd_c, rel=1e-4, abs=c_noise / h)


@given(st.floats(-50, 50))
def test_bernoulli(x):
    assert bernoulli(x) > 0
    assert bernoulli(x) - bernoulli(-x) == pytest.approx(-x, abs=1e-12 * max(1, abs(x)))
    h = 1e-6
    fd = (bernoulli(x + h) - bernoulli(x - h)) / (2 * h)
    assert bernoulli_derivative(x) == pytest.approx(fd, rel=1e-5, abs=1e-9)


# -- coupled solve ---------------------------------------------------------------------

@pytest.fixture(scope="module")
def case():
    cfg = CaseConfig(nx=10, ny=10, nz_channel=2, nz_electrode=3, inlet_width=0.02, outlet_width=0.02)
    grid = build_grid(cfg)
    rho = np.ones((10, 10, 2))
    flow = solve_flow(grid, rho, cfg)
    return cfg, grid, flow


@pytest.fixture(scope="module")
def charged(case):
    cfg, grid, flow = case
    return solve_electrochem(grid, flow, cfg)


def test_zero_current_equilibrium(case):
    cfg, grid, flow = case
    st0 = solve_electrochem(grid, flow, cfg.replace(I=0.0))
    assert np.max(np.abs(st0.j)) < 1e-9
    assert np.max(np.abs(st0.eta)) < 1e-12
    assert np.allclose(st0.c2, 750.0, rtol=1e-12) and np.allclose(st0.c3, 750.0, rtol=1e-12)
    assert np.ptp(st0.phi_s) < 1e-12 and np.ptp(st0.phi_e) < 1e-12


def test_charge_conservation(charged, case):
    cfg, grid, _ = case
    assert abs(charged.total_current() - cfg.I) / cfg.I < 1e-4
    i_s, i_e = charged.plane_currents()
    assert np.allclose(i_s + i_e, cfg.I, rtol=1e-6)
    # the solid current below a plane equals the reaction integrated below it
    layer = np.sum(charged.j * charged._ve(), axis=(0, 1))
    assert np.allclose(i_s[1:-1], np.cumsum(layer)[:-1], rtol=1e-6, atol=1e-9 * cfg.I)


def test_species_balance_and_direction(charged):
    inflow, outflow = charged.species_balance()
    assert abs(outflow - inflow) / inflow < 1e-4
    assert charged.outlet_average(2) > 750.0 > charged.outlet_average(3)
    assert (charged.j >= 0).all() and (charged.eta < 0).all()
    assert np.allclose(charged.c2s + charged.c3s,
                       (charged.c2 + charged.c3)[:, :, : charged.grid.nz_electrode], rtol=1e-13)


def test_mirror_symmetric_concentrations(charged):
    for field in (charged.c2, charged.c3, charged.j):
        assert np.max(np.abs(field - field[:, ::-1])) <= 1e-8 * np.max(np.abs(field))


def test_jacobian_matches_differences(charged, rng):
    pr = charged.problem
    y = charged.y + 1e-3 * rng.standard_normal(charged.y.size) * np.maximum(np.abs(charged.y), 1e-3)
    R0, J = pr.residual(y)
    # per-row magnitude of the residual terms bounds the round-off in a difference quotient
    row_scale = abs(J) @ np.abs(y) + np.abs(R0)
    for col in rng.choice(y.size, 12, replace=False):
        h = 1e-6 * max(abs(y[col]), 1e-3)
        yp, ym = y.copy(), y.copy()
        yp[col] += h
        ym[col] -= h
        fd = (pr.residual(yp, with_jacobian=False)[0] - pr.residual(ym, with_jacobian=False)[0]) / (2 * h)
        an = J[:, col].toarray().ravel()
        noise = 64 * np.finfo(float).eps * row_scale / h
        assert np.all(np.abs(an - fd) <= 1e-6 * np.abs(an) + noise)


def test_warm_start_reproduces_solution(charged, case):
    cfg, grid, flow = case
    again = solve_electrochem(grid, flow, cfg, initial=charged.y_physical)
    assert again.iterations <= 2
    assert np.allclose(again.c3s, charged.c3s, rtol=1e-9)
