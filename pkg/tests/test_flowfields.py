import csv
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from vrfb_topopt.config import CaseConfig
from vrfb_topopt.flowfields import (REPORT_COLUMNS, FieldKind, FlowFieldError, PerformanceReport,
                                    ReferenceFieldSpec, connectivity, evaluate_design, generate_reference, sweep)
from vrfb_topopt.geometry import build_grid
from vrfb_topopt.topopt import DensityField


def grid_for(n, **kw):
    return build_grid(CaseConfig(nx=n, ny=n, nz_channel=1, nz_electrode=1, **kw))


def mid_column_runs(density, grid):
    col = density.rho[grid.nx // 2, :, 0] > 0.5
    return int(np.sum(np.diff(np.concatenate([[0], col.astype(int), [0]])) == 1))


def test_parallel_channel_count_matches_counting_oracle():
    grid = grid_for(100)  # 1 mm cells
    d = generate_reference(ReferenceFieldSpec(FieldKind.PARALLEL), grid)
    assert mid_column_runs(d, grid) == math.floor((0.1 - 3e-3) / 9e-3) + 1 == 11


@pytest.mark.parametrize("n", [24, 32, 48, 100])
def test_connectivity_classifier(n):
    grid = grid_for(n)
    par = connectivity(generate_reference(ReferenceFieldSpec("parallel"), grid), grid)
    inter = connectivity(generate_reference(ReferenceFieldSpec("interdigitated"), grid), grid)
    assert par.through
    assert not inter.through
    assert inter.inlet_branches >= 2 and inter.outlet_branches >= 2


def test_reference_is_binary_and_fills_channel_layer():
    grid = build_grid(CaseConfig(nx=30, ny=30, nz_channel=2, nz_electrode=2))
    d = generate_reference(ReferenceFieldSpec("interdigitated"), grid)
    assert d.rho.shape == (30, 30, 2)
    assert set(np.unique(d.rho)) == {0.0, 1.0}
    assert np.array_equal(d.rho[:, :, 0], d.rho[:, :, 1])


@pytest.mark.parametrize("kw", [dict(width=0.0), dict(pitch=2e-3), dict(thickness=-1.0)])
def test_invalid_spec(kw):
    with pytest.raises(FlowFieldError):
        ReferenceFieldSpec("parallel", **kw)


def test_spec_must_fit_grid():
    with pytest.raises(FlowFieldError):
        generate_reference(ReferenceFieldSpec("parallel"), grid_for(12))
    with pytest.raises(FlowFieldError):
        generate_reference(ReferenceFieldSpec("parallel", thickness=2e-3), grid_for(24))


def test_power_loss_example():
    rep = PerformanceReport.build("x", I=10.0, eps=0.929, Q=1e-6, dp=100.0, mean_abs_eta=0.04, F=700.0)
    assert rep.P_loss == pytest.approx(0.4001, abs=1e-15)


@given(st.floats(0, 50), st.floats(0, 1), st.floats(0, 1e-4), st.floats(0, 1e4))
def test_power_loss_identity(I, eta, Q, dp):
    rep = PerformanceReport.build("x", I, 0.9, Q, dp, eta, 700.0)
    assert rep.P_loss == I * eta + Q * dp
    assert rep.polarization_loss >= 0 and rep.pumping_loss >= 0


@pytest.fixture(scope="module")
def case():
    cfg = CaseConfig(nx=24, ny=24, nz_channel=2, nz_electrode=2)
    grid = build_grid(cfg)
    designs = {k: generate_reference(ReferenceFieldSpec(k), grid) for k in ("parallel", "interdigitated")}
    return cfg, grid, designs


def test_evaluate_hits_flowrate(case):
    cfg, grid, designs = case
    rep = evaluate_design(designs["parallel"], grid, cfg, flowrate=2e-6, name="parallel")
    assert rep.Q == pytest.approx(2e-6, rel=5e-3)
    assert rep.P_loss == rep.polarization_loss + rep.pumping_loss
    with pytest.raises(ValueError):
        evaluate_design(designs["parallel"], grid, cfg, flowrate=1e-6, dp=10.0)


def test_sweep_rows_and_failures(case, tmp_path):
    cfg, grid, designs = case
    bad = DensityField.binary(np.ones((3, 3, 1)))
    table = {"parallel": designs["parallel"], "copy": designs["parallel"], "broken": bad}
    reps = sweep(table, [(4.0, 0.929, 1e-6), (4.0, 0.929, 4e-6)], grid, cfg, csv_path=tmp_path / "s.csv")
    assert len(reps) == 6 and reps[2] is None and reps[5] is None
    assert reps[0] == PerformanceReport(**{**reps[1].__dict__, "design": "parallel"})
    rows = list(csv.reader(open(tmp_path / "s.csv")))
    assert tuple(rows[0]) == REPORT_COLUMNS
    assert rows[3][-1].startswith("error") and rows[1][-1] == "ok"
    with pytest.raises(ValueError):
        sweep({}, [(4.0, 0.929, 1e-6)], grid, cfg)


def test_power_loss_rises_with_flowrate(case):
    cfg, grid, designs = case
    reps = sweep({"i": designs["interdigitated"]}, [(4.0, 0.929, q) for q in (5e-6, 10e-6, 15e-6)], grid, cfg)
    losses = [r.P_loss for r in reps]
    dps = [r.dp / r.Q for r in reps]
    assert losses[0] < losses[1] < losses[2]
    assert max(dps) / min(dps) - 1 < 1e-2
