import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from perilayer import fem
from perilayer.cell import (BandOperator, g_fields, g_terms, compatibility_integrals, solve_profile_D,
                            transmission_constants)
from perilayer.geometry import CutoffProfile, Disk, PeriodicityCell, Polygon, chi
from perilayer.mesh import BandSpec, mesh_band
from perilayer.oracle import fd_d_infinity

TRIANGLE = PeriodicityCell(Polygon(((0.3, -0.2), (0.7, -0.1), (0.4, 0.3))))


def test_empty_cell_constants(empty_tc):
    tc = empty_tc
    # solver round-off only
    assert abs(tc.d_infinity) < 1e-9
    assert abs(tc.N2t) < 1e-9 and abs(tc.N2n) < 1e-9
    assert np.abs(tc.d_n).max() < 1e-9 and np.abs(tc.d_t).max() < 1e-9


def test_empty_cell_D_is_X2():
    m = mesh_band(BandSpec(PeriodicityCell(), 4.0, 0.125))
    prof, d_inf, info = solve_profile_D(m)
    assert abs(d_inf) < 1e-12
    assert np.abs(info["D"] - m.vertices[:, 1]).max() < 1e-10


@pytest.mark.parametrize("kind", ["quintic", "cosine"])
def test_compatibility_integrals(disk_cell, kind):
    prof = CutoffProfile(kind)
    m = mesh_band(BandSpec(disk_cell, 8.0, 1 / 64))
    _, d_inf, info = solve_profile_D(m, profile=prof)
    vals = compatibility_integrals(m, info["D"], prof)
    expected = np.array([0, -2, 0, 0, d_inf, 0, 0, 2])
    assert np.abs(vals - expected).max() <= 1e-3 * max(1.0, abs(d_inf))


def test_g_fields_support():
    X2 = np.linspace(-4, 4, 801)
    for p in range(4):
        avg, jump = g_fields(CutoffProfile(), p, X2)
        outside = (np.abs(X2) <= 1.0) | (np.abs(X2) >= 2.0)
        assert np.all(avg[outside] == 0.0) and np.all(jump[outside] == 0.0)


def test_g_terms_fields(disk_cell):
    m = mesh_band(BandSpec(disk_cell, 4.0, 0.1))
    a, j = g_terms(1, CutoffProfile(), m)
    assert a.values.shape == (m.n_vertices,) and np.any(j.values)


def test_base_identities(disk_tc):
    tc = disk_tc
    d = tc.diagnostics
    assert d["w0t_nodal_error"] < 1e-8
    W0 = tc.profiles[("t", 0)]
    X2 = W0.mesh.vertices[:, 1]
    assert np.abs(W0.field.values - (1 - chi(CutoffProfile(), X2))).max() < 1e-8
    assert d["w1n_minus_dtilde_rel"] < 1e-3
    assert abs(tc.d_n[1] - 2 * tc.d_infinity) <= 1e-6 * abs(tc.d_infinity)


def test_w1t_vanishes_without_hole_flux(disk_cell):
    tc = transmission_constants(disk_cell, hole_flux=False)
    assert tc.diagnostics["w1t_l2"] < 1e-8
    assert abs(tc.d_t[1]) < 1e-12
    # the homogeneous hole condition gives the hole area as N_2^t
    assert tc.N2t == pytest.approx(tc.diagnostics["hole_area"], rel=1e-4)


def test_full_hole_condition_symmetric_disk(disk_tc):
    # W_1^t carries the X1-corrector but D_1^t vanishes by symmetry
    assert disk_tc.diagnostics["w1t_l2"] > 1e-3
    assert abs(disk_tc.d_t[1]) < 1e-10
    assert disk_tc.N2t > disk_tc.diagnostics["hole_area"]


def test_compatibility_and_decay(disk_tc):
    for name, s in disk_tc.diagnostics["solves"].items():
        assert s["compat_1"] <= 1e-8 and s["compat_D"] <= 1e-8, name
    for key, prof in disk_tc.profiles.items():
        if prof.interior_mass > 1e-12:
            assert prof.decay_report <= 1e-6 * prof.interior_mass, key


def test_top_bottom_agree(disk_cell):
    m = mesh_band(BandSpec(disk_cell, 10.0, 1 / 32))
    _, d_inf, info = solve_profile_D(m)
    assert abs(info["d_top"] - info["d_bottom"]) < 1e-6


def test_truncation_robustness(disk_cell):
    h = 1 / 32
    a = transmission_constants(disk_cell, L_band=8.0, h=h).d_infinity
    b = transmission_constants(disk_cell, L_band=12.0, h=h).d_infinity
    assert abs(a - b) <= 1e-6 + 10 * h * h


def test_mirror_symmetry():
    sym = PeriodicityCell(Disk((0.5, 0.2), 0.2))
    assert sym.mirrored() == sym
    a = transmission_constants(TRIANGLE, h=1 / 32)
    b = transmission_constants(TRIANGLE.mirrored(), h=1 / 32)
    assert b.d_infinity == pytest.approx(a.d_infinity, rel=2e-3)
    assert b.N2t == pytest.approx(a.N2t, rel=2e-3)
    # the tangential constant D_1^t flips sign under the mirror
    assert b.d_t[1] == pytest.approx(-a.d_t[1], rel=0.05, abs=1e-5)


def test_oracle_n2t_disk(disk_tc):
    fd = fd_d_infinity(PeriodicityCell(Disk((0.5, 0.0), 0.25)), 8.0, 1 / 128)
    assert disk_tc.d_infinity == pytest.approx(fd["d_infinity"], rel=1e-2)
    assert disk_tc.N2t == pytest.approx(fd["n2t"], rel=1e-2)
    assert abs(disk_tc.N2n) < 1e-10 and abs(fd["n2n"]) < 1e-6


def test_oracle_triangle():
    tc = transmission_constants(TRIANGLE)
    fd = fd_d_infinity(TRIANGLE, 8.0, 1 / 64)
    assert tc.d_infinity == pytest.approx(fd["d_infinity"], rel=2e-2)
    assert tc.N2t == pytest.approx(fd["n2t"], rel=2e-2)
    assert tc.N2n == pytest.approx(fd["n2n"], rel=2e-2)


def test_profile_evaluation_periodic(disk_tc):
    W = disk_tc.profiles[("n", 1)]
    X2 = np.linspace(-3, 3, 13)
    assert np.allclose(W.evaluate(0.3 + 0 * X2, X2), W.evaluate(2.3 + 0 * X2, X2), atol=1e-12)
    assert np.all(W.evaluate(np.array([0.1]), np.array([7.5])) == 0.0)


def test_invalid_order(disk_cell):
    with pytest.raises(ValueError):
        transmission_constants(disk_cell, P=1)


@settings(max_examples=5, deadline=None, suppress_health_check=[HealthCheck.too_slow])
@given(st.floats(0.35, 0.65), st.floats(-0.3, 0.3), st.floats(0.1, 0.3))
def test_random_disks(cx, cy, r):
    cell = PeriodicityCell(Disk((cx, cy), r))
    tc = transmission_constants(cell, L_band=6.0, h=1 / 16)
    assert tc.d_infinity > 0
    assert abs(tc.d_n[1] - 2 * tc.d_infinity) <= 1e-6 * tc.d_infinity
    for s in tc.diagnostics["solves"].values():
        assert s["compat_1"] <= 1e-8 and s["compat_D"] <= 1e-8
    # the perforation lowers the conductance of the X1-potential
    assert tc.N2t > 0


def test_band_operator_integral():
    m = mesh_band(BandSpec(PeriodicityCell(), 3.0, 0.25))
    op = BandOperator(m)
    assert op.integral(op.ones) == pytest.approx(6.0, rel=1e-12)
    u = op.solve(op.top_w - op.bot_w)
    assert np.isfinite(fem.subdomain_norms(m, u)["h1"])
