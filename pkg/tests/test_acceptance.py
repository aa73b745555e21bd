"""Acceptance criteria: each test prints one PASS/FAIL line and asserts the same condition."""
import json
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from perilayer import fem
from perilayer.cell import compatibility_integrals, solve_profile_D, transmission_constants
from perilayer.geometry import (CornerFrame, CutoffProfile, Disk, DomainSpec, PeriodicityCell, chi,
                                lam)
from perilayer.macro import cone_lift, extract_corner_coeffs, solve_limit, solve_macro_correction
from perilayer.mesh import BandSpec, SectorSpec, mesh_band, mesh_layer_pair, mesh_limit_split
from perilayer.nearfield import solve_direct, solve_S1
from perilayer.oracle import fd_oracle

ROOT = Path(__file__).resolve().parents[1]
BENCH = ROOT / "configs" / "benchmark.cfg"
DISK = Disk((0.5, 0.0), 0.25)


def report(capsys, n, name, ok, detail):
    with capsys.disabled():
        print(f"\n[acceptance {n}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
    assert ok, detail


def test_criterion_1_cell_compatibility(capsys):
    prof = CutoffProfile()
    t = time.perf_counter()
    m = mesh_band(BandSpec(PeriodicityCell(DISK), 8.0, 1 / 64))
    _, d_inf, info = solve_profile_D(m, profile=prof)
    vals = compatibility_integrals(m, info["D"], prof)
    secs = time.perf_counter() - t
    err = float(np.abs(vals - np.array([0, -2, 0, 0, d_inf, 0, 0, 2])).max())
    tol = 1e-3 * max(1.0, abs(d_inf))
    report(capsys, 1, "cell compatibility", err <= tol and secs < 30,
           f"max error {err:.2e} <= {tol:.1e}, {secs:.1f} s < 30 s")


def test_criterion_2_base_identities(capsys, disk_tc, disk_cell):
    d = disk_tc.diagnostics
    # W_1^t vanishes for the homogeneous hole condition; with the full condition it carries
    # the X1-corrector and is not identically zero
    tc0 = transmission_constants(disk_cell, hole_flux=False)
    W0 = disk_tc.profiles[("t", 0)]
    X2 = W0.mesh.vertices[:, 1]
    w0 = float(np.abs(W0.field.values - (1 - chi(CutoffProfile(), X2))).max())
    w1t = tc0.diagnostics["w1t_l2"]
    w1n = d["w1n_minus_dtilde_rel"]
    d1n = abs(disk_tc.d_n[1] - 2 * disk_tc.d_infinity) / abs(disk_tc.d_infinity)
    ok = w0 <= 1e-8 and w1t <= 1e-8 and w1n <= 1e-3 and d1n <= 1e-6
    report(capsys, 2, "base identities", ok,
           f"|W0t-(1-chi)| {w0:.1e}, ||W1t|| {w1t:.1e} (full hole flux: {d['w1t_l2']:.2e}), "
           f"||W1n-Dt||/||Dt|| {w1n:.1e}, |D1n-2Dinf|/Dinf {d1n:.1e}")


def test_criterion_3_empty_hole(capsys, empty_tc):
    t = time.perf_counter()
    tc = empty_tc
    consts = max(abs(tc.d_infinity), abs(tc.N2t), abs(tc.N2n))
    d = DomainSpec()
    h = 0.05
    perf, lim, node_map = mesh_layer_pair(d, PeriodicityCell(), 0.125, h)
    ud = solve_direct(d, perf)
    shared = fem.subdomain_norms(perf, ud.values - solve_limit(d, lim).nodal_total()[node_map])
    # u00 on an independent mesh, interpolated to the direct mesh
    fine = solve_limit(d, mesh_limit_split(d, h / 2))
    v = perf.vertices
    other = fem.subdomain_norms(perf, ud.values - fine.evaluate(v[:, 0], v[:, 1]))
    # the composite of an empty layer is u00: the correction vanishes
    u00 = solve_limit(d, lim)
    u01 = solve_macro_correction(u00, tc, d)
    ratio = float(np.abs(u01.nodal_total()).max() / np.abs(u00.nodal_total()).max())
    secs = time.perf_counter() - t
    ok = consts <= 1e-3 and shared["h1"] <= 5 * h and other["h1"] <= 5 * h and ratio <= 1e-9
    ok = ok and secs < 120
    report(capsys, 3, "empty-hole degeneracy", ok,
           f"max constant {consts:.1e}, H1(u_direct-u00) shared mesh {shared['h1']:.1e}, "
           f"independent mesh {other['h1']:.2e} <= {5 * h}, |u01|/|u00| {ratio:.1e}, {secs:.1f} s")


def test_criterion_4_chi_independence(capsys, disk_cell):
    gaps = {}
    for h in (1 / 64, 1 / 128):
        a = transmission_constants(disk_cell, CutoffProfile("quintic"), h=h)
        b = transmission_constants(disk_cell, CutoffProfile("cosine"), h=h)
        gaps[h] = max(abs(a.d_infinity - b.d_infinity) / abs(a.d_infinity),
                      abs(a.N2t - b.N2t) / abs(a.N2t),
                      abs(a.N2n - b.N2n) / max(abs(a.N2t), 1e-300))
    g0, g1 = gaps[1 / 64], gaps[1 / 128]
    agree = g0 <= 1e-3 and g1 <= 1e-3
    # a gap at solver round-off has no discretization part left to halve
    if max(g0, g1) <= 1e-9:
        halving, note = True, "both gaps at round-off, halving not measurable"
    else:
        r = g1 / g0
        halving, note = 0.35 <= r <= 0.65, f"ratio {r:.2f} in [0.35, 0.65]"
    report(capsys, 4, "chi independence", agree and halving,
           f"relative gap {g0:.1e} (h=1/64), {g1:.1e} (h=1/128); {note}")


def test_criterion_5_oracle(capsys):
    fd = fd_oracle(PeriodicityCell(DISK), L_band=12.0, h=1 / 256)
    tc = transmission_constants(PeriodicityCell(DISK, hole_vertices=256))
    rel = abs(tc.d_infinity - fd["d_infinity"]) / abs(fd["d_infinity"])
    reln = abs(tc.N2t - fd["n2t"]) / abs(fd["n2t"])
    report(capsys, 5, "oracle agreement", rel <= 1e-3,
           f"D_inf FEM {tc.d_infinity:.6f} vs oracle {fd['d_infinity']:.6f}, rel {rel:.1e} "
           f"<= 1e-3 (N2t rel {reln:.1e})")


def test_criterion_6_extraction(capsys):
    worst_c, worst_leak, worst_res = 0.0, 0.0, 0.0
    for corner in ("plus", "minus"):
        fr = CornerFrame(corner, 1.0)
        for q in (1, -1):
            def f(x, y, side, q=q):
                r, th = fr.polar(x, y)
                return r ** lam(q) * fr.mode(q, th)
            cc = extract_corner_coeffs(f, fr, (1, -1, 2, -2))
            worst_c = max(worst_c, abs(cc[q] - 1.0))
            worst_leak = max(worst_leak, max(abs(cc[o]) for o in (1, -1, 2, -2) if o != q))
        for n in (1, 2):
            for a, b in ((1.0, 0.0), (0.0, 1.0), (0.3, -2.0)):
                worst_res = max(worst_res, float(np.abs(cone_lift(corner, lam(n) - 1, a, b)
                                                        .residuals()).max()))
    ok = worst_c <= 1e-6 and worst_leak <= 1e-6 and worst_res <= 1e-12
    report(capsys, 6, "corner extraction", ok,
           f"coefficient error {worst_c:.1e}, leakage {worst_leak:.1e}, "
           f"cone_lift residual {worst_res:.1e}")


def test_criterion_7_nearfield(capsys, disk_tc, disk_cell):
    empty = {c: solve_S1(SectorSpec(c, 16.0, PeriodicityCell()), None).L_minus1
             for c in ("plus", "minus")}
    disk = {c: solve_S1(SectorSpec(c, 16.0, disk_cell), disk_tc).L_minus1
            for c in ("plus", "minus")}
    e = max(abs(v) for v in empty.values())
    rel = abs(disk["plus"] - disk["minus"]) / abs(disk["plus"])
    report(capsys, 7, "near-field sanity", e <= 1e-2 and rel <= 2e-2,
           f"empty sector |L_-1| {e:.1e} <= 1e-2; symmetric disk L_-1 {disk['plus']:.5f} / "
           f"{disk['minus']:.5f}, rel {rel:.1e} <= 2e-2")


def _study(out):
    t = time.perf_counter()
    proc = subprocess.run([sys.executable, "-m", "perilayer.cli", "study", "--config", str(BENCH),
                           "--out", str(out), "--threads", "1"], capture_output=True, text=True)
    return proc, time.perf_counter() - t


@pytest.mark.slow
def test_criterion_8_convergence(capsys, tmp_path_factory):
    out = tmp_path_factory.mktemp("bench_a")
    proc, secs = _study(out)
    man = json.loads((out / "manifest_study.json").read_text())
    checks = man.get("checks", [])
    detail = "; ".join(f"{'PASS' if c['passed'] else 'FAIL'} {c['name']}: {c['detail']}"
                       for c in checks)
    ok = proc.returncode == 0 and len(checks) == 3 and all(c["passed"] for c in checks)
    ok = ok and secs <= 1800
    eoc = " ".join(f"{lv}:{man['eoc'][lv]['h1']['slope']:.2f}" for lv in sorted(man["eoc"]))
    report(capsys, 8, "convergence rates", ok, f"H1 EOC {eoc}; {detail}; {secs:.0f} s")
    (tmp_path_factory.getbasetemp() / "bench_a_csv").write_bytes(
        (out / "convergence.csv").read_bytes())


@pytest.mark.slow
def test_criterion_9_determinism(capsys, tmp_path_factory):
    first = tmp_path_factory.getbasetemp() / "bench_a_csv"
    if not first.exists():
        out = tmp_path_factory.mktemp("bench_a")
        _study(out)
        first.write_bytes((out / "convergence.csv").read_bytes())
    out = tmp_path_factory.mktemp("bench_b")
    proc, secs = _study(out)
    a, b = first.read_bytes(), (out / "convergence.csv").read_bytes()
    report(capsys, 9, "determinism", a == b and len(a) > 0,
           f"two cold runs at --threads 1 give {'identical' if a == b else 'different'} "
           f"convergence.csv ({len(a)} bytes)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
