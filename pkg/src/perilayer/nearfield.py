"""Near-field singularity S_1 on the truncated holed sector and the direct perforated solve."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Optional

import numpy as np

from . import fem
from .cell import TransmissionConstants
from .fem import Field, Locator
from .geometry import CornerFrame, DomainSpec, PeriodicityCell, lam
from .macro import cone_lift, fit_corner_basis, jump_amplitudes, mode_angular
from .mesh import Mesh, SectorSpec, mesh_perforated, mesh_sector


class FitError(RuntimeError):
    pass


@dataclass
class NearFieldResult:
    field: Field
    L_minus1: float
    diagnostics: dict = field(default_factory=dict)


def leading_block(corner: str, tc: Optional[TransmissionConstants]):
    """r^{2/3} w_1 + r^{-1/3} G_1 as a callable (r, theta, side).

    G_1 is the cone term forced on the layer ray by the effective jump conditions
    applied to r^{2/3} w_1; it is absent when all constants vanish.
    """
    frame = CornerFrame(corner, 0.0)
    w1 = mode_angular(frame, 1)
    G1 = None
    if tc is not None:
        D1t = float(tc.d_t[1]) if len(tc.d_t) > 1 else 0.0
        a, b = jump_amplitudes(corner, 1, tc.d_infinity, tc.N2t, tc.N2n, D1t)
        if abs(a) > 1e-14 or abs(b) > 1e-14:
            G1 = cone_lift(corner, lam(1) - 1.0, a, b)

    def block(r, t, s):
        out = r ** lam(1) * w1(t, s, 0)
        if G1 is not None:
            out = out + r ** (lam(1) - 1.0) * G1(t, s, 0)
        return out
    return block


def _solve_sector(mesh: Mesh, corner: str, R: float, tc: Optional[TransmissionConstants] = None,
                  amplitude: float = 1.0) -> Field:
    frame = CornerFrame(corner, 0.0)
    block = leading_block(corner, tc)
    sys_ = fem.SparseSystem(mesh, fem.stiffness(mesh), np.zeros(mesh.n_vertices))
    sys_ = fem.apply_dirichlet(sys_, "dirichlet")

    def arc(x, y):
        _, th = frame.polar(x, y)
        lo, hi = frame.interval
        th = np.clip(th, lo, hi)
        r = np.full_like(th, R)
        up, dn = block(r, th, np.ones_like(th)), block(r, th, -np.ones_like(th))
        # on the layer ray the two one-sided values are averaged
        on_ray = np.abs(th - frame.theta_layer) < 1e-12
        side = np.where(on_ray, 0.5 * (up + dn), np.where(_upper(frame, th), up, dn))
        return amplitude * side
    sys_ = fem.apply_dirichlet(sys_, "outer_arc", arc)
    return fem.solve(sys_)


def _upper(frame: CornerFrame, th):
    return th < frame.theta_layer if frame.corner == "plus" else th > frame.theta_layer


def fit_L_minus1(S: Field, corner: str, R: float, tc: Optional[TransmissionConstants],
                 window_factor: float = 3.0, radii_frac=(0.25, 1 / 3, 0.5)):
    """Fit S on arcs; returns (L_minus1, coefficients, residual).

    Basis: c1 (r^{2/3} w_1 + r^{-1/3} G_1), c_{-1} r^{-2/3} w_{-1}, c_{-2} r^{-4/3} w_{-2},
    c_2 r^{4/3} w_2. L_minus1 = c_{-1} / c1.
    """
    frame = CornerFrame(corner, 0.0)
    loc = Locator(S.mesh)

    def ev(x, y, side):
        return loc.interpolate(S.values, np.column_stack([np.ravel(x), np.ravel(y)]))

    basis = [leading_block(corner, tc), (lam(-1), mode_angular(frame, -1)),
             (lam(-2), mode_angular(frame, -2)), (lam(2), mode_angular(frame, 2))]
    radii = [f * R for f in radii_frac]
    sol, res = fit_corner_basis(ev, frame, basis, radii, lambda r: window_factor / r)
    if res > 0.1:
        raise FitError(f"near-field fit residual {res:.3f} exceeds 10% of the leading term")
    return float(sol[1] / sol[0]), sol, res


def solve_S1(spec: SectorSpec, tc: Optional[TransmissionConstants] = None,
             richardson: bool = True, window_factor: float = 3.0,
             amplitude: float = 1.0) -> NearFieldResult:
    """S_1 with the leading block as Dirichlet data on the arc, Richardson over R_max and 2 R_max."""
    runs = []
    specs = [spec, replace(spec, R_max=2 * spec.R_max)] if richardson else [spec]
    for sp in specs:
        mesh = mesh_sector(sp)
        S = _solve_sector(mesh, sp.corner, sp.R_max, tc, amplitude)
        Lm1, coef, res = fit_L_minus1(S, sp.corner, sp.R_max, tc, window_factor)
        runs.append({"R_max": sp.R_max, "L_minus1": Lm1, "coeffs": coef.tolist(),
                     "residual": res, "n_vertices": mesh.n_vertices, "field": S})
    if richardson:
        p = 4.0 / 3.0
        a, b = runs[0]["L_minus1"], runs[1]["L_minus1"]
        value = (2 ** p * b - a) / (2 ** p - 1.0)
        uncertainty = abs(b - a) / (2 ** p - 1.0)
    else:
        value = runs[0]["L_minus1"]
        uncertainty = float("nan")
    diag = {"runs": [{k: v for k, v in r.items() if k != "field"} for r in runs],
            "uncertainty": uncertainty, "corner": spec.corner, "window_factor": window_factor}
    return NearFieldResult(runs[0]["field"], float(value), diag)


def solve_direct(domain: DomainSpec, mesh: Mesh, check_energy: bool = True) -> Field:
    """-lap u = f on the perforated mesh, u = 0 on the outer boundary, natural on holes."""
    sys_ = fem.assemble(mesh, domain.source, order=5)
    sys_ = fem.apply_dirichlet(sys_, "dirichlet")
    u = fem.solve(sys_)
    if check_energy:
        e = fem.energy_check(sys_, u)
        if np.linalg.norm(sys_.rhs) > 0 and e > 1e-8:
            raise fem.SolverError(f"energy identity violated ({e:.2e})")
    return u


def solve_direct_delta(domain: DomainSpec, cell: PeriodicityCell, delta: float,
                       h: float) -> Field:
    return solve_direct(domain, mesh_perforated(domain, cell, delta, h))
