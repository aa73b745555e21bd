"""Macroscopic fields on the split limit mesh, cone lifts and corner coefficients."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.interpolate import make_lsq_spline

from . import fem
from .cell import TransmissionConstants
from .fem import Field, Locator
from .geometry import (SECTOR_NORM, CornerFrame, CutoffProfile, DomainSpec, in_lambda_set, lam,
                       radial_cutoff)
from .mesh import Mesh


class ResonanceError(ValueError):
    pass


class ConsistencyError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# cone lifts


def _subsectors(corner: str):
    """(top interval, bottom interval, interface angle) of the corner sector."""
    if corner == "plus":
        return (0.0, np.pi), (np.pi, 1.5 * np.pi), np.pi
    return (0.0, np.pi), (-0.5 * np.pi, 0.0), 0.0


@dataclass(frozen=True)
class ConeLift:
    """g(theta) = A_i sin(lam theta) + B_i cos(lam theta) on the top (i=1) and bottom (i=2) cones."""

    lam: float
    a: float
    b: float
    corner: str
    coeffs: tuple[float, float, float, float]

    def __call__(self, theta, side, k: int = 0) -> np.ndarray:
        theta = np.asarray(theta, float)
        side = np.broadcast_to(np.asarray(side), theta.shape)
        A1, B1, A2, B2 = self.coeffs
        A = np.where(side > 0, A1, A2)
        B = np.where(side > 0, B1, B2)
        s, c = np.sin(self.lam * theta), np.cos(self.lam * theta)
        if k == 0:
            return A * s + B * c
        if k == 1:
            return self.lam * (A * c - B * s)
        return -self.lam ** 2 * (A * s + B * c)

    def residuals(self) -> np.ndarray:
        top, bot, ti = _subsectors(self.corner)
        wt = top[0] if self.corner == "plus" else top[1]
        wb = bot[1] if self.corner == "plus" else bot[0]
        return np.array([
            float(self(wt, 1)),
            float(self(wb, -1)),
            float(self(ti, 1) - self(ti, -1)) - self.a,
            float(self(ti, 1, 1) - self(ti, -1, 1)) - self.b,
        ])


def cone_lift(corner: str, lam_: float, a: float, b: float) -> ConeLift:
    """Solve the 4x4 wall/jump system for the piecewise angular profile."""
    if in_lambda_set(lam_) or abs(lam_) < 1e-14:
        raise ResonanceError(f"exponent {lam_} is resonant (log case not supported)")
    top, bot, ti = _subsectors(corner)
    wt = top[0] if corner == "plus" else top[1]
    wb = bot[1] if corner == "plus" else bot[0]
    s = lambda t: np.sin(lam_ * t)
    c = lambda t: np.cos(lam_ * t)
    M = np.array([
        [s(wt), c(wt), 0.0, 0.0],
        [0.0, 0.0, s(wb), c(wb)],
        [s(ti), c(ti), -s(ti), -c(ti)],
        [lam_ * c(ti), -lam_ * s(ti), -lam_ * c(ti), lam_ * s(ti)],
    ])
    if abs(np.linalg.det(M)) < 1e-12:
        raise ResonanceError(f"singular cone system at exponent {lam_}")
    x = np.linalg.solve(M, np.array([0.0, 0.0, a, b]))
    return ConeLift(lam_, a, b, corner, tuple(float(v) for v in x))


# ---------------------------------------------------------------------------
# analytic corner terms chi_rho(r) r^mu angular(theta)


@dataclass(frozen=True)
class CornerLift:
    frame: CornerFrame
    mu: float
    angular: Callable  # angular(theta, side, k)
    coeff: float
    rho: float
    profile: CutoffProfile = CutoffProfile()

    def scaled(self, c: float) -> "CornerLift":
        return replace(self, coeff=self.coeff * c)

    def _parts(self, x, y):
        r, th = self.frame.polar(x, y)
        act = r < self.rho
        return r, th, act

    def value(self, x, y, side) -> np.ndarray:
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        side = np.broadcast_to(np.asarray(side), x.shape)
        out = np.zeros(x.shape)
        r, th, act = self._parts(x, y)
        act &= r > 0
        if act.any():
            ra, ta = r[act], th[act]
            out[act] = (self.coeff * radial_cutoff(self.profile, ra, self.rho)
                        * ra ** self.mu * self.angular(ta, side[act], 0))
        return out

    def laplacian(self, x, y, side) -> np.ndarray:
        """lap(chi v) = 2 chi' v_r + v (chi'' + chi'/r) for harmonic v = r^mu G."""
        x, y = np.broadcast_arrays(np.asarray(x, float), np.asarray(y, float))
        side = np.broadcast_to(np.asarray(side), x.shape)
        out = np.zeros(x.shape)
        r, th, act = self._parts(x, y)
        act &= r > 0.5 * self.rho
        if act.any():
            ra, ta = r[act], th[act]
            G = self.angular(ta, side[act], 0)
            v = ra ** self.mu * G
            vr = self.mu * ra ** (self.mu - 1) * G
            c1 = radial_cutoff(self.profile, ra, self.rho, 1)
            c2 = radial_cutoff(self.profile, ra, self.rho, 2)
            out[act] = self.coeff * (2.0 * c1 * vr + v * (c2 + c1 / ra))
        return out

    def gamma_trace(self, x1, side) -> np.ndarray:
        x1 = np.asarray(x1, float)
        r = np.abs(x1 - self.frame.origin[0])
        th = np.full(x1.shape, self.frame.theta_layer)
        out = np.zeros(x1.shape)
        act = (r > 0) & (r < self.rho)
        out[act] = (self.coeff * radial_cutoff(self.profile, r[act], self.rho)
                    * r[act] ** self.mu * self.angular(th[act], side, 0))
        return out


def mode_angular(frame: CornerFrame, m: int) -> Callable:
    return lambda theta, side, k=0: frame.mode(m, theta, k)


# ---------------------------------------------------------------------------
# macroscopic fields


def node_sides(mesh: Mesh) -> np.ndarray:
    side = np.where(mesh.vertices[:, 1] < 0, -1, 1)
    if len(mesh.interface_pairs):
        side[mesh.interface_pairs[:, 1]] = -1
    return side


@dataclass
class MacroField:
    field: Field
    label: str
    singular_lift: list = field(default_factory=list)
    diagnostics: dict = field(default_factory=dict)
    _loc: dict = field(default_factory=dict, repr=False)

    @property
    def mesh(self) -> Mesh:
        return self.field.mesh

    def lift_values(self, x, y, side) -> np.ndarray:
        out = np.zeros(np.broadcast(np.asarray(x), np.asarray(y)).shape)
        for lf in self.singular_lift:
            out = out + lf.value(x, y, side)
        return out

    def nodal_total(self) -> np.ndarray:
        v = self.mesh.vertices
        return self.field.values + self.lift_values(v[:, 0], v[:, 1], node_sides(self.mesh))

    def evaluate(self, x, y, side=None) -> np.ndarray:
        """FEM interpolation plus lifts; side defaults to sign(y) with y = 0 taken as top."""
        x = np.atleast_1d(np.asarray(x, float))
        y = np.atleast_1d(np.asarray(y, float))
        x, y = np.broadcast_arrays(x, y)
        if side is None:
            side = np.where(y < 0, -1, 1)
        side = np.broadcast_to(np.asarray(side), x.shape)
        out = np.full(x.shape, np.nan)
        pts = np.column_stack([x.ravel(), y.ravel()])
        sflat = side.ravel()
        res = np.full(len(pts), np.nan)
        for s, name in ((1, "top"), (-1, "bottom")):
            sel = sflat == s
            if not sel.any():
                continue
            if name not in self._loc:
                self._loc[name] = Locator(self.mesh, fem._side_mask(self.mesh, name))
            res[sel] = self._loc[name].interpolate(self.field.values, pts[sel])
        out = res.reshape(x.shape) + self.lift_values(x, y, side)
        return out

    def gamma_trace(self, side: str) -> tuple[np.ndarray, np.ndarray]:
        nodes = fem.gamma_nodes(self.mesh, side)
        x1 = self.mesh.vertices[nodes, 0]
        s = 1 if side == "top" else -1
        vals = self.field.values[nodes].copy()
        for lf in self.singular_lift:
            vals += lf.gamma_trace(x1, s)
        return x1, vals

    def average_trace(self) -> tuple[np.ndarray, np.ndarray]:
        x1, t = self.gamma_trace("top")
        _, b = self.gamma_trace("bottom")
        return x1, 0.5 * (t + b)

    def jump(self) -> np.ndarray:
        _, t = self.gamma_trace("top")
        _, b = self.gamma_trace("bottom")
        return t - b


def combine(terms: Sequence[tuple[float, MacroField]], label: str) -> MacroField:
    """Linear combination of fields on one mesh, lifts carried along scaled."""
    mesh = terms[0][1].mesh
    vals = np.zeros(mesh.n_vertices)
    lifts = []
    for c, f in terms:
        if f.mesh is not mesh:
            raise ValueError("fields live on different meshes")
        vals = vals + c * f.field.values
        lifts += [lf.scaled(c) for lf in f.singular_lift]
    return MacroField(Field(mesh, vals), label, lifts)


def solve_limit(domain: DomainSpec, mesh: Mesh) -> MacroField:
    """-lap u = f, u = 0 on the outer boundary, no jumps across Gamma."""
    sys_ = fem.assemble(mesh, domain.source, order=5)
    sys_ = fem.apply_dirichlet(sys_, "dirichlet")
    sys_ = fem.apply_interface_jump(sys_, mesh.interface_pairs)
    u = fem.solve(sys_)
    jump = u.values[mesh.interface_pairs[:, 0]] - u.values[mesh.interface_pairs[:, 1]]
    mf = MacroField(u, "u00")
    mf.diagnostics["max_jump"] = float(np.abs(jump).max()) if len(jump) else 0.0
    return mf


# ---------------------------------------------------------------------------
# corner coefficient extraction


@dataclass
class CornerCoeffs:
    corner: str
    coeffs: dict
    fit_radii: list
    fit_residual: float

    @property
    def reliable(self) -> bool:
        big = max((abs(v) for v in self.coeffs.values()), default=0.0)
        return self.fit_residual <= 0.05 * big or big == 0.0

    def __getitem__(self, q):
        return self.coeffs.get(q, 0.0)


def _arc_rule(frame: CornerFrame, n_panels: int = 12, n_gauss: int = 16):
    """Gauss-Legendre angles and weights on the sector, split at the interface ray."""
    top, bot, ti = _subsectors(frame.corner)
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    th, w, side = [], [], []
    for (a, b), s in ((top, 1), (bot, -1)):
        k = max(1, int(round(n_panels * (b - a) / (1.5 * np.pi))))
        edges = np.linspace(a, b, k + 1)
        for lo, hi in zip(edges[:-1], edges[1:]):
            th.append(0.5 * (lo + hi) + 0.5 * (hi - lo) * xg)
            w.append(0.5 * (hi - lo) * wg)
            side.append(np.full(n_gauss, s))
    return np.concatenate(th), np.concatenate(w), np.concatenate(side)


def _as_evaluator(obj) -> Callable:
    if isinstance(obj, MacroField):
        return obj.evaluate
    return obj


def default_radii(L: float, n: int = 5) -> np.ndarray:
    return np.geomspace(0.1 * L, 0.3 * L, n)


def extract_corner_coeffs(field_or_fn, frame: CornerFrame, q_range: Sequence[int] = (1, 2),
                          radii: Optional[Sequence[float]] = None) -> CornerCoeffs:
    """Angular projections c_k(r) on arcs, then a radial least-squares fit per index.

    field_or_fn is a MacroField or a callable f(x, y, side).
    """
    ev = _as_evaluator(field_or_fn)
    radii = np.asarray(default_radii(frame.L) if radii is None else radii, float)
    th, w, side = _arc_rule(frame)
    ks = sorted({abs(q) for q in q_range if q != 0})
    proj = np.zeros((len(radii), len(ks)))
    for i, r in enumerate(radii):
        x, y = frame.to_cartesian(r, th)
        vals = ev(x, y, side)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"arc r={r} leaves the mesh or meets a hole")
        for j, k in enumerate(ks):
            proj[i, j] = SECTOR_NORM * np.sum(w * vals * frame.mode(k, th))
    coeffs = {}
    res2 = 0.0
    scale2 = 0.0
    for j, k in enumerate(ks):
        qs = [q for q in (k, -k) if q in q_range]
        A = np.column_stack([radii ** lam(q) for q in qs])
        sol, *_ = np.linalg.lstsq(A, proj[:, j], rcond=None)
        for q, v in zip(qs, sol):
            # projecting w_{-k} = -w_k onto w_k flips the sign
            coeffs[q] = float(v if q > 0 else -v)
        res2 += float(np.sum((A @ sol - proj[:, j]) ** 2))
        scale2 += float(np.sum(proj[:, j] ** 2))
    resid = np.sqrt(res2 / len(radii))
    return CornerCoeffs(frame.corner, coeffs, radii.tolist(), float(resid))


def fit_corner_basis(field_or_fn, frame: CornerFrame, basis: Sequence[tuple[float, Callable]],
                     radii: Sequence[float], window: Optional[Callable] = None):
    """Joint least squares of sum_j c_j r^{e_j} G_j(theta, side) over arc samples.

    A basis entry may also be a single callable f(r, theta, side). window(r) gives a
    half-width excluded around the interface ray (None keeps all).
    Returns (coefficients, relative residual).
    """
    ev = _as_evaluator(field_or_fn)
    th, w, side = _arc_rule(frame)
    rows, rhs, wts = [], [], []
    for r in radii:
        keep = np.ones(len(th), bool)
        if window is not None:
            keep = np.abs(th - frame.theta_layer) >= window(r)
        t, ww, s = th[keep], w[keep], side[keep]
        x, y = frame.to_cartesian(r, t)
        vals = ev(x, y, s)
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"arc r={r} leaves the mesh or meets a hole")
        rows.append(np.column_stack([bf(r, t, s) if callable(bf) else r ** bf[0] * bf[1](t, s, 0)
                                     for bf in basis]))
        rhs.append(vals)
        wts.append(np.sqrt(ww))
    A = np.vstack(rows)
    b = np.concatenate(rhs)
    sw = np.concatenate(wts)
    sol, *_ = np.linalg.lstsq(A * sw[:, None], b * sw, rcond=None)
    res = np.linalg.norm((A @ sol - b) * sw) / max(np.linalg.norm(b * sw), 1e-300)
    return sol, float(res)


# ---------------------------------------------------------------------------
# singular functions and the first correction


def _side_source(lifts: Sequence[CornerLift], mesh: Mesh) -> Callable:
    cen_y = mesh.centroids()[:, 1]

    def f(x, y, tri):
        side = np.where(cen_y[tri] < 0, -1, 1)
        out = np.zeros(len(x))
        for lf in lifts:
            out += lf.laplacian(x, y, side)
        return out
    return f


def _solve_lifted(mesh: Mesh, lifts: Sequence[CornerLift], g=None, h=None) -> Field:
    """FEM part w of w + sum(lifts): -lap w = sum lap(lift), w = 0 on the walls."""
    sys_ = fem.SparseSystem(mesh, fem.stiffness(mesh), np.zeros(mesh.n_vertices))
    if lifts:
        sys_ = replace(sys_, rhs=fem.load(mesh, _side_source(lifts, mesh), 5, side_aware=True))
    sys_ = fem.apply_dirichlet(sys_, "dirichlet")
    sys_ = fem.apply_interface_jump(sys_, mesh.interface_pairs, g, h)
    return fem.solve(sys_)


def solve_singularity(domain: DomainSpec, mesh: Mesh, corner: str,
                      profile: CutoffProfile = CutoffProfile()) -> MacroField:
    """s_{-1,0} at one corner: lift of r^{-2/3} w_{-1} plus an H^1_0 remainder."""
    frame = CornerFrame(corner, domain.L)
    lift = CornerLift(frame, lam(-1), mode_angular(frame, -1), 1.0,
                      domain.corner_cutoff_radius(), profile)
    w = _solve_lifted(mesh, [lift])
    label = "s_minus1_plus" if corner == "plus" else "s_minus1_minus"
    return MacroField(w, label, [lift])


def jump_amplitudes(corner: str, n: int, d_inf: float, N2t: float, N2n: float,
                    D1t: float = 0.0):
    """(a, b) of the cone lift r^{lam_n - 1} g(theta) per unit l_n(u00).

    D1t multiplies the tangential derivative of the mean trace in [u]; it vanishes for
    holes symmetric in X1.
    """
    ln = lam(n)
    if corner == "plus":
        a = -2.0 * d_inf * ln * np.cos(ln * np.pi) - D1t * ln * np.sin(ln * np.pi)
        b = -ln * (ln - 1.0) * (N2t * np.sin(ln * np.pi) + N2n * np.cos(ln * np.pi))
    else:
        a = (2.0 * d_inf * ln * np.cos(0.5 * ln * np.pi)
             + D1t * ln * np.sin(0.5 * ln * np.pi))
        b = ln * (ln - 1.0) * (N2t * np.sin(0.5 * ln * np.pi) + N2n * np.cos(0.5 * ln * np.pi))
    return a, b


def _singular_trace(frame: CornerFrame, ells: dict, r: np.ndarray):
    """Trace and d_x2 trace of sum_n l_n r^lam_n w_n on Gamma, with r-derivatives.

    Returns (s_t, s_t_r, s_t_rr, s_n, s_n_r).
    """
    th = frame.theta_layer
    # d_x2 = -(1/r) d_theta on Gamma at the plus corner, +(1/r) d_theta at the minus corner
    sg = -1.0 if frame.corner == "plus" else 1.0
    out = [np.zeros_like(r) for _ in range(5)]
    for n, ell in ells.items():
        ln = lam(n)
        w = float(frame.mode(n, th))
        dw = float(frame.mode(n, th, 1))
        out[0] += ell * w * r ** ln
        out[1] += ell * w * ln * r ** (ln - 1)
        out[2] += ell * w * ln * (ln - 1) * r ** (ln - 2)
        out[3] += ell * sg * dw * r ** (ln - 1)
        out[4] += ell * sg * dw * (ln - 1) * r ** (ln - 2)
    return out


@dataclass
class TraceSplines:
    """Smoothed regular parts of <u00> and <d_x2 u00> with the corner singular parts."""

    R: object
    Rn: object
    frames: list
    ells: dict
    rho: float
    profile: CutoffProfile
    fit_residual: float

    def singular(self, x1, k_t: int = 0, k_n: int = 0):
        """x1-derivatives of chi_rho * s_t (order k_t) and chi_rho * s_n (order k_n)."""
        x1 = np.asarray(x1, float)
        st = np.zeros_like(x1)
        sn = np.zeros_like(x1)
        for fr in self.frames:
            sigma = -1.0 if fr.corner == "plus" else 1.0  # d/dx1 = sigma d/dr
            r = np.abs(x1 - fr.origin[0])
            act = (r > 0) & (r < self.rho)
            if not act.any():
                continue
            ra = r[act]
            s = _singular_trace(fr, self.ells[fr.corner], ra)
            c = [radial_cutoff(self.profile, ra, self.rho, k) for k in range(3)]
            if k_t == 0:
                vt = c[0] * s[0]
            elif k_t == 1:
                vt = sigma * (c[1] * s[0] + c[0] * s[1])
            else:
                vt = c[2] * s[0] + 2 * c[1] * s[1] + c[0] * s[2]
            vn = c[0] * s[3] if k_n == 0 else sigma * (c[1] * s[3] + c[0] * s[4])
            st[act] += vt
            sn[act] += vn
        return st, sn

    def avg_trace(self, x1) -> np.ndarray:
        return self.R(x1) + self.singular(x1)[0]

    def avg_dx2(self, x1) -> np.ndarray:
        return self.Rn(x1) + self.singular(x1)[1]


def _lsq_spline(x, y, lo, hi, n_int: int):
    sel = (x >= lo) & (x <= hi)
    # fewer knots than samples keeps the fit well posed on coarse meshes
    n_int = max(1, min(n_int, int(sel.sum()) - 8))
    t_int = np.linspace(lo, hi, n_int + 2)[1:-1]
    t = np.concatenate([[lo] * 4, t_int, [hi] * 4])
    spl = make_lsq_spline(x[sel], y[sel], t, k=3)
    spl.extrapolate = True
    res = float(np.sqrt(np.mean((spl(x[sel]) - y[sel]) ** 2)))
    return spl, res


def u00_trace_splines(u00: MacroField, domain: DomainSpec, ells: dict,
                      profile: CutoffProfile = CutoffProfile(), r_cut: Optional[float] = None,
                      knot_spacing: float = 0.05) -> TraceSplines:
    mesh = u00.mesh
    L = domain.L
    r_cut = 0.05 * L if r_cut is None else r_cut
    x1, tr = u00.average_trace()
    dtop = fem.flux_normal_derivative(u00.field, "top", domain.source)
    dbot = fem.flux_normal_derivative(u00.field, "bottom", domain.source)
    dn = 0.5 * (dtop + dbot)
    rho = domain.corner_cutoff_radius()
    frames = [CornerFrame("plus", L), CornerFrame("minus", L)]
    ts = TraceSplines(None, None, frames, ells, rho, profile, 0.0)
    st, sn = ts.singular(x1)
    lo, hi = -L + r_cut, L - r_cut
    n_int = max(4, int(round((hi - lo) / knot_spacing)))
    ts.R, r1 = _lsq_spline(x1, tr - st, lo, hi, n_int)
    ts.Rn, r2 = _lsq_spline(x1, dn - sn, lo, hi, n_int)
    ts.fit_residual = max(r1, r2)
    return ts


def corner_ells(u00: MacroField, domain: DomainSpec, radii=None) -> dict:
    out = {}
    for c in ("plus", "minus"):
        cc = extract_corner_coeffs(u00, CornerFrame(c, domain.L), (1, 2), radii)
        out[c] = {1: cc[1], 2: cc[2]}
    return out


def solve_macro_correction(u00: MacroField, tc: TransmissionConstants, domain: DomainSpec,
                           profile: CutoffProfile = CutoffProfile(), ells: Optional[dict] = None,
                           splines: Optional[TraceSplines] = None) -> MacroField:
    """u01 with [u] = 2 D_inf <d_x2 u00> + D1t <u00>' and [d_x2 u] = N2t <u00>'' + N2n <d_x2 u00>'."""
    mesh = u00.mesh
    d_inf, N2t, N2n = tc.d_infinity, tc.N2t, tc.N2n
    D1t = float(tc.d_t[1]) if len(tc.d_t) > 1 else 0.0
    if abs(D1t) < 1e-10:
        D1t = 0.0
    if ells is None:
        ells = corner_ells(u00, domain)
    if splines is None:
        splines = u00_trace_splines(u00, domain, ells, profile)
    rho = domain.corner_cutoff_radius()
    lifts = []
    for c in ("plus", "minus"):
        frame = CornerFrame(c, domain.L)
        for n in (1, 2):
            a, b = jump_amplitudes(c, n, d_inf, N2t, N2n, D1t)
            ell = ells[c][n]
            if ell == 0.0 or (a == 0.0 and b == 0.0):
                continue
            cl = cone_lift(c, lam(n) - 1.0, a, b)
            lifts.append(CornerLift(frame, lam(n) - 1.0, cl, ell, rho, profile))

    def g(x, y):
        out = 2.0 * d_inf * splines.Rn(x)
        if D1t != 0.0:
            st1, _ = splines.singular(x, 1, 0)
            out = out + D1t * (splines.R(x, 1) + st1 - _chi_s_d(splines, x))
        return out

    def h(x, y):
        # full derivatives of the singular parts minus what the lifts already carry
        st2, sn1 = splines.singular(x, 2, 1)
        return (N2t * (splines.R(x, 2) + st2 - _chi_s_dd(splines, x))
                + N2n * (splines.Rn(x, 1) + sn1 - _chi_sn_d(splines, x)))

    w = _solve_lifted(mesh, lifts, g, h)
    out = MacroField(w, "u01", lifts)
    out.diagnostics.update({"ells": ells, "spline_residual": splines.fit_residual})
    out.diagnostics["splines"] = splines
    return out


def _chi_s_d(ts: TraceSplines, x1):
    """chi_rho * d s_t / dx1: the part of <u00>' carried by the lifts."""
    x1 = np.asarray(x1, float)
    out = np.zeros_like(x1)
    for fr in ts.frames:
        sigma = -1.0 if fr.corner == "plus" else 1.0
        r = np.abs(x1 - fr.origin[0])
        act = (r > 0) & (r < ts.rho)
        if act.any():
            s = _singular_trace(fr, ts.ells[fr.corner], r[act])
            out[act] += sigma * radial_cutoff(ts.profile, r[act], ts.rho) * s[1]
    return out


def _chi_s_dd(ts: TraceSplines, x1):
    """chi_rho * d^2 s_t / dx1^2: the part of <u00>'' carried by the lifts."""
    x1 = np.asarray(x1, float)
    out = np.zeros_like(x1)
    for fr in ts.frames:
        r = np.abs(x1 - fr.origin[0])
        act = (r > 0) & (r < ts.rho)
        if act.any():
            s = _singular_trace(fr, ts.ells[fr.corner], r[act])
            out[act] += radial_cutoff(ts.profile, r[act], ts.rho) * s[2]
    return out


def _chi_sn_d(ts: TraceSplines, x1):
    """chi_rho * d s_n / dx1: the part of <d_x2 u00>' carried by the lifts."""
    x1 = np.asarray(x1, float)
    out = np.zeros_like(x1)
    for fr in ts.frames:
        sigma = -1.0 if fr.corner == "plus" else 1.0
        r = np.abs(x1 - fr.origin[0])
        act = (r > 0) & (r < ts.rho)
        if act.any():
            s = _singular_trace(fr, ts.ells[fr.corner], r[act])
            out[act] += sigma * radial_cutoff(ts.profile, r[act], ts.rho) * s[4]
    return out


def build_u20(s_plus: MacroField, s_minus: MacroField, lm1_plus: float,
              lm1_minus: float) -> MacroField:
    """u20 = l_{-1}^+(u20) s^+ + l_{-1}^-(u20) s^-."""
    return combine([(lm1_plus, s_plus), (lm1_minus, s_minus)], "u20")
