"""Boundary-layer cell problems on the truncated periodic band.

Profiles W_p^t, W_p^n, the function D and the transmission constants are computed
from one P1 discretization of the band. Commutator sources are assembled in weak
form, -a(I_h psi, v) + end fluxes - (chi lap psi0, v), so that the base identities
(W_0^t = 1 - chi, W_1^n = D tilde, D_1^n = 2 D_inf) hold at the discrete level.
"""
from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse.linalg as spla

from . import fem
from .fem import Field, Locator, edge_load, gradients, mass, stiffness
from .geometry import CutoffProfile, PeriodicityCell, chi, chi_pm
from .mesh import BandSpec, Mesh, mesh_band


class CompatibilityError(RuntimeError):
    pass


class TruncationError(RuntimeError):
    pass


@dataclass
class ProfileFunction:
    field: Field
    p: int
    kind: str  # "t" | "n" | "D-tilde"
    decay_report: float
    interior_mass: float
    x1_independent: bool = False
    _locator: Optional[Locator] = None

    @property
    def mesh(self) -> Mesh:
        return self.field.mesh

    def evaluate(self, X1, X2) -> np.ndarray:
        """P1 interpolation with X1 reduced mod 1 and zero beyond |X2| = L_band - 1."""
        X1 = np.asarray(X1, float)
        X2 = np.asarray(X2, float)
        Lb = self.mesh.meta["L_band"]
        out = np.zeros(np.broadcast(X1, X2).shape)
        x1 = np.broadcast_to(np.mod(X1, 1.0), out.shape).ravel()
        x2 = np.broadcast_to(X2, out.shape).ravel()
        act = np.abs(x2) < Lb - 1.0
        if act.any():
            if self._locator is None:
                self._locator = Locator(self.mesh)
            v = self._locator.interpolate(self.field.values, np.column_stack([x1[act], x2[act]]),
                                          fill=0.0)
            flat = out.ravel()
            flat[np.where(act)[0]] = v
            out = flat.reshape(out.shape)
        return out


@dataclass
class TransmissionConstants:
    d_infinity: float
    d_t: np.ndarray
    d_n: np.ndarray
    n_t: np.ndarray
    n_n: np.ndarray
    P: int
    diagnostics: dict = field(default_factory=dict)
    profiles: dict = field(default_factory=dict)

    @property
    def N2t(self) -> float:
        return float(self.n_t[2])

    @property
    def N2n(self) -> float:
        return float(self.n_n[2])

    def record(self) -> dict:
        """Flat key/value record (profiles excluded)."""
        out = {"d_infinity": self.d_infinity, "P": self.P}
        for name in ("d_t", "d_n", "n_t", "n_n"):
            for p, v in enumerate(getattr(self, name)):
                out[f"{name}_{p}"] = float(v)
        for k, v in self.diagnostics.items():
            if isinstance(v, (int, float, str)):
                out[k] = v
        return out

    @classmethod
    def zero(cls, P: int = 2) -> "TransmissionConstants":
        z = np.zeros(P + 1)
        return cls(0.0, z.copy(), z.copy(), z.copy(), z.copy(), P)


# ---------------------------------------------------------------------------
# discrete band operator


class BandOperator:
    """Periodic Neumann band problem with a pinned gauge node and cached factorization."""

    def __init__(self, mesh: Mesh):
        self.mesh = mesh
        self.K = stiffness(mesh)
        self.M = mass(mesh)
        base = fem.SparseSystem(mesh, self.K, np.zeros(mesh.n_vertices))
        base = fem.apply_periodic(base, mesh.periodic_pairs)
        self.pin = int(mesh.periodic_pairs[0, 0]) if len(mesh.periodic_pairs) else 0
        base = fem.fix_nodes(base, [self.pin], [0.0], "gauge")
        self.P, _, _ = fem._reduce(base)
        Kr = (self.P.T @ self.K @ self.P).tocsc()
        self.lu = spla.splu(Kr, permc_spec="COLAMD")
        self.top = mesh.edges_with("band_top")
        self.bottom = mesh.edges_with("band_bottom")
        one = lambda x, y: np.ones_like(x)
        self.top_w = edge_load(mesh, self.top, one)
        self.bot_w = edge_load(mesh, self.bottom, one)
        self.ones = np.ones(mesh.n_vertices)
        self.X2 = mesh.vertices[:, 1]
        # nodes whose whole support lies where chi_+ or chi_- is identically 1
        tmin = np.abs(self.X2)[mesh.triangles].min(axis=1)
        near = np.zeros(mesh.n_vertices, dtype=bool)
        near[mesh.triangles[tmin < 2.0].ravel()] = True
        self.far = ~near

    def solve(self, b: np.ndarray) -> np.ndarray:
        return self.P @ self.lu.solve(self.P.T @ b)

    def end_average(self, u: np.ndarray) -> tuple[float, float]:
        return float(self.top_w @ u), float(self.bot_w @ u)

    def integral(self, u: np.ndarray) -> float:
        return float(self.ones @ (self.M @ u))


def _psi(profile: CutoffProfile, sign: int, p: int, X2: np.ndarray, k: int = 0) -> np.ndarray:
    """d^k/dX2^k of chi_sign(X2) * X2^p / p!."""
    out = np.zeros_like(X2)
    for j in range(k + 1):
        c = math.comb(k, j)
        dchi = chi_pm(profile, sign, X2, j)
        q = p - (k - j)
        if q < 0:
            continue
        out = out + c * dchi * X2 ** q / math.factorial(q)
    return out


def commutator_load(op: BandOperator, profile: CutoffProfile, sign: int, p: int) -> np.ndarray:
    """Weak-form load of [lap, chi_sign](X2^p/p!)."""
    X2 = op.X2
    Lb = op.mesh.meta["L_band"]
    b = -(op.K @ _psi(profile, sign, p, X2))
    # end fluxes d_n psi; only the matching end carries chi_sign = 1
    if p >= 1:
        if sign > 0:
            b += (Lb ** (p - 1) / math.factorial(p - 1)) * op.top_w
        else:
            b += -((-Lb) ** (p - 1) / math.factorial(p - 1)) * op.bot_w
    if p >= 2:
        b -= op.M @ (chi_pm(profile, sign, X2) * X2 ** (p - 2) / math.factorial(p - 2))
    # the commutator vanishes there; drop the P1 consistency residual of the polynomial
    b[op.far] = 0.0
    return b


def g_fields(profile: CutoffProfile, p: int, X2) -> tuple[np.ndarray, np.ndarray]:
    """Closed-form (<g_p>, [g_p]) as functions of X2; supported in 1 < |X2| < 2."""
    X2 = np.asarray(X2, float)
    gs = {}
    for s in (1, -1):
        # chi'' psi0 + 2 chi' psi0'
        psi0 = X2 ** p / math.factorial(p)
        dpsi0 = X2 ** (p - 1) / math.factorial(p - 1) if p >= 1 else np.zeros_like(X2)
        gs[s] = chi_pm(profile, s, X2, 2) * psi0 + 2.0 * chi_pm(profile, s, X2, 1) * dpsi0
    return 0.5 * (gs[1] + gs[-1]), gs[1] - gs[-1]


def g_terms(p: int, profile: CutoffProfile, mesh: Mesh) -> tuple[Field, Field]:
    avg, jump = g_fields(profile, p, mesh.vertices[:, 1])
    return Field(mesh, avg), Field(mesh, jump)


def _dx1_load(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """int d_X1 u * phi_i for a P1 field u."""
    gx, _, area = gradients(mesh)
    d = (gx * u[mesh.triangles]).sum(axis=1)
    contrib = np.repeat((d * area / 3.0)[:, None], 3, axis=1)
    return np.bincount(mesh.triangles.ravel(), weights=contrib.ravel(), minlength=mesh.n_vertices)


def _dx1_test_load(mesh: Mesh, u: np.ndarray) -> np.ndarray:
    """int u * d_X1 phi_i for a P1 field u."""
    gx, _, area = gradients(mesh)
    contrib = (u[mesh.triangles].mean(axis=1) * area)[:, None] * gx
    return np.bincount(mesh.triangles.ravel(), weights=contrib.ravel(), minlength=mesh.n_vertices)


def _decay(mesh: Mesh, u: np.ndarray) -> tuple[float, float]:
    Lb = mesh.meta["L_band"]
    tail = fem.subdomain_norms(mesh, u, lambda x, y: np.abs(y) > Lb - 1.0)["l2"]
    inner = fem.subdomain_norms(mesh, u, lambda x, y: np.abs(y) <= Lb - 1.0)["l2"]
    return tail, inner


# ---------------------------------------------------------------------------
# D and the profile recursion


def solve_profile_D(mesh: Mesh, op: Optional[BandOperator] = None,
                    profile: CutoffProfile = CutoffProfile()):
    """D with unit flux at both ends; returns (D tilde profile, D_inf, info).

    d_top, d_bottom are the one-sided end averages in the zero-mean gauge. D itself is
    returned in the symmetric gauge D - X2 -> +-D_inf, the one in which D tilde decays.
    """
    op = op or BandOperator(mesh)
    b = op.top_w - op.bot_w
    D = op.solve(b)
    area = op.integral(op.ones)
    D = D - op.integral(D) / area
    t_avg, b_avg = op.end_average(D - op.X2)
    d_inf = 0.5 * (t_avg - b_avg)
    D = D - 0.5 * (t_avg + b_avg)
    X2 = op.X2
    Dt = D - chi_pm(profile, 1, X2) * (X2 + d_inf) - chi_pm(profile, -1, X2) * (X2 - d_inf)
    tail, inner = _decay(mesh, Dt)
    prof = ProfileFunction(Field(mesh, Dt), 1, "D-tilde", tail, inner)
    info = {"d_top": t_avg, "d_bottom": -b_avg, "D": D}
    return prof, d_inf, info


def _solve_with_correction(op: BandOperator, bF: np.ndarray, bg0: np.ndarray, bg1: np.ndarray,
                           D: np.ndarray, tol: float = 1e-8):
    """Add (c_D/2)[g0] + (c_N/2)[g1] so the load is orthogonal to 1 and D; solve."""
    A = 0.5 * np.array([[D @ bg0, D @ bg1], [op.ones @ bg0, op.ones @ bg1]])
    rhs = -np.array([D @ bF, op.ones @ bF])
    cD, cN = np.linalg.solve(A, rhs)
    b = bF + 0.5 * cD * bg0 + 0.5 * cN * bg1
    scale = np.abs(b).sum() + 1e-300
    res = (abs(op.ones @ b) / scale, abs(D @ b) / (scale * max(1.0, np.abs(D).max())))
    if max(res) > tol:
        raise CompatibilityError(f"compatibility residuals {res}")
    W = op.solve(b)
    t_avg, b_avg = op.end_average(W)
    W = W - 0.5 * (t_avg + b_avg)
    return W, cD, cN, res, t_avg - b_avg, b


def solve_profile_W(p: int, kind: str, state: dict) -> ProfileFunction:
    """One step of the profile recursion; state carries op, profile, D, loads and earlier results."""
    op: BandOperator = state["op"]
    prof: CutoffProfile = state["profile"]
    mesh = op.mesh
    W = state["W"][kind]
    Dc = state["D_const"][kind]
    Nc = state["N_const"][kind]
    gl = state["g_loads"]

    def load_of(q):
        if q not in gl:
            gp = commutator_load(op, prof, 1, q)
            gm = commutator_load(op, prof, -1, q)
            gl[q] = (0.5 * (gp + gm), gp - gm)
        return gl[q]

    bF = np.zeros(mesh.n_vertices)
    prev = W.get(p - 1)
    if prev is not None and state.get("hole_flux"):
        # slow derivative kept in the hole condition: d_n W_p = -n_1 W_{p-1}
        bF += _dx1_load(mesh, prev.field.values) - _dx1_test_load(mesh, prev.field.values)
    elif prev is not None and not prev.x1_independent:
        bF += 2.0 * _dx1_load(mesh, prev.field.values)
    prev2 = W.get(p - 2)
    if prev2 is not None:
        bF += op.M @ prev2.field.values
    sel = (p % 2 == 0) if kind == "t" else (p % 2 == 1)
    if sel:
        bF += (-1) ** (p // 2) * 2.0 * load_of(p)[0]
    for k in range(2, p):
        jump = load_of(k)[1]
        if k % 2 == 0:
            bF += (-1) ** (k // 2) * 0.5 * jump * Dc.get(p - k, 0.0)
        else:
            bF += (-1) ** (k // 2) * 0.5 * jump * Nc.get(p - k + 1, 0.0)
    D = state["D"]
    formula_D = float(D @ bF)
    formula_N = float(-(op.ones @ bF))
    bg0 = load_of(0)[1]
    bg1 = load_of(1)[1]
    if not np.any(bF):
        Wv = np.zeros(mesh.n_vertices)
        cD = cN = 0.0
        res, mism = (0.0, 0.0), 0.0
    else:
        Wv, cD, cN, res, mism, _ = _solve_with_correction(op, bF, bg0, bg1, D)
    Dc[p] = cD
    Nc[p] = cN
    tail, inner = _decay(mesh, Wv)
    out = ProfileFunction(Field(mesh, Wv), p, kind, tail, inner)
    state["diag"][f"{kind}{p}"] = {"compat_1": res[0], "compat_D": res[1], "end_mismatch": mism,
                                    "formula_D": formula_D, "formula_N": formula_N,
                                    "decay": tail, "mass": inner}
    W[p] = out
    return out


def transmission_constants(cell: PeriodicityCell, profile: CutoffProfile = CutoffProfile(),
                           L_band: float = 8.0, h: float = 1.0 / 64, P: int = 2,
                           mesh: Optional[Mesh] = None, check_decay: bool = True,
                           hole_flux: bool = True) -> TransmissionConstants:
    """Run the recursion p = 0..P for both kinds.

    hole_flux=False uses homogeneous Neumann data on the hole for every profile, so
    W_1^t = 0 and N_2^t is the hole area. hole_flux=True keeps the slow tangential
    derivative in the hole condition (d_n W_p = -n_1 W_{p-1}); this is what the
    perforated problem actually imposes, and it adds the X1-corrector flux to N_2^t.
    """
    if P < 2 or P > 4:
        raise ValueError("P must be in 2..4")
    t0 = time.perf_counter()
    mesh = mesh or mesh_band(BandSpec(cell, L_band, h))
    op = BandOperator(mesh)
    Dprof, d_inf, dinfo = solve_profile_D(mesh, op, profile)
    state = {"op": op, "profile": profile, "D": dinfo["D"], "W": {"t": {}, "n": {}},
             "D_const": {"t": {}, "n": {}}, "N_const": {"t": {}, "n": {}},
             "g_loads": {}, "diag": {}, "hole_flux": hole_flux}
    W0 = solve_profile_W(0, "t", state)
    closed = 1.0 - chi(profile, op.X2)
    w0_err = float(np.abs(W0.field.values - closed).max())
    if w0_err < 1e-8:
        # the closed form is exact: use it (and its zero X1-derivative) downstream
        W0 = ProfileFunction(Field(mesh, closed), 0, "t", W0.decay_report, W0.interior_mass,
                             x1_independent=True)
        state["W"]["t"][0] = W0
    for p in range(1, P + 1):
        solve_profile_W(p, "t", state)
        solve_profile_W(p, "n", state)
    d_t = np.array([state["D_const"]["t"].get(p, 0.0) for p in range(P + 1)])
    n_t = np.array([state["N_const"]["t"].get(p, 0.0) for p in range(P + 1)])
    d_n = np.array([state["D_const"]["n"].get(p, 0.0) for p in range(P + 1)])
    n_n = np.array([state["N_const"]["n"].get(p, 0.0) for p in range(P + 1)])
    d_t[0] = n_t[0] = d_n[0] = n_n[0] = 0.0
    n_t[1] = n_n[1] = 0.0 if abs(n_t[1]) < 1e-9 and abs(n_n[1]) < 1e-9 else n_t[1]
    W1n = state["W"]["n"][1].field.values
    Dt = Dprof.field.values
    diff = fem.subdomain_norms(mesh, W1n - Dt)["l2"]
    nrm = fem.subdomain_norms(mesh, Dt)["l2"]
    w1t = fem.subdomain_norms(mesh, state["W"]["t"][1].field.values)["l2"]
    profiles = {("t", p): w for p, w in state["W"]["t"].items()}
    profiles.update({("n", p): w for p, w in state["W"]["n"].items()})
    profiles[("D-tilde", 1)] = Dprof
    worst_decay = max(pr.decay_report / max(pr.interior_mass, 1e-300)
                      for pr in profiles.values() if pr.interior_mass > 1e-12) \
        if any(pr.interior_mass > 1e-12 for pr in profiles.values()) else 0.0
    diag = {"chi_profile": profile.kind, "hole_flux": bool(hole_flux), "L_band": float(mesh.meta["L_band"]), "h": float(h),
            "n_vertices": int(mesh.n_vertices), "hole_area": float(mesh.meta.get("hole_area", 0.0)),
            "d_top": dinfo["d_top"], "d_bottom": dinfo["d_bottom"],
            "w0t_nodal_error": w0_err, "w1t_l2": w1t,
            "w1n_minus_dtilde_rel": diff / nrm if nrm > 0 else diff,
            "worst_decay_ratio": worst_decay, "seconds": time.perf_counter() - t0,
            "solves": state["diag"]}
    if check_decay and worst_decay > 1e-6:
        raise TruncationError(f"profile tail ratio {worst_decay:.2e} exceeds 1e-6; increase L_band")
    return TransmissionConstants(d_inf, d_t, d_n, n_t, n_n, P, diag, profiles)


def compatibility_integrals(mesh: Mesh, D: np.ndarray, profile: CutoffProfile = CutoffProfile(),
                    order: int = 5) -> np.ndarray:
    """Quadrature of (<g0>D, [g0]D, <g0>, [g0], <g1>D, [g1]D, <g1>, [g1]) with closed-form g."""
    xq, bary, wq = fem.quad_points(mesh, order)
    Dq = np.einsum("qk,tk->tq", bary, D[mesh.triangles])
    out = []
    for p in (0, 1):
        avg, jump = g_fields(profile, p, xq[:, :, 1])
        out += [np.sum(avg * Dq * wq), np.sum(jump * Dq * wq), np.sum(avg * wq), np.sum(jump * wq)]
    return np.array(out)
