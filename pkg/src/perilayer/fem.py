"""P1 finite elements: assembly, affine constraints, solves, norms, traces."""
from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.spatial import cKDTree

from .mesh import Mesh


class AssemblyError(RuntimeError):
    pass


class SolverError(RuntimeError):
    def __init__(self, msg, history=None):
        super().__init__(msg)
        self.history = history or []


@dataclass
class Field:
    mesh: Mesh
    values: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.mesh.n_vertices,):
            raise ValueError("value count does not match vertex count")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("non-finite nodal values")

    def __sub__(self, other: "Field") -> "Field":
        return Field(self.mesh, self.values - other.values)


# ---------------------------------------------------------------------------
# element geometry


def gradients(mesh: Mesh):
    """Per-triangle gradients of the three hat functions and signed areas."""
    p = mesh.vertices[mesh.triangles]
    x, y = p[:, :, 0], p[:, :, 1]
    area = 0.5 * ((x[:, 1] - x[:, 0]) * (y[:, 2] - y[:, 0]) - (x[:, 2] - x[:, 0]) * (y[:, 1] - y[:, 0]))
    if np.any(np.abs(area) < 1e-300):
        raise AssemblyError("degenerate triangle")
    gx = np.stack([y[:, 1] - y[:, 2], y[:, 2] - y[:, 0], y[:, 0] - y[:, 1]], axis=1) / (2 * area[:, None])
    gy = np.stack([x[:, 2] - x[:, 1], x[:, 0] - x[:, 2], x[:, 1] - x[:, 0]], axis=1) / (2 * area[:, None])
    return gx, gy, np.abs(area)


def stiffness(mesh: Mesh, mask: Optional[np.ndarray] = None) -> sp.csr_matrix:
    gx, gy, area = gradients(mesh)
    t = mesh.triangles
    if mask is not None:
        gx, gy, area, t = gx[mask], gy[mask], area[mask], t[mask]
    ke = (gx[:, :, None] * gx[:, None, :] + gy[:, :, None] * gy[:, None, :]) * area[:, None, None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((ke.ravel(), (rows, cols)), shape=(n, n))


def mass(mesh: Mesh, mask: Optional[np.ndarray] = None) -> sp.csr_matrix:
    _, _, area = gradients(mesh)
    t = mesh.triangles
    if mask is not None:
        area, t = area[mask], t[mask]
    loc = (np.ones((3, 3)) + np.eye(3)) / 12.0
    me = area[:, None, None] * loc[None]
    rows = np.repeat(t, 3, axis=1).ravel()
    cols = np.tile(t, (1, 3)).ravel()
    n = mesh.n_vertices
    return sp.csr_matrix((me.ravel(), (rows, cols)), shape=(n, n))


# quadrature on the reference triangle: barycentric points and weights (sum 1)
_QUAD = {
    2: (np.array([[0.5, 0.5, 0.0], [0.0, 0.5, 0.5], [0.5, 0.0, 0.5]]), np.full(3, 1.0 / 3.0)),
    5: (np.array([[1 / 3, 1 / 3, 1 / 3],
                  [0.059715871789770, 0.470142064105115, 0.470142064105115],
                  [0.470142064105115, 0.059715871789770, 0.470142064105115],
                  [0.470142064105115, 0.470142064105115, 0.059715871789770],
                  [0.797426985353087, 0.101286507323456, 0.101286507323456],
                  [0.101286507323456, 0.797426985353087, 0.101286507323456],
                  [0.101286507323456, 0.101286507323456, 0.797426985353087]]),
        np.array([0.225, 0.132394152788506, 0.132394152788506, 0.132394152788506,
                  0.125939180544827, 0.125939180544827, 0.125939180544827])),
}


def quad_points(mesh: Mesh, order: int = 2, mask: Optional[np.ndarray] = None):
    """Physical quadrature points (T, Q, 2), barycentrics (Q, 3), weights*area (T, Q)."""
    bary, w = _QUAD[order]
    t = mesh.triangles if mask is None else mesh.triangles[mask]
    p = mesh.vertices[t]
    xq = np.einsum("qk,tkd->tqd", bary, p)
    _, _, area = gradients(mesh)
    if mask is not None:
        area = area[mask]
    return xq, bary, area[:, None] * w[None, :]


def load(mesh: Mesh, f: Callable, order: int = 2, mask: Optional[np.ndarray] = None,
         side_aware: bool = False) -> np.ndarray:
    """Load vector int f*phi_i. If side_aware, f(x, y, tri_index) is called."""
    xq, bary, wq = quad_points(mesh, order, mask)
    T, Q = wq.shape
    if side_aware:
        tid = np.arange(len(mesh.triangles)) if mask is None else np.where(mask)[0]
        fv = f(xq[:, :, 0].ravel(), xq[:, :, 1].ravel(), np.repeat(tid, Q)).reshape(T, Q)
    else:
        fv = np.asarray(f(xq[:, :, 0].ravel(), xq[:, :, 1].ravel()), float).reshape(T, Q)
    contrib = np.einsum("tq,qk->tk", fv * wq, bary)
    t = mesh.triangles if mask is None else mesh.triangles[mask]
    return np.bincount(t.ravel(), weights=contrib.ravel(), minlength=mesh.n_vertices)


def edge_load(mesh: Mesh, edges: np.ndarray, g: Callable, n_gauss: int = 3) -> np.ndarray:
    """int_edges g*phi_i ds by Gauss-Legendre on each edge."""
    xg, wg = np.polynomial.legendre.leggauss(n_gauss)
    s = 0.5 * (xg + 1.0)
    w = 0.5 * wg
    a = mesh.vertices[edges[:, 0]]
    b = mesh.vertices[edges[:, 1]]
    ln = np.hypot(*(b - a).T)
    pts = a[:, None, :] + s[None, :, None] * (b - a)[:, None, :]
    gv = np.asarray(g(pts[:, :, 0].ravel(), pts[:, :, 1].ravel()), float).reshape(len(edges), -1)
    wa = (gv * w[None, :] * (1 - s)[None, :]).sum(axis=1) * ln
    wb = (gv * w[None, :] * s[None, :]).sum(axis=1) * ln
    out = np.bincount(edges[:, 0], weights=wa, minlength=mesh.n_vertices)
    out += np.bincount(edges[:, 1], weights=wb, minlength=mesh.n_vertices)
    return out


# ---------------------------------------------------------------------------
# constrained systems


@dataclass
class SparseSystem:
    mesh: Mesh
    matrix: sp.csr_matrix
    rhs: np.ndarray
    fixed_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    fixed_values: np.ndarray = field(default_factory=lambda: np.zeros(0))
    slaves: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    masters: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    offsets: np.ndarray = field(default_factory=lambda: np.zeros(0))
    constraint_log: list = field(default_factory=list)
    dof_map: Optional[np.ndarray] = None


def assemble(mesh: Mesh, source=None, order: int = 2) -> SparseSystem:
    """Stiffness and load for -lap u = f on the triangles of the mesh."""
    K = stiffness(mesh)
    b = np.zeros(mesh.n_vertices) if source is None else load(mesh, source, order)
    return SparseSystem(mesh, K, b)


def apply_dirichlet(sys_: SparseSystem, tag, boundary_values=None) -> SparseSystem:
    tags = (tag,) if isinstance(tag, str) else tuple(tag)
    for t in tags:
        if t not in sys_.mesh.edge_tags:
            raise KeyError(f"unknown or absent tag {t!r}")
    nodes = sys_.mesh.nodes_with(*tags)
    if boundary_values is None:
        vals = np.zeros(len(nodes))
    else:
        v = sys_.mesh.vertices[nodes]
        vals = np.asarray(boundary_values(v[:, 0], v[:, 1]), float) * np.ones(len(nodes))
    return fix_nodes(sys_, nodes, vals, f"dirichlet:{','.join(tags)}")


def fix_nodes(sys_: SparseSystem, nodes, values, label="fixed") -> SparseSystem:
    nodes = np.asarray(nodes, int)
    values = np.asarray(values, float) * np.ones(len(nodes))
    fn = np.concatenate([sys_.fixed_nodes, nodes])
    fv = np.concatenate([sys_.fixed_values, values])
    fn, idx = np.unique(fn[::-1], return_index=True)  # later calls win
    fv = fv[::-1][idx]
    return replace(sys_, fixed_nodes=fn, fixed_values=fv,
                   constraint_log=sys_.constraint_log + [(label, len(nodes))])


def add_relation(sys_: SparseSystem, slaves, masters, offsets, label) -> SparseSystem:
    slaves = np.asarray(slaves, int)
    masters = np.asarray(masters, int)
    offsets = np.asarray(offsets, float) * np.ones(len(slaves))
    return replace(sys_, slaves=np.concatenate([sys_.slaves, slaves]),
                   masters=np.concatenate([sys_.masters, masters]),
                   offsets=np.concatenate([sys_.offsets, offsets]),
                   constraint_log=sys_.constraint_log + [(label, len(slaves))])


def apply_periodic(sys_: SparseSystem, pairs) -> SparseSystem:
    pairs = np.asarray(pairs, int)
    v = sys_.mesh.vertices
    if len(pairs) and np.abs(v[pairs[:, 0], 1] - v[pairs[:, 1], 1]).max() > 1e-12:
        raise ValueError("inconsistent periodic pairs")
    # right node follows the left node
    return add_relation(sys_, pairs[:, 1], pairs[:, 0], 0.0, "periodic")


def apply_interface_jump(sys_: SparseSystem, pairs, g=None, h=None) -> SparseSystem:
    """[u] = g strongly (top = bottom + g); [d_x2 u] = h weakly as the load -int h v."""
    pairs = np.asarray(pairs, int)
    mesh = sys_.mesh
    x = mesh.vertices[pairs[:, 0], 0]
    y = mesh.vertices[pairs[:, 0], 1]
    gv = np.zeros(len(pairs)) if g is None else np.asarray(g(x, y), float) * np.ones(len(pairs))
    if not np.all(np.isfinite(gv)):
        raise ValueError("jump data not finite at an interface node")
    out = add_relation(sys_, pairs[:, 0], pairs[:, 1], gv, "interface_jump")
    if h is not None:
        edges = mesh.edges_with("interface_bottom")
        hl = edge_load(mesh, edges, h)
        if not np.all(np.isfinite(hl)):
            raise ValueError("normal jump data not finite")
        out = replace(out, rhs=out.rhs - hl)
    return out


def _reduce(sys_: SparseSystem):
    n = sys_.mesh.n_vertices
    fixed = np.zeros(n, dtype=bool)
    fval = np.zeros(n)
    fixed[sys_.fixed_nodes] = True
    fval[sys_.fixed_nodes] = sys_.fixed_values
    parent = np.arange(n)
    off = np.zeros(n)
    for s, m, o in zip(sys_.slaves.tolist(), sys_.masters.tolist(), sys_.offsets.tolist()):
        if fixed[s]:
            continue
        parent[s] = m
        off[s] = o
    # follow chains to a root
    root = parent.copy()
    acc = off.copy()
    for _ in range(8):
        nxt = parent[root]
        if np.array_equal(nxt, root):
            break
        acc = acc + off[root]
        root = nxt
    else:
        raise AssemblyError("constraint chain too long or cyclic")
    u0 = np.where(fixed[root], fval[root], 0.0) + acc
    u0[fixed] = fval[fixed]
    free_root = ~fixed[root]
    is_dof = (root == np.arange(n)) & ~fixed
    dof = -np.ones(n, dtype=int)
    dof[is_dof] = np.arange(is_dof.sum())
    col = dof[root]
    rows = np.where(free_root)[0]
    P = sp.csr_matrix((np.ones(len(rows)), (rows, col[rows])), shape=(n, int(is_dof.sum())))
    return P, u0, col


def solve(sys_: SparseSystem, tol: float = 1e-10, direct_limit: int = 200_000) -> Field:
    P, u0, col = _reduce(sys_)
    K = sys_.matrix
    Kr = (P.T @ K @ P).tocsc()
    br = P.T @ (sys_.rhs - K @ u0)
    nr = Kr.shape[0]
    if nr == 0:
        return Field(sys_.mesh, u0)
    scale = max(np.linalg.norm(br), 1e-300)
    if nr <= direct_limit:
        lu = spla.splu(Kr, permc_spec="COLAMD")
        x = lu.solve(br)
        r = br - Kr @ x
        if np.linalg.norm(r) > tol * scale and np.linalg.norm(br) > 0:
            x = x + lu.solve(r)  # one refinement step
            r = br - Kr @ x
            if np.linalg.norm(r) > tol * scale:
                raise SolverError("direct solve residual too large", [np.linalg.norm(r) / scale])
    else:
        d = Kr.diagonal()
        M = sp.diags(1.0 / d)
        hist = []
        x, info = spla.cg(Kr, br, rtol=tol, maxiter=20 * nr, M=M,
                          callback=lambda xk: hist.append(np.linalg.norm(br - Kr @ xk) / scale))
        if info != 0:
            raise SolverError("conjugate gradients did not converge", hist)
    u = P @ x + u0
    return Field(sys_.mesh, u)


def solve_with_dofs(sys_: SparseSystem):
    """Solve and also return the dof map of the reduced system."""
    P, u0, col = _reduce(sys_)
    return solve(sys_), col


# ---------------------------------------------------------------------------
# norms


def subdomain_norms(field_or_mesh, values=None, predicate=None) -> dict:
    """L2, H1-seminorm and full H1 norm over triangles whose barycenter satisfies predicate."""
    if isinstance(field_or_mesh, Field):
        mesh, u = field_or_mesh.mesh, field_or_mesh.values
    else:
        mesh, u = field_or_mesh, np.asarray(values, float)
    gx, gy, area = gradients(mesh)
    sel = np.ones(len(mesh.triangles), dtype=bool)
    if predicate is not None:
        c = mesh.centroids()
        sel = np.asarray(predicate(c[:, 0], c[:, 1]), dtype=bool)
    if not sel.any():
        raise ValueError("empty region")
    ut = u[mesh.triangles[sel]]
    a = area[sel]
    l2sq = (a / 6.0) * ((ut ** 2).sum(axis=1) + ut[:, 0] * ut[:, 1] + ut[:, 1] * ut[:, 2]
                        + ut[:, 2] * ut[:, 0])
    dx = (gx[sel] * ut).sum(axis=1)
    dy = (gy[sel] * ut).sum(axis=1)
    semi = a * (dx ** 2 + dy ** 2)
    l2 = float(np.sqrt(max(l2sq.sum(), 0.0)))
    h1s = float(np.sqrt(semi.sum()))
    return {"l2": l2, "h1_semi": h1s, "h1": float(np.hypot(l2, h1s))}


def energy_check(sys_: SparseSystem, u: Field) -> float:
    """|a(u,u) - (f,u)| / a(u,u) for homogeneous Dirichlet solves."""
    a = float(u.values @ (sys_.matrix @ u.values))
    fu = float(sys_.rhs @ u.values)
    return abs(a - fu) / max(abs(a), 1e-300)


# ---------------------------------------------------------------------------
# point location and interpolation


class Locator:
    """Barycentric point location on a (sub)set of triangles."""

    def __init__(self, mesh: Mesh, mask: Optional[np.ndarray] = None):
        self.mesh = mesh
        self.tid = np.arange(len(mesh.triangles)) if mask is None else np.where(mask)[0]
        p = mesh.vertices[mesh.triangles[self.tid]]
        self.p0 = p[:, 0]
        e1 = p[:, 1] - p[:, 0]
        e2 = p[:, 2] - p[:, 0]
        det = e1[:, 0] * e2[:, 1] - e1[:, 1] * e2[:, 0]
        self.inv = np.stack([np.stack([e2[:, 1], -e2[:, 0]], 1),
                             np.stack([-e1[:, 1], e1[:, 0]], 1)], 1) / det[:, None, None]
        self.tree = cKDTree(p.mean(axis=1))
        self.hmax = float(np.max(np.linalg.norm(e1, axis=1)))

    def locate(self, pts: np.ndarray, tol: float = 1e-10):
        pts = np.atleast_2d(np.asarray(pts, float))
        n = len(pts)
        tri = -np.ones(n, dtype=int)
        bary = np.zeros((n, 3))
        todo = np.arange(n)
        for k in (8, 32, 128, 512):
            if len(todo) == 0:
                break
            k = min(k, len(self.tid))
            _, cand = self.tree.query(pts[todo], k=k)
            cand = cand.reshape(len(todo), -1)
            d = pts[todo][:, None, :] - self.p0[cand]
            lam = np.einsum("nkij,nkj->nki", self.inv[cand], d)
            l0 = 1.0 - lam.sum(axis=2)
            mn = np.minimum(l0, lam.min(axis=2))
            best = np.argmax(mn, axis=1)
            ok = mn[np.arange(len(todo)), best] >= -tol
            sel = todo[ok]
            b = best[ok]
            tri[sel] = self.tid[cand[ok, b]]
            lb = lam[ok, b]
            bary[sel] = np.column_stack([1.0 - lb.sum(axis=1), lb[:, 0], lb[:, 1]])
            todo = todo[~ok]
        return tri, bary

    def interpolate(self, values: np.ndarray, pts: np.ndarray, fill=np.nan) -> np.ndarray:
        tri, bary = self.locate(pts)
        out = np.full(len(tri), fill, dtype=float)
        ok = tri >= 0
        out[ok] = (values[self.mesh.triangles[tri[ok]]] * bary[ok]).sum(axis=1)
        return out


# ---------------------------------------------------------------------------
# traces on Gamma


def gamma_nodes(mesh: Mesh, side: str) -> np.ndarray:
    """Interface nodes of one side, sorted by x1."""
    col = 0 if side == "top" else 1
    nodes = mesh.interface_pairs[:, col]
    return nodes[np.argsort(mesh.vertices[nodes, 0])]


def trace_on_gamma(field: Field, side: str, sample_x1) -> np.ndarray:
    mesh = field.mesh
    nodes = gamma_nodes(mesh, side)
    xs = mesh.vertices[nodes, 0]
    x = np.asarray(sample_x1, float)
    if np.any(x < xs[0] - 1e-12) or np.any(x > xs[-1] + 1e-12):
        raise ValueError("sample outside Gamma")
    return np.interp(x, xs, field.values[nodes])


def _side_mask(mesh: Mesh, side: str) -> np.ndarray:
    c = mesh.centroids()[:, 1]
    return c > 0 if side == "top" else c < 0


def recover_gradient(field: Field, nodes: np.ndarray, tri_mask: Optional[np.ndarray] = None,
                     rings: int = 2) -> np.ndarray:
    """Patch recovery: linear least-squares fit of element gradients around each node."""
    mesh = field.mesh
    gx, gy, area = gradients(mesh)
    u = field.values[mesh.triangles]
    ex = (gx * u).sum(axis=1)
    ey = (gy * u).sum(axis=1)
    cen = mesh.centroids()
    mask = np.ones(len(mesh.triangles), bool) if tri_mask is None else tri_mask
    tri_idx = np.where(mask)[0]
    t = mesh.triangles[tri_idx]
    n = mesh.n_vertices
    node_tri = sp.csr_matrix((np.ones(t.size), (t.ravel(), np.repeat(tri_idx, 3))),
                             shape=(n, len(mesh.triangles)))
    tri_node = node_tri.T.tocsr()
    out = np.zeros((len(nodes), 2))
    for k, v in enumerate(np.asarray(nodes).tolist()):
        patch = set(node_tri[v].indices.tolist())
        for _ in range(rings - 1):
            vs = np.unique(np.concatenate([tri_node[tt].indices for tt in patch]))
            patch = set(np.concatenate([node_tri[w].indices for w in vs]).tolist())
        pt = np.array(sorted(patch))
        d = cen[pt] - mesh.vertices[v]
        A = np.column_stack([np.ones(len(pt)), d])
        w = np.sqrt(area[pt])
        coef_x, *_ = np.linalg.lstsq(A * w[:, None], ex[pt] * w, rcond=None)
        coef_y, *_ = np.linalg.lstsq(A * w[:, None], ey[pt] * w, rcond=None)
        out[k] = coef_x[0], coef_y[0]
    return out


def trace_normal_derivative(field: Field, side: str, sample_x1=None) -> np.ndarray:
    """One-sided d_x2 at Gamma nodes of the given side (patch recovery)."""
    mesh = field.mesh
    nodes = gamma_nodes(mesh, side)
    g = recover_gradient(field, nodes, _side_mask(mesh, side))[:, 1]
    if sample_x1 is None:
        return g
    return np.interp(np.asarray(sample_x1, float), mesh.vertices[nodes, 0], g)


def flux_normal_derivative(field: Field, side: str, source=None, order: int = 5) -> np.ndarray:
    """One-sided d_x2 at Gamma nodes from the discrete flux balance of that side.

    For the top side, int_Gamma d_x2 u phi_i = int_top f phi_i - a_top(u, phi_i);
    the nodal values follow from the interface mass matrix.
    """
    mesh = field.mesh
    mask = _side_mask(mesh, side)
    K = stiffness(mesh, mask)
    r = -(K @ field.values)
    if source is not None:
        r = r + load(mesh, source, order, mask)
    nodes = gamma_nodes(mesh, side)
    x = mesh.vertices[nodes, 0]
    hl = np.diff(x)
    m = len(nodes)
    main = np.zeros(m)
    main[:-1] += hl / 3.0
    main[1:] += hl / 3.0
    Mg = sp.diags([hl / 6.0, main, hl / 6.0], [-1, 0, 1], format="csc")
    sgn = 1.0 if side == "top" else -1.0
    # top: outward normal is -e2, so r_i = +int d_x2 u phi_i
    return sgn * spla.spsolve(Mg, r[nodes])
