"""Tagged P1 triangulations: perforated domain, split limit domain, periodicity band, corner sectors.

The mesher is a conforming Delaunay construction: boundary curves are discretized
with a graded spacing, interior points come from nested hexagonal lattices chosen
level by level against a size function, constraint segments missing from the
Delaunay triangulation are split at their midpoints until recovered.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .geometry import (CornerFrame, DomainSpec, GeometryError, PeriodicityCell,
                       hole_count, layer_holes)

SizeFn = Callable[[np.ndarray], np.ndarray]

TAGS = ("dirichlet", "hole", "periodic_left", "periodic_right", "band_top",
        "band_bottom", "interface_top", "interface_bottom", "outer_arc")
_GAMMA = "gamma"  # internal constraint tag, never left on a boundary edge


@dataclass
class Mesh:
    vertices: np.ndarray
    triangles: np.ndarray
    edges: np.ndarray  # boundary edges (E, 2)
    edge_tags: list
    h_target: float
    periodic_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    interface_pairs: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), int))
    corner_nodes: np.ndarray = field(default_factory=lambda: np.zeros(0, int))
    # 0 for the physical region, k >= 1 for triangles filling hole k
    tri_region: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.tri_region is None:
            self.tri_region = np.zeros(len(self.triangles), dtype=int)

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    def edges_with(self, *tags: str) -> np.ndarray:
        sel = [i for i, t in enumerate(self.edge_tags) if t in tags]
        return self.edges[sel] if sel else np.zeros((0, 2), int)

    def nodes_with(self, *tags: str) -> np.ndarray:
        return np.unique(self.edges_with(*tags).ravel())

    def areas(self) -> np.ndarray:
        p = self.vertices[self.triangles]
        return 0.5 * ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
                      - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))

    def centroids(self) -> np.ndarray:
        return self.vertices[self.triangles].mean(axis=1)

    def quality(self) -> np.ndarray:
        """Inradius over circumradius (0.5 for equilateral)."""
        p = self.vertices[self.triangles]
        a = np.linalg.norm(p[:, 1] - p[:, 2], axis=1)
        b = np.linalg.norm(p[:, 2] - p[:, 0], axis=1)
        c = np.linalg.norm(p[:, 0] - p[:, 1], axis=1)
        s = 0.5 * (a + b + c)
        area = np.abs(self.areas())
        return (area / s) / (a * b * c / (4.0 * area))

    def all_edges(self) -> np.ndarray:
        t = self.triangles
        e = np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        return np.unique(np.sort(e, axis=1), axis=0)


# ---------------------------------------------------------------------------
# size functions


def graded_size(h_max: float, grading: float, sources: Sequence[tuple]) -> SizeFn:
    """min(h_max, h_i + grading*dist_i) over point/segment/disk sources.

    Sources: ("point", (x,y), h), ("segment", (x0,y0), (x1,y1), h),
    ("disk", (x,y), radius, h), ("box", (x0,x1,y0,y1), h).
    """
    def size(p: np.ndarray) -> np.ndarray:
        out = np.full(len(p), float(h_max))
        for s in sources:
            kind = s[0]
            if kind == "point":
                d = np.hypot(p[:, 0] - s[1][0], p[:, 1] - s[1][1])
                h = s[2]
            elif kind == "segment":
                d = _seg_dist(p, np.asarray(s[1], float), np.asarray(s[2], float))
                h = s[3]
            elif kind == "disk":
                d = np.maximum(np.hypot(p[:, 0] - s[1][0], p[:, 1] - s[1][1]) - s[2], 0.0)
                h = s[3]
            elif kind == "box":
                x0, x1, y0, y1 = s[1]
                dx = np.maximum(np.maximum(x0 - p[:, 0], p[:, 0] - x1), 0.0)
                dy = np.maximum(np.maximum(y0 - p[:, 1], p[:, 1] - y1), 0.0)
                d = np.hypot(dx, dy)
                h = s[2]
            else:
                raise ValueError(kind)
            np.minimum(out, h + grading * d, out=out)
        return out

    size.grading = grading
    size.h_min = min([h_max] + [s[-1] for s in sources])
    return size


def _seg_dist(p, a, b):
    ab = b - a
    t = np.clip(((p - a) @ ab) / (ab @ ab), 0.0, 1.0)
    q = a + t[:, None] * ab
    return np.hypot(p[:, 0] - q[:, 0], p[:, 1] - q[:, 1])


# ---------------------------------------------------------------------------
# boundary discretization


def discretize_segment(a, b, size: SizeFn, n_min: int = 1) -> np.ndarray:
    """Points from a to b (a included, b excluded) with spacing following size."""
    a = np.asarray(a, float)
    b = np.asarray(b, float)
    length = float(np.hypot(*(b - a)))
    ns = 64
    t = np.linspace(0.0, 1.0, ns + 1)
    h = size(a + t[:, None] * (b - a))
    # refine the sampling if the size varies a lot along the segment
    need = int(min(2e5, 4 * length / h.min()))
    if need > ns:
        ns = need
        t = np.linspace(0.0, 1.0, ns + 1)
        h = size(a + t[:, None] * (b - a))
    dens = length / h
    cum = np.concatenate([[0.0], np.cumsum(0.5 * (dens[1:] + dens[:-1]) * np.diff(t))])
    n = max(n_min, int(np.ceil(cum[-1] - 1e-9)))
    targets = np.linspace(0.0, cum[-1], n + 1)[:-1]
    ts = np.interp(targets, cum, t)
    return a + ts[:, None] * (b - a)


def discretize_loop(vertices: np.ndarray, size: SizeFn) -> np.ndarray:
    out = []
    m = len(vertices)
    for i in range(m):
        out.append(discretize_segment(vertices[i], vertices[(i + 1) % m], size))
    return np.vstack(out)


# ---------------------------------------------------------------------------
# interior points from nested hexagonal lattices

_TILE_I = 4  # tile width in lattice columns
_TILE_J = 4  # tile height in lattice rows (even)


def lattice_points(bbox, size: SizeFn, s0: float, kmax: int = 14) -> np.ndarray:
    x0, x1, y0, y1 = bbox
    grading = getattr(size, "grading", 1.0)
    r3 = np.sqrt(3.0) / 2.0
    ni = int(np.ceil((x1 - x0) / s0)) + 2
    nj = int(np.ceil((y1 - y0) / (s0 * r3))) + 2
    ti = np.arange(-1, ni, _TILE_I)
    tj = np.arange(-2, nj, _TILE_J)
    I0, J0 = np.meshgrid(ti, tj, indexing="ij")
    tiles = np.column_stack([I0.ravel(), J0.ravel()])
    di, dj = np.meshgrid(np.arange(_TILE_I), np.arange(_TILE_J), indexing="ij")
    di = di.ravel()
    dj = dj.ravel()
    out = []
    for k in range(kmax + 1):
        if len(tiles) == 0:
            break
        s = s0 / 2 ** k
        I = (tiles[:, 0:1] + di[None, :]).ravel()
        J = (tiles[:, 1:2] + dj[None, :]).ravel()
        px = x0 + s * (I + 0.5 * (J % 2))
        py = y0 + s * r3 * J
        pts = np.column_stack([px, py])
        inb = (px > x0) & (px < x1) & (py > y0) & (py < y1)
        pts = pts[inb]
        h = size(pts)
        lev = np.clip(np.round(np.log2(s0 / h)), 0, kmax).astype(int)
        out.append(pts[lev == k])
        # tiles that may hold points of a finer level
        cx = x0 + s * (tiles[:, 0] + 0.5 * _TILE_I + 0.25)
        cy = y0 + s * r3 * (tiles[:, 1] + 0.5 * _TILE_J)
        rad = 0.5 * s * np.hypot(_TILE_I + 0.5, r3 * _TILE_J)
        inside = ((cx + rad >= x0) & (cx - rad <= x1) & (cy + rad >= y0) & (cy - rad <= y1))
        hc = size(np.column_stack([cx, cy])) - grading * rad
        refine = inside & (hc < s / np.sqrt(2.0)) & (k < kmax)
        t = tiles[refine]
        tiles = np.vstack([
            np.column_stack([2 * t[:, 0], 2 * t[:, 1]]),
            np.column_stack([2 * t[:, 0] + _TILE_I, 2 * t[:, 1]]),
            np.column_stack([2 * t[:, 0], 2 * t[:, 1] + _TILE_J]),
            np.column_stack([2 * t[:, 0] + _TILE_I, 2 * t[:, 1] + _TILE_J]),
        ]) if len(t) else np.zeros((0, 2), int)
    return np.vstack(out) if out else np.zeros((0, 2))


# ---------------------------------------------------------------------------
# conforming Delaunay


def _encroached(points: np.ndarray, seg_pts: np.ndarray, segs: np.ndarray,
                candidates: np.ndarray, tree: cKDTree) -> np.ndarray:
    """Mask of candidate points lying inside some segment's diametral circle."""
    a = seg_pts[segs[:, 0]]
    b = seg_pts[segs[:, 1]]
    mid = 0.5 * (a + b)
    rad = 0.5 * np.hypot(*(b - a).T)
    bad = np.zeros(len(points), dtype=bool)
    hits = tree.query_ball_point(mid, rad * (1.0 + 1e-9))
    for k, lst in enumerate(hits):
        if not lst:
            continue
        lst = np.asarray(lst)
        lst = lst[candidates[lst]]
        if len(lst) == 0:
            continue
        d = np.hypot(points[lst, 0] - mid[k, 0], points[lst, 1] - mid[k, 1])
        bad[lst[d < rad[k] * (1.0 - 1e-9)]] = True
    return bad


def conforming_delaunay(fixed: np.ndarray, segs: np.ndarray, seg_tags: list,
                        interior: np.ndarray, size: SizeFn, max_iter: int = 60):
    """Delaunay triangulation of fixed+interior points containing all segments.

    Returns (points, triangles, segs, seg_tags); points[:len(fixed)] == fixed.
    """
    fixed = np.asarray(fixed, float)
    segs = np.asarray(segs, int).copy()
    seg_tags = list(seg_tags)
    # drop interior points too close to the boundary
    if len(interior):
        a = fixed[segs[:, 0]]
        b = fixed[segs[:, 1]]
        sub = np.linspace(0.0, 1.0, 5)[:-1]
        dense = (a[None, :, :] + sub[:, None, None] * (b - a)[None, :, :]).reshape(-1, 2)
        dist, _ = cKDTree(dense).query(interior)
        hloc = size(interior)
        interior = interior[dist > 0.55 * hloc]
    pts = np.vstack([fixed, interior]) if len(interior) else fixed.copy()
    nfix = len(fixed)
    free = np.zeros(len(pts), dtype=bool)
    free[nfix:] = True
    for it in range(max_iter):
        tree = cKDTree(pts)
        enc = _encroached(pts, pts, segs, free, tree)
        if enc.any():
            keep = ~enc
            remap = np.cumsum(keep) - 1
            pts = pts[keep]
            free = free[keep]
            segs = remap[segs]
        tri = Delaunay(pts, qhull_options="Qbb Qc Qz Q12").simplices
        e = np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
        e = np.sort(e, axis=1)
        ekey = set(map(tuple, e.tolist()))
        skey = np.sort(segs, axis=1)
        missing = np.array([tuple(s) not in ekey for s in skey.tolist()])
        if not missing.any():
            return pts, tri, segs, seg_tags, free
        new_pts = []
        new_segs = []
        new_tags = []
        nxt = len(pts)
        for k in range(len(segs)):
            if missing[k]:
                a, b = segs[k]
                new_pts.append(0.5 * (pts[a] + pts[b]))
                new_segs += [(a, nxt), (nxt, b)]
                new_tags += [seg_tags[k], seg_tags[k]]
                nxt += 1
            else:
                new_segs.append(tuple(segs[k]))
                new_tags.append(seg_tags[k])
        pts = np.vstack([pts, np.array(new_pts)])
        free = np.concatenate([free, np.zeros(len(new_pts), dtype=bool)])
        segs = np.array(new_segs, dtype=int)
        seg_tags = new_tags
    raise GeometryError("constraint recovery did not converge")


def _smooth(pts, tri, free, n_iter=3):
    """Laplacian smoothing of free points (retriangulation is up to the caller)."""
    e = np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    e = np.unique(np.sort(e, axis=1), axis=0)
    n = len(pts)
    deg = np.bincount(e.ravel(), minlength=n).astype(float)
    for _ in range(n_iter):
        acc = np.zeros_like(pts)
        np.add.at(acc, e[:, 0], pts[e[:, 1]])
        np.add.at(acc, e[:, 1], pts[e[:, 0]])
        avg = acc / np.maximum(deg, 1)[:, None]
        pts = np.where(free[:, None], 0.5 * pts + 0.5 * avg, pts)
    return pts


def points_in_polygon(p: np.ndarray, poly: np.ndarray) -> np.ndarray:
    x, y = p[:, 0], p[:, 1]
    inside = np.zeros(len(p), dtype=bool)
    xs, ys = poly[:, 0], poly[:, 1]
    xe, ye = np.roll(xs, -1), np.roll(ys, -1)
    for i in range(len(poly)):
        cond = (ys[i] > y) != (ye[i] > y)
        with np.errstate(divide="ignore", invalid="ignore"):
            xc = xs[i] + (y - ys[i]) * (xe[i] - xs[i]) / (ye[i] - ys[i])
        inside ^= cond & (x < xc)
    return inside


def _orient(pts, tri):
    p = pts[tri]
    a = ((p[:, 1, 0] - p[:, 0, 0]) * (p[:, 2, 1] - p[:, 0, 1])
         - (p[:, 2, 0] - p[:, 0, 0]) * (p[:, 1, 1] - p[:, 0, 1]))
    tri = tri.copy()
    neg = a < 0
    tri[neg] = tri[neg][:, [0, 2, 1]]
    return tri, np.abs(a) * 0.5


class _Builder:
    """Collects loops and segments with tags before triangulation."""

    def __init__(self, size: SizeFn):
        self.size = size
        self.points: list = []
        self.segs: list = []
        self.tags: list = []
        self._n = 0
        self._lookup: dict = {}

    def _index(self, p) -> int:
        key = (round(float(p[0]), 12), round(float(p[1]), 12))
        if key in self._lookup:
            return self._lookup[key]
        self.points.append((float(p[0]), float(p[1])))
        self._lookup[key] = self._n
        self._n += 1
        return self._n - 1

    def add_path(self, pts: np.ndarray, tags, closed: bool):
        """Add a polyline, discretizing each piece; tags per piece (or one tag)."""
        m = len(pts)
        npiece = m if closed else m - 1
        if isinstance(tags, str):
            tags = [tags] * npiece
        for i in range(npiece):
            a, b = pts[i], pts[(i + 1) % m]
            sub = discretize_segment(a, b, self.size)
            idx = [self._index(q) for q in sub] + [self._index(b)]
            for u, v in zip(idx[:-1], idx[1:]):
                self.segs.append((u, v))
                self.tags.append(tags[i])

    def add_fixed_path(self, pts: np.ndarray, tag: str, closed: bool):
        """Add a polyline using the given points as-is (no further discretization)."""
        idx = [self._index(q) for q in pts]
        if closed:
            idx.append(idx[0])
        for u, v in zip(idx[:-1], idx[1:]):
            self.segs.append((u, v))
            self.tags.append(tag)

    def triangulate(self, bbox, h_max: float, smooth: int = 2):
        fixed = np.array(self.points)
        segs = np.array(self.segs, dtype=int)
        interior = lattice_points(bbox, self.size, h_max)
        pts, tri, segs, tags, free = conforming_delaunay(fixed, segs, self.tags,
                                                         interior, self.size)
        for _ in range(smooth):
            pts = _smooth(pts, tri, free, n_iter=2)
            pts, tri, segs, tags, free = conforming_delaunay(
                pts[~free], _renum_fixed(segs, free), tags, pts[free], self.size)
        return pts, tri, segs, tags


def _renum_fixed(segs, free):
    remap = np.cumsum(~free) - 1
    return remap[segs]


def _finish(pts, tri, keep, segs, seg_tags, h_target, region=None, meta=None) -> Mesh:
    tri = tri[keep]
    region = None if region is None else region[keep]
    used = np.unique(tri)
    new = -np.ones(len(pts), dtype=int)
    new[used] = np.arange(len(used))
    pts = pts[used]
    tri = new[tri]
    tri, _ = _orient(pts, tri)
    segs = new[segs]
    ok = (segs >= 0).all(axis=1)
    segs = segs[ok]
    seg_tags = [t for t, o in zip(seg_tags, ok) if o]
    bedges = _boundary_edges(tri)
    smap = {}
    for s, t in zip(np.sort(segs, axis=1).tolist(), seg_tags):
        smap[tuple(s)] = t
    tags = []
    for e in bedges.tolist():
        t = smap.get((min(e), max(e)))
        if t is None:
            raise GeometryError("boundary edge without a tag")
        tags.append(t)
    return Mesh(pts, tri, bedges, tags, h_target, tri_region=region,
                meta=dict(meta or {}, _segs=segs, _seg_tags=seg_tags))


def _boundary_edges(tri):
    e = np.vstack([tri[:, [0, 1]], tri[:, [1, 2]], tri[:, [2, 0]]])
    s = np.sort(e, axis=1)
    u, inv, cnt = np.unique(s, axis=0, return_inverse=True, return_counts=True)
    inv = inv.ravel()
    once = cnt[inv] == 1
    return e[once]


# ---------------------------------------------------------------------------
# public generators


@dataclass(frozen=True)
class BandSpec:
    cell: PeriodicityCell
    L_band: float = 8.0
    h: float = 1.0 / 64
    h_far: Optional[float] = None  # defaults to 4h

    def __post_init__(self):
        if self.L_band <= 2.0:
            raise GeometryError("L_band must exceed 2")


def mesh_band(spec: BandSpec) -> Mesh:
    """Mesh of (0,1)x(-L_band,L_band) minus the hole, with periodic side pairing."""
    h = spec.h
    Lb = spec.L_band
    h_far = spec.h_far if spec.h_far is not None else min(4 * h, 0.125)
    cell = spec.cell
    if cell.empty:
        # structured right-triangle mesh
        n = max(1, int(round(1.0 / h)))
        m = max(1, int(round(2 * Lb / h)))
        xs = np.linspace(0.0, 1.0, n + 1)
        ys = np.linspace(-Lb, Lb, m + 1)
        X, Y = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([X.ravel(), Y.ravel()])
        idx = np.arange((n + 1) * (m + 1)).reshape(n + 1, m + 1)
        a = idx[:-1, :-1].ravel()
        b = idx[1:, :-1].ravel()
        c = idx[1:, 1:].ravel()
        d = idx[:-1, 1:].ravel()
        tri = np.vstack([np.column_stack([a, b, c]), np.column_stack([a, c, d])])
        bed = _boundary_edges(tri)
        tags = []
        for e in bed.tolist():
            p, q = pts[e[0]], pts[e[1]]
            if p[0] == 0 and q[0] == 0:
                tags.append("periodic_left")
            elif p[0] == 1 and q[0] == 1:
                tags.append("periodic_right")
            elif p[1] == Lb and q[1] == Lb:
                tags.append("band_top")
            else:
                tags.append("band_bottom")
        pairs = np.column_stack([idx[0, :], idx[-1, :]])
        return Mesh(pts, tri, bed, tags, h, periodic_pairs=pairs,
                    meta={"kind": "band", "L_band": Lb, "hole_area": 0.0})
    poly = cell.hole_polygon()
    x0, x1, y0, y1 = cell.hole.bbox()
    perim = cell.hole.perimeter()
    h_hole = min(h, perim / cell.hole_vertices)
    size = graded_size(h_far, 0.2, [("box", (0.0, 1.0, -2.5, 2.5), h),
                                    ("box", (x0, x1, y0, y1), h_hole)])
    b = _Builder(size)
    # one side, copied to the other so the pairing is exact
    side = discretize_segment((0.0, -Lb), (0.0, Lb), size)
    side = np.vstack([side, [[0.0, Lb]]])
    top = discretize_segment((0.0, Lb), (1.0, Lb), size)
    bot = discretize_segment((1.0, -Lb), (0.0, -Lb), size)
    right = side[::-1].copy()
    right[:, 0] = 1.0
    b.add_fixed_path(side, "periodic_left", closed=False)
    b.add_fixed_path(np.vstack([top, [[1.0, Lb]]]), "band_top", closed=False)
    b.add_fixed_path(right, "periodic_right", closed=False)
    b.add_fixed_path(np.vstack([bot, [[0.0, -Lb]]]), "band_bottom", closed=False)
    hole_pts = _refine_polygon(poly, size)
    b.add_fixed_path(hole_pts, "hole", closed=True)
    pts, tri, segs, tags = b.triangulate((0.0, 1.0, -Lb, Lb), h_far)
    cen = pts[tri].mean(axis=1)
    keep = ~points_in_polygon(cen, poly) & (cen[:, 0] > 0) & (cen[:, 0] < 1)
    keep &= np.abs(cen[:, 1]) < Lb
    m = _finish(pts, tri, keep, segs, tags, h,
                meta={"kind": "band", "L_band": Lb, "hole_area": _poly_area(poly)})
    m.periodic_pairs = _pair_sides(m)
    return m


def _pair_sides(m: Mesh) -> np.ndarray:
    left = m.nodes_with("periodic_left")
    right = m.nodes_with("periodic_right")
    left = left[np.argsort(m.vertices[left, 1])]
    right = right[np.argsort(m.vertices[right, 1])]
    if len(left) != len(right) or np.abs(m.vertices[left, 1] - m.vertices[right, 1]).max() > 1e-12:
        raise GeometryError("periodic sides do not match")
    return np.column_stack([left, right])


def _insert_axis_crossings(poly: np.ndarray) -> np.ndarray:
    """Add the points where the polygon crosses y = 0 as vertices (snapped to y = 0)."""
    out = []
    m = len(poly)
    for i in range(m):
        a, b = poly[i], poly[(i + 1) % m]
        if abs(a[1]) < 1e-14:
            a = np.array([a[0], 0.0])
        out.append(a)
        if a[1] * b[1] < 0 and abs(b[1]) >= 1e-14:
            t = a[1] / (a[1] - b[1])
            out.append(np.array([a[0] + t * (b[0] - a[0]), 0.0]))
    return np.array(out)


def _poly_area(v):
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y)))


def _refine_polygon(poly: np.ndarray, size: SizeFn) -> np.ndarray:
    """Subdivide polygon edges where the local size asks for it; vertices kept."""
    out = []
    m = len(poly)
    for i in range(m):
        out.append(discretize_segment(poly[i], poly[(i + 1) % m], size))
    return np.vstack(out)


def layer_size(domain: DomainSpec, cell: PeriodicityCell, delta: Optional[float],
               h0: float, grading: float = 0.25, corner_factor: float = 0.5,
               ratio: float = 8.0) -> SizeFn:
    """Size rule: min(h0, delta/ratio) near the layer and corners, h0 in the bulk."""
    L = domain.L
    h_layer = h0 if delta is None else min(h0, delta / ratio)
    src = [("segment", (-L, 0.0), (L, 0.0), h_layer),
           ("point", (L, 0.0), corner_factor * h_layer),
           ("point", (-L, 0.0), corner_factor * h_layer)]
    if delta is not None:
        src.append(("box", (-L, L, -2 * delta, 2 * delta), h_layer))
        if not cell.empty:
            hp = cell.hole.perimeter() * delta / cell.hole_vertices
            x0, x1, y0, y1 = cell.hole.bbox()
            q = hole_count(domain, delta)
            src.append(("box", (-L + delta * x0, -L + delta * (q - 1 + x1),
                                delta * y0, delta * y1), min(h_layer, hp)))
    return graded_size(h0, grading, src)


def _domain_mesh(domain: DomainSpec, cell: PeriodicityCell, delta: Optional[float],
                 h: float, fill_holes: bool, size: Optional[SizeFn] = None):
    size = size or layer_size(domain, cell, delta, h)
    L, Lt, HB, HT = domain.L, domain.L_top, domain.H_B, domain.H_T
    b = _Builder(size)
    # outer boundary; Gamma as an interior constraint
    b.add_path(np.array([[-L, 0.0], [-L, -HB], [L, -HB], [L, 0.0], [Lt, 0.0], [Lt, HT],
                         [-Lt, HT], [-Lt, 0.0]]), "dirichlet", closed=True)
    holes = [] if delta is None else [_insert_axis_crossings(p)
                                      for p in layer_holes(domain, cell, delta)]
    for poly in holes:
        b.add_fixed_path(_refine_polygon(poly, size), "hole", closed=True)
    # Gamma pieces: between holes, and through holes (filled meshes only)
    xs = [-L, L]
    if holes:
        cuts = []
        for poly in holes:
            on = np.abs(poly[:, 1]) < 1e-14 * max(1.0, L)
            if on.sum() >= 2:
                cuts += sorted(poly[on, 0].tolist())
        xs = sorted(set([-L, L] + [round(c, 14) for c in cuts]))
    gam = np.array([[x, 0.0] for x in xs])
    for i in range(len(gam) - 1):
        mid = 0.5 * (gam[i] + gam[i + 1])
        in_hole = any(points_in_polygon(mid[None], p)[0] for p in holes)
        if in_hole and not fill_holes:
            continue
        b.add_path(gam[i:i + 2], _GAMMA, closed=False)
    pts, tri, segs, tags = b.triangulate((-Lt, Lt, -HB, HT), h)
    cen = pts[tri].mean(axis=1)
    keep = domain.contains(cen[:, 0], cen[:, 1])
    region = np.zeros(len(tri), dtype=int)
    for k, poly in enumerate(holes):
        x0, x1 = poly[:, 0].min(), poly[:, 0].max()
        near = (cen[:, 0] > x0) & (cen[:, 0] < x1)
        idx = np.where(near)[0]
        inside = points_in_polygon(cen[idx], poly)
        region[idx[inside]] = k + 1
    if not fill_holes:
        keep &= region == 0
    return pts, tri, keep, segs, tags, region, holes


def mesh_perforated(domain: DomainSpec, cell: PeriodicityCell, delta: float, h: float,
                    size: Optional[SizeFn] = None) -> Mesh:
    """Mesh of the perforated domain; holes are Neumann boundaries."""
    if delta >= min(domain.H_B, domain.H_T):
        raise GeometryError("delta must be smaller than both heights")
    q = hole_count(domain, delta)
    pts, tri, keep, segs, tags, region, holes = _domain_mesh(domain, cell, delta, h, False, size)
    m = _finish(pts, tri, keep, segs, tags, h, region=region,
                meta={"kind": "perforated", "delta": delta, "q": q, "n_holes": len(holes)})
    return m


def mesh_layer_pair(domain: DomainSpec, cell: PeriodicityCell, delta: float, h: float,
                    size: Optional[SizeFn] = None) -> tuple[Mesh, Mesh, np.ndarray]:
    """Perforated mesh and split limit mesh sharing one triangulation outside the holes.

    Returns (perforated, limit, node_map) where node_map[i] is the limit-mesh node
    at the position of perforated node i (top copy on Gamma).
    """
    if delta >= min(domain.H_B, domain.H_T):
        raise GeometryError("delta must be smaller than both heights")
    q = hole_count(domain, delta)
    pts, tri, keep, segs, tags, region, holes = _domain_mesh(domain, cell, delta, h, True, size)
    full = _finish(pts, tri, keep, segs, tags, h, region=region,
                   meta={"kind": "limit", "delta": delta})
    limit, top_of = _split_gamma(full, domain)
    fluid = full.tri_region == 0
    perf = _finish(full.vertices, full.triangles, fluid, full.meta["_segs"],
                   full.meta["_seg_tags"], h, region=full.tri_region,
                   meta={"kind": "perforated", "delta": delta, "q": q, "n_holes": len(holes)})
    # perforated node -> full node by coordinates (renumbering is monotone)
    used = np.unique(full.triangles[fluid])
    node_map = top_of[used]
    return perf, limit, node_map


def mesh_limit_split(domain: DomainSpec, h: float, size: Optional[SizeFn] = None) -> Mesh:
    """Mesh of the limit domain with every Gamma node doubled."""
    pts, tri, keep, segs, tags, region, _ = _domain_mesh(domain, PeriodicityCell(), None, h,
                                                         True, size)
    full = _finish(pts, tri, keep, segs, tags, h, region=region, meta={"kind": "limit"})
    limit, _ = _split_gamma(full, domain)
    return limit


def _split_gamma(full: Mesh, domain: DomainSpec) -> tuple[Mesh, np.ndarray]:
    """Duplicate nodes on Gamma; triangles below reference the bottom copies."""
    L = domain.L
    v = full.vertices
    on = (np.abs(v[:, 1]) < 1e-14) & (np.abs(v[:, 0]) <= L * (1 + 1e-14))
    gnodes = np.where(on)[0]
    gnodes = gnodes[np.argsort(v[gnodes, 0])]
    n = len(v)
    bottom = np.arange(n, n + len(gnodes))
    verts = np.vstack([v, v[gnodes]])
    remap = np.arange(n)
    remap[gnodes] = bottom
    tri = full.triangles.copy()
    below = full.centroids()[:, 1] < 0
    tri[below] = remap[tri[below]]
    # boundary edges: old ones, remapped where they belong to lower triangles
    edges, tags = [], []
    bset = set()
    for t in tri[below]:
        for a, c in ((t[0], t[1]), (t[1], t[2]), (t[2], t[0])):
            bset.add((min(a, c), max(a, c)))
    for e, t in zip(full.edges.tolist(), full.edge_tags):
        e2 = [remap[e[0]], remap[e[1]]]
        if tuple(sorted(e2)) in bset:
            edges.append(e2)
        else:
            edges.append(e)
        tags.append(t)
    # Gamma edges become boundary edges of both sides
    for t, lower in ((tri[~below], False), (tri[below], True)):
        for a, c in np.vstack([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]]).tolist():
            pa, pc = verts[a], verts[c]
            if pa[1] == 0 and pc[1] == 0 and abs(pa[0]) <= L and abs(pc[0]) <= L:
                if lower and a >= n and c >= n:
                    edges.append([a, c])
                    tags.append("interface_bottom")
                elif not lower and a < n and c < n and on[a] and on[c]:
                    edges.append([a, c])
                    tags.append("interface_top")
    pairs = np.column_stack([gnodes, bottom])
    corners = np.concatenate([gnodes[[0, -1]], bottom[[0, -1]]])
    m = Mesh(verts, tri, np.array(edges, int), tags, full.h_target,
             interface_pairs=pairs, corner_nodes=corners, tri_region=full.tri_region,
             meta={k: val for k, val in full.meta.items() if not k.startswith("_")})
    top_of = np.arange(n)
    return m, top_of


@dataclass(frozen=True)
class SectorSpec:
    corner: str
    R_max: float
    cell: PeriodicityCell
    h_near: float = 0.05
    h_far: float = 0.5
    grading: float = 0.2

    def __post_init__(self):
        if self.R_max < 8:
            raise GeometryError("R_max must be at least 8")

    @property
    def n_holes(self) -> int:
        return 0 if self.cell.empty else int(np.floor(self.R_max)) - 2


def sector_holes(spec: SectorSpec) -> list[np.ndarray]:
    if spec.cell.empty:
        return []
    base = spec.cell.hole_polygon()
    out = []
    for ell in range(spec.n_holes):
        p = base.copy()
        if spec.corner == "plus":
            p[:, 0] -= ell + 1
        else:
            p[:, 0] += ell
        out.append(p)
    return out


def mesh_sector(spec: SectorSpec) -> Mesh:
    """Truncated corner sector with unit-spaced holes along the layer ray."""
    R = spec.R_max
    frame = CornerFrame(spec.corner, 0.0)
    lo, hi = frame.interval
    holes = sector_holes(spec)
    s = -1.0 if spec.corner == "plus" else 1.0
    src = [("point", (0.0, 0.0), spec.h_near)]
    if holes:
        x_end = s * (spec.n_holes + 0.0)
        src.append(("box", (min(0.0, x_end), max(0.0, x_end), -0.5, 0.5), spec.h_near))
    size = graded_size(spec.h_far, spec.grading, src)
    b = _Builder(size)
    # walls and arc
    n_arc = max(24, int(np.ceil(1.5 * np.pi * R / spec.h_far)))
    th = np.linspace(lo, hi, n_arc + 1)
    arc = np.column_stack([R * np.cos(th), R * np.sin(th)])
    b.add_path(np.array([[0.0, 0.0], arc[0]]), "dirichlet", closed=False)
    b.add_fixed_path(arc, "outer_arc", closed=False)
    b.add_path(np.array([arc[-1], [0.0, 0.0]]), "dirichlet", closed=False)
    for poly in holes:
        b.add_fixed_path(_refine_polygon(poly, size), "hole", closed=True)
    pts, tri, segs, tags = b.triangulate((-R, R, -R, R), spec.h_far)
    cen = pts[tri].mean(axis=1)
    r, t = frame.polar(cen[:, 0], cen[:, 1])
    keep = (r < R) & (t > lo) & (t < hi)
    outline = np.vstack([[[0.0, 0.0]], arc])
    keep &= points_in_polygon(cen, outline)
    for poly in holes:
        keep &= ~points_in_polygon(cen, poly)
    return _finish(pts, tri, keep, segs, tags, spec.h_near,
                   meta={"kind": "sector", "corner": spec.corner, "R_max": R,
                         "n_holes": len(holes)})


# ---------------------------------------------------------------------------
# checks and I/O


def check_mesh(m: Mesh, tol: float = 1e-12) -> None:
    if (m.areas() <= 0).any():
        raise GeometryError("non-positive triangle area")
    e = np.vstack([m.triangles[:, [0, 1]], m.triangles[:, [1, 2]], m.triangles[:, [2, 0]]])
    _, cnt = np.unique(np.sort(e, axis=1), axis=0, return_counts=True)
    if (cnt > 2).any():
        raise GeometryError("non-manifold edge")
    if len(m.edge_tags) != len(m.edges):
        raise GeometryError("edge tag count mismatch")
    bnd = _boundary_edges(m.triangles)
    if len(bnd) != len(m.edges):
        raise GeometryError("boundary edge set mismatch")
    for t in m.edge_tags:
        if t not in TAGS:
            raise GeometryError(f"bad edge tag {t}")
    if len(m.periodic_pairs):
        d = m.vertices[m.periodic_pairs[:, 0], 1] - m.vertices[m.periodic_pairs[:, 1], 1]
        if np.abs(d).max() > tol:
            raise GeometryError("periodic pair mismatch")
    if len(m.interface_pairs):
        d = m.vertices[m.interface_pairs[:, 0]] - m.vertices[m.interface_pairs[:, 1]]
        if np.abs(d).max() > tol:
            raise GeometryError("interface pair mismatch")


def write_vtk(path, m: Mesh, point_data: Optional[dict] = None) -> None:
    """Legacy ASCII VTK unstructured grid: triangles, tagged boundary lines, pairs."""
    nt, ne = len(m.triangles), len(m.edges)
    lines = ["# vtk DataFile Version 3.0", f"perilayer mesh h={m.h_target!r}", "ASCII",
             "DATASET UNSTRUCTURED_GRID", f"POINTS {m.n_vertices} double"]
    lines += [f"{x!r} {y!r} 0.0" for x, y in m.vertices.tolist()]
    lines.append(f"CELLS {nt + ne} {4 * nt + 3 * ne}")
    lines += [f"3 {a} {b} {c}" for a, b, c in m.triangles.tolist()]
    lines += [f"2 {a} {b}" for a, b in m.edges.tolist()]
    lines.append(f"CELL_TYPES {nt + ne}")
    lines += ["5"] * nt + ["3"] * ne
    lines.append(f"CELL_DATA {nt + ne}")
    lines.append("SCALARS tag int 1")
    lines.append("LOOKUP_TABLE default")
    lines += [str(-1 - int(r)) for r in m.tri_region] + [str(TAGS.index(t)) for t in m.edge_tags]
    fields = [("periodic_pairs", m.periodic_pairs), ("interface_pairs", m.interface_pairs),
              ("corner_nodes", m.corner_nodes.reshape(-1, 1))]
    lines.append(f"FIELD pairs {len(fields)}")
    for name, arr in fields:
        arr = np.asarray(arr, int).reshape(-1, 2 if name != "corner_nodes" else 1)
        lines.append(f"{name} {arr.shape[1]} {arr.shape[0]} int")
        lines += [" ".join(map(str, row)) for row in arr.tolist()]
    if point_data:
        lines.append(f"POINT_DATA {m.n_vertices}")
        for name, val in point_data.items():
            lines.append(f"SCALARS {name} double 1")
            lines.append("LOOKUP_TABLE default")
            lines += [repr(float(x)) for x in np.asarray(val)]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_vtk(path) -> tuple[Mesh, dict]:
    with open(path) as fh:
        tok = fh.read().split("\n")
    i = 0
    h = float(tok[1].split("h=")[1])
    data: dict = {}
    pts = tris = edges = None
    cell_tags = None
    pairs = {}
    while i < len(tok):
        line = tok[i].strip()
        if line.startswith("POINTS"):
            n = int(line.split()[1])
            pts = np.array([list(map(float, tok[i + 1 + k].split()[:2])) for k in range(n)])
            i += n + 1
            continue
        if line.startswith("CELLS"):
            n = int(line.split()[1])
            rows = [list(map(int, tok[i + 1 + k].split())) for k in range(n)]
            tris = np.array([r[1:] for r in rows if r[0] == 3], int)
            edges = np.array([r[1:] for r in rows if r[0] == 2], int).reshape(-1, 2)
            i += n + 1
            continue
        if line.startswith("CELL_DATA"):
            n = int(line.split()[1])
            cell_tags = np.array([int(tok[i + 3 + k]) for k in range(n)])
            i += n + 3
            continue
        if line.startswith("FIELD"):
            nf = int(line.split()[2])
            i += 1
            for _ in range(nf):
                name, nc, nr, _t = tok[i].split()
                nc, nr = int(nc), int(nr)
                arr = np.array([list(map(int, tok[i + 1 + k].split())) for k in range(nr)], int)
                pairs[name] = arr.reshape(nr, nc)
                i += nr + 1
            continue
        if line.startswith("SCALARS") and pts is not None and cell_tags is not None:
            name = line.split()[1]
            n = len(pts)
            data[name] = np.array([float(tok[i + 2 + k]) for k in range(n)])
            i += n + 2
            continue
        i += 1
    nt = len(tris)
    region = -1 - cell_tags[:nt]
    etags = [TAGS[k] for k in cell_tags[nt:]]
    m = Mesh(pts, tris, edges, etags, h,
             periodic_pairs=pairs.get("periodic_pairs", np.zeros((0, 2), int)),
             interface_pairs=pairs.get("interface_pairs", np.zeros((0, 2), int)),
             corner_nodes=pairs.get("corner_nodes", np.zeros((0, 1), int)).ravel(),
             tri_region=region)
    return m, data
