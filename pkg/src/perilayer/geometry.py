"""Geometric primitives: domains, hole shapes, cut-off functions and corner frames."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

TWO_THIRDS = 2.0 / 3.0
SECTOR_NORM = 4.0 / (3.0 * np.pi)  # 1 / int_I sin^2


class GeometryError(ValueError):
    pass


# ---------------------------------------------------------------------------
# holes and cells


@dataclass(frozen=True)
class Disk:
    center: tuple[float, float]
    radius: float

    def polygon(self, n: int) -> np.ndarray:
        # vertices start at angle 0, counter-clockwise
        t = 2.0 * np.pi * np.arange(n) / n
        c, s = np.cos(t), np.sin(t)
        c[np.abs(c) < 1e-15] = 0.0
        s[np.abs(s) < 1e-15] = 0.0
        return np.column_stack([self.center[0] + self.radius * c,
                                self.center[1] + self.radius * s])

    def bbox(self):
        cx, cy = self.center
        r = self.radius
        return cx - r, cx + r, cy - r, cy + r

    def perimeter(self) -> float:
        return 2.0 * np.pi * self.radius

    def mirrored(self) -> "Disk":
        return Disk((1.0 - self.center[0], self.center[1]), self.radius)


@dataclass(frozen=True)
class Polygon:
    vertices: tuple[tuple[float, float], ...]

    def polygon(self, n: int) -> np.ndarray:
        v = np.asarray(self.vertices, dtype=float)
        if _signed_area(v) < 0:
            v = v[::-1]
        # subdivide edges so the total count is at least n
        per = np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1)
        total = per.sum()
        out = []
        for i in range(len(v)):
            k = max(1, int(np.ceil(n * per[i] / total)))
            a, b = v[i], v[(i + 1) % len(v)]
            for j in range(k):
                out.append(a + (b - a) * j / k)
        return np.array(out)

    def bbox(self):
        v = np.asarray(self.vertices)
        return v[:, 0].min(), v[:, 0].max(), v[:, 1].min(), v[:, 1].max()

    def perimeter(self) -> float:
        v = np.asarray(self.vertices)
        return float(np.linalg.norm(np.roll(v, -1, axis=0) - v, axis=1).sum())

    def mirrored(self) -> "Polygon":
        return Polygon(tuple((1.0 - x, y) for x, y in reversed(self.vertices)))


def _signed_area(v: np.ndarray) -> float:
    x, y = v[:, 0], v[:, 1]
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


@dataclass(frozen=True)
class PeriodicityCell:
    """Unit cell (0,1)x(-1,1) with an optional hole."""

    hole: Optional[Disk | Polygon] = None
    # vertex count used when a disk is approximated by a polygon
    hole_vertices: int = 32

    def __post_init__(self):
        if self.hole is None:
            return
        x0, x1, y0, y1 = self.hole.bbox()
        if not (x0 > 0.0 and x1 < 1.0 and y0 > -1.0 and y1 < 1.0):
            raise GeometryError("hole must lie strictly inside (0,1)x(-1,1)")
        if isinstance(self.hole, Disk) and self.hole.radius <= 0:
            raise GeometryError("disk radius must be positive")
        if self.hole_vertices < 16 or self.hole_vertices % 4:
            raise GeometryError("hole_vertices must be a multiple of 4 and >= 16")

    @property
    def empty(self) -> bool:
        return self.hole is None

    def hole_polygon(self, n: Optional[int] = None) -> Optional[np.ndarray]:
        if self.hole is None:
            return None
        return self.hole.polygon(n or self.hole_vertices)

    def mirrored(self) -> "PeriodicityCell":
        if self.hole is None:
            return self
        return PeriodicityCell(self.hole.mirrored(), self.hole_vertices)


# ---------------------------------------------------------------------------
# macroscopic domain


@dataclass(frozen=True)
class SourceSpec:
    center: tuple[float, float] = (0.0, 0.4)
    radius: float = 0.2
    amplitude: float = 1.0

    def __call__(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        if self.amplitude == 0.0:
            return np.zeros(np.broadcast(x, y).shape)
        s2 = ((x - self.center[0]) ** 2 + (y - self.center[1]) ** 2) / self.radius ** 2
        out = np.zeros(np.broadcast(x, y).shape)
        inside = s2 < 1.0
        out[inside] = self.amplitude * np.exp(1.0 - 1.0 / (1.0 - s2[inside]))
        return out


@dataclass(frozen=True)
class DomainSpec:
    L: float = 1.0
    L_top: float = 1.5
    H_B: float = 0.75
    H_T: float = 0.75
    source: SourceSpec = field(default_factory=SourceSpec)

    def __post_init__(self):
        if not (self.L_top > self.L > 0 and self.H_B > 0 and self.H_T > 0):
            raise GeometryError("need L_top > L > 0 and positive heights")
        s = self.source
        cx, cy = s.center
        if s.radius <= 0:
            raise GeometryError("source radius must be positive")
        if not (cx - s.radius > -self.L_top and cx + s.radius < self.L_top
                and cy - s.radius > 0.0 and cy + s.radius < self.H_T):
            raise GeometryError("source disk must lie inside the top rectangle")

    @property
    def source_gap(self) -> float:
        return self.source.center[1] - self.source.radius

    def corner_cutoff_radius(self) -> float:
        """Support radius of the corner cut-offs; keeps them clear of the outer walls."""
        return min(self.L, self.H_B, self.H_T, self.L_top - self.L)

    def outer_polygon(self) -> np.ndarray:
        L, Lt, HB, HT = self.L, self.L_top, self.H_B, self.H_T
        return np.array([[-L, -HB], [L, -HB], [L, 0.0], [Lt, 0.0], [Lt, HT],
                         [-Lt, HT], [-Lt, 0.0], [-L, 0.0]])

    def contains(self, x: np.ndarray, y: np.ndarray) -> np.ndarray:
        top = (np.abs(x) < self.L_top) & (y > 0) & (y < self.H_T)
        bot = (np.abs(x) < self.L) & (y < 0) & (y > -self.H_B)
        return top | bot

    def mirrored(self) -> "DomainSpec":
        s = self.source
        return DomainSpec(self.L, self.L_top, self.H_B, self.H_T,
                          SourceSpec((-s.center[0], s.center[1]), s.radius, s.amplitude))


def hole_count(domain: DomainSpec, delta: float) -> int:
    q = 2.0 * domain.L / delta
    qi = int(round(q))
    if qi < 1 or abs(q - qi) > 1e-9 * max(1.0, q):
        raise GeometryError(f"2L/delta = {q} is not a positive integer")
    return qi


def layer_holes(domain: DomainSpec, cell: PeriodicityCell, delta: float,
                n: Optional[int] = None) -> list[np.ndarray]:
    """Scaled hole polygons of the perforated domain."""
    q = hole_count(domain, delta)
    if cell.empty:
        return []
    base = cell.hole_polygon(n)
    out = []
    for ell in range(1, q + 1):
        p = base.copy()
        p[:, 0] += ell - 1
        out.append(np.column_stack([-domain.L + delta * p[:, 0], delta * p[:, 1]]))
    return out


# ---------------------------------------------------------------------------
# cut-off functions


@dataclass(frozen=True)
class CutoffProfile:
    kind: str = "quintic"

    def __post_init__(self):
        if self.kind not in ("quintic", "cosine"):
            raise GeometryError(f"unknown cut-off kind {self.kind!r}")

    def step(self, u: np.ndarray, k: int = 0) -> np.ndarray:
        """Transition s(u) on [0,1] and its derivatives."""
        if self.kind == "quintic":
            if k == 0:
                return u ** 3 * (10.0 - 15.0 * u + 6.0 * u * u)
            if k == 1:
                return 30.0 * u * u * (1.0 - u) ** 2
            return 60.0 * u * (1.0 - u) * (1.0 - 2.0 * u)
        # C^2 cosine ramp
        w = 2.0 * np.pi
        if k == 0:
            return u - np.sin(w * u) / w
        if k == 1:
            return 1.0 - np.cos(w * u)
        return w * np.sin(w * u)


def chi(profile: CutoffProfile, t, k: int = 0):
    """Even cut-off: 0 on |t|<=1, 1 on |t|>=2. k selects the derivative order."""
    t = np.asarray(t, dtype=float)
    a = np.abs(t)
    u = np.clip(a - 1.0, 0.0, 1.0)
    inside = (a > 1.0) & (a < 2.0)
    if k == 0:
        out = np.where(a >= 2.0, 1.0, 0.0)
        out = np.where(inside, profile.step(u, 0), out)
    else:
        out = np.where(inside, profile.step(u, k), 0.0)
        if k % 2 == 1:
            out = out * np.sign(t)
    return out if out.ndim else float(out)


def chi_pm(profile: CutoffProfile, sign: int, t, k: int = 0):
    t = np.asarray(t, dtype=float)
    mask = (t > 0) if sign > 0 else (t < 0)
    out = np.where(mask, chi(profile, t, k), 0.0)
    return out if out.ndim else float(out)


def radial_cutoff(profile: CutoffProfile, r, rho: float, k: int = 0):
    """1 - chi(2r/rho) and its r-derivatives: 1 for r<rho/2, 0 for r>rho."""
    s = 2.0 / rho
    if k == 0:
        return 1.0 - chi(profile, s * np.asarray(r, dtype=float))
    return -(s ** k) * chi(profile, s * np.asarray(r, dtype=float), k)


# ---------------------------------------------------------------------------
# corner frames


def lam(m: float) -> float:
    return 2.0 * m / 3.0


def in_lambda_set(x: float, tol: float = 1e-12) -> bool:
    m = 1.5 * x
    return abs(m - round(m)) < tol and round(m) != 0


@dataclass(frozen=True)
class CornerFrame:
    corner: str  # "plus" | "minus"
    L: float

    def __post_init__(self):
        if self.corner not in ("plus", "minus"):
            raise GeometryError("corner must be 'plus' or 'minus'")

    @property
    def sign(self) -> int:
        return 1 if self.corner == "plus" else -1

    @property
    def origin(self) -> tuple[float, float]:
        return (self.sign * self.L, 0.0)

    @property
    def interval(self) -> tuple[float, float]:
        return (0.0, 1.5 * np.pi) if self.corner == "plus" else (-0.5 * np.pi, np.pi)

    @property
    def theta_layer(self) -> float:
        """Angle of the ray carrying the layer (the interface side)."""
        return np.pi if self.corner == "plus" else 0.0

    def polar(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        dx = x - self.origin[0]
        r = np.hypot(dx, y)
        th = np.arctan2(y, dx)
        cut = 0.0 if self.corner == "plus" else -0.5 * np.pi
        th = np.where(th < cut, th + 2.0 * np.pi, th)
        return r, th

    def mode(self, m: int, theta, k: int = 0):
        """Angular eigenfunction w_m (or its k-th derivative) on this sector."""
        theta = np.asarray(theta, dtype=float)
        lo, hi = self.interval
        if np.any(theta < lo - 1e-12) or np.any(theta > hi + 1e-12):
            raise GeometryError("angle outside the sector")
        lm = lam(m)
        ph = lm * (theta - lo)
        if k == 0:
            return np.sin(ph)
        if k == 1:
            return lm * np.cos(ph)
        return -lm * lm * np.sin(ph)

    def to_cartesian(self, r, theta):
        return self.origin[0] + r * np.cos(theta), r * np.sin(theta)


def angular_mode(frame: CornerFrame, m: int, theta):
    if m == 0:
        raise GeometryError("mode index must be nonzero")
    out = frame.mode(m, theta)
    return out if np.ndim(out) else float(out)
