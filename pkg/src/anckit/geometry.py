"""Planar enclosure primitives for point clouds given as complex numbers.

Smallest enclosing circle (Welzl, move-to-front), minimum-area enclosing
ellipse (Khachiyan iteration with away steps), convex hull (monotone chain)
in half-space form, and an anchored multi-disk cover.
"""

from __future__ import annotations

import logging
import math
import random
from dataclasses import dataclass

import numpy as np

from anckit.errors import ConfigurationError

log = logging.getLogger(__name__)

DEGENERACY_FLOOR = 1e-6
_SHUFFLE_SEED = 0x5EC


@dataclass(frozen=True)
class Disk:
    center: complex
    radius: float

    def __post_init__(self):
        if not (self.radius >= 0 and math.isfinite(self.radius)):
            raise ConfigurationError(f"invalid disk radius {self.radius!r}")
        object.__setattr__(self, "center", complex(self.center))
        object.__setattr__(self, "radius", float(self.radius))


@dataclass(frozen=True)
class MultiDisk:
    disks: tuple
    anchor: complex

    def __post_init__(self):
        disks = tuple(self.disks)
        if not disks:
            raise ConfigurationError("multi-disk model needs at least one disk")
        object.__setattr__(self, "disks", disks)
        object.__setattr__(self, "anchor", complex(self.anchor))

    @property
    def centers(self) -> np.ndarray:
        return np.array([d.center for d in self.disks])

    @property
    def radii(self) -> np.ndarray:
        return np.array([d.radius for d in self.disks])


@dataclass(frozen=True)
class Ellipse:
    """Center, semi-axes a >= b > 0 and major-axis angle theta in [0, pi)."""

    center: complex
    a: float
    b: float
    theta: float

    def __post_init__(self):
        if not (self.a >= self.b > 0) or not math.isfinite(self.a):
            raise ConfigurationError(f"invalid ellipse axes a={self.a!r}, b={self.b!r}")
        object.__setattr__(self, "center", complex(self.center))
        object.__setattr__(self, "a", float(self.a))
        object.__setattr__(self, "b", float(self.b))
        object.__setattr__(self, "theta", float(self.theta) % math.pi)


@dataclass(frozen=True)
class ConvexHull2D:
    """Convex polygon with CCW ``vertices`` and one half-space per edge.

    Half-space m is ``cos(phi_m) Re(p) + sin(phi_m) Im(p) + offset_m <= 0``,
    with ``phi_m`` the angle of the outward unit normal.
    """

    angles: np.ndarray
    offsets: np.ndarray
    vertices: np.ndarray

    def __post_init__(self):
        angles = np.array(self.angles, dtype=float).ravel()
        offsets = np.array(self.offsets, dtype=float).ravel()
        vertices = np.array(self.vertices, dtype=complex).ravel()
        if angles.size < 3 or angles.size != offsets.size:
            raise ConfigurationError("convex hull needs >= 3 matching half-spaces")
        for arr in (angles, offsets, vertices):
            arr.setflags(write=False)
        object.__setattr__(self, "angles", angles)
        object.__setattr__(self, "offsets", offsets)
        object.__setattr__(self, "vertices", vertices)

    @property
    def num_halfspaces(self) -> int:
        return self.angles.size

    def halfspace_values(self, p) -> np.ndarray:
        """Left-hand sides of all inequalities; shape (..., H)."""
        p = np.asarray(p, dtype=complex)[..., None]
        return np.cos(self.angles) * p.real + np.sin(self.angles) * p.imag + self.offsets


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=complex).ravel()
    if pts.size == 0:
        raise ConfigurationError("need at least one point")
    if not np.all(np.isfinite(pts)):
        raise ConfigurationError("points must be finite")
    return pts


def spread(points) -> float:
    """Largest distance of any point from the centroid."""
    pts = np.asarray(points, dtype=complex)
    return float(np.max(np.abs(pts - pts.mean())))


# -- smallest circle ---------------------------------------------------------

def _circle_two(p, q):
    c = 0.5 * (p + q)
    return c, max(abs(p - c), abs(q - c))


def _circle_three(p, q, s):
    bx, by = (q - p).real, (q - p).imag
    cx, cy = (s - p).real, (s - p).imag
    d = 2.0 * (bx * cy - by * cx)
    if d == 0.0:
        return None
    b2, c2 = bx * bx + by * by, cx * cx + cy * cy
    ux = (cy * b2 - by * c2) / d
    uy = (bx * c2 - cx * b2) / d
    c = p + complex(ux, uy)
    return c, max(abs(p - c), abs(q - c), abs(s - c))


def _inside(c, r, p, eps):
    return abs(p - c) <= r + eps


def _welzl(pts: list, eps: float):
    # incremental form of Welzl's algorithm; the prefix order acts as move-to-front
    c, r = pts[0], 0.0
    for i, p in enumerate(pts):
        if _inside(c, r, p, eps):
            continue
        c, r = p, 0.0
        for j in range(i):
            q = pts[j]
            if _inside(c, r, q, eps):
                continue
            c, r = _circle_two(p, q)
            for k in range(j):
                s = pts[k]
                if _inside(c, r, s, eps):
                    continue
                three = _circle_three(p, q, s)
                if three is None:
                    # collinear triple: the farthest pair spans it
                    pairs = [_circle_two(p, q), _circle_two(p, s), _circle_two(q, s)]
                    c, r = max(pairs, key=lambda cr: cr[1])
                else:
                    c, r = three
    return c, r


def smallest_circle(points) -> Disk:
    """Minimal-radius disk enclosing ``points``."""
    pts = _as_points(points)
    origin = pts.mean()
    shifted = [complex(p) for p in pts - origin]
    random.Random(_SHUFFLE_SEED).shuffle(shifted)
    scale = max(abs(p) for p in shifted)
    c, _ = _welzl(shifted, 1e-14 * scale)
    arr = np.asarray(shifted)
    r = float(np.max(np.abs(arr - c)))
    return Disk(c + origin, r)


# -- minimum-area ellipse ----------------------------------------------------

def _khachiyan_batch(x: np.ndarray, y: np.ndarray, tol: float, max_iter: int, counts=None):
    """Minimum-volume enclosing ellipses of B planar point sets at once.

    x, y have shape (B, M). Returns centers (B, 2) and shape matrices (B, 2, 2)
    with (p - c)^T A (p - c) <= 1 describing each ellipse.  ``counts`` gives the
    number of leading points in use per row; the remaining columns are padding
    that starts with zero weight.
    """
    nb, m = x.shape
    lift = np.stack([x, y, np.ones_like(x)], axis=-1)  # (B, M, 3)
    counts = np.full(nb, m) if counts is None else np.asarray(counts)
    u = np.where(np.arange(m) < counts[:, None], 1.0 / counts[:, None], 0.0)
    active = np.ones(nb, dtype=bool)
    dim = 3.0
    for _ in range(max_iter):
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        L = lift[idx]
        uu = u[idx]
        X = np.einsum("bm,bmi,bmj->bij", uu, L, L)
        Xi = np.linalg.inv(X)
        mvals = np.einsum("bmi,bij,bmj->bm", L, Xi, L)
        j_fw = np.argmax(mvals, axis=1)
        k_fw = mvals[np.arange(idx.size), j_fw]
        masked = np.where(uu > 0, mvals, np.inf)
        j_aw = np.argmin(masked, axis=1)
        k_aw = mvals[np.arange(idx.size), j_aw]
        gap_fw = (k_fw - dim) / dim
        gap_aw = (dim - k_aw) / dim
        done = (gap_fw <= tol) & (gap_aw <= tol)
        active[idx[done]] = False
        go = ~done
        if not np.any(go):
            break
        sel, jf, kf, ja, ka = idx[go], j_fw[go], k_fw[go], j_aw[go], k_aw[go]
        forward = gap_fw[go] >= gap_aw[go]
        # Frank-Wolfe step towards the most violated point
        f = sel[forward]
        if f.size:
            alpha = (kf[forward] - dim) / (dim * (kf[forward] - 1.0))
            u[f] *= (1.0 - alpha)[:, None]
            u[f, jf[forward]] += alpha
        # away step from the least useful support point
        a = sel[~forward]
        if a.size:
            ja_a, ka_a = ja[~forward], ka[~forward]
            w = u[a, ja_a]
            limit = -w / (1.0 - w)
            with np.errstate(divide="ignore", invalid="ignore"):
                alpha = np.where(ka_a > 1.0, (ka_a - dim) / (dim * (ka_a - 1.0)), limit)
            alpha = np.maximum(alpha, limit)
            u[a] *= (1.0 - alpha)[:, None]
            u[a, ja_a] += alpha
            u[a, ja_a] = np.where(alpha == limit, 0.0, u[a, ja_a])
    else:
        # co-circular support points can make the weights zigzag along a flat face;
        # the result is still rescaled to enclose every point
        worst = float(np.max(np.maximum(gap_fw, gap_aw)[go]))
        (log.warning if worst > 1e-4 else log.debug)(
            "Khachiyan iteration hit max_iter=%d on %d sets (remaining gap %.1e)",
            max_iter, int(active.sum()), worst)
    cx = np.sum(u * x, axis=1)
    cy = np.sum(u * y, axis=1)
    sxx = np.sum(u * x * x, axis=1) - cx * cx
    syy = np.sum(u * y * y, axis=1) - cy * cy
    sxy = np.sum(u * x * y, axis=1) - cx * cy
    cov = np.stack([np.stack([sxx, sxy], -1), np.stack([sxy, syy], -1)], -2)
    A = np.linalg.inv(cov) / 2.0
    return np.stack([cx, cy], -1), A


def _ellipse_from_quadratic(center: complex, A: np.ndarray, floor: float) -> Ellipse:
    evals, evecs = np.linalg.eigh(A)
    a = 1.0 / math.sqrt(evals[0])
    b = 1.0 / math.sqrt(evals[1])
    theta = math.atan2(evecs[1, 0], evecs[0, 0])
    b = max(b, floor)
    a = max(a, b)
    return Ellipse(center, a, b, theta)


def _degenerate_ellipse(pts: np.ndarray, floor: float) -> Ellipse:
    centered = pts - pts.mean()
    if np.max(np.abs(centered)) == 0:
        return Ellipse(pts[0], floor, floor, 0.0)
    _, _, vt = np.linalg.svd(np.stack([centered.real, centered.imag], 1),
                             full_matrices=False)
    direction = complex(vt[0, 0], vt[0, 1])
    along = (centered * np.conj(direction)).real
    perp = (centered * np.conj(direction)).imag
    lo, hi = along.min(), along.max()
    mid = 0.5 * (lo + hi)
    h = float(np.max(np.abs(perp)))
    b = max(floor, 2.0 * h)
    a = max(0.5 * (hi - lo) / math.sqrt(1.0 - (h / b) ** 2), b)
    center = pts.mean() + mid * direction
    return Ellipse(center, a, b, math.atan2(direction.imag, direction.real))


def _ellipse_levels(e: Ellipse, pts: np.ndarray) -> np.ndarray:
    d = pts - e.center
    c, s = math.cos(e.theta), math.sin(e.theta)
    xa = c * d.real + s * d.imag
    xb = s * d.real - c * d.imag
    return (xa / e.a) ** 2 + (xb / e.b) ** 2


def _finish_ellipse(pts: np.ndarray, center: complex, A: np.ndarray, scale: float,
                    origin: complex, floor: float) -> Ellipse:
    """Rescale a normalized quadratic form so every point is enclosed exactly."""
    rel = pts - center
    q = (A[0, 0] * rel.real ** 2 + 2 * A[0, 1] * rel.real * rel.imag
         + A[1, 1] * rel.imag ** 2)
    worst = float(np.max(q))
    if worst > 0:
        A = A / worst
    e = _ellipse_from_quadratic(center * scale + origin, A / scale ** 2, floor)
    # the floor may have been applied; restore exact containment along the major axis
    worst = float(np.max(_ellipse_levels(e, pts * scale + origin)))
    if worst > 1.0:
        grow = math.sqrt(worst)
        e = Ellipse(e.center, e.a * grow, e.b * grow, e.theta)
    return e


def min_area_ellipse(points, tol: float = 1e-7, max_iter: int = 20_000) -> Ellipse:
    """Minimum-area ellipse enclosing ``points``.

    The smallest circle is returned instead whenever it is not larger, so the
    result never exceeds the circle's area.
    """
    return min_area_ellipses(np.asarray(points, dtype=complex)[None, :], tol, max_iter)[0]


def min_area_ellipses(point_sets: np.ndarray, tol: float = 1e-7,
                      max_iter: int = 20_000, counts=None) -> list[Ellipse]:
    """Batched :func:`min_area_ellipse` over the rows of a (B, M) complex array.

    Rows may be padded with copies of their own points; ``counts`` then gives
    the number of leading distinct points per row.
    """
    if tol <= 0:
        raise ConfigurationError("tol must be positive")
    sets = np.atleast_2d(np.asarray(point_sets, dtype=complex))
    if sets.shape[1] < 1 or not np.all(np.isfinite(sets)):
        raise ConfigurationError("need finite points")
    results: list[Ellipse | None] = [None] * sets.shape[0]
    origins = sets.mean(axis=1)
    scales = np.max(np.abs(sets - origins[:, None]), axis=1)
    regular = []
    for i, pts in enumerate(sets):
        floor = DEGENERACY_FLOOR * scales[i] if scales[i] > 0 else DEGENERACY_FLOOR
        if scales[i] == 0:
            results[i] = Ellipse(pts[0], floor, floor, 0.0)
            continue
        norm = (pts - origins[i]) / scales[i]
        sv = np.linalg.svd(np.stack([norm.real, norm.imag], 1), compute_uv=False)
        if sv.size < 2 or sv[1] <= 1e-7 * sv[0]:
            results[i] = _degenerate_ellipse(pts, floor)
        else:
            regular.append(i)
    if regular:
        norm = (sets[regular] - origins[regular, None]) / scales[regular, None]
        centers, mats = _khachiyan_batch(norm.real, norm.imag, tol, max_iter,
                                         None if counts is None else np.asarray(counts)[regular])
        for j, i in enumerate(regular):
            norm_pts = norm[j]
            floor = DEGENERACY_FLOOR * scales[i]
            results[i] = _finish_ellipse(norm_pts, complex(*centers[j]), mats[j],
                                         scales[i], origins[i], floor)
    out = []
    for pts, e in zip(sets, results):
        disk = smallest_circle(pts)
        if disk.radius > 0 and math.pi * disk.radius ** 2 <= area(e):
            e = Ellipse(disk.center, disk.radius, disk.radius, 0.0)
        out.append(e)
    return out


# -- convex hull -------------------------------------------------------------

def _cross(o, a, b):
    return (a.real - o.real) * (b.imag - o.imag) - (a.imag - o.imag) * (b.real - o.real)


def _monotone_chain(pts: np.ndarray) -> list:
    uniq = sorted(set((p.real, p.imag) for p in pts))
    pts = [complex(x, y) for x, y in uniq]
    if len(pts) < 3:
        return pts
    lower, upper = [], []
    for p in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], p) <= 0:
            lower.pop()
        lower.append(p)
    for p in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], p) <= 0:
            upper.pop()
        upper.append(p)
    return lower[:-1] + upper[:-1]


def _polygon_area(vertices: np.ndarray) -> float:
    x, y = vertices.real, vertices.imag
    return 0.5 * float(np.sum(x * np.roll(y, -1) - np.roll(x, -1) * y))


def hull_from_vertices(vertices) -> ConvexHull2D:
    """Half-space form of a CCW convex polygon."""
    v = np.asarray(vertices, dtype=complex)
    edges = np.roll(v, -1) - v
    normals = -1j * edges / np.abs(edges)
    angles = np.angle(normals)
    offsets = -(normals.real * v.real + normals.imag * v.imag)
    return ConvexHull2D(angles, offsets, v)


def convex_hull(points) -> ConvexHull2D:
    """Convex hull with CCW vertices; collinear input is inflated into a thin quadrilateral."""
    pts = _as_points(points)
    spr = spread(pts)
    verts = _monotone_chain(pts)
    if len(verts) >= 3:
        v = np.asarray(verts)
        if _polygon_area(v) > (1e-12 * spr) ** 2:
            return hull_from_vertices(v)
    # degenerate: inflate perpendicular to the principal direction
    eps = DEGENERACY_FLOOR * spr if spr > 0 else DEGENERACY_FLOOR
    centered = pts - pts.mean()
    if spr > 0:
        _, _, vt = np.linalg.svd(np.stack([centered.real, centered.imag], 1),
                                 full_matrices=False)
        direction = complex(vt[0, 0], vt[0, 1])
    else:
        direction = 1.0 + 0j
    along = (centered * np.conj(direction)).real
    perp = (centered * np.conj(direction)).imag
    eps = max(eps, float(np.max(np.abs(perp))) * 2.0)
    lo, hi = along.min(), along.max()
    if hi - lo < eps:
        lo, hi = lo - eps, hi + eps
    normal = 1j * direction
    base = pts.mean()
    quad = np.array([base + lo * direction - eps * normal,
                     base + hi * direction - eps * normal,
                     base + hi * direction + eps * normal,
                     base + lo * direction + eps * normal])
    log.debug("collinear point set; inflated hull by %g", eps)
    return hull_from_vertices(quad)


# -- multi-disk --------------------------------------------------------------

def fit_multi_disk(points, num_disks: int = 6) -> MultiDisk:
    """Anchored cover by ``num_disks`` disks sharing the centroid.

    Points are ordered by angle around the centroid, starting after the widest
    angular gap, and split into equal-count groups; each disk is the smallest
    circle of its group plus the centroid.
    """
    if num_disks < 1:
        raise ConfigurationError("need at least one disk")
    pts = _as_points(points)
    if num_disks > pts.size:
        log.warning("num_disks=%d exceeds %d points; clamping", num_disks, pts.size)
        num_disks = pts.size
    anchor = complex(pts.mean())
    if num_disks == 1:
        return MultiDisk((smallest_circle(np.append(pts, anchor)),), anchor)
    ang = np.angle(pts - anchor)
    order = np.argsort(ang, kind="stable")
    sorted_ang = ang[order]
    gaps = np.diff(np.concatenate([sorted_ang, [sorted_ang[0] + 2 * np.pi]]))
    start = (int(np.argmax(gaps)) + 1) % pts.size
    order = np.roll(order, -start)
    disks = tuple(smallest_circle(np.append(pts[chunk], anchor))
                  for chunk in np.array_split(order, num_disks))
    return MultiDisk(disks, anchor)


# -- area and membership -----------------------------------------------------

def multi_disk_area(md: MultiDisk, resolution: int = 512) -> tuple[float, float]:
    """Union area by cell-center sampling; returns (area, cell_area)."""
    c, r = md.centers, md.radii
    x0, x1 = float(np.min(c.real - r)), float(np.max(c.real + r))
    y0, y1 = float(np.min(c.imag - r)), float(np.max(c.imag + r))
    if x1 <= x0 or y1 <= y0:
        return 0.0, 0.0
    dx, dy = (x1 - x0) / resolution, (y1 - y0) / resolution
    xs = x0 + dx * (np.arange(resolution) + 0.5)
    ys = y0 + dy * (np.arange(resolution) + 0.5)
    grid = xs[None, :] + 1j * ys[:, None]
    inside = np.zeros(grid.shape, dtype=bool)
    for ci, ri in zip(c, r):
        inside |= np.abs(grid - ci) <= ri
    cell = dx * dy
    return float(inside.sum()) * cell, cell


def area(model) -> float:
    if isinstance(model, Disk):
        return math.pi * model.radius ** 2
    if isinstance(model, Ellipse):
        return math.pi * model.a * model.b
    if isinstance(model, ConvexHull2D):
        return _polygon_area(model.vertices)
    if isinstance(model, MultiDisk):
        return multi_disk_area(model)[0]
    raise TypeError(f"unsupported model {type(model).__name__}")


def contains(model, p, tol: float = 0.0):
    """Closed-set membership test; ``p`` may be an array of points."""
    p = np.asarray(p, dtype=complex)
    if isinstance(model, Disk):
        out = np.abs(model.center - p) <= model.radius + tol
    elif isinstance(model, Ellipse):
        d = p - model.center
        c, s = math.cos(model.theta), math.sin(model.theta)
        xa = c * d.real + s * d.imag
        xb = s * d.real - c * d.imag
        a, b = model.a + tol, model.b + tol
        out = (xa / a) ** 2 + (xb / b) ** 2 <= 1.0
    elif isinstance(model, ConvexHull2D):
        out = np.all(model.halfspace_values(p) <= tol, axis=-1)
    elif isinstance(model, MultiDisk):
        out = np.any(np.abs(model.centers - p[..., None]) <= model.radii + tol, axis=-1)
    else:
        raise TypeError(f"unsupported model {type(model).__name__}")
    return bool(out) if out.ndim == 0 else out
