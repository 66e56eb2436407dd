"""Ray casting, plane slicing and curve operations on triangle meshes."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy.spatial import cKDTree

from .mesh import TriMesh

RAY_T_MIN = 1e-9
HIT_MERGE_EPS = 1e-9
CHAIN_EPS = 1e-7
ON_PLANE_EPS = 1e-9
ON_PLANE_SHIFT = 2e-9
COLINEAR_AREA = 1e-10
# barycentric slack so that hits on shared edges/vertices are never lost
_BARY_EPS = 1e-10


class GeometryError(ValueError):
    pass


def _unit(v) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    n = np.linalg.norm(v)
    if n == 0.0:
        raise GeometryError("zero-length vector")
    return v / n


@dataclass(frozen=True)
class Plane:
    origin: np.ndarray
    normal: np.ndarray

    def __post_init__(self):
        o = np.array(self.origin, dtype=np.float64)
        n = np.array(self.normal, dtype=np.float64)
        if abs(np.linalg.norm(n) - 1.0) > 1e-9:
            raise GeometryError("plane normal must be unit length")
        o.setflags(write=False)
        n.setflags(write=False)
        object.__setattr__(self, "origin", o)
        object.__setattr__(self, "normal", n)

    def signed_distance(self, points) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.origin) @ self.normal

    def basis(self) -> tuple[np.ndarray, np.ndarray]:
        """Two orthonormal in-plane directions."""
        n = self.normal
        helper = np.eye(3)[int(np.argmin(np.abs(n)))]
        e1 = _unit(np.cross(n, helper))
        e2 = np.cross(n, e1)
        return e1, e2


def plane_from_points(p1, p2, p3) -> Plane:
    p1, p2, p3 = (np.asarray(p, dtype=np.float64) for p in (p1, p2, p3))
    n = np.cross(p2 - p1, p3 - p1)
    area = 0.5 * np.linalg.norm(n)
    if area <= COLINEAR_AREA:
        raise GeometryError(f"points are colinear (triangle area {area:.3g} m^2)")
    return Plane((p1 + p2 + p3) / 3.0, n / np.linalg.norm(n))


class Polyline:
    """Ordered 3D points; a closed curve does not repeat its first point."""

    __slots__ = ("closed", "points")

    def __init__(self, points, closed: bool = False):
        pts = np.array(points, dtype=np.float64).reshape(-1, 3)
        if len(pts) < 2:
            raise GeometryError("a polyline needs at least 2 points")
        pts.setflags(write=False)
        self.points = pts
        self.closed = bool(closed)

    def __len__(self) -> int:
        return len(self.points)

    def __repr__(self) -> str:
        return f"Polyline({len(self.points)} points, closed={self.closed})"

    def segments(self) -> tuple[np.ndarray, np.ndarray]:
        """Start and end points of every segment, closing segment included."""
        a = self.points
        b = np.roll(a, -1, axis=0) if self.closed else a[1:]
        return (a if self.closed else a[:-1]), b


def polyline_length(curve: Polyline) -> float:
    a, b = curve.segments()
    return float(np.linalg.norm(b - a, axis=1).sum())


# --------------------------------------------------------------------------- rays

def ray_mesh_intersections(mesh: TriMesh, origin, direction) -> list[np.ndarray]:
    """All ray/surface hits sorted by ray parameter.

    Hits closer than ``HIT_MERGE_EPS`` in ray parameter are merged so a ray
    through a shared edge or vertex reports one crossing.
    """
    return [p for _, p in ray_hits(mesh, origin, direction)]


def ray_hits(mesh: TriMesh, origin, direction) -> list[tuple[float, np.ndarray]]:
    o = np.asarray(origin, dtype=np.float64)
    d = np.asarray(direction, dtype=np.float64)
    if abs(np.linalg.norm(d) - 1.0) > 1e-9:
        raise GeometryError("ray direction must be unit length")
    tri = mesh.triangles
    if len(tri) == 0:
        return []
    v0 = tri[:, 0]
    e1 = tri[:, 1] - v0
    e2 = tri[:, 2] - v0
    # Moller-Trumbore
    pvec = np.cross(d, e2)
    det = np.einsum("ij,ij->i", e1, pvec)
    ok = np.abs(det) > 1e-300
    inv = np.zeros_like(det)
    inv[ok] = 1.0 / det[ok]
    tvec = o - v0
    u = np.einsum("ij,ij->i", tvec, pvec) * inv
    qvec = np.cross(tvec, e1)
    v = (qvec @ d) * inv
    t = np.einsum("ij,ij->i", e2, qvec) * inv
    hit = ok & (u >= -_BARY_EPS) & (v >= -_BARY_EPS) & (u + v <= 1.0 + _BARY_EPS) & (t > RAY_T_MIN)
    ts = np.sort(t[hit])
    merged: list[float] = []
    for ti in ts:
        if not merged or ti - merged[-1] > HIT_MERGE_EPS:
            merged.append(float(ti))
    return [(ti, o + ti * d) for ti in merged]


# ------------------------------------------------------------------------ slicing

class SliceSegments(NamedTuple):
    segments: np.ndarray      # (m, 2, 3)
    face_index: np.ndarray    # (m,) source face of each segment
    crossings: np.ndarray     # (n_faces,) plane-edge crossings per face


def slice_segments(mesh: TriMesh, plane: Plane) -> SliceSegments:
    """Raw plane/triangle segments before chaining."""
    verts = mesh.vertices
    dist = plane.signed_distance(verts)
    near = np.abs(dist) < ON_PLANE_EPS
    if near.any():
        verts = verts.copy()
        verts[near] += ON_PLANE_SHIFT * plane.normal
        dist = dist.copy()
        dist[near] += ON_PLANE_SHIFT
    faces = mesh.faces
    above = dist[faces] > 0.0
    # edges (0,1), (1,2), (2,0)
    ea = np.array([0, 1, 2])
    eb = np.array([1, 2, 0])
    cross = above[:, ea] != above[:, eb]
    counts = cross.sum(axis=1)
    hit_faces = np.flatnonzero(counts == 2)
    if hit_faces.size == 0:
        return SliceSegments(np.zeros((0, 2, 3)), np.zeros(0, dtype=np.int64), counts)
    fc = faces[hit_faces]
    cr = cross[hit_faces]
    # the two crossing edges of each face, in edge order
    which = np.argsort(~cr, axis=1, kind="stable")[:, :2]
    ia = fc[np.arange(len(fc))[:, None], ea[which]]
    ib = fc[np.arange(len(fc))[:, None], eb[which]]
    # canonical edge direction so both faces of an edge produce identical points
    pa, pb = verts[ia], verts[ib]
    swap = _lex_greater(pa, pb)
    lo = np.where(swap[..., None], pb, pa)
    hi = np.where(swap[..., None], pa, pb)
    dlo = np.where(swap, dist[ib], dist[ia])
    dhi = np.where(swap, dist[ia], dist[ib])
    s = dlo / (dlo - dhi)
    pts = lo + s[..., None] * (hi - lo)
    return SliceSegments(pts, hit_faces, counts)


def _lex_greater(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    gt = a[..., 0] > b[..., 0]
    eq = a[..., 0] == b[..., 0]
    gt |= eq & (a[..., 1] > b[..., 1])
    eq &= a[..., 1] == b[..., 1]
    gt |= eq & (a[..., 2] > b[..., 2])
    return gt


def chain_segments(segments: np.ndarray, eps: float = CHAIN_EPS) -> list[Polyline]:
    """Join segments sharing endpoints (within ``eps``) into polylines.

    Nodes touched by other than two segments break the chain, so non-manifold
    input yields open polylines rather than guesses.
    """
    m = len(segments)
    if m == 0:
        return []
    ends = segments.reshape(-1, 3)
    # cluster endpoints: union-find over close pairs
    parent = np.arange(2 * m)

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in cKDTree(ends).query_pairs(eps, output_type="ndarray"):
        ri, rj = find(int(i)), find(int(j))
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    node = np.array([find(i) for i in range(2 * m)]).reshape(m, 2)
    keep = node[:, 0] != node[:, 1]
    seg_ids = np.flatnonzero(keep)

    incident: dict[int, list[int]] = {}
    for s in seg_ids:
        for k in (0, 1):
            incident.setdefault(int(node[s, k]), []).append(int(s))

    used = np.zeros(m, dtype=bool)
    out: list[Polyline] = []

    def walk(start_seg: int, start_node: int) -> tuple[list[int], int]:
        """Follow segments from start_node through start_seg; return nodes."""
        nodes = [start_node]
        seg, cur = start_seg, start_node
        while True:
            used[seg] = True
            nxt = int(node[seg, 1] if node[seg, 0] == cur else node[seg, 0])
            nodes.append(nxt)
            if nxt == start_node:
                return nodes, nxt
            inc = incident[nxt]
            if len(inc) != 2:
                return nodes, nxt
            seg = inc[0] if inc[1] == seg else inc[1]
            if used[seg]:
                return nodes, nxt
            cur = nxt

    def pt(n: int) -> np.ndarray:
        return ends[n]

    # open chains first start at nodes of degree != 2
    for n_id in sorted(incident):
        if len(incident[n_id]) == 2:
            continue
        for s in incident[n_id]:
            if not used[s]:
                nodes, _ = walk(s, n_id)
                out.append(Polyline([pt(k) for k in nodes], closed=False))
    for s in seg_ids:
        if used[s]:
            continue
        start = int(node[s, 0])
        nodes, last = walk(int(s), start)
        if last == start and len(nodes) > 3:
            out.append(Polyline([pt(k) for k in nodes[:-1]], closed=True))
        elif last == start:
            # two segments forming a loop back and forth: degenerate sliver
            out.append(Polyline([pt(k) for k in nodes[:-1]], closed=False))
        else:
            out.append(Polyline([pt(k) for k in nodes], closed=False))
    return out


def slice_mesh(mesh: TriMesh, plane: Plane) -> list[Polyline]:
    return chain_segments(slice_segments(mesh, plane).segments)


# ------------------------------------------------------------------ curve queries

class CurvePosition(NamedTuple):
    segment: int
    t: float
    point: np.ndarray
    distance: float


def closest_position(curve: Polyline, target) -> CurvePosition:
    p = np.asarray(target, dtype=np.float64)
    a, b = curve.segments()
    ab = b - a
    denom = np.einsum("ij,ij->i", ab, ab)
    t = np.clip(np.einsum("ij,ij->i", p - a, ab) / denom, 0.0, 1.0)
    proj = a + t[:, None] * ab
    d = np.linalg.norm(proj - p, axis=1)
    i = int(np.argmin(d))
    return CurvePosition(i, float(t[i]), proj[i], float(d[i]))


def locate_on_curve(curve: Polyline, target, tol: float) -> CurvePosition | None:
    if tol <= 0:
        raise ValueError("tol must be positive")
    pos = closest_position(curve, target)
    return pos if pos.distance <= tol else None


def _normalize_position(curve: Polyline, pos: CurvePosition) -> float:
    n_seg = len(curve.points) if curve.closed else len(curve.points) - 1
    s = pos.segment + pos.t
    return s % n_seg if curve.closed else s


def _forward_path(curve: Polyline, sa: float, sb: float) -> np.ndarray:
    n = len(curve.points)
    pts = curve.points

    def at(s: float) -> np.ndarray:
        i = int(np.floor(s)) % n
        t = s - np.floor(s)
        return pts[i] + t * (pts[(i + 1) % n] - pts[i])

    span = (sb - sa) % n
    out = [at(sa)]
    first = int(np.floor(sa)) + 1
    k = first
    while k - sa < span:
        out.append(pts[k % n])
        k += 1
    out.append(at(sb))
    arr = np.array(out)
    # drop zero-length steps from split points landing on vertices
    keep = np.ones(len(arr), dtype=bool)
    keep[1:] = np.linalg.norm(np.diff(arr, axis=0), axis=1) > 0.0
    keep[-1] = True
    arr = arr[keep]
    if len(arr) >= 2 and np.linalg.norm(arr[-1] - arr[-2]) == 0.0:
        arr = np.delete(arr, -2, axis=0)
    return arr


def split_closed_curve(curve: Polyline, a: CurvePosition, b: CurvePosition) -> tuple[Polyline, Polyline]:
    """Cut a closed curve at two positions.

    Both pieces run from ``a`` to ``b``: the first forward along the point
    order, the second backward.
    """
    if not curve.closed:
        raise GeometryError("split_closed_curve needs a closed curve")
    sa = _normalize_position(curve, a)
    sb = _normalize_position(curve, b)
    pa = _forward_path(curve, sa, sa)[0]
    pb = _forward_path(curve, sb, sb)[0]
    if sa == sb or np.array_equal(pa, pb):
        raise GeometryError("split positions are identical")
    fwd = _forward_path(curve, sa, sb)
    back = _forward_path(curve, sb, sa)[::-1]
    return Polyline(fwd), Polyline(back)


# -------------------------------------------------------------------- convex hull

def convex_hull_2d(points: np.ndarray) -> np.ndarray:
    """Andrew's monotone chain; counter-clockwise hull without colinear points."""
    pts = np.unique(np.asarray(points, dtype=np.float64), axis=0)
    if len(pts) < 3:
        return pts

    def cross(o, a, b) -> float:
        return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])

    lower: list[np.ndarray] = []
    for p in pts:
        while len(lower) >= 2 and cross(lower[-2], lower[-1], p) <= 0.0:
            lower.pop()
        lower.append(p)
    upper: list[np.ndarray] = []
    for p in pts[::-1]:
        while len(upper) >= 2 and cross(upper[-2], upper[-1], p) <= 0.0:
            upper.pop()
        upper.append(p)
    return np.array(lower[:-1] + upper[:-1])


def project_to_plane(points, plane: Plane) -> np.ndarray:
    e1, e2 = plane.basis()
    rel = np.asarray(points, dtype=np.float64) - plane.origin
    return np.stack([rel @ e1, rel @ e2], axis=1)


def convex_hull_perimeter(curve: Polyline, plane: Plane) -> float:
    pts2 = project_to_plane(curve.points, plane)
    if len(pts2) < 3:
        raise GeometryError("convex hull needs at least 3 points")
    hull = convex_hull_2d(pts2)
    if len(hull) < 3:
        raise GeometryError("all contour points are colinear")
    return float(np.linalg.norm(np.roll(hull, -1, axis=0) - hull, axis=1).sum())


def point_in_polygon_2d(point, polygon: np.ndarray) -> bool:
    """Even-odd rule."""
    x, y = float(point[0]), float(point[1])
    px, py = polygon[:, 0], polygon[:, 1]
    qx, qy = np.roll(px, -1), np.roll(py, -1)
    straddle = (py > y) != (qy > y)
    with np.errstate(divide="ignore", invalid="ignore"):
        xc = px + (y - py) * (qx - px) / (qy - py)
    return bool(np.count_nonzero(straddle & (x < xc)) % 2)


def polygon_area_2d(polygon: np.ndarray) -> float:
    x, y = polygon[:, 0], polygon[:, 1]
    return float(0.5 * abs(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1))))
