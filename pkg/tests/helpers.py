"""Mesh builders and brute-force reference implementations shared by the tests.

The oracles here are written independently of the package code: plain
Python loops, dense linear solves and scipy where a trusted implementation
exists.
"""
from __future__ import annotations

import math

import numpy as np
from scipy.spatial import ConvexHull

from anthropometer.mesh import JointSet, TriMesh

# ------------------------------------------------------------------ meshes

def oriented(vertices: np.ndarray, faces: np.ndarray) -> TriMesh:
    """Flip the whole face set if its signed volume is negative."""
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=np.int64)
    t = v[f]
    vol = np.einsum("ij,ij->i", t[:, 0], np.cross(t[:, 1], t[:, 2])).sum() / 6.0
    return TriMesh(v, f if vol > 0 else f[:, ::-1])


def box(lo=(-0.5, -0.5, -0.5), hi=(0.5, 0.5, 0.5)) -> TriMesh:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    v = np.array([[hi[0] if i & 1 else lo[0], hi[1] if i & 2 else lo[1], hi[2] if i & 4 else lo[2]]
                  for i in range(8)])
    quads = [(0, 2, 3, 1), (4, 5, 7, 6), (0, 1, 5, 4), (2, 6, 7, 3), (0, 4, 6, 2), (1, 3, 7, 5)]
    f = []
    for a, b, c, d in quads:
        f += [(a, b, c), (a, c, d)]
    return oriented(v, np.array(f))


def unit_cube() -> TriMesh:
    return box()


def cylinder(radius: float, n: int, y0: float = -1.0, y1: float = 1.0,
             center=(0.0, 0.0), phase: float = 0.0) -> TriMesh:
    """Closed n-gonal prism along y with vertices on the circle of ``radius``."""
    ang = 2.0 * np.pi * (np.arange(n) + phase) / n
    ring = np.stack([center[0] + radius * np.cos(ang), np.zeros(n), center[1] + radius * np.sin(ang)], 1)
    bottom = ring + [0, y0, 0]
    top = ring + [0, y1, 0]
    v = np.vstack([bottom, top, [[center[0], y0, center[1]], [center[0], y1, center[1]]]])
    f = []
    for i in range(n):
        j = (i + 1) % n
        f += [(i, j, n + j), (i, n + j, n + i), (2 * n, j, i), (2 * n + 1, n + i, n + j)]
    return oriented(v, np.array(f))


def random_convex_mesh(rng: np.random.Generator, n_points: int = 16, scale: float = 1.0) -> TriMesh:
    pts = rng.normal(size=(n_points, 3)) * scale
    hull = ConvexHull(pts)
    used = np.unique(hull.simplices)
    remap = -np.ones(n_points, dtype=np.int64)
    remap[used] = np.arange(len(used))
    v = pts[used]
    f = remap[hull.simplices]
    c = v.mean(axis=0)
    t = v[f]
    normal = np.cross(t[:, 1] - t[:, 0], t[:, 2] - t[:, 0])
    outward = np.einsum("ij,ij->i", normal, t[:, 0] - c) > 0
    f = np.where(outward[:, None], f, f[:, ::-1])
    return TriMesh(v, f)


def d_prism(radius: float, y0: float, half_depth: float, n: int) -> TriMesh:
    """Solid half-cylinder: semicircle of ``radius`` above y = y0, extruded along z."""
    phi = np.linspace(-np.pi / 2, np.pi / 2, n + 1)
    prof = np.stack([radius * np.sin(phi), y0 + radius * np.cos(phi)], 1)
    m = len(prof)
    back = np.column_stack([prof, np.full(m, -half_depth)])
    front = np.column_stack([prof, np.full(m, half_depth)])
    c = [0.0, y0 + 0.4 * radius]
    v = np.vstack([back, front, [[*c, -half_depth], [*c, half_depth]]])
    f = []
    for i in range(m):
        j = (i + 1) % m  # j wraps: the last side is the flat bottom chord
        f += [(i, j, m + j), (i, m + j, m + i), (2 * m, j, i), (2 * m + 1, m + i, m + j)]
    return oriented(v, np.array(f))


def merge(*meshes: TriMesh) -> TriMesh:
    vs, fs, off = [], [], 0
    for m in meshes:
        vs.append(m.vertices)
        fs.append(m.faces + off)
        off += len(m.vertices)
    return TriMesh(np.vstack(vs), np.vstack(fs))


def joints_for_box(lo, hi, shoulder_drop: float = 0.05) -> JointSet:
    lo, hi = np.asarray(lo, float), np.asarray(hi, float)
    cx = 0.5 * (lo[0] + hi[0])
    w = hi[0] - lo[0]
    ys = hi[1] - shoulder_drop
    return JointSet({
        "right_shoulder": [cx - 0.3 * w, ys, 0.0],
        "left_shoulder": [cx + 0.3 * w, ys, 0.0],
        "right_elbow": [cx - 0.2 * w, ys - 0.2, 0.0],
        "left_elbow": [cx + 0.2 * w, ys - 0.2, 0.0],
        "right_wrist": [cx - 0.1 * w, ys - 0.4, 0.0],
        "left_wrist": [cx + 0.1 * w, ys - 0.4, 0.0],
        "pelvis": [cx, lo[1] + 0.3, 0.0],
    })


MIRROR_X = np.diag([-1.0, 1.0, 1.0])


# ----------------------------------------------------------------- oracles

def brute_ray_hits(triangles: np.ndarray, origin, direction, t_min: float = 1e-9) -> list[float]:
    """Solve v0 + u e1 + v e2 = o + t d per triangle with a dense solve; no merging."""
    o = np.asarray(origin, float)
    d = np.asarray(direction, float)
    out = []
    for tri in triangles:
        e1, e2 = tri[1] - tri[0], tri[2] - tri[0]
        a = np.column_stack([e1, e2, -d])
        if abs(np.linalg.det(a)) < 1e-14:
            continue
        u, v, t = np.linalg.solve(a, o - tri[0])
        if u >= -1e-12 and v >= -1e-12 and u + v <= 1 + 1e-12 and t > t_min:
            out.append(float(t))
    return sorted(out)


def brute_length(points, closed: bool) -> float:
    pts = [list(map(float, p)) for p in points]
    total = 0.0
    n = len(pts)
    for i in range(n if closed else n - 1):
        a, b = pts[i], pts[(i + 1) % n]
        total += math.sqrt(sum((a[k] - b[k]) ** 2 for k in range(3)))
    return total


def brute_slice_segments(triangles: np.ndarray, origin, normal) -> list[tuple[np.ndarray, np.ndarray]]:
    """Per-triangle intersection with a plane, edge by edge, no shared state."""
    o = np.asarray(origin, float)
    nrm = np.asarray(normal, float)
    segs = []
    for tri in triangles:
        d = [float(np.dot(p - o, nrm)) for p in tri]
        pts = []
        for i in range(3):
            j = (i + 1) % 3
            if (d[i] > 0) != (d[j] > 0):
                s = d[i] / (d[i] - d[j])
                pts.append(tri[i] + s * (tri[j] - tri[i]))
        if len(pts) == 2:
            segs.append((pts[0], pts[1]))
    return segs


def scipy_hull_perimeter(points2d: np.ndarray) -> float:
    hull = ConvexHull(points2d)
    ring = points2d[hull.vertices]          # counter-clockwise order in 2D
    return float(np.linalg.norm(np.roll(ring, -1, axis=0) - ring, axis=1).sum())


def naive_conv2d(x, w, b):
    bsz, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    out = np.zeros((bsz, k, h - kh + 1, wd - kw + 1))
    for n in range(bsz):
        for o in range(k):
            for i in range(h - kh + 1):
                for j in range(wd - kw + 1):
                    acc = b[o]
                    for ci in range(c):
                        for di in range(kh):
                            for dj in range(kw):
                                acc += x[n, ci, i + di, j + dj] * w[o, ci, di, dj]
                    out[n, o, i, j] = acc
    return out


def naive_maxpool2(x):
    bsz, c, h, w = x.shape
    out = np.zeros((bsz, c, h // 2, w // 2))
    for n in range(bsz):
        for ci in range(c):
            for i in range(h // 2):
                for j in range(w // 2):
                    out[n, ci, i, j] = max(x[n, ci, 2 * i + a, 2 * j + b] for a in (0, 1) for b in (0, 1))
    return out


def loop_mad_rpe(values: np.ndarray, counts) -> tuple[list[float], list[float]]:
    """Per-dimension MAD and RPE via explicit loops (fold mean, then mean of folds)."""
    k = values.shape[0]
    mads, rpes = [], []
    for i in range(values.shape[-1]):
        fold_mad, fold_rpe = [], []
        for j in range(k):
            s_abs = s_rel = 0.0
            for l in range(int(counts[j])):
                est, act = float(values[j, l, 0, i]), float(values[j, l, 1, i])
                s_abs += abs(est - act)
                s_rel += abs((est - act) / act)
            fold_mad.append(s_abs / counts[j])
            fold_rpe.append(s_rel / counts[j])
        mads.append(sum(fold_mad) / k)
        rpes.append(sum(fold_rpe) / k)
    return mads, rpes


def activation_pattern(cache: dict) -> list[np.ndarray]:
    """ReLU masks and max-pool winners: the network's piecewise-linear region."""
    pat = [cache["z1"] > 0, cache["h"] > 0, cache["pool1"], cache["pool2"]]
    if "a2" in cache:
        pat.append(cache["z2"] > 0)
    return pat


def finite_difference_check(net, x, y, h: float = 1e-4, floor: float = 1e-8):
    """Central differences for every scalar parameter.

    Returns (worst relative error, names of entries whose +-h probe changed the
    activation pattern). Running statistics are frozen during probes.
    """
    from anthropometer.nn import mse_loss

    def run():
        pred, cache = net.forward(x, "train", update_stats=False)
        return pred, cache

    pred, cache = run()
    base = activation_pattern(cache)
    _, dpred = mse_loss(pred, y)
    grads = net.backward(cache, dpred)
    worst, crossed = 0.0, []
    for name, p in net.params.items():
        flat = p.reshape(-1)
        g = grads[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            losses = []
            for sign in (1.0, -1.0):
                flat[i] = orig + sign * h
                pr, c = run()
                if any(not np.array_equal(a, b) for a, b in zip(base, activation_pattern(c))):
                    crossed.append(f"{name}[{i}]")
                losses.append(mse_loss(pr, y)[0])
            flat[i] = orig
            num = (losses[0] - losses[1]) / (2 * h)
            rel = abs(num - g[i]) / max(abs(num), abs(g[i]), floor)
            worst = max(worst, rel)
    return worst, crossed
