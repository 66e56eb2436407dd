"""Orthographic software renderer and binary PGM I/O.

The camera sits on the +z side looking toward -z. Pixels are shaded with a
headlight: ``255 * max(0, n . l)`` where ``l = (0, 0, 1)`` and ``n`` is the
flat (per-face) unit normal given by the face winding.

Floating-point semantics: all geometry is evaluated in IEEE-754 binary64
through numpy, with no fused or reordered reductions. Intensities are
quantized with ``floor(255 * v + 0.5)``. Depth ties go to the lower face
index. Identical inputs therefore produce byte-identical images.
"""
from __future__ import annotations

import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .mesh import TriMesh, compute_aabb


class PgmError(ValueError):
    pass


@dataclass(frozen=True)
class CameraConfig:
    resolution: int = 200
    ortho_scale: float = 2.5
    distance: float = 6.0
    background: int = 0
    # window center (x, y); None frames the mesh bounding-box center
    center: tuple[float, float] | None = None
    # kept for provenance only: an orthographic projection has no focal geometry
    focal_length_mm: float = 60.0
    sensor_mm: float = 32.0

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")
        if not self.ortho_scale > 0:
            raise ValueError("ortho_scale must be positive")
        if not 0 <= self.background <= 255:
            raise ValueError("background must be an 8-bit intensity")


@dataclass(frozen=True, eq=False)
class GrayImage:
    width: int
    height: int
    pixels: np.ndarray = field(repr=False)   # (height, width) uint8, row-major

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.shape != (self.height, self.width):
            raise ValueError(f"pixel array shape {px.shape} != ({self.height}, {self.width})")
        if px.dtype != np.uint8:
            if px.min(initial=0) < 0 or px.max(initial=0) > 255:
                raise ValueError("intensities must lie in [0, 255]")
            px = px.astype(np.uint8)
        px = np.ascontiguousarray(px)
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    def __eq__(self, other) -> bool:
        return (isinstance(other, GrayImage) and self.width == other.width
                and self.height == other.height and np.array_equal(self.pixels, other.pixels))


def _pixel_pairs(u_lo, u_hi, v_lo, v_hi):
    """All (triangle, column, row) candidates inside each triangle's pixel bbox."""
    w = u_hi - u_lo + 1
    h = v_hi - v_lo + 1
    count = w * h
    tri = np.repeat(np.arange(len(count)), count)
    start = np.cumsum(count) - count
    local = np.arange(count.sum()) - np.repeat(start, count)
    wr = w[tri]
    cols = u_lo[tri] + local % wr
    rows = v_lo[tri] + local // wr
    return tri, cols, rows


def render_orthographic(mesh: TriMesh, cam: CameraConfig = CameraConfig()) -> GrayImage:
    res = cam.resolution
    img = np.full((res, res), cam.background, dtype=np.uint8)
    if len(mesh.vertices) == 0:
        raise ValueError("cannot render an empty mesh")
    box = compute_aabb(mesh)
    cx, cy = (box.center[0], box.center[1]) if cam.center is None else cam.center
    pix = cam.ortho_scale / res
    x0 = cx - 0.5 * cam.ortho_scale
    y_top = cy + 0.5 * cam.ortho_scale
    z_cam = box.center[2] + cam.distance

    tri = mesh.triangles
    normal = np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0])
    normal /= np.linalg.norm(normal, axis=1)[:, None]
    shade = np.floor(255.0 * np.maximum(0.0, normal[:, 2]) + 0.5)

    # continuous pixel coordinates: pixel (i, j) has its center at (i, j)
    u = (tri[:, :, 0] - x0) / pix - 0.5
    v = (y_top - tri[:, :, 1]) / pix - 0.5
    z = tri[:, :, 2]
    area = (u[:, 1] - u[:, 0]) * (v[:, 2] - v[:, 0]) - (u[:, 2] - u[:, 0]) * (v[:, 1] - v[:, 0])
    u_lo = np.maximum(np.ceil(u.min(axis=1)), 0).astype(np.int64)
    u_hi = np.minimum(np.floor(u.max(axis=1)), res - 1).astype(np.int64)
    v_lo = np.maximum(np.ceil(v.min(axis=1)), 0).astype(np.int64)
    v_hi = np.minimum(np.floor(v.max(axis=1)), res - 1).astype(np.int64)
    keep = (np.abs(area) > 1e-12) & (u_lo <= u_hi) & (v_lo <= v_hi) & (z.max(axis=1) < z_cam)
    idx = np.flatnonzero(keep)
    if idx.size == 0:
        return GrayImage(res, res, img)

    t, cols, rows = _pixel_pairs(u_lo[idx], u_hi[idx], v_lo[idx], v_hi[idx])
    face = idx[t]
    pu = cols.astype(np.float64)
    pv = rows.astype(np.float64)
    U, V = u[face], v[face]
    a = area[face]
    w0 = ((U[:, 1] - pu) * (V[:, 2] - pv) - (U[:, 2] - pu) * (V[:, 1] - pv)) / a
    w1 = ((U[:, 2] - pu) * (V[:, 0] - pv) - (U[:, 0] - pu) * (V[:, 2] - pv)) / a
    w2 = 1.0 - w0 - w1
    inside = (w0 >= 0.0) & (w1 >= 0.0) & (w2 >= 0.0)
    face, cols, rows = face[inside], cols[inside], rows[inside]
    depth = (w0[inside] * z[face, 0] + w1[inside] * z[face, 1] + w2[inside] * z[face, 2])
    flat = rows * res + cols
    # nearest (largest z) wins; equal depth -> lowest face index
    order = np.lexsort((face, -depth, flat))
    flat_sorted = flat[order]
    first = np.concatenate([[True], flat_sorted[1:] != flat_sorted[:-1]])
    win = order[first]
    img.reshape(-1)[flat[win]] = shade[face[win]].astype(np.uint8)
    return GrayImage(res, res, img)


def silhouette(img: GrayImage, background: int = 0) -> np.ndarray:
    return img.pixels != background


def encode_pgm(img: GrayImage, comment: str | None = None) -> bytes:
    head = b"P5\n"
    if comment:
        for line in comment.splitlines():
            head += b"# " + line.encode("utf-8") + b"\n"
    head += f"{img.width} {img.height}\n255\n".encode("ascii")
    return head + img.pixels.tobytes()


def write_pgm(img: GrayImage, path, comment: str | None = None) -> None:
    Path(path).write_bytes(encode_pgm(img, comment))


_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*")


def decode_pgm(data: bytes) -> tuple[GrayImage, list[str]]:
    """Parse a binary P5 file; returns the image and its header comments."""
    if data[:2] != b"P5":
        raise PgmError("not a binary PGM (missing P5 magic)")
    pos = 2
    comments: list[str] = []
    values = []
    for _ in range(3):
        m = _TOKEN.match(data, pos)
        for c in re.findall(rb"#([^\n]*)\n", m.group(0)):
            comments.append(c.decode("utf-8", "replace").removeprefix(" "))
        pos = m.end()
        tok = re.compile(rb"\d+").match(data, pos)
        if tok is None:
            raise PgmError("malformed PGM header")
        values.append(int(tok.group(0)))
        pos = tok.end()
    width, height, maxval = values
    if maxval != 255:
        raise PgmError(f"only maxval 255 is supported, got {maxval}")
    if pos >= len(data) or data[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise PgmError("malformed PGM header")
    pos += 1
    body = data[pos:]
    if len(body) < width * height:
        raise PgmError(f"truncated PGM: expected {width * height} pixel bytes, got {len(body)}")
    px = np.frombuffer(body[: width * height], dtype=np.uint8).reshape(height, width)
    return GrayImage(width, height, px.copy()), comments


def read_pgm(path) -> GrayImage:
    return decode_pgm(Path(path).read_bytes())[0]
