"""The eight body dimensions, computed from a posed mesh and its skeleton joints.

Landmarks are skin points hit by rays cast from joints; lengths are taken
along plane/mesh slice curves split at those landmarks.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import (
    CurvePosition,
    GeometryError,
    Plane,
    Polyline,
    closest_position,
    convex_hull_perimeter,
    locate_on_curve,
    plane_from_points,
    point_in_polygon_2d,
    polygon_area_2d,
    polyline_length,
    ray_hits,
    slice_mesh,
    split_closed_curve,
)
from .mesh import HbdVector, JointSet, TriMesh, compute_aabb

UP = np.array([0.0, 1.0, 0.0])
DOWN = -UP
RIGHT = np.array([-1.0, 0.0, 0.0])  # subject's right side is -x
LEFT = -RIGHT


class MeasurementError(RuntimeError):
    pass


class LandmarkError(MeasurementError):
    def __init__(self, joint: str, message: str = ""):
        self.joint = joint
        super().__init__(message or f"ray from joint {joint!r} does not hit the mesh")


@dataclass(frozen=True)
class MeasurementConfig:
    tol: float = 0.001
    shoulder_height_fraction: float = 0.65
    chest_joint: str = "chest"
    waist_joint: str = "waist"
    pelvis_joint: str = "pelvis"
    # waist height = midpoint of pelvis and chest joints when no waist joint is given
    waist_fallback: bool = True

    def __post_init__(self):
        if not 0.0 < self.tol < 0.01:
            raise ValueError("tol must lie in (0, 0.01) m")
        if not 0.0 < self.shoulder_height_fraction < 1.0:
            raise ValueError("shoulder_height_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class SurfaceLandmark:
    name: str
    point: np.ndarray
    joint: str
    direction: np.ndarray


@dataclass(frozen=True)
class LandmarkSet:
    u_rs: SurfaceLandmark
    u_ls: SurfaceLandmark
    u_re: SurfaceLandmark
    u_le: SurfaceLandmark
    u_rw: SurfaceLandmark
    u_lw: SurfaceLandmark
    u_ch: SurfaceLandmark

    def side(self, side: str) -> tuple[SurfaceLandmark, SurfaceLandmark, SurfaceLandmark]:
        if side == "right":
            return self.u_rs, self.u_re, self.u_rw
        if side == "left":
            return self.u_ls, self.u_le, self.u_lw
        raise ValueError(f"side must be 'right' or 'left', got {side!r}")


def _cast(mesh: TriMesh, joints: JointSet, joint: str, direction: np.ndarray,
          name: str, last: bool = False) -> SurfaceLandmark:
    hits = ray_hits(mesh, joints[joint], direction)
    if not hits:
        raise LandmarkError(joint)
    _, p = hits[-1] if last else hits[0]
    return SurfaceLandmark(name, p, joint, direction)


def compute_landmarks(mesh: TriMesh, joints: JointSet) -> LandmarkSet:
    lm = LandmarkSet(
        u_rs=_cast(mesh, joints, "right_shoulder", UP, "u_rs"),
        u_ls=_cast(mesh, joints, "left_shoulder", UP, "u_ls"),
        u_re=_cast(mesh, joints, "right_elbow", RIGHT, "u_re"),
        u_le=_cast(mesh, joints, "left_elbow", LEFT, "u_le"),
        u_rw=_cast(mesh, joints, "right_wrist", RIGHT, "u_rw"),
        u_lw=_cast(mesh, joints, "left_wrist", LEFT, "u_lw"),
        # the crotch is the lowest crossing below the pelvis
        u_ch=_cast(mesh, joints, "pelvis", DOWN, "u_ch", last=True),
    )
    return lm


def _curve_report(curves: list[Polyline], targets: dict[str, np.ndarray]) -> str:
    rows = []
    for i, c in enumerate(curves):
        ds = ", ".join(f"{k}={closest_position(c, p).distance:.4g}" for k, p in targets.items())
        rows.append(f"  curve {i} ({'closed' if c.closed else 'open'}, {len(c)} pts): {ds}")
    return "\n".join(rows) if rows else "  (plane misses the mesh)"


def _find_curve(curves: list[Polyline], a: np.ndarray, b: np.ndarray, tol: float,
                what: str) -> tuple[Polyline, CurvePosition, CurvePosition]:
    candidates = []
    open_match = False
    for c in curves:
        pa = locate_on_curve(c, a, tol)
        pb = locate_on_curve(c, b, tol)
        if pa is None or pb is None:
            continue
        if not c.closed:
            open_match = True
            continue
        candidates.append((pa.distance + pb.distance, c, pa, pb))
    if not candidates:
        why = "only open curves contain both landmarks (mesh not watertight?)" if open_match \
            else f"no closed slice curve contains both landmarks within tol={tol}"
        raise MeasurementError(
            f"{what}: {why}\n" + _curve_report(curves, {"a": a, "b": b}))
    candidates.sort(key=lambda row: row[0])
    _, c, pa, pb = candidates[0]
    return c, pa, pb


def shoulder_plane(mesh: TriMesh, lm: LandmarkSet, cfg: MeasurementConfig) -> Plane:
    box = compute_aabb(mesh)
    p_c = np.array([
        box.center[0],
        box.min[1] + cfg.shoulder_height_fraction * box.height,
        mesh.vertices[:, 2].max(),
    ])
    return plane_from_points(lm.u_rs.point, lm.u_ls.point, p_c)


def shoulder_curves(mesh: TriMesh, joints: JointSet, cfg: MeasurementConfig,
                    lm: LandmarkSet | None = None) -> tuple[Polyline, Polyline, Polyline]:
    """(full closed curve, shorter piece, longer piece) for the shoulder width."""
    lm = lm or compute_landmarks(mesh, joints)
    plane = shoulder_plane(mesh, lm, cfg)
    curve, pa, pb = _find_curve(slice_mesh(mesh, plane), lm.u_rs.point, lm.u_ls.point,
                                cfg.tol, "shoulder width")
    s1, s2 = split_closed_curve(curve, pa, pb)
    return (curve, s1, s2) if polyline_length(s1) <= polyline_length(s2) else (curve, s2, s1)


def shoulder_width(mesh: TriMesh, joints: JointSet, cfg: MeasurementConfig = MeasurementConfig(),
                   lm: LandmarkSet | None = None) -> float:
    _, shorter, _ = shoulder_curves(mesh, joints, cfg, lm)
    return polyline_length(shorter)


def arm_curves(mesh: TriMesh, joints: JointSet, cfg: MeasurementConfig, side: str,
               lm: LandmarkSet | None = None) -> tuple[Polyline, Polyline]:
    """(chosen, rejected) subcurves between the shoulder and wrist landmarks."""
    lm = lm or compute_landmarks(mesh, joints)
    u_s, u_e, u_w = lm.side(side)
    try:
        plane = plane_from_points(u_s.point, u_e.point, u_w.point)
    except GeometryError as exc:
        raise MeasurementError(f"{side} arm length: {exc}") from None
    curve, pa, pb = _find_curve(slice_mesh(mesh, plane), u_s.point, u_w.point,
                                cfg.tol, f"{side} arm length")
    s1, s2 = split_closed_curve(curve, pa, pb)
    if side == "right":
        first = s1.points[:, 0].min() <= s2.points[:, 0].min()
    else:
        first = s1.points[:, 0].max() >= s2.points[:, 0].max()
    return (s1, s2) if first else (s2, s1)


def arm_length(mesh: TriMesh, joints: JointSet, cfg: MeasurementConfig = MeasurementConfig(),
               side: str = "right", lm: LandmarkSet | None = None) -> float:
    chosen, _ = arm_curves(mesh, joints, cfg, side, lm)
    return polyline_length(chosen)


def inseam(mesh: TriMesh, joints: JointSet, lm: LandmarkSet | None = None) -> float:
    u_ch = lm.u_ch if lm is not None else _cast(mesh, joints, "pelvis", DOWN, "u_ch", last=True)
    return float(u_ch.point[1] - compute_aabb(mesh).min[1])


def height(mesh: TriMesh) -> float:
    return compute_aabb(mesh).height


def circumference_level(joints: JointSet, cfg: MeasurementConfig, level: str) -> np.ndarray:
    """Point on the body axis whose height defines the slice for ``level``."""
    names = {"chest": cfg.chest_joint, "waist": cfg.waist_joint, "pelvis": cfg.pelvis_joint}
    if level not in names:
        raise ValueError(f"level must be one of {sorted(names)}")
    name = names[level]
    if name in joints:
        return np.asarray(joints[name])
    if level == "waist" and cfg.waist_fallback and cfg.chest_joint in joints:
        return 0.5 * (np.asarray(joints[cfg.pelvis_joint]) + np.asarray(joints[cfg.chest_joint]))
    raise MeasurementError(f"{level} circumference: joint {name!r} not given")


def circumference_curve(mesh: TriMesh, joints: JointSet, cfg: MeasurementConfig,
                        level: str) -> tuple[Polyline, Plane]:
    axis = circumference_level(joints, cfg, level)
    plane = Plane(axis, UP)
    best = None
    target = np.array([axis[0], axis[2]])
    for c in slice_mesh(mesh, plane):
        if not c.closed:
            continue
        poly = c.points[:, [0, 2]]
        if point_in_polygon_2d(target, poly):
            area = polygon_area_2d(poly)
            # outermost enclosing contour is the skin
            if best is None or area > best[0]:
                best = (area, c)
    if best is None:
        raise MeasurementError(
            f"{level} circumference: no closed curve at y={axis[1]:.4f} encloses the body axis")
    return best[1], plane


def circumference(mesh: TriMesh, joints: JointSet, cfg: MeasurementConfig = MeasurementConfig(),
                  level: str = "chest") -> float:
    curve, plane = circumference_curve(mesh, joints, cfg, level)
    return convex_hull_perimeter(curve, plane)


def measure_all(mesh: TriMesh, joints: JointSet,
                cfg: MeasurementConfig = MeasurementConfig()) -> HbdVector:
    def attempt(name, fn, *args):
        try:
            return fn(*args)
        except (MeasurementError, GeometryError) as exc:
            raise MeasurementError(f"[{name}] {exc}") from exc

    lm = attempt("landmarks", compute_landmarks, mesh, joints)
    values = [
        attempt("shoulder_width", shoulder_width, mesh, joints, cfg, lm),
        attempt("right_arm_length", arm_length, mesh, joints, cfg, "right", lm),
        attempt("left_arm_length", arm_length, mesh, joints, cfg, "left", lm),
        attempt("inseam", inseam, mesh, joints, lm),
        attempt("chest_circumference", circumference, mesh, joints, cfg, "chest"),
        attempt("waist_circumference", circumference, mesh, joints, cfg, "waist"),
        attempt("pelvis_circumference", circumference, mesh, joints, cfg, "pelvis"),
        height(mesh),
    ]
    return HbdVector(*values)
