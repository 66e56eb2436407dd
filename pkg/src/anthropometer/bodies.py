"""Procedural humanoid bodies with analytically known dimensions.

A body is a union of closed, independently watertight components:

* one swept tube running left wrist -> left shoulder -> right shoulder ->
  right wrist (arms plus the shoulder yoke, mitered at the shoulders),
* a lofted torso of elliptical rings sharing one aspect ratio,
* two leg tubes, a neck tube and an ellipsoidal head.

Components overlap instead of being merged, so every component stays a
closed 2-manifold and every plane section is a set of closed curves. All
skeleton joints lie in the z = 0 plane.

Tube rings carry their vertices half a facet off the z = 0 plane, so the
z = 0 section of a tube of radius r is its axis offset by
``r * cos(pi / facets)`` exactly. That is what makes the arm and shoulder
ground truth closed-form.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields, replace

import numpy as np

from .mesh import GENDERS, HBD_NAMES, HbdVector, JointSet, TriMesh

REF_STATURE = 1.75


class BodyParamsError(ValueError):
    pass


@dataclass(frozen=True)
class BodyParams:
    stature: float = 1.75
    crotch_height: float = 0.80
    shoulder_half_span: float = 0.20
    arm_radius: float = 0.042
    leg_radius: float = 0.05
    torso_width: float = 0.12       # chest semi-axis along x
    torso_depth: float = 0.085      # chest semi-axis along z
    waist_scale: float = 0.85       # waist section relative to chest
    pelvis_scale: float = 1.0
    arm_length: float = 0.56        # shoulder joint to wrist joint
    elbow_fraction: float = 0.5
    facets: int = 64
    pose: str = "pose0"
    rest_abduction_deg: float = 10.0
    arm_abduction_deg: float = 30.0  # added on top of the rest angle in pose1
    arm_asymmetry: float = 0.0       # (left - right) / mean arm length

    LENGTHS = ("stature", "crotch_height", "shoulder_half_span", "arm_radius", "leg_radius",
               "torso_width", "torso_depth", "arm_length")

    def scaled(self, factor: float) -> BodyParams:
        return replace(self, **{k: getattr(self, k) * factor for k in self.LENGTHS})

    def with_pose(self, pose: str) -> BodyParams:
        return replace(self, pose=pose)

    @property
    def abduction_deg(self) -> float:
        extra = self.arm_abduction_deg if self.pose == "pose1" else 0.0
        return self.rest_abduction_deg + extra


@dataclass(frozen=True)
class GroundTruth:
    hbd: HbdVector
    tolerance: dict[str, float]

    def check(self, measured: HbdVector) -> dict[str, float]:
        """Per-dimension absolute error of ``measured``; raises nothing."""
        a, b = measured.to_array(), self.hbd.to_array()
        return {n: float(abs(x - y)) for n, x, y in zip(HBD_NAMES, a, b)}

    def failures(self, measured: HbdVector) -> list[str]:
        err = self.check(measured)
        return [n for n in HBD_NAMES if not err[n] <= self.tolerance[n]]

    def to_json(self) -> dict:
        return {"hbd": self.hbd.as_dict(), "tolerance": dict(self.tolerance)}

    @classmethod
    def from_json(cls, d: dict) -> GroundTruth:
        return cls(HbdVector.from_dict(d["hbd"]), {k: float(v) for k, v in d["tolerance"].items()})


# ------------------------------------------------------------------- layout

@dataclass(frozen=True)
class _Layout:
    """Derived geometry shared by mesh construction and the analytic truth."""

    p: BodyParams
    alpha: float
    r_eff: float
    y_shoulder: float
    head_height: float
    head_rx: float
    head_rz: float
    neck_radius: float
    torso_top: float
    torso_rings: tuple[tuple[float, float], ...]   # (y, scale)
    pelvis_y: float
    waist_y: float
    chest_y: float
    leg_x: float
    leg_top: float
    arm_lengths: dict[str, float] = field(default_factory=dict)
    arm_end_extra: float = 0.0

    def shoulder(self, side: str) -> np.ndarray:
        sx = -self.p.shoulder_half_span if side == "right" else self.p.shoulder_half_span
        return np.array([sx, self.y_shoulder, 0.0])

    def arm_dir(self, side: str) -> np.ndarray:
        sgn = -1.0 if side == "right" else 1.0
        return np.array([sgn * math.sin(self.alpha), -math.cos(self.alpha), 0.0])

    def outer_normal(self, side: str) -> np.ndarray:
        sgn = -1.0 if side == "right" else 1.0
        return np.array([sgn * math.cos(self.alpha), math.sin(self.alpha), 0.0])

    def joint(self, side: str, which: str) -> np.ndarray:
        frac = {"shoulder": 0.0, "elbow": self.p.elbow_fraction, "wrist": 1.0}[which]
        return self.shoulder(side) + frac * self.arm_lengths[side] * self.arm_dir(side)

    def arm_end(self, side: str) -> np.ndarray:
        return self.shoulder(side) + (self.arm_lengths[side] + self.arm_end_extra) * self.arm_dir(side)

    def torso_scale(self, y: float) -> float:
        ys = [r[0] for r in self.torso_rings]
        ss = [r[1] for r in self.torso_rings]
        return float(np.interp(y, ys, ss))


def _layout(p: BodyParams, jitter: float) -> _Layout:
    k = p.stature / REF_STATURE
    alpha = math.radians(p.abduction_deg)
    r_eff = p.arm_radius * math.cos(math.pi / p.facets)
    head_h = 0.13 * p.stature
    neck_len = 0.035 * p.stature
    y_s = p.stature - head_h - neck_len - p.arm_radius
    torso_top = y_s - 0.5 * r_eff
    c = p.crotch_height
    t = torso_top - c
    top_scale = 0.9
    rings = (
        (c, p.pelvis_scale),
        (c + 0.25 * t, p.pelvis_scale),
        (c + 0.40 * t, p.waist_scale),
        (c + 0.55 * t, p.waist_scale),
        (c + 0.70 * t, 1.0),
        (c + 0.90 * t, 1.0),
        (torso_top, top_scale),
    )
    asym = p.arm_asymmetry + jitter
    arms = {"right": p.arm_length * (1.0 - 0.5 * asym), "left": p.arm_length * (1.0 + 0.5 * asym)}
    return _Layout(
        p=p,
        alpha=alpha,
        r_eff=r_eff,
        y_shoulder=y_s,
        head_height=head_h,
        head_rx=0.08 * k,
        head_rz=0.10 * k,
        neck_radius=0.05 * k,
        torso_top=torso_top,
        torso_rings=rings,
        pelvis_y=c + 0.125 * t,
        waist_y=c + 0.475 * t,
        chest_y=c + 0.80 * t,
        leg_x=0.5 * p.torso_width * p.pelvis_scale,
        leg_top=c + 0.15 * t,
        arm_lengths=arms,
        # the arm stops just past the wrist so the wrist ray leaves through the end cap
        arm_end_extra=0.5 * r_eff * math.tan(alpha),
    )


def validate_params(p: BodyParams, jitter: float = 0.0) -> _Layout:
    for name in BodyParams.LENGTHS:
        if not getattr(p, name) > 0:
            raise BodyParamsError(f"{name} must be positive")
    if p.facets < 16 or p.facets % 2:
        raise BodyParamsError("facets must be an even number >= 16")
    if p.pose not in ("pose0", "pose1"):
        raise BodyParamsError("pose must be pose0 or pose1")
    if not p.crotch_height < p.stature:
        raise BodyParamsError("crotch height must be below stature")
    if not 0.1 < p.elbow_fraction < 0.9:
        raise BodyParamsError("elbow_fraction must lie in (0.1, 0.9)")
    if not 0.5 < p.waist_scale <= 1.5 or not 0.5 < p.pelvis_scale <= 1.5:
        raise BodyParamsError("waist/pelvis scale out of range")
    if not 2.0 <= p.abduction_deg <= 60.0:
        raise BodyParamsError("arm angle from vertical must lie in [2, 60] degrees")
    lay = _layout(p, jitter)
    a_max = p.torso_width * max(s for _, s in lay.torso_rings)
    if p.torso_depth > p.torso_width * 1.5 or p.torso_depth < 0.3 * p.torso_width:
        raise BodyParamsError("torso depth/width ratio out of range")
    if lay.torso_top - p.crotch_height < 0.2 * p.stature:
        raise BodyParamsError("torso too short: crotch too high for the shoulders")
    # arms must clear the torso; the gap only widens below the torso top
    clearance = (p.shoulder_half_span + (lay.y_shoulder - lay.torso_top) * math.tan(lay.alpha)
                 - p.arm_radius / math.cos(lay.alpha) - a_max)
    if clearance < 0.005:
        raise BodyParamsError(f"arms intersect the torso (clearance {clearance:.4f} m)")
    # legs: separated at the crotch and contained in the bottom torso section
    a_p = p.torso_width * p.pelvis_scale
    b_p = p.torso_depth * p.pelvis_scale
    if lay.leg_x - p.leg_radius < 0.004:
        raise BodyParamsError("legs touch each other")
    if lay.leg_x + p.leg_radius > 0.97 * a_p or p.leg_radius > 0.97 * b_p:
        raise BodyParamsError("legs stick out of the pelvis")
    if lay.neck_radius >= p.shoulder_half_span - p.arm_radius:
        raise BodyParamsError("neck swallows the shoulder joints")
    for side in ("right", "left"):
        end = lay.arm_end(side)
        if end[1] - p.arm_radius <= 0.0:
            raise BodyParamsError(f"{side} arm reaches the floor")
        if lay.arm_lengths[side] <= 0:
            raise BodyParamsError("arm asymmetry too large")
    return lay


# --------------------------------------------------------------- primitives

class _Builder:
    def __init__(self):
        self.vertices: list[np.ndarray] = []
        self.faces: list[np.ndarray] = []
        self.count = 0

    def add(self, verts: np.ndarray, faces: np.ndarray) -> None:
        verts = np.asarray(verts, dtype=np.float64)
        faces = np.asarray(faces, dtype=np.int64)
        # make the component's normals point outward (positive enclosed volume)
        tri = verts[faces]
        vol = np.einsum("ij,ij->i", tri[:, 0], np.cross(tri[:, 1], tri[:, 2])).sum()
        if vol < 0:
            faces = faces[:, ::-1]
        self.vertices.append(verts)
        self.faces.append(faces + self.count)
        self.count += len(verts)

    def mesh(self) -> TriMesh:
        return TriMesh(np.concatenate(self.vertices), np.concatenate(self.faces))


def _ring_angles(n: int) -> np.ndarray:
    return (np.arange(n) + 0.5) * (2.0 * math.pi / n)


def _band_faces(ring_a: int, ring_b: int, n: int) -> np.ndarray:
    k = np.arange(n)
    k1 = (k + 1) % n
    a, a1, b, b1 = ring_a + k, ring_a + k1, ring_b + k, ring_b + k1
    return np.concatenate([np.stack([a, a1, b1], 1), np.stack([a, b1, b], 1)])


def _cap_faces(ring: int, center: int, n: int) -> np.ndarray:
    """Fan winding consistent with a tube starting at ``ring``; reverse it for an end ring."""
    k = np.arange(n)
    return np.stack([np.full(n, center), ring + (k + 1) % n, ring + k], 1)


def _planar_sweep(path: np.ndarray, radius: float, n: int) -> tuple[np.ndarray, np.ndarray]:
    """Closed tube of n facets around a polyline lying in the z = 0 plane.

    Interior rings sit on the miter (bisector) planes so every side facet is
    a planar quad parallel to its segment.
    """
    path = np.asarray(path, dtype=np.float64)
    z = np.array([0.0, 0.0, 1.0])
    dirs = np.diff(path, axis=0)
    dirs /= np.linalg.norm(dirs, axis=1)[:, None]
    phi = _ring_angles(n)
    rings = []
    for i, p in enumerate(path):
        d_in = dirs[max(i - 1, 0)]
        d_out = dirs[min(i, len(dirs) - 1)]
        d_ref = d_in if i > 0 else d_out
        normal = np.array([-d_ref[1], d_ref[0], 0.0])
        offs = radius * (np.cos(phi)[:, None] * normal + np.sin(phi)[:, None] * z)
        if 0 < i < len(path) - 1:
            m = d_in + d_out
            m /= np.linalg.norm(m)
            s = -(offs @ m) / (d_in @ m)
            offs = offs + s[:, None] * d_in
        rings.append(p + offs)
    verts = np.concatenate(rings + [path[:1], path[-1:]])
    faces = [_band_faces(i * n, (i + 1) * n, n) for i in range(len(path) - 1)]
    start_c, end_c = len(path) * n, len(path) * n + 1
    faces.append(_cap_faces(0, start_c, n))
    faces.append(_cap_faces((len(path) - 1) * n, end_c, n)[:, ::-1])
    return verts, np.concatenate(faces)


def _loft(rings: list[tuple[float, float, float]], n: int,
          bottom: float | None = None, top: float | None = None,
          center_xz=(0.0, 0.0)) -> tuple[np.ndarray, np.ndarray]:
    """Stack of horizontal elliptical rings (y, semi_x, semi_z).

    Ends are closed by a pole vertex at ``bottom``/``top`` when given, else by
    a flat cap at the end ring height.
    """
    phi = _ring_angles(n)
    cx, cz = center_xz
    verts = [np.stack([cx + a * np.cos(phi), np.full(n, y), cz + b * np.sin(phi)], 1)
             for y, a, b in rings]
    v = np.concatenate(verts)
    faces = [_band_faces(i * n, (i + 1) * n, n) for i in range(len(rings) - 1)]
    lo = np.array([[cx, rings[0][0] if bottom is None else bottom, cz]])
    hi = np.array([[cx, rings[-1][0] if top is None else top, cz]])
    base = len(v)
    v = np.concatenate([v, lo, hi])
    faces.append(_cap_faces(0, base, n))
    faces.append(_cap_faces((len(rings) - 1) * n, base + 1, n)[:, ::-1])
    return v, np.concatenate(faces)


def _vertical_tube(x: float, y0: float, y1: float, r: float, n: int):
    return _loft([(y0, r, r), (y1, r, r)], n, center_xz=(x, 0.0))


def _head(lay: _Layout, n: int):
    n_lat = max(4, n // 4)
    h = lay.head_height
    top = lay.p.stature
    bottom = top - h
    cy = top - 0.5 * h
    lats = np.linspace(-0.5 * math.pi, 0.5 * math.pi, n_lat + 2)[1:-1]
    rings = [(cy + 0.5 * h * math.sin(t), lay.head_rx * math.cos(t), lay.head_rz * math.cos(t))
             for t in lats]
    return _loft(rings, max(16, n // 2), bottom=bottom, top=top)


# ------------------------------------------------------------ public surface

def unit_polygon_perimeter(a: float, b: float, n: int) -> float:
    """Perimeter of the n-gon inscribed in the ellipse (a, b) at the ring angles."""
    phi = _ring_angles(n)
    pts = np.stack([a * np.cos(phi), b * np.sin(phi)], 1)
    return float(np.linalg.norm(np.roll(pts, -1, axis=0) - pts, axis=1).sum())


def _arm_truth(lay: _Layout, side: str) -> float:
    """Outer skin path from the shoulder-top landmark to the wrist landmark.

    In the z = 0 plane: along the yoke top to the shoulder corner, down the
    arm's outer edge to the end-cap corner, then across the cap to where the
    wrist ray exits.
    """
    r = lay.r_eff
    a = lay.alpha
    s = lay.shoulder(side)[:2]
    d = lay.arm_dir(side)[:2]
    n_o = lay.outer_normal(side)[:2]
    u_s = s + np.array([0.0, r])
    corner_s = s + r * n_o + (r * (math.sin(a) - 1.0) / math.cos(a)) * d
    corner_e = s + r * n_o + (lay.arm_lengths[side] + lay.arm_end_extra) * d
    w = lay.joint(side, "wrist")[:2]
    out = -1.0 if side == "right" else 1.0
    u_w = w + np.array([out * lay.arm_end_extra / math.sin(a), 0.0])
    return float(np.linalg.norm(corner_s - u_s) + np.linalg.norm(corner_e - corner_s)
                 + np.linalg.norm(u_w - corner_e))


def analytic_truth(p: BodyParams, jitter: float = 0.0) -> GroundTruth:
    lay = validate_params(p, jitter)
    unit = unit_polygon_perimeter(p.torso_width, p.torso_depth, p.facets)
    hbd = HbdVector(
        shoulder_width=2.0 * p.shoulder_half_span,
        right_arm_length=_arm_truth(lay, "right"),
        left_arm_length=_arm_truth(lay, "left"),
        inseam=p.crotch_height,
        chest_circumference=unit * lay.torso_scale(lay.chest_y),
        waist_circumference=unit * lay.torso_scale(lay.waist_y),
        pelvis_circumference=unit * lay.torso_scale(lay.pelvis_y),
        height=p.stature,
    )
    tol = {
        "shoulder_width": 0.01 * hbd.shoulder_width,
        "right_arm_length": 0.01 * hbd.right_arm_length,
        "left_arm_length": 0.01 * hbd.left_arm_length,
        "inseam": 1e-6,
        "chest_circumference": 1e-9,
        "waist_circumference": 1e-9,
        "pelvis_circumference": 1e-9,
        "height": 1e-6,
    }
    return GroundTruth(hbd, tol)


def seed_jitter(seed: int, amplitude: float = 0.01) -> float:
    """Left/right arm-length asymmetry drawn from the body seed."""
    return float(np.random.default_rng(seed).uniform(-amplitude, amplitude))


def generate_body(params: BodyParams, seed: int = 0) -> tuple[TriMesh, JointSet, GroundTruth]:
    jitter = seed_jitter(seed)
    lay = validate_params(params, jitter)
    p = params
    n = p.facets
    b = _Builder()

    path = np.array([lay.arm_end("left"), lay.shoulder("left"),
                     lay.shoulder("right"), lay.arm_end("right")])
    b.add(*_planar_sweep(path, p.arm_radius, n))

    rings = [(y, s * p.torso_width, s * p.torso_depth) for y, s in lay.torso_rings]
    b.add(*_loft(rings, n))

    for sgn in (-1.0, 1.0):
        b.add(*_vertical_tube(sgn * lay.leg_x, 0.0, lay.leg_top, p.leg_radius, n))

    neck_bottom = lay.y_shoulder - 0.5 * lay.r_eff
    neck_top = p.stature - 0.7 * lay.head_height
    b.add(*_vertical_tube(0.0, neck_bottom, neck_top, lay.neck_radius, max(16, n // 2)))
    b.add(*_head(lay, n))

    joints = JointSet({
        "right_shoulder": lay.joint("right", "shoulder"),
        "left_shoulder": lay.joint("left", "shoulder"),
        "right_elbow": lay.joint("right", "elbow"),
        "left_elbow": lay.joint("left", "elbow"),
        "right_wrist": lay.joint("right", "wrist"),
        "left_wrist": lay.joint("left", "wrist"),
        "pelvis": [0.0, lay.pelvis_y, 0.0],
        "waist": [0.0, lay.waist_y, 0.0],
        "chest": [0.0, lay.chest_y, 0.0],
    })
    return b.mesh(), joints, analytic_truth(p, jitter)


# --------------------------------------------------------------- populations

Range = tuple[float, float]


@dataclass(frozen=True)
class GenderRanges:
    """Uniform sampling ranges; most are fractions of another dimension."""

    stature: Range
    crotch_fraction: Range          # crotch height / stature
    shoulder_fraction: Range        # shoulder half-span / stature
    torso_width_fraction: Range     # chest semi-axis / shoulder half-span
    depth_ratio: Range              # torso depth / torso width
    waist_scale: Range
    pelvis_scale: Range
    arm_radius_fraction: Range      # arm radius / shoulder half-span
    leg_radius_fraction: Range      # leg radius / pelvis semi-axis
    arm_length_fraction: Range      # shoulder-to-wrist / stature
    rest_abduction_deg: Range


@dataclass(frozen=True)
class ParameterRanges:
    female: GenderRanges = GenderRanges(
        stature=(1.50, 1.85),
        crotch_fraction=(0.44, 0.48),
        shoulder_fraction=(0.100, 0.112),
        torso_width_fraction=(0.52, 0.58),
        depth_ratio=(0.62, 0.75),
        waist_scale=(0.74, 0.84),
        pelvis_scale=(1.00, 1.08),
        arm_radius_fraction=(0.19, 0.22),
        leg_radius_fraction=(0.38, 0.44),
        arm_length_fraction=(0.30, 0.33),
        rest_abduction_deg=(8.0, 14.0),
    )
    male: GenderRanges = GenderRanges(
        stature=(1.60, 2.00),
        crotch_fraction=(0.45, 0.49),
        shoulder_fraction=(0.108, 0.120),
        torso_width_fraction=(0.54, 0.60),
        depth_ratio=(0.62, 0.75),
        waist_scale=(0.82, 0.92),
        pelvis_scale=(0.90, 0.98),
        arm_radius_fraction=(0.21, 0.24),
        leg_radius_fraction=(0.40, 0.46),
        arm_length_fraction=(0.31, 0.34),
        rest_abduction_deg=(6.0, 12.0),
    )
    facets: int = 64
    arm_abduction_deg: float = 30.0

    def __post_init__(self):
        for g in (self.female, self.male):
            for f in fields(g):
                lo, hi = getattr(g, f.name)
                if not (0 < lo <= hi) or not (math.isfinite(lo) and math.isfinite(hi)):
                    raise BodyParamsError(f"invalid range {f.name}: ({lo}, {hi})")

    def for_gender(self, gender: str) -> GenderRanges:
        return self.female if gender == "female" else self.male

    def to_json(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PopulationEntry:
    id: str
    subject: str
    gender: str
    pose: str
    params: BodyParams
    seed: int


def sample_params(rng: np.random.Generator, gender: str, ranges: ParameterRanges) -> BodyParams:
    g = ranges.for_gender(gender)
    u = lambda r: float(rng.uniform(r[0], r[1]))
    stature = u(g.stature)
    half_span = u(g.shoulder_fraction) * stature
    width = u(g.torso_width_fraction) * half_span
    pelvis = u(g.pelvis_scale)
    return BodyParams(
        stature=stature,
        crotch_height=u(g.crotch_fraction) * stature,
        shoulder_half_span=half_span,
        arm_radius=u(g.arm_radius_fraction) * half_span,
        leg_radius=u(g.leg_radius_fraction) * width * pelvis,
        torso_width=width,
        torso_depth=u(g.depth_ratio) * width,
        waist_scale=u(g.waist_scale),
        pelvis_scale=pelvis,
        arm_length=u(g.arm_length_fraction) * stature,
        facets=ranges.facets,
        rest_abduction_deg=u(g.rest_abduction_deg),
        arm_abduction_deg=ranges.arm_abduction_deg,
    )


_MAX_DRAWS = 100


def generate_population(n: int, seed: int, ranges: ParameterRanges | None = None) -> list[PopulationEntry]:
    """n subjects, half female and half male, each in pose0 and pose1."""
    if n <= 0:
        raise BodyParamsError("population size must be positive")
    ranges = ranges or ParameterRanges()
    rng = np.random.default_rng(seed)
    out: list[PopulationEntry] = []
    for i in range(n):
        gender = GENDERS[i % 2]
        for _ in range(_MAX_DRAWS):
            params = sample_params(rng, gender, ranges)
            body_seed = int(rng.integers(0, 2**31 - 1))
            try:
                validate_params(params, seed_jitter(body_seed))
                break
            except BodyParamsError:
                continue  # rejection sampling keeps the stream deterministic
        else:
            raise BodyParamsError(f"no valid {gender} body in {_MAX_DRAWS} draws; ranges too wide")
        for pose in ("pose0", "pose1"):
            sid = f"s{i:05d}"
            out.append(PopulationEntry(f"{sid}_{pose}", sid, gender, pose,
                                       params.with_pose(pose), body_seed))
    return out
