"""Triangle meshes, skeleton joints and the subject/dataset data model.

World convention: meters, y is up, the subject faces +z and the subject's
right side is -x.
"""
from __future__ import annotations

import json
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from pathlib import Path

import jsonschema
import numpy as np

DEGENERATE_AREA = 1e-12

REQUIRED_JOINTS = (
    "right_shoulder",
    "left_shoulder",
    "right_elbow",
    "left_elbow",
    "right_wrist",
    "left_wrist",
    "pelvis",
)
OPTIONAL_JOINTS = ("chest", "waist")

HBD_NAMES = (
    "shoulder_width",
    "right_arm_length",
    "left_arm_length",
    "inseam",
    "chest_circumference",
    "waist_circumference",
    "pelvis_circumference",
    "height",
)
GENDERS = ("female", "male")
POSES = ("pose0", "pose1")


class MeshError(ValueError):
    pass


class ObjParseError(MeshError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class NonTriangulatedFaceError(ObjParseError):
    pass


class FaceIndexError(MeshError):
    pass


class DegenerateFaceError(MeshError):
    def __init__(self, faces: Iterable[int]):
        self.faces = [int(f) for f in faces]
        shown = ", ".join(str(f) for f in self.faces[:20])
        more = "" if len(self.faces) <= 20 else f" (+{len(self.faces) - 20} more)"
        super().__init__(f"degenerate faces (area < {DEGENERATE_AREA:g} m^2): {shown}{more}")


class JointError(ValueError):
    pass


class MissingJointError(JointError):
    def __init__(self, names: Iterable[str]):
        self.names = list(names)
        super().__init__("missing required joint(s): " + ", ".join(self.names))


class ManifestError(ValueError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class TriMesh:
    """Indexed triangle surface. Arrays are read-only after construction."""

    vertices: np.ndarray
    faces: np.ndarray

    def __post_init__(self):
        v = np.array(self.vertices, dtype=np.float64).reshape(-1, 3)
        f = np.array(self.faces, dtype=np.int64).reshape(-1, 3)
        if not np.all(np.isfinite(v)):
            raise MeshError("non-finite vertex coordinate")
        if f.size:
            bad = np.flatnonzero((f < 0).any(axis=1) | (f >= len(v)).any(axis=1))
            if bad.size:
                raise FaceIndexError(
                    f"face {int(bad[0])} references a vertex outside 0..{len(v) - 1}"
                )
            area = 0.5 * np.linalg.norm(
                np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]]), axis=1
            )
            small = np.flatnonzero(area < DEGENERATE_AREA)
            if small.size:
                raise DegenerateFaceError(small)
        object.__setattr__(self, "vertices", _frozen(v))
        object.__setattr__(self, "faces", _frozen(f))

    @property
    def triangles(self) -> np.ndarray:
        """(m, 3, 3) corner coordinates."""
        return self.vertices[self.faces]

    def transformed(self, matrix: np.ndarray, offset=(0.0, 0.0, 0.0)) -> TriMesh:
        """Apply ``x -> matrix @ x + offset``; reflections flip the winding."""
        m = np.asarray(matrix, dtype=np.float64)
        v = self.vertices @ m.T + np.asarray(offset, dtype=np.float64)
        f = self.faces if np.linalg.det(m) > 0 else self.faces[:, ::-1]
        return TriMesh(v, f)

    def translated(self, offset) -> TriMesh:
        return TriMesh(self.vertices + np.asarray(offset, dtype=np.float64), self.faces)


@dataclass(frozen=True)
class Aabb:
    min: np.ndarray
    max: np.ndarray

    def __post_init__(self):
        lo = _frozen(np.array(self.min, dtype=np.float64))
        hi = _frozen(np.array(self.max, dtype=np.float64))
        if np.any(lo > hi):
            raise ValueError("Aabb min must not exceed max")
        object.__setattr__(self, "min", lo)
        object.__setattr__(self, "max", hi)

    @property
    def center(self) -> np.ndarray:
        return 0.5 * (self.min + self.max)

    @property
    def extent(self) -> np.ndarray:
        return self.max - self.min

    @property
    def height(self) -> float:
        return float(self.max[1] - self.min[1])

    def contains(self, p, tol: float = 0.0) -> bool:
        p = np.asarray(p, dtype=np.float64)
        return bool(np.all(p >= self.min - tol) and np.all(p <= self.max + tol))


def compute_aabb(mesh: TriMesh) -> Aabb:
    if len(mesh.vertices) == 0:
        raise MeshError("cannot bound an empty mesh")
    return Aabb(mesh.vertices.min(axis=0), mesh.vertices.max(axis=0))


def _face_index(token: str, n_vertices: int, lineno: int) -> int:
    head = token.split("/", 1)[0]
    try:
        idx = int(head)
    except ValueError:
        raise ObjParseError(f"bad face index {token!r}", lineno) from None
    if idx < 0:
        idx = n_vertices + idx + 1
    return idx - 1


def parse_obj(text: str) -> TriMesh:
    vertices: list[tuple[float, float, float]] = []
    faces: list[tuple[int, int, int]] = []
    face_lines: list[int] = []
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        tag = parts[0]
        if tag == "v":
            if len(parts) < 4:
                raise ObjParseError("vertex needs 3 coordinates", lineno)
            try:
                xyz = tuple(float(s) for s in parts[1:4])
            except ValueError:
                raise ObjParseError(f"bad vertex coordinate in {raw.strip()!r}", lineno) from None
            if not all(math.isfinite(c) for c in xyz):
                raise ObjParseError("non-finite vertex coordinate", lineno)
            vertices.append(xyz)  # type: ignore[arg-type]
        elif tag == "f":
            if len(parts) != 4:
                raise NonTriangulatedFaceError(
                    f"face has {len(parts) - 1} vertices, only triangles are supported", lineno
                )
            faces.append(tuple(_face_index(t, len(vertices), lineno) for t in parts[1:]))  # type: ignore[arg-type]
            face_lines.append(lineno)
        # normals, texcoords, groups, materials: ignored
    n = len(vertices)
    for i, (face, lineno) in enumerate(zip(faces, face_lines)):
        if any(k < 0 or k >= n for k in face):
            raise FaceIndexError(
                f"face {i} (line {lineno}) has an index outside 1..{n}: "
                + " ".join(str(k + 1) for k in face)
            )
    return TriMesh(np.array(vertices, dtype=np.float64).reshape(-1, 3),
                   np.array(faces, dtype=np.int64).reshape(-1, 3))


def load_mesh(path) -> TriMesh:
    return parse_obj(Path(path).read_text())


def format_obj(mesh: TriMesh) -> str:
    # repr-precision floats so that load(format(m)) reproduces m exactly
    out = [f"v {x!r} {y!r} {z!r}" for x, y, z in mesh.vertices.tolist()]
    out += [f"f {a + 1} {b + 1} {c + 1}" for a, b, c in mesh.faces.tolist()]
    return "\n".join(out) + "\n"


def save_mesh(mesh: TriMesh, path) -> None:
    Path(path).write_text(format_obj(mesh))


class JointSet(Mapping[str, np.ndarray]):
    """Named skeleton joints (3D points, meters)."""

    def __init__(self, joints: Mapping[str, Iterable[float]]):
        parsed: dict[str, np.ndarray] = {}
        for name, p in joints.items():
            a = np.array(p, dtype=np.float64)
            if a.shape != (3,):
                raise JointError(f"joint {name!r} must be [x, y, z]")
            if not np.all(np.isfinite(a)):
                raise JointError(f"joint {name!r} has a non-finite coordinate")
            parsed[name] = _frozen(a)
        missing = [n for n in REQUIRED_JOINTS if n not in parsed]
        if missing:
            raise MissingJointError(missing)
        self._joints = parsed

    def __getitem__(self, name: str) -> np.ndarray:
        return self._joints[name]

    def __iter__(self):
        return iter(self._joints)

    def __len__(self) -> int:
        return len(self._joints)

    def __repr__(self) -> str:
        return f"JointSet({sorted(self._joints)})"

    def to_json(self) -> dict[str, list[float]]:
        return {k: v.tolist() for k, v in self._joints.items()}

    def transformed(self, matrix, offset=(0.0, 0.0, 0.0)) -> JointSet:
        m = np.asarray(matrix, dtype=np.float64)
        off = np.asarray(offset, dtype=np.float64)
        return JointSet({k: m @ v + off for k, v in self._joints.items()})

    def mirrored_names(self) -> JointSet:
        """Swap every ``right_*`` joint with its ``left_*`` counterpart."""
        def swap(name: str) -> str:
            if name.startswith("right_"):
                return "left_" + name[6:]
            if name.startswith("left_"):
                return "right_" + name[5:]
            return name
        return JointSet({swap(k): v for k, v in self._joints.items()})


def load_joints(path) -> JointSet:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise JointError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(data, dict):
        raise JointError(f"{path}: expected a JSON object of joint name -> [x, y, z]")
    return JointSet(data)


def save_joints(joints: JointSet, path) -> None:
    Path(path).write_text(json.dumps(joints.to_json(), indent=2, sort_keys=True) + "\n")


def validate_pairing(mesh: TriMesh, joints: JointSet, tol: float = 0.0) -> None:
    """Every joint must lie inside the mesh bounding box."""
    box = compute_aabb(mesh)
    outside = [name for name, p in joints.items() if not box.contains(p, tol)]
    if outside:
        raise JointError("joint(s) outside the mesh bounding box: " + ", ".join(outside))


@dataclass(frozen=True)
class HbdVector:
    """The eight body dimensions in meters, in canonical order."""

    shoulder_width: float
    right_arm_length: float
    left_arm_length: float
    inseam: float
    chest_circumference: float
    waist_circumference: float
    pelvis_circumference: float
    height: float

    def __post_init__(self):
        for name in HBD_NAMES:
            v = float(getattr(self, name))
            if not (0.0 < v < 3.0):
                raise ValueError(f"{name} = {v!r} m is outside (0, 3)")
            object.__setattr__(self, name, v)

    def to_array(self) -> np.ndarray:
        return np.array([getattr(self, n) for n in HBD_NAMES], dtype=np.float64)

    def as_dict(self) -> dict[str, float]:
        return {n: getattr(self, n) for n in HBD_NAMES}

    @classmethod
    def from_array(cls, values) -> HbdVector:
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        if values.shape != (8,):
            raise ValueError("HbdVector needs exactly 8 values")
        return cls(*values.tolist())

    @classmethod
    def from_dict(cls, d: Mapping[str, float]) -> HbdVector:
        return cls(*(float(d[n]) for n in HBD_NAMES))


MANIFEST_SCHEMA = {
    "type": "object",
    "required": ["version", "subjects"],
    "properties": {
        "version": {"const": 1},
        "seed": {"type": ["integer", "null"]},
        "provenance": {"type": "object"},
        "subjects": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["id", "mesh", "joints", "gender", "pose"],
                "properties": {
                    "id": {"type": "string", "minLength": 1},
                    "subject": {"type": "string"},
                    "mesh": {"type": "string"},
                    "joints": {"type": "string"},
                    "gender": {"enum": list(GENDERS)},
                    "pose": {"enum": list(POSES)},
                    "truth": {"type": "string"},
                    "hbd": {
                        "type": "object",
                        "required": list(HBD_NAMES),
                        "properties": {n: {"type": "number"} for n in HBD_NAMES},
                    },
                },
            },
        },
    },
}


@dataclass(frozen=True)
class SubjectRecord:
    id: str
    mesh: str
    joints: str
    gender: str
    pose: str
    subject: str = ""
    truth: str | None = None
    hbd: HbdVector | None = None

    def __post_init__(self):
        if self.gender not in GENDERS:
            raise ManifestError(f"{self.id}: gender must be one of {GENDERS}")
        if self.pose not in POSES:
            raise ManifestError(f"{self.id}: pose must be one of {POSES}")

    def to_json(self) -> dict:
        d = {"id": self.id, "subject": self.subject or self.id, "mesh": self.mesh,
             "joints": self.joints, "gender": self.gender, "pose": self.pose}
        if self.truth is not None:
            d["truth"] = self.truth
        if self.hbd is not None:
            d["hbd"] = self.hbd.as_dict()
        return d

    @classmethod
    def from_json(cls, d: Mapping) -> SubjectRecord:
        hbd = HbdVector.from_dict(d["hbd"]) if "hbd" in d else None
        return cls(id=d["id"], mesh=d["mesh"], joints=d["joints"], gender=d["gender"],
                   pose=d["pose"], subject=d.get("subject", d["id"]),
                   truth=d.get("truth"), hbd=hbd)


@dataclass
class Manifest:
    subjects: list[SubjectRecord]
    root: Path = field(default_factory=Path)
    seed: int | None = None
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        seen: set[str] = set()
        for rec in self.subjects:
            if rec.id in seen:
                raise ManifestError(f"duplicate subject id {rec.id!r}")
            seen.add(rec.id)

    def __len__(self) -> int:
        return len(self.subjects)

    def resolve(self, rel: str) -> Path:
        return (self.root / rel).resolve()

    def load_subject(self, rec: SubjectRecord) -> tuple[TriMesh, JointSet]:
        mesh = load_mesh(self.resolve(rec.mesh))
        joints = load_joints(self.resolve(rec.joints))
        validate_pairing(mesh, joints)
        return mesh, joints

    def to_json(self) -> dict:
        return {"version": 1, "seed": self.seed, "provenance": self.provenance,
                "subjects": [s.to_json() for s in self.subjects]}


def validate_manifest_json(data) -> None:
    try:
        jsonschema.validate(data, MANIFEST_SCHEMA)
    except jsonschema.ValidationError as exc:
        raise ManifestError(f"manifest does not match schema: {exc.message}") from None


def load_manifest(path) -> Manifest:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}: invalid JSON ({exc})") from None
    validate_manifest_json(data)
    return Manifest([SubjectRecord.from_json(s) for s in data["subjects"]],
                    root=path.parent, seed=data.get("seed"),
                    provenance=data.get("provenance", {}))


def save_manifest(manifest: Manifest, path) -> None:
    data = manifest.to_json()
    validate_manifest_json(data)
    Path(path).write_text(json.dumps(data, indent=2) + "\n")
