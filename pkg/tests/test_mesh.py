import json

import numpy as np
import pytest
from helpers import box, joints_for_box, unit_cube
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anthropometer.mesh import (
    HBD_NAMES,
    DegenerateFaceError,
    FaceIndexError,
    HbdVector,
    JointError,
    JointSet,
    Manifest,
    ManifestError,
    MissingJointError,
    NonTriangulatedFaceError,
    ObjParseError,
    SubjectRecord,
    TriMesh,
    compute_aabb,
    format_obj,
    load_joints,
    load_manifest,
    load_mesh,
    parse_obj,
    save_manifest,
    save_mesh,
    validate_pairing,
)

CUBE_OBJ = """\
# unit cube, hand written
v -0.5 -0.5 -0.5
v 0.5 -0.5 -0.5
v 0.5 0.5 -0.5
v -0.5 0.5 -0.5
v -0.5 -0.5 0.5
v 0.5 -0.5 0.5
v 0.5 0.5 0.5
v -0.5 0.5 0.5
f 1 3 2
f 1 4 3
f 5 6 7
f 5 7 8
f 1 2 6
f 1 6 5
f 4 8 7
f 4 7 3
f 1 5 8
f 1 8 4
f 2 3 7
f 2 7 6
"""

JOINTS = {
    "right_shoulder": [-0.2, 0.3, 0.0], "left_shoulder": [0.2, 0.3, 0.0],
    "right_elbow": [-0.3, 0.1, 0.0], "left_elbow": [0.3, 0.1, 0.0],
    "right_wrist": [-0.35, -0.1, 0.0], "left_wrist": [0.35, -0.1, 0.0],
    "pelvis": [0.0, -0.2, 0.0],
}


def test_single_triangle():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    assert m.vertices.shape == (3, 3) and m.faces.tolist() == [[0, 1, 2]]


@pytest.mark.parametrize("face", ["f 0 1 2", "f 1 2 4"])
def test_face_index_out_of_range_names_the_face(face):
    with pytest.raises(FaceIndexError, match="face 0"):
        parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\n" + face + "\n")


def test_cube_obj_matches_hand_built_cube(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_OBJ)
    m = load_mesh(p)
    assert len(m.vertices) == 8 and len(m.faces) == 12
    box_ = compute_aabb(m)
    assert np.linalg.norm(box_.extent) == pytest.approx(np.sqrt(3.0), abs=1e-15)
    np.testing.assert_array_equal(box_.min, [-0.5] * 3)
    np.testing.assert_array_equal(box_.max, [0.5] * 3)


def test_parse_errors_carry_line_numbers():
    with pytest.raises(ObjParseError) as exc:
        parse_obj("v 0 0 0\nv 1 0\n")
    assert exc.value.line == 2
    with pytest.raises(NonTriangulatedFaceError, match="line 5"):
        parse_obj("v 0 0 0\nv 1 0 0\nv 1 1 0\nv 0 1 0\nf 1 2 3 4\n")
    with pytest.raises(ObjParseError, match="non-finite"):
        parse_obj("v nan 0 0\n")


def test_degenerate_faces_are_listed():
    text = "v 0 0 0\nv 1 0 0\nv 2 0 0\nv 0 1 0\nf 1 2 4\nf 1 2 3\n"
    with pytest.raises(DegenerateFaceError) as exc:
        parse_obj(text)
    assert exc.value.faces == [1]


def test_negative_and_slashed_indices():
    m = parse_obj("v 0 0 0\nv 1 0 0\nv 0 1 0\nvn 0 0 1\nf -3/1/1 -2//1 -1\n")
    assert m.faces.tolist() == [[0, 1, 2]]


def test_obj_round_trip_is_exact(tmp_path, rng):
    m = TriMesh(unit_cube().vertices + rng.normal(scale=1e-3, size=(8, 3)) / 3.0, unit_cube().faces)
    p = tmp_path / "m.obj"
    save_mesh(m, p)
    again = load_mesh(p)
    np.testing.assert_array_equal(again.vertices, m.vertices)
    np.testing.assert_array_equal(again.faces, m.faces)
    assert format_obj(again) == format_obj(m)


def test_mesh_arrays_are_read_only():
    m = unit_cube()
    with pytest.raises(ValueError):
        m.vertices[0, 0] = 3.0


def test_aabb_of_repeated_point():
    b = compute_aabb(TriMesh(np.tile([1.5, -2.0, 0.25], (4, 1)), np.zeros((0, 3), int)))
    np.testing.assert_array_equal(b.min, b.max)
    np.testing.assert_array_equal(b.min, [1.5, -2.0, 0.25])


def test_aabb_of_empty_mesh_fails():
    with pytest.raises(ValueError):
        compute_aabb(TriMesh(np.zeros((0, 3)), np.zeros((0, 3), int)))


cloud = arrays(np.float64, st.tuples(st.integers(1, 100), st.just(3)),
               elements=st.floats(-100, 100, allow_nan=False))


@given(cloud, st.randoms(use_true_random=False))
def test_aabb_matches_brute_force_and_ignores_order(pts, r):
    m = TriMesh(pts, np.zeros((0, 3), int))
    b = compute_aabb(m)
    for k in range(3):
        assert b.min[k] == min(p[k] for p in pts.tolist())
        assert b.max[k] == max(p[k] for p in pts.tolist())
    perm = list(range(len(pts)))
    r.shuffle(perm)
    b2 = compute_aabb(TriMesh(pts[perm], np.zeros((0, 3), int)))
    np.testing.assert_array_equal(b.min, b2.min)
    np.testing.assert_array_equal(b.max, b2.max)


@given(st.floats(-50, 50, allow_nan=False))
def test_height_unchanged_by_vertical_translation(dy):
    m = unit_cube()
    # height of the cube is exactly 1; translation may round but stays within one ulp scale
    assert compute_aabb(m.translated([0.0, dy, 0.0])).height == pytest.approx(1.0, abs=1e-13)
    assert compute_aabb(m).height == 1.0


def test_joints_load_and_missing(tmp_path):
    p = tmp_path / "j.json"
    p.write_text(json.dumps(JOINTS))
    js = load_joints(p)
    assert set(js) == set(JOINTS)
    bad = dict(JOINTS)
    del bad["pelvis"]
    p.write_text(json.dumps(bad))
    with pytest.raises(MissingJointError, match="pelvis") as exc:
        load_joints(p)
    assert exc.value.names == ["pelvis"]


def test_joint_non_finite_and_malformed(tmp_path):
    with pytest.raises(JointError, match="non-finite"):
        JointSet({**JOINTS, "pelvis": [0.0, float("inf"), 0.0]})
    with pytest.raises(JointError):
        JointSet({**JOINTS, "pelvis": [0.0, 1.0]})
    p = tmp_path / "j.json"
    p.write_text("{not json")
    with pytest.raises(JointError, match="invalid JSON"):
        load_joints(p)


def test_pairing_rejects_joint_outside_box():
    m = box((-0.5, -0.5, -0.5), (0.5, 0.5, 0.5))
    validate_pairing(m, JointSet(JOINTS))
    with pytest.raises(JointError, match="right_wrist"):
        validate_pairing(m, JointSet({**JOINTS, "right_wrist": [-0.7, 0.0, 0.0]}))


def test_mirrored_names_swap_sides():
    js = joints_for_box((-0.5, 0, -0.2), (0.5, 1.5, 0.2)).mirrored_names()
    assert js["left_wrist"][0] < 0 < js["right_wrist"][0]


def test_hbd_vector_bounds_and_order():
    v = HbdVector.from_array(np.linspace(0.3, 1.8, 8))
    assert list(v.as_dict()) == list(HBD_NAMES)
    np.testing.assert_array_equal(v.to_array(), np.linspace(0.3, 1.8, 8))
    for bad in (0.0, 3.0, -1.0):
        with pytest.raises(ValueError):
            HbdVector.from_array([bad] + [1.0] * 7)
    with pytest.raises(ValueError):
        HbdVector.from_array([1.0] * 7)


def _record(i, **kw):
    base = dict(id=f"s{i}", mesh=f"m{i}.obj", joints=f"j{i}.json", gender="female", pose="pose0")
    return SubjectRecord(**{**base, **kw})


def test_manifest_round_trip(tmp_path):
    hbd = HbdVector.from_array(np.linspace(0.3, 1.8, 8))
    man = Manifest([_record(0), _record(1, gender="male", pose="pose1", hbd=hbd)], tmp_path, 7,
                   {"tool": "x"})
    save_manifest(man, tmp_path / "manifest.json")
    back = load_manifest(tmp_path / "manifest.json")
    assert back.to_json() == man.to_json()
    assert back.subjects[1].hbd == hbd


def test_manifest_rejects_bad_tags_and_duplicates(tmp_path):
    with pytest.raises(ManifestError):
        _record(0, pose="pose2")
    with pytest.raises(ManifestError, match="duplicate"):
        Manifest([_record(0), _record(0)])
    (tmp_path / "m.json").write_text(json.dumps({"version": 1, "subjects": [{"id": "a"}]}))
    with pytest.raises(ManifestError, match="schema"):
        load_manifest(tmp_path / "m.json")
