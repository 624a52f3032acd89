import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from tactbench.geometry import (
    BadDimsError, EmptyMeshError, NotWatertightError, ParseError, Pose, Ray, TriMesh,
    icosphere, is_watertight, load_mesh, make_primitive, mass_properties, parse_mesh_text,
    raycast, raycast_brute, raycast_brute_many, raycast_many, save_mesh, watertight_report,
)

CUBE_TEXT = """# unit cube
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
f 2 3 7
f 2 7 6
f 3 4 8
f 3 8 7
f 4 1 5
f 4 5 8
"""


@pytest.fixture
def cube_file(tmp_path):
    p = tmp_path / "cube.obj"
    p.write_text(CUBE_TEXT)
    return p


def test_load_unit_cube(cube_file):
    m = load_mesh(cube_file)
    assert len(m.vertices) == 8 and len(m) == 12
    assert is_watertight(m)


def test_load_scaled_cube_extent(cube_file):
    m = load_mesh(cube_file, scale=0.6)
    np.testing.assert_allclose(m.extent, [0.6, 0.6, 0.6], rtol=0, atol=1e-12)


def test_zero_area_triangle_dropped(tmp_path):
    p = tmp_path / "degenerate.obj"
    p.write_text(CUBE_TEXT + "f 1 2 2\n")
    m = load_mesh(p)
    assert len(m) == 12 and m.dropped_degenerate == 1


def test_parse_errors(tmp_path):
    with pytest.raises(ParseError):
        parse_mesh_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 9\n")
    with pytest.raises(ParseError):
        parse_mesh_text("v 0 0 zero\n")
    with pytest.raises(EmptyMeshError):
        TriMesh.from_arrays([[0, 0, 0], [1, 0, 0], [2, 0, 0]], [[0, 1, 2]])


def test_save_load_round_trip(tmp_path):
    m = make_primitive("l_block", (0.1, 0.08, 0.05, 0.03))
    save_mesh(m, tmp_path / "l.obj")
    back = load_mesh(tmp_path / "l.obj")
    np.testing.assert_array_equal(back.triangles, m.triangles)
    np.testing.assert_allclose(back.vertices, m.vertices, rtol=0, atol=1e-15)


def test_box_volume_exact():
    m = make_primitive("box", (0.05, 0.05, 0.05))
    assert is_watertight(m)
    assert mass_properties(m, 1.0).volume == pytest.approx(1.25e-4, rel=1e-12)


def test_sphere_volume_within_two_percent():
    r = 0.03
    m = make_primitive("sphere", (r,), tessellation=64)
    assert abs(mass_properties(m, 1.0).volume / (4 / 3 * math.pi * r ** 3) - 1) < 0.02


@pytest.mark.parametrize("kind,dims", [
    ("cylinder", (0.0, 0.1)), ("box", (0.1, -0.1, 0.1)), ("sphere", (0.1, 0.2)),
    ("teapot", (0.1,)), ("l_block", (0.1, 0.1, 0.1, 0.2)),
])
def test_bad_dims(kind, dims):
    with pytest.raises(BadDimsError):
        make_primitive(kind, dims)


@pytest.mark.parametrize("kind,dims", [
    ("box", (0.1, 0.04, 0.2)), ("cylinder", (0.03, 0.1)), ("sphere", (0.05,)),
    ("capsule", (0.03, 0.08)), ("l_block", (0.1, 0.08, 0.05, 0.03)),
])
def test_primitives_watertight_and_centered(kind, dims):
    m = make_primitive(kind, dims, tessellation=16)
    assert is_watertight(m)
    lo, hi = m.bounds
    np.testing.assert_allclose(0.5 * (lo + hi), 0.0, atol=1e-12)


def test_open_cube_detected():
    m = make_primitive("box", (1, 1, 1))
    open_cube = TriMesh.from_arrays(m.vertices, m.triangles[:-2])
    rep = watertight_report(open_cube)
    assert not rep.watertight and rep.boundary_edges == 4
    with pytest.raises(NotWatertightError):
        mass_properties(open_cube, 1000.0)


def test_flipped_face_is_closed_but_inconsistent():
    m = make_primitive("box", (1, 1, 1))
    tri = m.triangles.copy()
    tri[0] = tri[0][::-1]
    rep = watertight_report(TriMesh.from_arrays(m.vertices, tri))
    assert rep.closed and not rep.consistent_winding


def test_icosphere_edge_count():
    m = icosphere(0.05, 2)
    assert is_watertight(m)
    edges = {tuple(sorted(e)) for f in m.triangles for e in ((f[0], f[1]), (f[1], f[2]), (f[2], f[0]))}
    assert 2 * len(edges) == 3 * len(m)


def test_raycast_axis_aligned_face():
    m = make_primitive("box", (1, 1, 1))
    hit = raycast(m, Ray((0, 0, 1), (0, 0, -1)))
    assert hit.t == pytest.approx(0.5, abs=1e-12)
    assert hit.point[2] == pytest.approx(0.5, abs=1e-12)
    np.testing.assert_allclose(hit.normal, [0, 0, 1], atol=1e-12)
    assert raycast(m, Ray((2, 0, 1), (0, 0, -1))) is None


def test_ray_rejects_zero_direction():
    with pytest.raises(ValueError):
        Ray((0, 0, 0), (0, 0, 0))


def test_bvh_matches_brute_force_random_rays():
    m = make_primitive("capsule", (0.03, 0.05), tessellation=24)
    rng = np.random.default_rng(3)
    o = rng.uniform(-0.1, 0.1, (1000, 3))
    d = rng.uniform(-0.04, 0.04, (1000, 3)) - o
    t1, k1 = raycast_many(m, o, d)
    t2, k2 = raycast_brute_many(m, o, d)
    np.testing.assert_array_equal(k1, k2)
    np.testing.assert_array_equal(t1, t2)
    assert np.count_nonzero(k1 >= 0) > 100
    for i in range(0, 1000, 97):
        a, b = raycast(m, Ray(o[i], d[i])), raycast_brute(m, Ray(o[i], d[i]))
        assert (a is None) == (b is None)
        if a is not None:
            assert a.triangle_id == b.triangle_id


def test_cube_mass_and_com():
    mp = mass_properties(make_primitive("box", (0.1, 0.1, 0.1)), 1000.0)
    assert mp.mass == pytest.approx(1.0, rel=1e-12)
    np.testing.assert_allclose(mp.center_of_mass, 0.0, atol=1e-15)


def test_sphere_mass_within_two_percent():
    r = 0.03
    mp = mass_properties(make_primitive("sphere", (r,), 64), 500.0)
    assert abs(mp.mass / (500 * 4 / 3 * math.pi * r ** 3) - 1) < 0.02


def test_l_block_com_matches_decomposition():
    lx, ly, lz, th = 0.1, 0.08, 0.05, 0.03
    mp = mass_properties(make_primitive("l_block", (lx, ly, lz, th)), 1.0)
    # two boxes: the full-length bottom arm and the remaining upright arm
    a1, c1 = lx * th, np.array([lx / 2, th / 2])
    a2, c2 = th * (ly - th), np.array([th / 2, th + (ly - th) / 2])
    com = (a1 * c1 + a2 * c2) / (a1 + a2) - [lx / 2, ly / 2]
    np.testing.assert_allclose(mp.center_of_mass[:2], com, atol=1e-12)
    assert mp.volume == pytest.approx((a1 + a2) * lz, rel=1e-12)


angles = st.floats(-math.pi, math.pi)


@settings(max_examples=50, deadline=None)
@given(angles, angles, angles, st.tuples(*[st.floats(-1, 1)] * 3))
def test_pose_preserves_distances(a, b, c, t):
    rot = Pose.from_yaw(a).compose(Pose.from_matrix(
        np.array([[1, 0, 0], [0, math.cos(b), -math.sin(b)], [0, math.sin(b), math.cos(b)]]))).compose(Pose.from_yaw(c, t))
    pts = np.random.default_rng(0).normal(size=(6, 3))
    q = rot.apply(pts)
    d0 = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    d1 = np.linalg.norm(q[:, None] - q[None], axis=-1)
    np.testing.assert_allclose(d0, d1, atol=1e-9)
    np.testing.assert_allclose(rot.inverse().apply(q), pts, atol=1e-9)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.2, 5.0), st.integers(0, 1000))
def test_mass_properties_scaling(s, seed):
    m = make_primitive("l_block", (0.1, 0.08, 0.05, 0.03))
    shifted = m.transformed(Pose.from_yaw(0.3, (0.01, -0.02, 0.03)))
    base = mass_properties(shifted, 700.0)
    big = mass_properties(shifted.scaled(s), 700.0)
    assert big.volume == pytest.approx(base.volume * s ** 3, rel=1e-9)
    np.testing.assert_allclose(big.center_of_mass, base.center_of_mass * s, rtol=1e-9, atol=1e-15)
    perm = np.random.default_rng(seed).permutation(len(m.vertices))
    inv = np.argsort(perm)
    permuted = TriMesh.from_arrays(shifted.vertices[perm], inv[shifted.triangles])
    assert is_watertight(permuted) and is_watertight(shifted.scaled(s))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000))
def test_bvh_brute_equivalence_property(seed):
    rng = np.random.default_rng(seed)
    m = make_primitive("cylinder", (0.04, 0.1), tessellation=12)
    o = rng.uniform(-0.2, 0.2, (50, 3))
    d = rng.normal(size=(50, 3))
    t1, k1 = raycast_many(m, o, d)
    t2, k2 = raycast_brute_many(m, o, d)
    np.testing.assert_array_equal(k1, k2)
    np.testing.assert_array_equal(t1, t2)
