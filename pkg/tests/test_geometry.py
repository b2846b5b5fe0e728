import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from oracles import ray_march

from cuboidfit.geometry import (
    Camera,
    Cuboid,
    CuboidTangent,
    GeometryError,
    camera_centers,
    cube_symmetries,
    edge_points_with_jacobian,
    expand_to_contain,
    project,
    random_rotation,
    raycast_cuboid,
    retract,
    sample_edge_points,
    so3_exp,
    vanishing_points,
    warp,
    warp_jacobian,
    warp_many,
)

BOX = (-2, 2, -2, 2, -2, 2)


def cam_at(center, R=np.eye(3), f=100.0, c=50.0, size=101):
    R = np.asarray(R, dtype=float)
    return Camera(R, -R @ np.asarray(center, dtype=float), f, f, c, c, size, size)


def random_config(rng, small_rotation=False):
    R = so3_exp(rng.normal(scale=0.3, size=3)) if small_rotation else random_rotation(rng)
    ext = rng.uniform(2.0, 5.0, 3)
    lo = rng.uniform(-1.0, 1.0, 3) - ext / 2
    d = np.empty(6)
    d[0::2] = lo
    d[1::2] = lo + ext
    cub = Cuboid(R, d)
    cams = []
    for _ in range(2):
        u = lo + ext * rng.uniform(0.25, 0.75, 3)
        center = cub.to_world(u)
        Rc = random_rotation(rng)
        cams.append(Camera(Rc, -Rc @ center, 80.0, 80.0, 60.0, 45.0, 120, 90))
    return cub, cams


def test_project_examples():
    cam = cam_at((0, 0, 0))
    assert np.allclose(project(cam, (0, 0, 1)), (50, 50))
    assert np.allclose(project(cam, (0.5, 0, 1)), (100, 50))
    assert project(cam, (0, 0, -1)) is None


def test_raycast_examples():
    cub = Cuboid(np.eye(3), BOX)
    hit = raycast_cuboid(cub, np.zeros(3), np.array([0, 0, 1.0]))
    assert np.allclose(hit.point, (0, 0, 2)) and hit.face == 5 and hit.depth == pytest.approx(2)
    hit = raycast_cuboid(cub, np.array([1.0, 0, 0]), np.array([1.0, 0, 0]))
    assert np.allclose(hit.point, (2, 0, 0)) and hit.depth == pytest.approx(1)
    assert raycast_cuboid(cub, np.array([5.0, 0, 0]), np.array([1.0, 0, 0])) is None


def test_raycast_matches_ray_march():
    rng = np.random.default_rng(0)
    cub = Cuboid(random_rotation(rng), (-1, 0.7, -0.5, 0.9, -0.8, 0.6))
    n = 1000
    origins = cub.to_world(rng.uniform(cub.lo + 0.05, cub.hi - 0.05, size=(n, 3)))
    dirs = rng.normal(size=(n, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    expected = cub.to_world(ray_march(cub.lo, cub.hi, cub.to_local(origins), cub.to_local(dirs)))
    for o, v, X in zip(origins, dirs, expected):
        hit = raycast_cuboid(cub, o, v)
        assert hit.depth > 0
        assert np.linalg.norm(hit.point - X) < 1e-5
        # Hit lies on its plane and within the face rectangle.
        u = cub.to_local(hit.point)
        assert abs(u[hit.face // 2] - cub.d[hit.face]) < 1e-7
        assert np.all(u >= cub.lo - 1e-7) and np.all(u <= cub.hi + 1e-7)


def test_warp_identity_and_hand_example():
    cub = Cuboid(np.eye(3), BOX)
    cam_i = cam_at((0, 0, 0))
    assert np.allclose(warp(cub, cam_i, cam_i, (37.3, 61.2)), (37.3, 61.2), atol=1e-7)
    cam_j = cam_at((-0.5, 0, 0))
    assert np.allclose(warp(cub, cam_i, cam_j, (50, 50)), (75, 50))
    # Pixel whose surface point falls outside image j.
    assert warp(cub, cam_i, cam_at((-1.9, 0, 0), size=60), (95, 50)) is None


def test_warp_composition():
    rng = np.random.default_rng(1)
    for _ in range(20):
        cub, (ci, cj) = random_config(rng)
        ck = cam_at(cub.center + rng.normal(scale=0.1, size=3), R=ci.R, f=80)
        ck = Camera(ck.R, ck.t, 80, 80, 60, 45, 120, 90)
        x = rng.uniform((0, 0), (119, 89), size=(200, 2))
        ij = warp_many(cub, ci, cj, x)
        ok = ij.valid
        jk = warp_many(cub, cj, ck, ij.pixels[ok])
        ik = warp_many(cub, ci, ck, x[ok])
        both = jk.valid & ik.valid
        assert np.abs(jk.pixels[both] - ik.pixels[both]).max(initial=0) < 1e-5


def finite_diff_warp(cub, ci, cj, x, h=1e-5):
    J = np.zeros((2, 9))
    for k in range(9):
        e = np.zeros(9)
        e[k] = h
        wp = warp_many(retract(cub, e), ci, cj, np.asarray(x)[None], check_bounds=False)
        wm = warp_many(retract(cub, -e), ci, cj, np.asarray(x)[None], check_bounds=False)
        J[:, k] = (wp.pixels[0] - wm.pixels[0]) / (2 * h)
    return J


def test_warp_jacobian_finite_differences():
    rng = np.random.default_rng(2)
    checked = 0
    while checked < 100:
        cub, (ci, cj) = random_config(rng)
        x = rng.uniform((0, 0), (119, 89))
        wr = warp_many(cub, ci, cj, x[None], check_bounds=False)
        if not wr.valid[0] or wr.cam_points[0, 2] < 0.2:
            continue
        J = warp_jacobian(cub, ci, cj, x)
        Jfd = finite_diff_warp(cub, ci, cj, x)
        assert np.abs(J - Jfd).max() <= 1e-4 * max(1.0, np.abs(Jfd).max())
        # Only the hit face's offset enters.
        face = int(wr.faces[0])
        others = [3 + f for f in range(6) if f != face]
        assert np.all(J[:, others] == 0)
        checked += 1


def test_warp_jacobian_identical_cameras_is_zero():
    cub, (ci, _) = random_config(np.random.default_rng(3))
    assert np.abs(warp_jacobian(cub, ci, ci, (60.0, 45.0))).max() < 1e-9


def test_retract_examples_and_inverse():
    cub = Cuboid(np.eye(3), BOX)
    same = retract(cub, CuboidTangent())
    assert np.array_equal(same.R, cub.R) and np.array_equal(same.d, cub.d)
    rz = retract(cub, CuboidTangent(np.array([0, 0, np.pi / 2]), np.zeros(6)))
    assert np.allclose(rz.R, [[0, -1, 0], [1, 0, 0], [0, 0, 1]], atol=1e-12)
    grown = retract(cub, CuboidTangent(np.zeros(3), np.array([-0.1, 0.1, 0, 0, 0, 0])))
    assert np.allclose(grown.d, (-2.1, 2.1, -2, 2, -2, 2))
    with pytest.raises(GeometryError):
        retract(cub, CuboidTangent(np.zeros(3), np.array([4.5, 0, 0, 0, 0, 0])))


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-0.5, 0.5), min_size=9, max_size=9), st.integers(0, 2**31))
def test_retract_round_trip(step, seed):
    cub = Cuboid(random_rotation(np.random.default_rng(seed)), BOX)
    delta = CuboidTangent.from_vector(step)
    back = retract(retract(cub, delta), -delta)
    assert np.abs(back.R - cub.R).max() < 1e-9
    assert np.abs(back.d - cub.d).max() < 1e-9


def test_vanishing_points():
    cub = Cuboid(np.eye(3), BOX)
    cam = cam_at((0, 0, 0))
    assert np.allclose(vanishing_points(cub, cam), np.eye(3))
    Rz = so3_exp(np.array([0, 0, np.pi / 2]))
    V = vanishing_points(Cuboid(Rz, BOX), cam)
    assert sorted(map(tuple, np.round(V, 12))) == sorted(map(tuple, np.eye(3)))


def test_vanishing_points_two_point_oracle():
    rng = np.random.default_rng(4)
    for _ in range(100):
        cub = Cuboid(random_rotation(rng), BOX)
        Rc = random_rotation(rng)
        cam = Camera(Rc, rng.normal(size=3), 100, 100, 50, 50, 101, 101)
        V = vanishing_points(cub, cam)
        for a in range(3):
            axis = cub.R[a]
            base = rng.normal(size=3)
            # Points far along the axis project toward the vanishing point.
            pts = [cam.R @ (base + s * axis) + cam.t for s in (1e6, 2e6)]
            for p in pts:
                pn = p / np.linalg.norm(p)
                assert min(np.linalg.norm(pn - V[a]), np.linalg.norm(pn + V[a])) < 1e-5


def test_expand_to_contain():
    cub = Cuboid(np.eye(3), BOX)
    inside = [cam_at((0, 0, 0)), cam_at((1, 1, 1))]
    assert expand_to_contain(cub, inside, 0.1) is cub
    grown = expand_to_contain(cub, [cam_at((1.95, 0, 0))], 0.1)
    assert grown.d[1] == pytest.approx(2.05)
    assert np.array_equal(grown.d[[0, 2, 3, 4, 5]], cub.d[[0, 2, 3, 4, 5]])


def test_expand_to_contain_property():
    rng = np.random.default_rng(5)
    for _ in range(100):
        cub = Cuboid(random_rotation(rng), BOX)
        cams = [cam_at(rng.normal(scale=3, size=3)) for _ in range(4)]
        out = expand_to_contain(cub, cams, 0.1)
        u = out.to_local(camera_centers(cams))
        assert np.all(u - out.lo >= 0.1 - 1e-12) and np.all(out.hi - u >= 0.1 - 1e-12)
        assert np.all(out.lo <= cub.lo) and np.all(out.hi >= cub.hi)


def test_sample_edge_points():
    cub = Cuboid(np.eye(3), (0, 1, 0, 1, 0, 1))
    mids = sample_edge_points(cub, 1)
    assert mids.shape == (12, 3)
    assert sorted(map(tuple, mids)) == sorted(
        {(0.5, b, c) for b in (0, 1) for c in (0, 1)}
        | {(b, 0.5, c) for b in (0, 1) for c in (0, 1)}
        | {(b, c, 0.5) for b in (0, 1) for c in (0, 1)}
    )
    pts = sample_edge_points(cub, 2)
    assert pts.shape == (24, 3)
    assert set(np.unique(pts)) <= {0.0, 0.25, 0.75, 1.0}
    rot = Cuboid(random_rotation(np.random.default_rng(6)), BOX)
    u = rot.to_local(sample_edge_points(rot, 5))
    on_planes = (np.abs(u - rot.lo) < 1e-9) | (np.abs(u - rot.hi) < 1e-9)
    assert np.all(on_planes.sum(axis=1) == 2)


def test_edge_point_jacobian():
    rng = np.random.default_rng(7)
    cub = Cuboid(random_rotation(rng), (-1, 2, -1.5, 1, -0.5, 2.5))
    X, J = edge_points_with_jacobian(cub, 3)
    h = 1e-6
    for k in range(9):
        e = np.zeros(9)
        e[k] = h
        fd = (sample_edge_points(retract(cub, e), 3) - sample_edge_points(retract(cub, -e), 3)) / (2 * h)
        assert np.abs(fd - J[:, :, k]).max() < 1e-6


def test_parameterization_symmetry_gives_identical_warps():
    rng = np.random.default_rng(8)
    cub, (ci, cj) = random_config(rng)
    x = rng.uniform((0, 0), (119, 89), size=(100, 2))
    base = warp_many(cub, ci, cj, x)
    for S in cube_symmetries():
        other = warp_many(cub.permuted(S), ci, cj, x)
        assert np.array_equal(other.valid, base.valid)
        assert np.abs(other.pixels[base.valid] - base.pixels[base.valid]).max(initial=0) < 1e-9
