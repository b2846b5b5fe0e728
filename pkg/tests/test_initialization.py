import numpy as np
import pytest
from scipy import stats

from cuboidfit.geometry import Camera, Cuboid, rotation_angle, so3_exp
from cuboidfit.initialization import init_from_cameras, init_random, vp_refine_init
from cuboidfit.metrics import rotation_error
from cuboidfit.scene import Frame, Scene

from scenes import axis_lines, random_scene


def _upright(center, yaw, pitch=0.0):
    """Camera at ``center`` with y pointing down (world -z) before pitching."""
    target = np.asarray(center) + np.array([np.cos(yaw), np.sin(yaw), np.tan(pitch)])
    return Camera.look_at(np.asarray(center, float), target, np.array([0, 0, 1.0]), 50, 50, 31.5, 23.5, 64, 48)


def _contained(cub, cams, margin):
    centers = np.array([c.center for c in cams])
    u = cub.to_local(centers)
    return np.all(u - cub.lo >= margin - 1e-9) and np.all(cub.hi - u >= margin - 1e-9)


def test_level_cameras_give_world_up():
    cams = [_upright(np.random.default_rng(i).normal(size=3), yaw) for i, yaw in enumerate((0.0, 1.0, 2.5))]
    for c in cams:
        np.testing.assert_allclose(c.R[1], [0, 0, -1], atol=1e-12)
    cub = init_from_cameras(cams, rng=np.random.default_rng(0))
    np.testing.assert_allclose(cub.R[2], [0, 0, 1], atol=1e-12)


def test_single_camera_gives_five_meter_box():
    cam = _upright(np.zeros(3), 0.3)
    cub = init_from_cameras([cam], 2.5, np.random.default_rng(1))
    np.testing.assert_allclose(cub.extents, [5.0, 5.0, 5.0], atol=1e-12)
    np.testing.assert_allclose(cub.center, np.zeros(3), atol=1e-12)


@pytest.mark.parametrize("seed", range(10))
def test_initializers_contain_cameras(seed):
    rng = np.random.default_rng(seed)
    cams = [_upright(rng.normal(size=3), rng.uniform(0, 6), rng.uniform(-0.4, 0.4)) for _ in range(4)]
    for init in (init_from_cameras, init_random):
        cub = init(cams, 2.5, np.random.default_rng(seed))
        assert _contained(cub, cams, 2.5)
        np.testing.assert_allclose(cub.R @ cub.R.T, np.eye(3), atol=1e-12)


def test_degenerate_mean_falls_back_to_world_z():
    a = _upright(np.zeros(3), 0.0)
    flipped = Camera(np.diag([1.0, -1.0, -1.0]) @ a.R, np.zeros(3), 50, 50, 31.5, 23.5, 64, 48)
    np.testing.assert_allclose(flipped.R[1], -a.R[1])
    cub = init_from_cameras([a, flipped], rng=np.random.default_rng(0))
    np.testing.assert_allclose(cub.R[2], [0, 0, 1], atol=1e-12)


def test_equivariance_under_world_rotation():
    rng = np.random.default_rng(5)
    cams = [_upright(rng.normal(size=3), rng.uniform(0, 6), rng.uniform(-0.3, 0.3)) for _ in range(3)]
    Q = so3_exp(np.array([0.3, -0.2, 0.5]))
    # Rotating the world by Q maps a camera (R, t) to (R Q^T, t).
    moved = [Camera(c.R @ Q.T, c.t, c.fx, c.fy, c.cx, c.cy, c.width, c.height) for c in cams]
    a = init_from_cameras(cams, rng=np.random.default_rng(7))
    b = init_from_cameras(moved, rng=np.random.default_rng(7))
    np.testing.assert_allclose(b.R[2], Q @ a.R[2], atol=1e-12)


def test_random_rotation_angles_follow_haar_density():
    cams = [_upright(np.zeros(3), 0.0)]
    angles = np.array([rotation_angle(init_random(cams, 2.5, np.random.default_rng(s)).R) for s in range(100_000)])
    cdf = lambda t: (t - np.sin(t)) / np.pi  # noqa: E731  density (1 - cos t) / pi on [0, pi]
    assert stats.kstest(angles, cdf).pvalue > 0.01


def _line_scene(cub, cams, seed):
    rng = np.random.default_rng(seed)
    frames = []
    for f in cams:
        frames.append(Frame(f.camera, f.pyramid, axis_lines(cub, f.camera, rng, n=20)))
    return Scene(frames)


@pytest.mark.parametrize("seed", range(5))
def test_vp_refine_recovers_rotation(seed):
    cub, scene = random_scene(seed, lines=False, edges=False)
    s = _line_scene(cub, scene.frames, seed)
    axis = np.random.default_rng(seed).normal(size=3)
    R0 = so3_exp(axis / np.linalg.norm(axis) * np.deg2rad(10)) @ cub.R
    start = Cuboid(R0, cub.d)
    out = vp_refine_init(start, s)
    assert rotation_error(out, cub) < 1.0
    assert _contained(out, s.cameras, 2.5)


def test_vp_refine_without_lines_only_refits_offsets():
    cub, scene = random_scene(3, lines=False, edges=False)
    start = Cuboid(so3_exp(np.array([0.1, 0.0, 0.0])) @ cub.R, cub.d)
    out = vp_refine_init(start, scene, margin=2.5)
    np.testing.assert_array_equal(out.R, start.R)
    assert _contained(out, scene.cameras, 2.5)
    u = out.to_local(np.array([c.center for c in scene.cameras]))
    np.testing.assert_allclose(out.lo, u.min(axis=0) - 2.5, atol=1e-12)
    np.testing.assert_allclose(out.hi, u.max(axis=0) + 2.5, atol=1e-12)
