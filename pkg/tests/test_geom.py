import math

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st
from scipy.spatial.transform import Rotation, Slerp

from centerline_factory.errors import EmptyTrajectory, OutOfRange
from centerline_factory.geom import (CameraModel, Pose, Trajectory, camera_to_city, city_to_camera,
                                     forward_camera_extrinsic, interpolate_pose, project, project_points,
                                     quat_from_axis_angle, slerp, unproject)

IDENTITY = Pose()
CAM = CameraModel(1000.0, 1000.0, 512.0, 288.0, 1024, 576)

unit = st.floats(-1, 1, allow_nan=False)
coord = st.floats(-50, 50, allow_nan=False)


@st.composite
def poses(draw):
    q = np.array([draw(unit) for _ in range(4)])
    if np.linalg.norm(q) < 1e-3:
        q = np.array([1.0, 0, 0, 0])
    return Pose(tuple(q / np.linalg.norm(q)), tuple(draw(coord) for _ in range(3)))


def test_quaternion_normalized_on_construction():
    p = Pose((2.0, 0.0, 0.0, 0.0))
    assert abs(np.linalg.norm(p.rotation) - 1) < 1e-9


@given(poses())
def test_compose_with_inverse_is_identity(p):
    e = p.compose(p.inverse())
    assert e.rotation_angle() < 1e-9
    assert np.linalg.norm(e.t) < 1e-9


def test_interpolate_exact_sample():
    a = Pose(quat_from_axis_angle((0, 0, 1), 0.3), (1, 2, 3), 10)
    b = Pose(quat_from_axis_angle((0, 0, 1), 0.9), (4, 5, 6), 20)
    assert interpolate_pose(Trajectory((a, b)), 20) == b
    assert interpolate_pose(Trajectory((a, b)), 10) == a


def test_interpolate_translation_midpoint():
    traj = Trajectory((Pose(translation=(0, 0, 0), timestamp=0), Pose(translation=(2, 0, 0), timestamp=100)))
    np.testing.assert_allclose(interpolate_pose(traj, 50).t, [1, 0, 0], atol=1e-15)


def test_interpolate_rotation_midpoint_matches_scipy_slerp():
    q1 = quat_from_axis_angle((0, 0, 1), math.pi / 2)
    traj = Trajectory((Pose(timestamp=0), Pose(q1, timestamp=100)))
    mid = interpolate_pose(traj, 50)
    oracle = Slerp([0, 1], Rotation.from_euler("z", [0, 90], degrees=True))([0.5])
    np.testing.assert_allclose(mid.R, oracle.as_matrix()[0], atol=1e-12)
    assert abs(mid.rotation_angle() - math.pi / 4) < 1e-12


@settings(max_examples=200)
@given(poses(), poses(), st.floats(0, 1))
def test_slerp_matches_scipy(a, b, s):
    # a half-turn apart has two geodesics; either is correct
    assume(abs(float(np.dot(a.rotation, b.rotation))) > 1e-6)
    got = Pose(slerp(a.rotation, b.rotation, s)).R
    ref = Slerp([0, 1], Rotation.from_quat([np.roll(a.rotation, -1), np.roll(b.rotation, -1)]))([s])
    np.testing.assert_allclose(got, ref.as_matrix()[0], atol=1e-9)


def test_interpolate_out_of_range_and_empty():
    traj = Trajectory((Pose(timestamp=0), Pose(timestamp=10)))
    with pytest.raises(OutOfRange):
        interpolate_pose(traj, 11)
    with pytest.raises(OutOfRange):
        interpolate_pose(traj, -1)
    with pytest.raises(EmptyTrajectory):
        Trajectory(())


def test_timestamps_must_increase():
    with pytest.raises(ValueError):
        Trajectory((Pose(timestamp=5), Pose(timestamp=5)))


@settings(max_examples=50)
@given(poses(), poses(), st.integers(1, 10**9 - 2))
def test_interpolation_is_continuous(a, b, t):
    traj = Trajectory((Pose(a.rotation, a.translation, 0), Pose(b.rotation, b.translation, 10**9)))
    p0, p1 = interpolate_pose(traj, t), interpolate_pose(traj, t + 1)  # 1 ns apart
    assert np.linalg.norm(p0.t - p1.t) < 1e-6
    assert p0.inverse().compose(p1).rotation_angle() < 1e-6


def test_city_to_camera_identity():
    p = np.array([1.0, -2.0, 3.0])
    np.testing.assert_array_equal(city_to_camera(p, IDENTITY, CameraModel(1, 1, 0, 0, 2, 2)), p)


def test_city_to_camera_forward_camera_example():
    # camera looks along ego +x, so a point 5 m above the ego origin sits 5 m up in camera y (down is +)
    cam = CameraModel(1, 1, 0, 0, 2, 2, forward_camera_extrinsic(0.0))
    got = city_to_camera((10, 0, 5), Pose(translation=(10, 0, 0)), cam)
    # matrix oracle: inverse ego then inverse extrinsic
    T_ego = np.eye(4); T_ego[:3, 3] = (10, 0, 0)
    T = np.linalg.inv(cam.extrinsic.as_matrix()) @ np.linalg.inv(T_ego)
    np.testing.assert_allclose(got, (T @ [10, 0, 5, 1])[:3], atol=1e-12)
    np.testing.assert_allclose(got, [0, -5, 0], atol=1e-12)


def test_city_to_camera_identity_extrinsic_example():
    got = city_to_camera((10, 0, 5), Pose(translation=(10, 0, 0)), CameraModel(1, 1, 0, 0, 2, 2))
    np.testing.assert_allclose(got, [0, 0, 5], atol=1e-12)


@given(poses(), poses(), st.tuples(coord, coord, coord))
def test_city_camera_round_trip(ego, ext, p):
    cam = CameraModel(1000, 1000, 512, 288, 1024, 576, ext)
    back = camera_to_city(city_to_camera(p, ego, cam), ego, cam)
    np.testing.assert_allclose(back, p, atol=1e-9)


def test_project_examples():
    assert project(CAM, (0, 0, 7.5)) == (512.0, 288.0, 7.5)
    assert project(CAM, (0, 0, -1)) is None
    assert project(CAM, (1, 0.5, 10)) == (612.0, 338.0, 10.0)
    assert project(CAM, (0, 0, 0.1)) is None        # at min depth
    assert project(CAM, (100, 0, 10)) is None       # off the image


def test_camera_model_validation():
    for bad in [dict(fx=0), dict(fy=-1), dict(cx=1024), dict(cy=-0.5)]:
        kw = dict(fx=1000, fy=1000, cx=512, cy=288, width=1024, height=576) | bad
        with pytest.raises(ValueError):
            CameraModel(**kw)


@settings(max_examples=200)
@given(st.floats(-0.5, 0.5), st.floats(-0.28, 0.28), st.floats(0.2, 200), st.floats(0.01, 100))
def test_project_scale_covariant(a, b, z, lam):
    p = np.array([a * z, b * z, z])
    r1, r2 = project(CAM, p), project(CAM, lam * p)
    if r1 is None or r2 is None:
        return
    assert abs(r1[0] - r2[0]) < 1e-9 and abs(r1[1] - r2[1]) < 1e-9
    assert abs(r2[2] - lam * r1[2]) < 1e-9 * max(1, r2[2])


def test_unproject_round_trip_vectorized():
    rng = np.random.default_rng(0)
    z = rng.uniform(0.2, 150, 10_000)
    p = np.stack([rng.uniform(-0.5, 0.5, z.size) * z, rng.uniform(-0.28, 0.28, z.size) * z, z], 1)
    uv, depth, vis = project_points(CAM, p)
    assert vis.all()
    back = unproject(CAM, uv[:, 0], uv[:, 1], depth)
    assert np.abs(back - p).max() < 1e-9
