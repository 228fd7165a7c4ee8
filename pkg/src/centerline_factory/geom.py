"""Rigid transforms, pose interpolation and pinhole projection.

Frames
------
city
    Map frame the vector map is expressed in.
ego
    Vehicle frame, x forward, y left, z up, origin on the ground below the
    rear axle. ``ego_pose`` maps ego coordinates into the city frame.
camera
    Optical frame, x right, y down, z forward. ``CameraModel.extrinsic`` maps
    camera coordinates into the ego frame, so it carries the axis remap from
    the optical convention to the vehicle convention.

Quaternions are stored scalar-first ``(w, x, y, z)``.
"""
from __future__ import annotations

import bisect
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import CenterlineError, EmptyTrajectory, OutOfRange

MIN_DEPTH = 0.1

_NORM_TOL = 1e-12


def quat_multiply(a, b):
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return (
        aw * bw - ax * bx - ay * by - az * bz,
        aw * bx + ax * bw + ay * bz - az * by,
        aw * by - ax * bz + ay * bw + az * bx,
        aw * bz + ax * by - ay * bx + az * bw,
    )


def quat_to_matrix(q) -> np.ndarray:
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def quat_from_matrix(R) -> tuple:
    """Shepperd's method; returns a unit quaternion with w >= 0."""
    R = np.asarray(R, dtype=float)
    tr = R[0, 0] + R[1, 1] + R[2, 2]
    if tr > 0:
        s = 2.0 * math.sqrt(tr + 1.0)
        q = (0.25 * s, (R[2, 1] - R[1, 2]) / s, (R[0, 2] - R[2, 0]) / s, (R[1, 0] - R[0, 1]) / s)
    elif R[0, 0] > R[1, 1] and R[0, 0] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[0, 0] - R[1, 1] - R[2, 2])
        q = ((R[2, 1] - R[1, 2]) / s, 0.25 * s, (R[0, 1] + R[1, 0]) / s, (R[0, 2] + R[2, 0]) / s)
    elif R[1, 1] > R[2, 2]:
        s = 2.0 * math.sqrt(1.0 + R[1, 1] - R[0, 0] - R[2, 2])
        q = ((R[0, 2] - R[2, 0]) / s, (R[0, 1] + R[1, 0]) / s, 0.25 * s, (R[1, 2] + R[2, 1]) / s)
    else:
        s = 2.0 * math.sqrt(1.0 + R[2, 2] - R[0, 0] - R[1, 1])
        q = ((R[1, 0] - R[0, 1]) / s, (R[0, 2] + R[2, 0]) / s, (R[1, 2] + R[2, 1]) / s, 0.25 * s)
    if q[0] < 0:
        q = tuple(-c for c in q)
    return tuple(float(c) for c in q)


def quat_from_axis_angle(axis, angle) -> tuple:
    axis = np.asarray(axis, dtype=float)
    axis = axis / np.linalg.norm(axis)
    s = math.sin(angle / 2.0)
    return (math.cos(angle / 2.0), *(float(c) * s for c in axis))


def slerp(q0, q1, s: float) -> tuple:
    """Shortest-arc spherical interpolation between unit quaternions."""
    q0 = np.asarray(q0, dtype=float)
    q1 = np.asarray(q1, dtype=float)
    dot = float(q0 @ q1)
    if dot < 0.0:
        q1 = -q1
        dot = -dot
    if dot > 1.0 - 1e-12:
        # nearly parallel: lerp is exact to rounding
        q = q0 + s * (q1 - q0)
    else:
        theta = math.acos(min(dot, 1.0))
        sin_theta = math.sin(theta)
        q = (math.sin((1.0 - s) * theta) * q0 + math.sin(s * theta) * q1) / sin_theta
    q = q / np.linalg.norm(q)
    return tuple(float(c) for c in q)


@dataclass(frozen=True)
class Pose:
    """Rigid transform ``x -> R x + t`` with an optional timestamp in ns."""

    rotation: tuple = (1.0, 0.0, 0.0, 0.0)
    translation: tuple = (0.0, 0.0, 0.0)
    timestamp: Optional[int] = None

    def __post_init__(self):
        q = tuple(float(c) for c in self.rotation)
        t = tuple(float(c) for c in self.translation)
        if len(q) != 4 or len(t) != 3:
            raise CenterlineError("pose needs a 4-component quaternion and a 3-vector")
        if not all(math.isfinite(c) for c in q + t):
            raise CenterlineError("pose components must be finite")
        n = math.sqrt(sum(c * c for c in q))
        if n == 0.0:
            raise CenterlineError("zero quaternion")
        # already-unit quaternions are kept bit-exact so parse/serialize is a fixpoint
        if abs(n - 1.0) > _NORM_TOL:
            q = tuple(c / n for c in q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)
        if self.timestamp is not None:
            object.__setattr__(self, "timestamp", int(self.timestamp))

    @classmethod
    def from_matrix(cls, R, t=(0.0, 0.0, 0.0), timestamp=None) -> "Pose":
        return cls(quat_from_matrix(R), tuple(np.asarray(t, dtype=float)), timestamp)

    @property
    def R(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    @property
    def t(self) -> np.ndarray:
        return np.array(self.translation)

    def as_matrix(self) -> np.ndarray:
        T = np.eye(4)
        T[:3, :3] = self.R
        T[:3, 3] = self.translation
        return T

    def apply(self, points) -> np.ndarray:
        """Transform a 3-vector or an (N, 3) array."""
        p = np.asarray(points, dtype=float)
        return p @ self.R.T + self.t

    def inverse(self) -> "Pose":
        w, x, y, z = self.rotation
        q_inv = (w, -x, -y, -z)
        t_inv = -(quat_to_matrix(q_inv) @ self.t)
        return Pose(q_inv, tuple(t_inv), self.timestamp)

    def compose(self, other: "Pose") -> "Pose":
        """``self ∘ other``: apply ``other`` first."""
        q = quat_multiply(self.rotation, other.rotation)
        t = self.R @ other.t + self.t
        return Pose(q, tuple(t), self.timestamp)

    def rotation_angle(self) -> float:
        # atan2 form stays accurate near the identity, where acos(w) does not
        w, x, y, z = self.rotation
        return 2.0 * math.atan2(math.sqrt(x * x + y * y + z * z), abs(w))


@dataclass(frozen=True)
class Trajectory:
    poses: tuple = field(default_factory=tuple)

    def __post_init__(self):
        poses = tuple(self.poses)
        if not poses:
            raise EmptyTrajectory("trajectory has no poses")
        ts = [p.timestamp for p in poses]
        if any(t is None for t in ts):
            raise CenterlineError("trajectory poses need timestamps")
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise CenterlineError("trajectory timestamps must be strictly increasing")
        object.__setattr__(self, "poses", poses)

    @property
    def timestamps(self) -> list:
        return [p.timestamp for p in self.poses]

    @property
    def span(self) -> tuple:
        return self.poses[0].timestamp, self.poses[-1].timestamp

    def __len__(self):
        return len(self.poses)


def interpolate_pose(traj: Trajectory, t) -> Pose:
    """Pose at time ``t`` (ns): linear in translation, slerp in rotation."""
    if traj is None or len(traj.poses) == 0:
        raise EmptyTrajectory("trajectory has no poses")
    first, last = traj.span
    if not first <= t <= last:
        raise OutOfRange(f"t={t} outside trajectory span [{first}, {last}]")
    ts = traj.timestamps
    i = bisect.bisect_left(ts, t)
    if i < len(ts) and ts[i] == t:
        return traj.poses[i]
    a, b = traj.poses[i - 1], traj.poses[i]
    s = (t - a.timestamp) / (b.timestamp - a.timestamp)
    trans = tuple((1.0 - s) * np.asarray(a.translation) + s * np.asarray(b.translation))
    rot = slerp(a.rotation, b.rotation, s)
    stamp = int(t) if float(t).is_integer() else None
    return Pose(rot, trans, stamp)


@dataclass(frozen=True)
class CameraModel:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    extrinsic: Pose = field(default_factory=Pose)
    name: str = "camera"

    def __post_init__(self):
        for attr in ("fx", "fy", "cx", "cy"):
            v = float(getattr(self, attr))
            if not math.isfinite(v):
                raise CenterlineError(f"{attr} must be finite")
            object.__setattr__(self, attr, v)
        if self.fx <= 0 or self.fy <= 0:
            raise CenterlineError("focal lengths must be positive")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise CenterlineError("image dimensions must be positive")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise CenterlineError("principal point must lie inside the image")

    @property
    def K(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])


def city_to_camera(p_city, ego_pose: Pose, cam: CameraModel) -> np.ndarray:
    """Map city-frame point(s) into the camera optical frame."""
    world_to_cam = cam.extrinsic.inverse().compose(ego_pose.inverse())
    return world_to_cam.apply(p_city)


def camera_to_city(p_cam, ego_pose: Pose, cam: CameraModel) -> np.ndarray:
    return ego_pose.compose(cam.extrinsic).apply(p_cam)


def project_points(cam: CameraModel, p_cam, min_depth: float = MIN_DEPTH):
    """Vectorised pinhole projection.

    Returns ``(uv, depth, visible)`` for an (N, 3) array. ``uv`` is only
    meaningful where ``visible`` is set.
    """
    p = np.atleast_2d(np.asarray(p_cam, dtype=float))
    z = p[:, 2]
    in_front = z > min_depth
    safe_z = np.where(in_front, z, 1.0)
    u = cam.fx * p[:, 0] / safe_z + cam.cx
    v = cam.fy * p[:, 1] / safe_z + cam.cy
    visible = in_front & (u >= 0) & (u < cam.width) & (v >= 0) & (v < cam.height)
    return np.stack([u, v], axis=1), z.copy(), visible


def project(cam: CameraModel, p_cam, min_depth: float = MIN_DEPTH):
    """Project one camera-frame point. ``None`` when it is not visible."""
    x, y, z = (float(c) for c in p_cam)
    if not z > min_depth:
        return None
    u = cam.fx * x / z + cam.cx
    v = cam.fy * y / z + cam.cy
    if not (0 <= u < cam.width and 0 <= v < cam.height):
        return None
    return u, v, z


def unproject(cam: CameraModel, u, v, depth) -> np.ndarray:
    u, v, depth = np.asarray(u, float), np.asarray(v, float), np.asarray(depth, float)
    x = (u - cam.cx) / cam.fx * depth
    y = (v - cam.cy) / cam.fy * depth
    return np.stack([x, y, depth], axis=-1)


def ego_to_bev(p_ego) -> np.ndarray:
    """Ego (x fwd, y left, z up) to BEV (x lateral right, y forward, z up)."""
    p = np.asarray(p_ego, dtype=float)
    return np.stack([-p[..., 1], p[..., 0], p[..., 2]], axis=-1)


def bev_to_ego(p_bev) -> np.ndarray:
    p = np.asarray(p_bev, dtype=float)
    return np.stack([p[..., 1], -p[..., 0], p[..., 2]], axis=-1)


# camera optical axes expressed in the ego frame: x_cam -> -y_ego, y_cam -> -z_ego, z_cam -> x_ego
OPTICAL_TO_EGO = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def forward_camera_extrinsic(height: float, yaw: float = 0.0, pitch: float = 0.0,
                             offset: Sequence[float] = (0.0, 0.0)) -> Pose:
    """Extrinsic for a camera mounted at ``height`` looking along ego +x,
    rotated by ``yaw`` (left positive) and ``pitch`` (down positive)."""
    Rz = quat_to_matrix(quat_from_axis_angle((0, 0, 1), yaw))
    Ry = quat_to_matrix(quat_from_axis_angle((0, 1, 0), pitch))
    R = Rz @ Ry @ OPTICAL_TO_EGO
    return Pose.from_matrix(R, (offset[0], offset[1], height))
