"""Procedural scenes with analytically known labels.

A scene is a bundle of parallel lanes (straight, or concentric arcs of
constant curvature) driven by a vehicle with a forward camera. The expected
labels are computed here from the closed-form lane geometry with their own
projection, filtering and counting code, so the label pipeline can be
checked against them end to end.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import numpy as np

from .errors import InvalidSpec
from .geom import CameraModel, Pose, Trajectory
from .ingest import LaneSegment, SemanticMask, VectorMap, serialize_calibration, serialize_map, \
    serialize_mask, serialize_trajectory
from .labelgen import CenterlineLabel, FilterParams
from .occlusion import Category, OcclusionOntology, default_ontology
from .pipeline import FrameLabels, FrameTask, write_label

ROAD_CLASS = 13
SKY_CLASS = 27

# name -> (height m, yaw rad, forward offset m)
CAMERA_PRESETS = {
    "front_center": (1.6, 0.0, 0.0),
    "front_left": (1.6, math.radians(45.0), 0.0),
    "front_right": (1.6, math.radians(-45.0), 0.0),
}
IMAGE_W, IMAGE_H = 1024, 576
FOCAL = 1000.0


@dataclass(frozen=True)
class Occluder:
    lane: int
    start: float
    end: float
    category: str = "invalid"

    def __post_init__(self):
        if not (0.0 <= self.start < self.end <= 1.0):
            raise InvalidSpec(f"occluder fractions must satisfy 0 <= start < end <= 1, got {self.start}, {self.end}")
        try:
            Category(self.category)
        except ValueError:
            raise InvalidSpec(f"unknown category {self.category!r}") from None


@dataclass(frozen=True)
class SceneSpec:
    n_lanes: int = 3
    lane_spacing: float = 3.5
    curvature: float = 0.0
    lane_length: float = 120.0
    occluders: Tuple[Occluder, ...] = ()
    cameras: Tuple[str, ...] = ("front_center",)
    seed: int = 0
    n_frames: int = 1
    frame_dt_ns: int = 100_000_000
    speed: float = 10.0
    intersection_lanes: Tuple[int, ...] = ()
    t0_ns: int = 1_000_000_000

    def __post_init__(self):
        occ = tuple(o if isinstance(o, Occluder) else Occluder(*o) for o in self.occluders)
        object.__setattr__(self, "occluders", occ)
        object.__setattr__(self, "cameras", tuple(self.cameras))
        if self.n_lanes < 1:
            raise InvalidSpec("n_lanes must be >= 1")
        if self.lane_spacing <= 0 or self.lane_length <= 0 or self.n_frames < 1 or self.frame_dt_ns <= 0:
            raise InvalidSpec("spacing, length, frame count and frame interval must be positive")
        if abs(self.curvature) > 0.02:
            raise InvalidSpec("|curvature| is limited to 0.02 1/m (radius >= 50 m)")
        for o in occ:
            if not 0 <= o.lane < self.n_lanes:
                raise InvalidSpec(f"occluder lane {o.lane} out of range")
        for k in self.intersection_lanes:
            if not 0 <= k < self.n_lanes:
                raise InvalidSpec(f"intersection lane {k} out of range")
        for c in self.cameras:
            if c not in CAMERA_PRESETS:
                raise InvalidSpec(f"unknown camera preset {c!r}")


@dataclass(eq=False)
class SceneBundle:
    spec: SceneSpec
    vmap: VectorMap
    trajectory: Trajectory
    cameras: Dict[str, CameraModel]
    tasks: List[FrameTask]
    expected: Dict[Tuple[str, str], FrameLabels]  # (camera, frame_id) -> labels

    def write(self, root) -> Path:
        """Write the bundle in the interchange formats; returns ``root``."""
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        (root / "map.cmap.json").write_bytes(serialize_map(self.vmap))
        (root / "log.traj.json").write_bytes(serialize_trajectory(self.trajectory))
        (root / "cameras.calib.json").write_bytes(serialize_calibration(self.cameras))
        for task in self.tasks:
            mdir = root / "masks" / task.camera
            mdir.mkdir(parents=True, exist_ok=True)
            (mdir / f"{task.frame_id}.smask").write_bytes(serialize_mask(task.mask))
            edir = root / "expected" / task.camera
            edir.mkdir(parents=True, exist_ok=True)
            (edir / f"{task.frame_id}.expected.clabel.json").write_bytes(
                write_label(self.expected[(task.camera, task.frame_id)]))
        return root


# ----------------------------------------------------------- closed-form lanes

def _lane_offsets(spec: SceneSpec, rng) -> np.ndarray:
    base = (np.arange(spec.n_lanes) - (spec.n_lanes - 1) / 2.0) * spec.lane_spacing
    return base + rng.uniform(-0.1, 0.1, spec.n_lanes)


def _lane_point(s, offset, x_start, curvature, grade):
    """City-frame point at planar arc length ``s`` along a lane."""
    s = np.asarray(s, dtype=float)
    if curvature == 0.0:
        xy = np.stack([x_start + s, np.full_like(s, offset)], axis=-1)
    else:
        R = 1.0 / curvature
        r = R - offset
        phi = s / r
        xy = np.stack([x_start + r * np.sin(phi), R - r * np.cos(phi)], axis=-1)
    return np.concatenate([xy, (grade * s)[..., None]], axis=-1)


def _rot_z(a):
    c, s = math.cos(a), math.sin(a)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


# optical x right / y down / z forward, expressed in vehicle axes
_OPTICAL = np.array([[0.0, 0.0, 1.0], [-1.0, 0.0, 0.0], [0.0, -1.0, 0.0]])


def _expected_keypoints(pts, R_wc, t_wc, params: FilterParams):
    """Oracle projection and geometric filtering of city-frame samples."""
    p_cam = (pts - t_wc) @ R_wc
    z = p_cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = FOCAL * p_cam[:, 0] / z + IMAGE_W / 2.0
        v = FOCAL * p_cam[:, 1] / z + IMAGE_H / 2.0
    ok = (z > 0.1) & (u >= 0) & (u < IMAGE_W) & (v >= 0) & (v < IMAGE_H)
    p_cam, uv = p_cam[ok], np.stack([u[ok], v[ok]], axis=1)
    if len(p_cam) >= 2 and p_cam[0, 2] > p_cam[-1, 2]:
        p_cam, uv = p_cam[::-1], uv[::-1]
    near = p_cam[:, 2] <= params.max_depth
    p_cam, uv = p_cam[near], uv[near]
    keep = []
    for j in range(len(uv)):
        if not keep or math.dist(uv[j], uv[keep[-1]]) >= params.min_px_gap:
            keep.append(j)
    p_cam, uv = p_cam[keep], uv[keep]
    if len(p_cam) < params.min_keypoints:
        return None
    length = sum(math.dist(a, b) for a, b in zip(p_cam[:-1], p_cam[1:]))
    if length < params.min_length:
        return None
    return uv, p_cam


def generate(spec: SceneSpec, params: FilterParams = FilterParams(),
             ontology: Optional[OcclusionOntology] = None) -> SceneBundle:
    """Build a scene bundle and its expected labels. Deterministic in ``spec``."""
    ontology = ontology or default_ontology()
    rng = np.random.default_rng(spec.seed)
    offsets = _lane_offsets(spec, rng)
    x_start = -5.0 + rng.uniform(0.1, 0.4)
    grade = float(rng.uniform(-0.01, 0.01))
    n_samples = spec.n_frames + 1
    yaws = rng.uniform(-0.005, 0.005, n_samples)

    # map: vertices every 0.125 m on arcs, 2 m on straight lanes
    vstep = 2.0 if spec.curvature == 0.0 else 0.125
    n_v = int(math.ceil(spec.lane_length / vstep))
    s_vert = np.linspace(0.0, spec.lane_length, n_v + 1)
    lanes = []
    for k in range(spec.n_lanes):
        verts = _lane_point(s_vert, offsets[k], x_start, spec.curvature, grade)
        lanes.append(LaneSegment(k + 1, verts, is_intersection=k in spec.intersection_lanes))
    vmap = VectorMap.from_lanes("synthetic", lanes)

    # resampled lane points: uniform in 3D arc length, end point appended
    slope = math.sqrt(1.0 + grade * grade)
    L3 = spec.lane_length * slope
    n = int(math.floor(L3 / params.spacing * (1 + 1e-12)))
    s3 = np.arange(n + 1) * params.spacing
    if L3 - s3[-1] <= 1e-9 * max(1.0, L3):
        s3 = s3[:-1]
    s_plan = np.append(s3 / slope, spec.lane_length)
    lane_pts = [_lane_point(s_plan, offsets[k], x_start, spec.curvature, grade) for k in range(spec.n_lanes)]

    # trajectory samples bracket every camera frame
    times = [spec.t0_ns + i * spec.frame_dt_ns for i in range(n_samples)]
    xs = [spec.speed * (t - spec.t0_ns) * 1e-9 for t in times]
    poses = [Pose((math.cos(y / 2), 0.0, 0.0, math.sin(y / 2)), (x, 0.0, 0.0), t)
             for t, x, y in zip(times, xs, yaws)]
    traj = Trajectory(tuple(poses))

    cameras = {}
    for name in spec.cameras:
        h, yaw, fwd = CAMERA_PRESETS[name]
        R = _rot_z(yaw) @ _OPTICAL
        cameras[name] = CameraModel(FOCAL, FOCAL, IMAGE_W / 2.0, IMAGE_H / 2.0, IMAGE_W, IMAGE_H,
                                    Pose.from_matrix(R, (fwd, 0.0, h)), name)

    occ_class = {c: ontology.representative_class(c) for c in Category}
    tasks, expected = [], {}
    for f in range(spec.n_frames):
        t_ns = (times[f] + times[f + 1]) // 2
        w = (t_ns - times[f]) / (times[f + 1] - times[f])
        ego_x = (1 - w) * xs[f] + w * xs[f + 1]
        ego_yaw = (1 - w) * yaws[f] + w * yaws[f + 1]
        for name in spec.cameras:
            h, yaw, fwd = CAMERA_PRESETS[name]
            R_e = _rot_z(ego_yaw)
            R_wc = R_e @ _rot_z(yaw) @ _OPTICAL
            t_wc = R_e @ np.array([fwd, 0.0, h]) + np.array([ego_x, 0.0, 0.0])

            labels = np.full((IMAGE_H, IMAGE_W), SKY_CLASS, np.uint8)
            labels[IMAGE_H // 2:, :] = ROAD_CLASS
            found = {}
            for k in range(spec.n_lanes):
                if k in spec.intersection_lanes:
                    continue
                kp = _expected_keypoints(lane_pts[k], R_wc, t_wc, params)
                if kp is not None:
                    found[k] = kp
            for o in spec.occluders:
                if o.lane not in found:
                    continue
                uv = found[o.lane][0]
                N = len(uv)
                for i in range(N):
                    if o.start <= i / N < o.end:
                        labels[int(math.floor(uv[i, 1])), int(math.floor(uv[i, 0]))] = occ_class[Category(o.category)]
            mask = SemanticMask(labels)

            frame_id = str(t_ns)
            centerlines = []
            for k, (uv, p_cam) in sorted(found.items()):
                cls = labels[np.floor(uv[:, 1]).astype(int), np.floor(uv[:, 0]).astype(int)]
                cats = []
                for c in cls:
                    sub = ontology.class_to_subcategory.get(int(c))
                    cats.append(Category.INVALID if sub is None else ontology.subcategory_to_parent[sub])
                n_occ = sum(c is not Category.VALID for c in cats)
                keep = [i for i, c in enumerate(cats) if c is not Category.INVALID]
                codes = np.array([c.code for c in cats], np.int8)
                centerlines.append(CenterlineLabel(
                    k + 1, uv[keep], p_cam[keep], cls[keep], codes[keep], False, n_occ / len(uv), None))
            expected[(name, frame_id)] = FrameLabels(frame_id, name, math.inf, centerlines, None)
            tasks.append(FrameTask(frame_id, name, t_ns, mask))
    return SceneBundle(spec, vmap, traj, cameras, tasks, expected)
