"""Per-frame label factory.

Map centerlines are resampled in 3D, moved into the camera frame, projected,
thinned by a few geometric rules and decorated with the semantic class under
each keypoint. Surviving centerlines are also rasterised onto a bird's-eye
grid as segmentation / x-offset / height / instance targets.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, replace
from typing import List, Optional, Sequence

import numpy as np

from .errors import DegeneratePolyline, ShapeMismatch, TooFewPoints
from .geom import MIN_DEPTH, CameraModel, Pose, city_to_camera, project_points
from .occlusion import CATEGORY_BY_CODE, sample_classes
from .spline import CatmullRom


@dataclass(frozen=True)
class FilterParams:
    spacing: float = 0.5
    max_depth: float = 100.0
    min_px_gap: float = 5.0
    min_keypoints: int = 2
    min_length: float = 3.0
    spline_step: float = 2.0

    def __post_init__(self):
        if not (self.spacing > 0 and self.max_depth > 0 and self.min_px_gap >= 0
                and self.min_keypoints >= 2 and self.min_length >= 0 and self.spline_step > 0):
            raise ValueError(f"invalid filter parameters: {self}")


@dataclass(frozen=True)
class Keypoint:
    pixel: tuple
    p_cam: tuple
    depth: float
    class_id: int
    category: Optional[str]


@dataclass(frozen=True, eq=False)
class CenterlineLabel:
    """Keypoints of one lane in one frame, stored column-wise."""

    lane_id: int
    pixels: np.ndarray        # (N, 2)
    points_cam: np.ndarray    # (N, 3)
    class_ids: np.ndarray     # (N,) uint8
    categories: Optional[np.ndarray] = None  # (N,) codes, see occlusion.Category
    is_intersection: bool = False
    r_occ: Optional[float] = None
    spline_2d: Optional[np.ndarray] = None

    def __len__(self):
        return len(self.pixels)

    @property
    def depth(self) -> np.ndarray:
        return self.points_cam[:, 2]

    @property
    def keypoints(self) -> List[Keypoint]:
        out = []
        for j in range(len(self)):
            cat = None if self.categories is None else CATEGORY_BY_CODE[self.categories[j]].value
            out.append(Keypoint(tuple(self.pixels[j]), tuple(self.points_cam[j]), float(self.points_cam[j, 2]),
                                int(self.class_ids[j]), cat))
        return out

    def take(self, index) -> "CenterlineLabel":
        index = np.asarray(index, dtype=np.intp)
        cats = None if self.categories is None else self.categories[index]
        return replace(self, pixels=self.pixels[index], points_cam=self.points_cam[index],
                       class_ids=self.class_ids[index], categories=cats)

    def arc_length(self) -> float:
        if len(self) < 2:
            return 0.0
        return float(np.linalg.norm(np.diff(self.points_cam, axis=0), axis=1).sum())


# ------------------------------------------------------------------ resampling

def resample_3d(polyline, spacing: float) -> np.ndarray:
    """Arc-length-uniform samples on a centripetal Catmull-Rom spline through
    ``polyline``; the first and last vertices are reproduced exactly."""
    P = np.asarray(polyline, dtype=float)
    if P.ndim != 2 or len(P) < 2:
        raise TooFewPoints("polyline needs at least two vertices")
    if not spacing > 0:
        raise ValueError("spacing must be positive")
    keep = np.concatenate([[True], np.any(np.diff(P, axis=0) != 0, axis=1)])
    P = P[keep]
    if len(P) < 2:
        raise DegeneratePolyline("polyline has zero length")
    return CatmullRom(P).resample(spacing)


def project_centerline(lane, ego_pose: Pose, cam: CameraModel, mask, spacing: float = 0.5,
                       ontology=None, samples=None, min_depth: float = MIN_DEPTH) -> CenterlineLabel:
    """Project one map lane into a camera image.

    ``samples`` may carry the lane's already-resampled city-frame points so
    a lane seen by many frames is only resampled once.
    """
    if mask.width != cam.width or mask.height != cam.height:
        raise ShapeMismatch(f"mask is {mask.width}x{mask.height} but camera {cam.name} is {cam.width}x{cam.height}")
    pts = resample_3d(lane.centerline, spacing) if samples is None else np.asarray(samples, float)
    p_cam = city_to_camera(pts, ego_pose, cam)
    uv, depth, visible = project_points(cam, p_cam, min_depth)
    uv, p_cam = uv[visible], p_cam[visible]
    if len(p_cam) >= 2 and p_cam[0, 2] > p_cam[-1, 2]:
        uv, p_cam = uv[::-1].copy(), p_cam[::-1].copy()
    class_ids = sample_classes(mask, uv) if len(uv) else np.empty(0, np.uint8)
    cats = ontology.categories(class_ids).astype(np.int8) if ontology is not None else None
    return CenterlineLabel(lane.lane_id, uv, p_cam, np.asarray(class_ids, np.uint8), cats, lane.is_intersection)


def decimate(pixels, min_gap: float) -> np.ndarray:
    """Greedy thinning: keep the first point, then every point at least
    ``min_gap`` pixels from the last kept one. Returns kept indices."""
    pixels = np.asarray(pixels, dtype=float)
    if len(pixels) == 0:
        return np.empty(0, dtype=np.intp)
    keep = [0]
    last = pixels[0]
    for j in range(1, len(pixels)):
        d = pixels[j] - last
        if math.hypot(d[0], d[1]) >= min_gap:
            keep.append(j)
            last = pixels[j]
    return np.asarray(keep, dtype=np.intp)


def geometric_filters(label: CenterlineLabel, params: FilterParams = FilterParams()) -> Optional[CenterlineLabel]:
    """Drop far and crowded keypoints; reject intersection, short or sparse lanes."""
    if label.is_intersection:
        return None
    near = np.flatnonzero(label.depth <= params.max_depth)
    label = label.take(near)
    label = label.take(decimate(label.pixels, params.min_px_gap))
    if len(label) < params.min_keypoints or label.arc_length() < params.min_length:
        return None
    return label


def fit_spline_2d(pixels, step: float = 2.0) -> np.ndarray:
    """Smooth image-plane polyline through keypoint pixels at a fixed pixel step."""
    P = np.asarray(pixels, dtype=float)
    if P.ndim != 2 or len(P) < 2:
        raise TooFewPoints("spline fitting needs at least two keypoints")
    keep = np.concatenate([[True], np.any(np.diff(P, axis=0) != 0, axis=1)])
    P = P[keep]
    if len(P) < 2:
        raise TooFewPoints("spline fitting needs two distinct keypoints")
    return CatmullRom(P).resample(step)


# ------------------------------------------------------------------ BEV targets

@dataclass(frozen=True)
class BEVGridSpec:
    """Metric grid on the ground plane; columns run laterally (x), rows
    longitudinally (y). Arrays built on it have shape ``(s2, s1)``."""

    x_min: float = -16.0
    x_max: float = 16.0
    y_min: float = 0.0
    y_max: float = 100.0
    cell: float = 0.5

    def __post_init__(self):
        if not self.cell > 0:
            raise ValueError("cell size must be positive")
        for lo, hi in ((self.x_min, self.x_max), (self.y_min, self.y_max)):
            n = (hi - lo) / self.cell
            if not (n >= 1 and abs(n - round(n)) < 1e-9):
                raise ValueError(f"extent [{lo}, {hi}) is not a positive multiple of cell {self.cell}")

    @classmethod
    def parse(cls, text: str) -> "BEVGridSpec":
        parts = [float(p) for p in text.split(",")]
        if len(parts) != 5:
            raise ValueError("grid spec needs 'x_min,x_max,y_min,y_max,cell'")
        return cls(*parts)

    @property
    def s1(self) -> int:
        return int(round((self.x_max - self.x_min) / self.cell))

    @property
    def s2(self) -> int:
        return int(round((self.y_max - self.y_min) / self.cell))

    @property
    def shape(self) -> tuple:
        return (self.s2, self.s1)

    def row_centers(self) -> np.ndarray:
        return self.y_min + (np.arange(self.s2) + 0.5) * self.cell

    def to_dict(self) -> dict:
        return {"x_min": self.x_min, "x_max": self.x_max, "y_min": self.y_min,
                "y_max": self.y_max, "cell": self.cell}


@dataclass(frozen=True, eq=False)
class BEVTargets:
    spec: BEVGridSpec
    seg: np.ndarray        # (s2, s1) uint8
    x_offset: np.ndarray   # (s2, s1) float, NaN off the lanes
    height: np.ndarray     # (s2, s1) float, NaN off the lanes
    instance: np.ndarray   # (s2, s1) int32, 0 = background

    def polylines(self) -> List[np.ndarray]:
        """Per-instance (x, y, z) points at row centres, ordered by y."""
        spec = self.spec
        out = []
        for k in np.unique(self.instance[self.instance > 0]):
            rows, cols = np.nonzero(self.instance == k)
            x = spec.x_min + (cols + self.x_offset[rows, cols]) * spec.cell
            y = spec.y_min + (rows + 0.5) * spec.cell
            out.append(np.stack([x, y, self.height[rows, cols]], axis=1))
        return out


def row_crossings(polyline, grid: BEVGridSpec):
    """First crossing of each grid row centre along the polyline.

    Returns ``(rows, x, z)`` sorted by row. Span ``k`` owns ``t in [0, 1)``
    and the last span also its end point, so a vertex lying exactly on a row
    centre is counted once. Spans parallel to the rows only hit a row through
    their start vertex.
    """
    P = np.asarray(polyline, dtype=float)
    yc = grid.row_centers()
    p0, p1 = P[:-1], P[1:]
    lo = np.minimum(p0[:, 1], p1[:, 1])
    hi = np.maximum(p0[:, 1], p1[:, 1])
    first = np.searchsorted(yc, lo, side="left")
    last = np.searchsorted(yc, hi, side="right")
    counts = np.maximum(last - first, 0)
    seg = np.repeat(np.arange(len(p0)), counts)
    offsets = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    rows = np.repeat(first, counts) + offsets
    dy = p1[seg, 1] - p0[seg, 1]
    flat = dy == 0
    t = np.where(flat, 0.0, (yc[rows] - p0[seg, 1]) / np.where(flat, 1.0, dy))
    ok = (t >= 0) & ((t < 1) | ((t == 1) & (seg == len(p0) - 1)))
    seg, rows, t = seg[ok], rows[ok], t[ok]
    # earliest span wins for every row
    order = np.lexsort((seg, rows))
    seg, rows, t = seg[order], rows[order], t[order]
    head = np.concatenate([[True], rows[1:] != rows[:-1]]) if len(rows) else np.zeros(0, bool)
    seg, rows, t = seg[head], rows[head], t[head]
    x = p0[seg, 0] + t * (p1[seg, 0] - p0[seg, 0])
    z = p0[seg, 2] + t * (p1[seg, 2] - p0[seg, 2])
    return rows.astype(np.intp), x, z


def encode_bev(centerlines: Sequence, grid: BEVGridSpec = BEVGridSpec()) -> BEVTargets:
    """Rasterise BEV-frame centerlines (x lateral, y forward, z up).

    Centerline ``i`` gets instance id ``i + 1`` and marks one cell per row it
    crosses. When two lanes claim the same cell the lower instance id keeps it.
    """
    shape = grid.shape
    seg = np.zeros(shape, np.uint8)
    x_off = np.full(shape, np.nan)
    height = np.full(shape, np.nan)
    inst = np.zeros(shape, np.int32)
    for i, line in enumerate(centerlines):
        if len(line) < 2:
            continue
        rows, x, z = row_crossings(line, grid)
        q = (x - grid.x_min) / grid.cell
        cols = np.floor(q)
        ok = (cols >= 0) & (cols < grid.s1)
        rows, cols, q, z = rows[ok], cols[ok].astype(np.intp), q[ok], z[ok]
        free = inst[rows, cols] == 0
        rows, cols, q, z = rows[free], cols[free], q[free], z[free]
        seg[rows, cols] = 1
        x_off[rows, cols] = q - cols
        height[rows, cols] = z
        inst[rows, cols] = i + 1
    return BEVTargets(grid, seg, x_off, height, inst)


# ---------------------------------------------------------------- frame sampling

def sample_windows(items: Sequence, window: int = 20, seed: int = 0) -> list:
    """One random item per consecutive window of ``window`` items; a short
    remainder at the end forms its own window."""
    if window < 1:
        raise ValueError("window must be >= 1")
    rng = np.random.default_rng(seed)
    items = list(items)
    picked = []
    for start in range(0, len(items), window):
        chunk = items[start:start + window]
        picked.append(chunk[int(rng.integers(len(chunk)))])
    return picked
