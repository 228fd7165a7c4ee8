"""Readers and writers for the map, trajectory, calibration and mask files.

Text formats are JSON with a fixed key order so that writing a parsed file
reproduces it byte for byte. Masks are a small binary raster::

    0-3   b"SMK1"
    4-7   width  (u32 little endian)
    8-11  height (u32 little endian)
    12-15 reserved, zero
    16-   width * height class ids, row-major, one byte each
"""
from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field
from typing import Dict, Optional

import jsonschema
import numpy as np

from .errors import CenterlineError, DuplicateLaneId, EmptyTrajectory, SchemaError
from .geom import CameraModel, Pose, Trajectory

UNLABELED = 255
MASK_MAGIC = b"SMK1"
_MASK_HEADER = struct.Struct("<4sIII")


def _frozen(a, dtype=float) -> np.ndarray:
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class LaneSegment:
    lane_id: int
    centerline: np.ndarray
    left_boundary: Optional[np.ndarray] = None
    right_boundary: Optional[np.ndarray] = None
    is_intersection: bool = False

    def __post_init__(self):
        c = _frozen(self.centerline)
        if c.ndim != 2 or c.shape[1] != 3 or len(c) < 2:
            raise CenterlineError(f"lane {self.lane_id}: centerline needs >= 2 3D vertices")
        if not np.all(np.isfinite(c)):
            raise CenterlineError(f"lane {self.lane_id}: non-finite vertex")
        if np.any(np.all(c[1:] == c[:-1], axis=1)):
            raise CenterlineError(f"lane {self.lane_id}: repeated consecutive vertex")
        object.__setattr__(self, "centerline", c)
        object.__setattr__(self, "lane_id", int(self.lane_id))
        object.__setattr__(self, "is_intersection", bool(self.is_intersection))
        for side in ("left_boundary", "right_boundary"):
            b = getattr(self, side)
            if b is not None:
                b = _frozen(b)
                if b.ndim != 2 or b.shape[1] != 3 or len(b) < 2:
                    raise CenterlineError(f"lane {self.lane_id}: {side} needs >= 2 3D vertices")
                object.__setattr__(self, side, b)

    def __eq__(self, other):
        if not isinstance(other, LaneSegment):
            return NotImplemented

        def same(a, b):
            if a is None or b is None:
                return a is None and b is None
            return a.shape == b.shape and bool(np.array_equal(a, b))

        return (self.lane_id == other.lane_id
                and self.is_intersection == other.is_intersection
                and same(self.centerline, other.centerline)
                and same(self.left_boundary, other.left_boundary)
                and same(self.right_boundary, other.right_boundary))

    __hash__ = None


@dataclass(frozen=True)
class VectorMap:
    city_name: str
    lanes: Dict[int, LaneSegment] = field(default_factory=dict)

    def __post_init__(self):
        for key, lane in self.lanes.items():
            if key != lane.lane_id:
                raise CenterlineError(f"map key {key} != lane_id {lane.lane_id}")

    @classmethod
    def from_lanes(cls, city_name, lanes) -> "VectorMap":
        table = {}
        for lane in lanes:
            if lane.lane_id in table:
                raise DuplicateLaneId(f"duplicate lane_id {lane.lane_id}")
            table[lane.lane_id] = lane
        return cls(city_name, table)


@dataclass(frozen=True, eq=False)
class SemanticMask:
    labels: np.ndarray  # (height, width) uint8

    def __post_init__(self):
        a = np.array(self.labels, dtype=np.uint8)
        if a.ndim != 2:
            raise CenterlineError("mask must be 2-D")
        a.setflags(write=False)
        object.__setattr__(self, "labels", a)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SemanticMask):
            return NotImplemented
        return self.labels.shape == other.labels.shape and bool(np.array_equal(self.labels, other.labels))

    __hash__ = None


# ---------------------------------------------------------------- JSON plumbing

_VEC3 = {"type": "array", "items": {"type": "number"}, "minItems": 3, "maxItems": 3}
_QUAT = {"type": "array", "items": {"type": "number"}, "minItems": 4, "maxItems": 4}
_POLYLINE = {"type": "array", "items": _VEC3, "minItems": 2}
_RIGID = {
    "type": "object",
    "required": ["q", "t"],
    "properties": {"q": _QUAT, "t": _VEC3},
    "additionalProperties": False,
}

MAP_SCHEMA = {
    "type": "object",
    "required": ["city", "lanes"],
    "properties": {
        "city": {"type": "string"},
        "lanes": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["lane_id", "is_intersection", "centerline"],
                "properties": {
                    "lane_id": {"type": "integer"},
                    "is_intersection": {"type": "boolean"},
                    "centerline": _POLYLINE,
                    "left_boundary": _POLYLINE,
                    "right_boundary": _POLYLINE,
                },
                "additionalProperties": False,
            },
        },
    },
    "additionalProperties": False,
}

TRAJECTORY_SCHEMA = {
    "type": "object",
    "required": ["frames"],
    "properties": {
        "frames": {
            "type": "array",
            "items": {
                "type": "object",
                "required": ["t_ns", "q", "t"],
                "properties": {"t_ns": {"type": "integer"}, "q": _QUAT, "t": _VEC3},
                "additionalProperties": False,
            },
        }
    },
    "additionalProperties": False,
}

CALIBRATION_SCHEMA = {
    "type": "object",
    "required": ["cameras"],
    "properties": {
        "cameras": {
            "type": "array",
            "minItems": 1,
            "items": {
                "type": "object",
                "required": ["name", "fx", "fy", "cx", "cy", "width", "height", "extrinsic"],
                "properties": {
                    "name": {"type": "string"},
                    "fx": {"type": "number"},
                    "fy": {"type": "number"},
                    "cx": {"type": "number"},
                    "cy": {"type": "number"},
                    "width": {"type": "integer", "minimum": 1},
                    "height": {"type": "integer", "minimum": 1},
                    "extrinsic": _RIGID,
                },
                "additionalProperties": False,
            },
        }
    },
    "additionalProperties": False,
}


def _reject_constant(name):
    raise ValueError(f"non-finite number {name}")


def load_json(data, what="file"):
    """Decode bytes/str into JSON, turning every failure into SchemaError."""
    if isinstance(data, (bytes, bytearray, memoryview)):
        try:
            data = bytes(data).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise SchemaError(f"{what} is not valid UTF-8: {exc.reason}", f"byte {exc.start}") from None
    try:
        return json.loads(data, parse_constant=_reject_constant)
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{what}: {exc.msg}", f"line {exc.lineno} column {exc.colno}") from None
    except (ValueError, RecursionError) as exc:
        raise SchemaError(f"{what}: {exc}") from None


def validate(doc, schema, what="file"):
    validator = jsonschema.Draft202012Validator(schema)
    error = jsonschema.exceptions.best_match(validator.iter_errors(doc))
    if error is not None:
        locus = "/" + "/".join(str(p) for p in error.absolute_path)
        raise SchemaError(f"{what}: {error.message}", locus)


def _finite(values, locus):
    for v in values:
        if not math.isfinite(float(v)):
            raise SchemaError("non-finite number", locus)
    return values


def _leaf(o) -> bool:
    # lists here are homogeneous, so the first element decides
    return not isinstance(o[0], (list, tuple, dict))


def _emit(o, level: int, out: list):
    if isinstance(o, dict) and o:
        out.append("{")
        for i, (k, v) in enumerate(o.items()):
            out.append(("," if i else "") + "\n" + " " * (level + 1) + json.dumps({k: 0})[1:-4] + ": ")
            _emit(v, level + 1, out)
        out.append("\n" + " " * level + "}")
    elif isinstance(o, (list, tuple)) and o and not _leaf(o):
        out.append("[")
        for i, v in enumerate(o):
            out.append(("," if i else "") + "\n" + " " * (level + 1))
            _emit(v, level + 1, out)
        out.append("\n" + " " * level + "]")
    else:
        out.append(json.dumps(o, allow_nan=False))


def dump_json(doc) -> bytes:
    """Deterministic, diff-friendly JSON: one-space indent, innermost scalar arrays on one line."""
    out = []
    _emit(doc, 0, out)
    out.append("\n")
    return "".join(out).encode("utf-8")


def _polyline(a):
    return [[float(c) for c in row] for row in np.asarray(a)]


# ------------------------------------------------------------------------- map

def parse_map(data) -> VectorMap:
    doc = load_json(data, "map")
    validate(doc, MAP_SCHEMA, "map")
    lanes = {}
    for i, item in enumerate(doc["lanes"]):
        locus = f"/lanes/{i}"
        lane_id = int(item["lane_id"])
        if lane_id in lanes:
            raise DuplicateLaneId(f"duplicate lane_id {lane_id}", locus + "/lane_id")
        for key in ("centerline", "left_boundary", "right_boundary"):
            if key in item:
                for j, v in enumerate(item[key]):
                    _finite(v, f"{locus}/{key}/{j}")
        try:
            lanes[lane_id] = LaneSegment(
                lane_id=lane_id,
                centerline=item["centerline"],
                left_boundary=item.get("left_boundary"),
                right_boundary=item.get("right_boundary"),
                is_intersection=item["is_intersection"],
            )
        except CenterlineError as exc:
            raise SchemaError(str(exc), locus) from None
    return VectorMap(doc["city"], lanes)


def serialize_map(vmap: VectorMap) -> bytes:
    lanes = []
    for lane in vmap.lanes.values():
        item = {
            "lane_id": lane.lane_id,
            "is_intersection": lane.is_intersection,
            "centerline": _polyline(lane.centerline),
        }
        if lane.left_boundary is not None:
            item["left_boundary"] = _polyline(lane.left_boundary)
        if lane.right_boundary is not None:
            item["right_boundary"] = _polyline(lane.right_boundary)
        lanes.append(item)
    return dump_json({"city": vmap.city_name, "lanes": lanes})


# ------------------------------------------------------------------ trajectory

def parse_trajectory(data) -> Trajectory:
    doc = load_json(data, "trajectory")
    validate(doc, TRAJECTORY_SCHEMA, "trajectory")
    frames = doc["frames"]
    if not frames:
        raise EmptyTrajectory("trajectory file has no frames")
    poses = []
    for i, fr in enumerate(frames):
        locus = f"/frames/{i}"
        _finite(fr["q"] + fr["t"], locus)
        fr["t_ns"] = int(fr["t_ns"])
        if poses and fr["t_ns"] <= poses[-1].timestamp:
            raise SchemaError("timestamps must be strictly increasing", locus + "/t_ns")
        try:
            poses.append(Pose(tuple(fr["q"]), tuple(fr["t"]), fr["t_ns"]))
        except CenterlineError as exc:
            raise SchemaError(str(exc), locus) from None
    return Trajectory(tuple(poses))


def serialize_trajectory(traj: Trajectory) -> bytes:
    frames = [{"t_ns": p.timestamp, "q": list(p.rotation), "t": list(p.translation)} for p in traj.poses]
    return dump_json({"frames": frames})


# ----------------------------------------------------------------- calibration

def parse_calibration(data) -> Dict[str, CameraModel]:
    doc = load_json(data, "calibration")
    validate(doc, CALIBRATION_SCHEMA, "calibration")
    cams = {}
    for i, c in enumerate(doc["cameras"]):
        locus = f"/cameras/{i}"
        if c["name"] in cams:
            raise SchemaError(f"duplicate camera name {c['name']!r}", locus + "/name")
        ext = c["extrinsic"]
        _finite([c[k] for k in ("fx", "fy", "cx", "cy")] + ext["q"] + ext["t"], locus)
        try:
            cams[c["name"]] = CameraModel(
                fx=c["fx"], fy=c["fy"], cx=c["cx"], cy=c["cy"],
                width=c["width"], height=c["height"],
                extrinsic=Pose(tuple(ext["q"]), tuple(ext["t"])),
                name=c["name"],
            )
        except CenterlineError as exc:
            raise SchemaError(str(exc), locus) from None
    return cams


def serialize_calibration(cameras) -> bytes:
    if isinstance(cameras, CameraModel):
        cameras = {cameras.name: cameras}
    out = []
    for cam in cameras.values():
        out.append({
            "name": cam.name,
            "fx": cam.fx, "fy": cam.fy, "cx": cam.cx, "cy": cam.cy,
            "width": cam.width, "height": cam.height,
            "extrinsic": {"q": list(cam.extrinsic.rotation), "t": list(cam.extrinsic.translation)},
        })
    return dump_json({"cameras": out})


# ------------------------------------------------------------------------ mask

def parse_mask(data) -> SemanticMask:
    data = bytes(data)
    if len(data) < _MASK_HEADER.size:
        raise SchemaError(f"mask shorter than its {_MASK_HEADER.size}-byte header", "header")
    magic, width, height, reserved = _MASK_HEADER.unpack_from(data)
    if magic != MASK_MAGIC:
        raise SchemaError(f"bad magic {magic!r}", "header/magic")
    if reserved != 0:
        raise SchemaError("reserved header field must be zero", "header/reserved")
    if width == 0 or height == 0:
        raise SchemaError("mask dimensions must be positive", "header")
    payload = len(data) - _MASK_HEADER.size
    if payload != width * height:
        raise SchemaError(f"declared {width}x{height} grid but {payload} payload bytes", "payload")
    labels = np.frombuffer(data, dtype=np.uint8, offset=_MASK_HEADER.size).reshape(height, width)
    return SemanticMask(labels)


def serialize_mask(mask: SemanticMask) -> bytes:
    header = _MASK_HEADER.pack(MASK_MAGIC, mask.width, mask.height, 0)
    return header + np.ascontiguousarray(mask.labels, dtype=np.uint8).tobytes()
