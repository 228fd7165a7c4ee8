"""Frame-level label generation and the ``.clabel.json`` format."""
from __future__ import annotations

import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from .errors import CenterlineError, SchemaError
from .geom import CameraModel, Trajectory, ego_to_bev, interpolate_pose
from .ingest import SemanticMask, VectorMap, dump_json, load_json, parse_mask
from .labelgen import (BEVGridSpec, BEVTargets, CenterlineLabel, FilterParams, encode_bev,
                       fit_spline_2d, geometric_filters, project_centerline, resample_3d)
from .occlusion import CATEGORY_BY_CODE, Category, OcclusionOntology, default_ontology, occlusion_verdict


@dataclass(frozen=True, eq=False)
class FrameLabels:
    frame_id: str
    camera: str
    t_occ_used: float
    centerlines: List[CenterlineLabel]
    bev: Optional[BEVTargets] = None
    # (lane_id, r_occ, n_kept) for every lane that passed the geometric filters
    ratios: tuple = ()


@dataclass(eq=False)
class Scene:
    """Everything shared by the frames of one log."""

    vmap: VectorMap
    trajectory: Trajectory
    cameras: Dict[str, CameraModel]
    ontology: OcclusionOntology = field(default_factory=default_ontology)
    t_occ: float = 0.4
    params: FilterParams = field(default_factory=FilterParams)
    grid: BEVGridSpec = field(default_factory=BEVGridSpec)
    _samples: Optional[dict] = field(default=None, repr=False)

    def lane_samples(self) -> dict:
        if self._samples is None:
            self._samples = {lid: resample_3d(lane.centerline, self.params.spacing)
                             for lid, lane in sorted(self.vmap.lanes.items())}
        return self._samples


@dataclass(frozen=True, eq=False)
class FrameTask:
    frame_id: str
    camera: str
    t_ns: int
    mask: Union[SemanticMask, str, Path]


def label_frame(scene: Scene, task: FrameTask) -> FrameLabels:
    cam = scene.cameras[task.camera]
    mask = task.mask
    if not isinstance(mask, SemanticMask):
        mask = parse_mask(Path(mask).read_bytes())
    ego_pose = interpolate_pose(scene.trajectory, task.t_ns)
    samples = scene.lane_samples()
    kept, ratios = [], []
    for lane_id, lane in sorted(scene.vmap.lanes.items()):
        label = project_centerline(lane, ego_pose, cam, mask, scene.params.spacing,
                                   ontology=scene.ontology, samples=samples[lane_id])
        if len(label) == 0:
            continue
        label = geometric_filters(label, scene.params)
        if label is None:
            continue
        verdict = occlusion_verdict(label.class_ids, scene.ontology, scene.t_occ)
        ratios.append((lane_id, verdict.ratio, len(verdict.kept)))
        if verdict.removed or len(verdict.kept) < scene.params.min_keypoints:
            continue
        label = label.take(list(verdict.kept))
        label = replace(label, r_occ=verdict.ratio,
                        spline_2d=fit_spline_2d(label.pixels, scene.params.spline_step))
        kept.append(label)
    bev = encode_bev([camera_to_bev(cam, c.points_cam) for c in kept], scene.grid)
    return FrameLabels(task.frame_id, task.camera, scene.t_occ, kept, bev, tuple(ratios))


def camera_to_bev(cam: CameraModel, p_cam) -> np.ndarray:
    return ego_to_bev(cam.extrinsic.apply(p_cam))


_WORKER_SCENE = None


def _init_worker(scene):
    global _WORKER_SCENE
    _WORKER_SCENE = scene


def _label_one(scene, task):
    try:
        return label_frame(scene, task)
    except CenterlineError as exc:
        raise CenterlineError(f"frame {task.camera}/{task.frame_id}: {exc}") from exc


def _work(task):
    return _label_one(_WORKER_SCENE, task)


def label_frames(scene: Scene, tasks, jobs: int = 1) -> List[FrameLabels]:
    """Label every task; output order follows ``tasks`` whatever ``jobs`` is."""
    tasks = list(tasks)
    scene.lane_samples()
    if jobs <= 1 or len(tasks) <= 1:
        return [_label_one(scene, t) for t in tasks]
    chunk = max(1, len(tasks) // (4 * jobs))
    with ProcessPoolExecutor(max_workers=jobs, initializer=_init_worker, initargs=(scene,)) as pool:
        return list(pool.map(_work, tasks, chunksize=chunk))


# ----------------------------------------------------------------- file format

def _num(v):
    v = float(v)
    return v if math.isfinite(v) else None


def _grid(a, cast=float):
    if cast is float:
        a = np.asarray(a, dtype=float)
        obj = a.astype(object)
        obj[~np.isfinite(a)] = None
        return obj.tolist()
    return np.asarray(a).astype(np.int64).tolist()


def bev_to_dict(bev: BEVTargets) -> dict:
    return {
        "spec": bev.spec.to_dict(),
        "seg": _grid(bev.seg, int),
        "x_offset": _grid(bev.x_offset),
        "height": _grid(bev.height),
        "instance": _grid(bev.instance, int),
    }


def bev_from_dict(d) -> BEVTargets:
    spec = BEVGridSpec(**d["spec"])
    def plane(key, dtype):
        a = np.array([[np.nan if v is None else v for v in row] for row in d[key]], dtype=dtype)
        if a.shape != spec.shape:
            raise SchemaError(f"grid {key} has shape {a.shape}, expected {spec.shape}", f"/bev/{key}")
        return a
    return BEVTargets(spec, plane("seg", np.uint8), plane("x_offset", float),
                      plane("height", float), plane("instance", np.int32))


def centerline_to_dict(c: CenterlineLabel) -> dict:
    kps = []
    for j in range(len(c)):
        u, v = c.pixels[j]
        x, y, z = c.points_cam[j]
        cat = None if c.categories is None else CATEGORY_BY_CODE[c.categories[j]].value
        kps.append({"u": float(u), "v": float(v), "x": float(x), "y": float(y), "z": float(z),
                    "depth": float(z), "class_id": int(c.class_ids[j]), "category": cat})
    return {
        "lane_id": c.lane_id,
        "r_occ": None if c.r_occ is None else float(c.r_occ),
        "keypoints": kps,
        "spline_2d": [] if c.spline_2d is None else [[float(a), float(b)] for a, b in c.spline_2d],
    }


def centerline_from_dict(d) -> CenterlineLabel:
    kps = d["keypoints"]
    pixels = np.array([[k["u"], k["v"]] for k in kps], dtype=float).reshape(-1, 2)
    pts = np.array([[k["x"], k["y"], k["z"]] for k in kps], dtype=float).reshape(-1, 3)
    cls = np.array([k["class_id"] for k in kps], dtype=np.uint8)
    cats = None
    if kps and all(k.get("category") is not None for k in kps):
        cats = np.array([Category(k["category"]).code for k in kps], dtype=np.int8)
    spline = np.array(d.get("spline_2d") or [], dtype=float).reshape(-1, 2)
    return CenterlineLabel(int(d["lane_id"]), pixels, pts, cls, cats, False, d.get("r_occ"),
                           spline if len(spline) else None)


def frame_to_dict(fl: FrameLabels) -> dict:
    return {
        "frame_id": fl.frame_id,
        "camera": fl.camera,
        "t_occ_used": _num(fl.t_occ_used),
        "centerlines": [centerline_to_dict(c) for c in fl.centerlines],
        "bev": None if fl.bev is None else bev_to_dict(fl.bev),
    }


def write_label(fl: FrameLabels) -> bytes:
    return dump_json(frame_to_dict(fl))


def read_label(data) -> FrameLabels:
    doc = load_json(data, "label")
    try:
        t_occ = doc["t_occ_used"]
        return FrameLabels(
            str(doc["frame_id"]), str(doc["camera"]),
            math.inf if t_occ is None else float(t_occ),
            [centerline_from_dict(c) for c in doc["centerlines"]],
            None if doc.get("bev") is None else bev_from_dict(doc["bev"]),
        )
    except (KeyError, TypeError, ValueError, CenterlineError) as exc:
        if isinstance(exc, SchemaError):
            raise
        raise SchemaError(f"label: malformed ({exc!r})") from None


def refilter(fl: FrameLabels, t_occ: float, cam: CameraModel, grid: Optional[BEVGridSpec] = None) -> FrameLabels:
    """Apply a stricter occlusion threshold to an existing label.

    Only possible when ``t_occ`` does not exceed the threshold the label was
    produced with, since removed centerlines are not stored.
    """
    if t_occ > fl.t_occ_used:
        raise CenterlineError(f"label was produced at t_occ={fl.t_occ_used}; cannot relax to {t_occ}")
    kept = [c for c in fl.centerlines if c.r_occ is not None and c.r_occ < t_occ]
    grid = grid or (fl.bev.spec if fl.bev is not None else BEVGridSpec())
    bev = encode_bev([camera_to_bev(cam, c.points_cam) for c in kept], grid)
    return FrameLabels(fl.frame_id, fl.camera, t_occ, kept, bev, fl.ratios)
