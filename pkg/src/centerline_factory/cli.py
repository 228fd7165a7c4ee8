"""Command line entry point: ``clf <subcommand> ...``.

Settings resolve as command-line flags over ``--config`` file values over
built-in defaults. A run manifest can be passed back as ``--config`` to
repeat the run.
"""
from __future__ import annotations

import argparse
import hashlib
import logging
import math
import os
import sys
import xml.etree.ElementTree as ET
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from .errors import CenterlineError
from .evaluation import MatchSpec, evaluate_corpus
from .heads import decode_bev, read_bevout
from .ingest import dump_json, load_json, parse_calibration, parse_map, parse_trajectory
from .labelgen import BEVGridSpec, FilterParams, sample_windows
from .occlusion import default_ontology, parse_ontology
from .pipeline import FrameTask, Scene, label_frames, read_label, refilter, write_label

log = logging.getLogger("centerline_factory")

T_OCC_LADDER = tuple(round(0.1 * k, 1) for k in range(1, 11))


class UsageError(Exception):
    """Bad paths or settings; reported with exit status 2."""


@dataclass
class RunConfig:
    map: Optional[str] = None
    trajectory: Optional[str] = None
    calibration: Optional[str] = None
    masks: Optional[str] = None
    labels: Optional[str] = None
    bevout: Optional[str] = None
    pred: Optional[str] = None
    gt: Optional[str] = None
    splits: Optional[str] = None
    images: Optional[str] = None
    out: Optional[str] = None
    t_occ: float = 0.4
    ontology: Optional[str] = None
    grid: str = "-16,16,0,100,0.5"
    spacing: float = 0.5
    max_depth: float = 100.0
    min_px_gap: float = 5.0
    min_keypoints: int = 2
    min_length: float = 3.0
    spline_step: float = 2.0
    match_threshold: float = 1.5
    near: str = "0,40"
    far: str = "40,100"
    row_step: float = 0.5
    conf_threshold: float = 0.5
    embed_radius: float = 1.5
    min_cells: int = 2
    window: int = 20
    seed: int = 0
    jobs: int = 1

    def __post_init__(self):
        if self.t_occ < 0:
            raise UsageError("--t-occ must be >= 0")
        if self.jobs < 1:
            raise UsageError("--jobs must be >= 1")

    def grid_spec(self) -> BEVGridSpec:
        try:
            return BEVGridSpec.parse(self.grid)
        except ValueError as exc:
            raise UsageError(f"--grid: {exc}") from None

    def filter_params(self) -> FilterParams:
        return FilterParams(self.spacing, self.max_depth, self.min_px_gap, self.min_keypoints,
                            self.min_length, self.spline_step)

    def match_spec(self) -> MatchSpec:
        try:
            return MatchSpec(self.match_threshold, _pair(self.near, "--near"), _pair(self.far, "--far"),
                             self.row_step)
        except ValueError as exc:
            raise UsageError(str(exc)) from None

    def load_ontology(self):
        if self.ontology is None:
            return default_ontology()
        return parse_ontology(_read(self.ontology, "ontology"))


def _pair(text, flag):
    try:
        lo, hi = (float(v) for v in str(text).split(","))
    except ValueError:
        raise UsageError(f"{flag} expects 'lo,hi', got {text!r}") from None
    return lo, hi


def _read(path, what) -> bytes:
    if path is None:
        raise UsageError(f"no {what} path given")
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"{what} file not found: {p}")
    return p.read_bytes()


def _dir(path, what) -> Path:
    if path is None:
        raise UsageError(f"no {what} directory given")
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{what} directory not found: {p}")
    return p


def resolve_config(args) -> RunConfig:
    values = {}
    if getattr(args, "config", None):
        doc = load_json(_read(args.config, "config"), "config")
        if isinstance(doc, dict) and "config" in doc:
            doc = doc["config"]  # a run manifest
        if not isinstance(doc, dict):
            raise UsageError("config file must hold a JSON object")
        known = {f.name for f in fields(RunConfig)}
        unknown = set(doc) - known
        if unknown:
            raise UsageError(f"unknown config keys: {sorted(unknown)}")
        values.update(doc)
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None:
            values[f.name] = v
    return RunConfig(**values)


def _sha256(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def _frame_key(path: Path, root: Path, suffix: str) -> str:
    rel = path.relative_to(root).as_posix()
    return rel[: -len(suffix)]


def _collect(root: Path, suffix: str):
    files = [p for p in root.rglob(f"*{suffix}") if p.is_file()]
    return sorted(files, key=lambda p: _sort_key(_frame_key(p, root, suffix)))


def _sort_key(key: str):
    parts = key.split("/")
    return tuple((0, int(p), "") if p.isdigit() else (1, 0, p) for p in parts)


# ------------------------------------------------------------------ subcommands

def cmd_generate(cfg: RunConfig) -> dict:
    vmap = parse_map(_read(cfg.map, "map"))
    traj = parse_trajectory(_read(cfg.trajectory, "trajectory"))
    cams = parse_calibration(_read(cfg.calibration, "calibration"))
    masks = _dir(cfg.masks, "masks")
    out = Path(cfg.out or "labels")
    scene = Scene(vmap, traj, cams, cfg.load_ontology(), cfg.t_occ, cfg.filter_params(), cfg.grid_spec())

    tasks = []
    for p in _collect(masks, ".smask"):
        key = _frame_key(p, masks, ".smask")
        if "/" not in key:
            raise UsageError(f"mask {p} must live in a per-camera directory")
        camera, frame_id = key.rsplit("/", 1)
        if camera not in cams:
            raise UsageError(f"mask {p}: camera {camera!r} not in calibration")
        if not frame_id.isdigit():
            raise UsageError(f"mask {p}: file stem must be the frame timestamp in ns")
        tasks.append(FrameTask(frame_id, camera, int(frame_id), str(p)))
    log.info("labelling %d frames with %d jobs", len(tasks), cfg.jobs)
    results = label_frames(scene, tasks, cfg.jobs)

    outputs = {}
    ratios = []
    per_camera = {}
    for fl in results:
        rel = f"{fl.camera}/{fl.frame_id}.clabel.json"
        data = write_label(fl)
        path = out / rel
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_bytes(data)
        outputs[rel] = _sha256(data)
        # a candidate survives threshold t when r_occ < t and enough keypoints remain
        ratios.extend(r if n >= cfg.min_keypoints else math.inf for _, r, n in fl.ratios)
        cam = per_camera.setdefault(fl.camera, {"frames": 0, "centerlines": 0})
        cam["frames"] += 1
        cam["centerlines"] += len(fl.centerlines)
    r = np.array(ratios, dtype=float)
    manifest = {
        "tool": "centerline_factory",
        "version": __version__,
        "command": "generate",
        "config": asdict(cfg),
        "counts": {
            "frames": len(results),
            "centerlines": sum(len(fl.centerlines) for fl in results),
            "candidates": len(ratios),
            "per_camera": per_camera,
        },
        "retention": {f"{t:.1f}": int(np.count_nonzero(r < t)) for t in T_OCC_LADDER},
        "outputs": outputs,
    }
    data = dump_json(manifest)
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_bytes(data)
    print(f"{len(results)} frames -> {out} (manifest sha256 {_sha256(data)})")
    return manifest


def cmd_sample_train(cfg: RunConfig) -> dict:
    src = Path(cfg.labels or cfg.masks or "")
    src = _dir(str(src) if str(src) else None, "frame source")
    suffix = ".clabel.json" if cfg.labels else ".smask"
    sequences = {}
    for p in _collect(src, suffix):
        key = _frame_key(p, src, suffix)
        camera, _, frame_id = key.rpartition("/")
        sequences.setdefault(camera, []).append(frame_id)
    picked = []
    for camera in sorted(sequences):
        for frame_id in sample_windows(sequences[camera], cfg.window, cfg.seed):
            picked.append({"camera": camera, "frame_id": frame_id})
    doc = {"window": cfg.window, "seed": cfg.seed, "frames": picked}
    data = dump_json(doc)
    if cfg.out:
        Path(cfg.out).parent.mkdir(parents=True, exist_ok=True)
        Path(cfg.out).write_bytes(data)
    else:
        sys.stdout.write(data.decode())
    return doc


def cmd_filter(cfg: RunConfig) -> int:
    src = _dir(cfg.labels, "labels")
    cams = parse_calibration(_read(cfg.calibration, "calibration"))
    out = Path(cfg.out or "filtered")
    grid = cfg.grid_spec()
    n = 0
    for p in _collect(src, ".clabel.json"):
        fl = read_label(p.read_bytes())
        if fl.camera not in cams:
            raise UsageError(f"{p}: camera {fl.camera!r} not in calibration")
        fl = refilter(fl, cfg.t_occ, cams[fl.camera], grid)
        dst = out / p.relative_to(src)
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(write_label(fl))
        n += 1
    print(f"filtered {n} label files at t_occ={cfg.t_occ} -> {out}")
    return n


def lanes_doc(frame_id, lanes) -> dict:
    return {"frame_id": frame_id, "lanes": [[[float(c) for c in pt] for pt in lane] for lane in lanes]}


def cmd_decode(cfg: RunConfig) -> int:
    src = _dir(cfg.bevout, "bevout")
    out = Path(cfg.out or "decoded")
    grid = cfg.grid_spec()
    n = 0
    for p in _collect(src, ".bevout"):
        key = _frame_key(p, src, ".bevout")
        lanes = decode_bev(read_bevout(p.read_bytes()), grid, cfg.conf_threshold, cfg.embed_radius, cfg.min_cells)
        dst = out / f"{key}.lanes.json"
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(dump_json(lanes_doc(key.rpartition("/")[2], lanes)))
        n += 1
    print(f"decoded {n} head outputs -> {out}")
    return n


def _read_lanes(path: Path):
    if path.name.endswith(".clabel.json"):
        fl = read_label(path.read_bytes())
        return [] if fl.bev is None else fl.bev.polylines()
    doc = load_json(path.read_bytes(), "lanes")
    try:
        return [np.asarray(l, dtype=float).reshape(-1, 3) for l in doc["lanes"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise CenterlineError(f"{path}: malformed lanes file ({exc})") from None


def _polyline_files(root: Path) -> dict:
    found = {}
    for suffix in (".lanes.json", ".clabel.json"):
        for p in _collect(root, suffix):
            found.setdefault(_frame_key(p, root, suffix), p)
    return found


def cmd_eval(cfg: RunConfig) -> dict:
    pred_root, gt_root = _dir(cfg.pred, "prediction"), _dir(cfg.gt, "ground-truth")
    spec = cfg.match_spec()
    preds, gts = _polyline_files(pred_root), _polyline_files(gt_root)
    keys = sorted(set(preds) | set(gts), key=_sort_key)
    frames = ((k, _read_lanes(preds[k]) if k in preds else [], _read_lanes(gts[k]) if k in gts else [])
              for k in keys)
    rows, corpus = evaluate_corpus(frames, spec)
    report = {"match_spec": spec.to_dict(), "error_average": "matched points",
              "frames": rows, "corpus": corpus.to_dict()}
    data = dump_json(report)
    out = Path(cfg.out or "eval.report.json")
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_bytes(data)
    c = corpus
    print(f"F1 {c.f1:.4f}  P {c.precision:.4f}  R {c.recall:.4f}  ({c.tp} tp, {c.fp} fp, {c.fn} fn) -> {out}")
    return report


_COLORS = ("#e6194b", "#3cb44b", "#4363d8", "#f58231", "#911eb4", "#46f0f0", "#f032e6", "#bcf60c")
_CAT_COLORS = {"valid": "#2ca02c", "occlusion_valid": "#ff7f0e", "invalid": "#d62728", None: "#7f7f7f"}


def render_svg(fl, width: int, height: int, image_href: Optional[str] = None) -> bytes:
    """Image-plane keypoints and splines beside the BEV target grid."""
    bev = fl.bev
    scale = 2.0
    bw = bev.spec.s1 * scale if bev is not None else 0
    bh = bev.spec.s2 * scale if bev is not None else 0
    svg = ET.Element("svg", xmlns="http://www.w3.org/2000/svg", width=str(width + 20 + bw),
                     height=str(max(height, bh)), viewBox=f"0 0 {width + 20 + bw} {max(height, bh)}")
    ET.SubElement(svg, "title").text = f"{fl.camera} {fl.frame_id}"
    img = ET.SubElement(svg, "g", id="image")
    ET.SubElement(img, "rect", x="0", y="0", width=str(width), height=str(height), fill="#202020")
    if image_href:
        ET.SubElement(img, "image", href=image_href, x="0", y="0", width=str(width), height=str(height))
    for i, c in enumerate(fl.centerlines):
        color = _COLORS[i % len(_COLORS)]
        g = ET.SubElement(img, "g", {"class": "centerline", "data-lane-id": str(c.lane_id)})
        if c.spline_2d is not None and len(c.spline_2d) > 1:
            pts = " ".join(f"{u:.2f},{v:.2f}" for u, v in c.spline_2d)
            ET.SubElement(g, "polyline", {"points": pts, "fill": "none", "stroke": color, "stroke-width": "2"})
        for kp in c.keypoints:
            ET.SubElement(g, "circle", {"cx": f"{kp.pixel[0]:.2f}", "cy": f"{kp.pixel[1]:.2f}", "r": "3",
                                        "fill": _CAT_COLORS[kp.category]})
    if bev is not None:
        g = ET.SubElement(svg, "g", id="bev", transform=f"translate({width + 20},0)")
        ET.SubElement(g, "rect", x="0", y="0", width=str(bw), height=str(bh), fill="#f4f4f4", stroke="#999")
        rows, cols = np.nonzero(bev.seg)
        for r, c in zip(rows, cols):
            k = int(bev.instance[r, c])
            # far rows at the top
            y = (bev.spec.s2 - 1 - r) * scale
            ET.SubElement(g, "rect", {"x": f"{c * scale:.1f}", "y": f"{y:.1f}", "width": str(scale),
                                      "height": str(scale), "fill": _COLORS[(k - 1) % len(_COLORS)]})
    ET.indent(svg)
    return ET.tostring(svg, encoding="utf-8", xml_declaration=True) + b"\n"


def cmd_render(cfg: RunConfig) -> int:
    src = _dir(cfg.labels, "labels")
    out = Path(cfg.out or "render")
    cams = parse_calibration(_read(cfg.calibration, "calibration")) if cfg.calibration else {}
    n = 0
    for p in _collect(src, ".clabel.json"):
        fl = read_label(p.read_bytes())
        cam = cams.get(fl.camera)
        w, h = (cam.width, cam.height) if cam else (1024, 576)
        href = None
        if cfg.images:
            for ext in (".jpg", ".png"):
                cand = Path(cfg.images) / fl.camera / f"{fl.frame_id}{ext}"
                if cand.is_file():
                    href = str(cand)
                    break
        key = _frame_key(p, src, ".clabel.json")
        dst = out / f"{key}.svg"
        dst.parent.mkdir(parents=True, exist_ok=True)
        dst.write_bytes(render_svg(fl, w, h, href))
        n += 1
    print(f"rendered {n} frames -> {out}")
    return n


def cmd_stats(cfg: RunConfig) -> dict:
    src = _dir(cfg.labels, "labels")
    labels = {_frame_key(p, src, ".clabel.json"): p for p in _collect(src, ".clabel.json")}
    splits = None
    if cfg.splits:
        doc = load_json(_read(cfg.splits, "splits"), "splits")
        if not isinstance(doc, dict) or not isinstance(doc.get("splits"), dict):
            raise UsageError("splits file must look like {\"splits\": {name: [frame keys]}}")
        splits = doc["splits"]
    edges = np.linspace(0.0, 1.0, 11)
    hist = np.zeros(10, int)
    n_cl = 0
    for p in labels.values():
        fl = read_label(p.read_bytes())
        n_cl += len(fl.centerlines)
        r = [c.r_occ for c in fl.centerlines if c.r_occ is not None]
        hist += np.histogram(r, bins=edges)[0]
    summary = {
        "frames": len(labels),
        "centerlines": n_cl,
        "r_occ_histogram": {"edges": [round(e, 1) for e in edges], "counts": hist.tolist()},
    }
    if splits is not None:
        counts = {name: len(keys) for name, keys in splits.items()}
        missing = sorted(k for keys in splits.values() for k in keys if k not in labels)
        summary["splits"] = counts
        summary["split_total"] = sum(counts.values())
        summary["missing_frames"] = missing
    data = dump_json(summary)
    if cfg.out:
        Path(cfg.out).write_bytes(data)
    sys.stdout.write(data.decode())
    return summary


def cmd_synth(args) -> int:
    from .synth import Occluder, SceneSpec, generate

    occ = []
    for text in args.occluder or []:
        parts = text.split(",")
        if len(parts) != 4:
            raise UsageError("--occluder expects 'lane,start,end,category'")
        occ.append(Occluder(int(parts[0]), float(parts[1]), float(parts[2]), parts[3]))
    spec = SceneSpec(n_lanes=args.n_lanes, curvature=args.curvature, occluders=tuple(occ),
                     cameras=tuple(args.cameras.split(",")), seed=args.seed or 0, n_frames=args.frames)
    out = Path(args.out or "synth")
    generate(spec).write(out)
    print(f"synthetic bundle ({args.frames} frames) -> {out}")
    return 0


# ----------------------------------------------------------------------- parser

def _common(p, *names):
    opts = {
        "t_occ": lambda: p.add_argument("--t-occ", dest="t_occ", type=float, help="occlusion threshold"),
        "ontology": lambda: p.add_argument("--ontology", help="ontology .json file"),
        "grid": lambda: p.add_argument("--grid", help="x_min,x_max,y_min,y_max,cell"),
        "match": lambda: (p.add_argument("--match-threshold", dest="match_threshold", type=float),
                          p.add_argument("--near", help="lo,hi metres"),
                          p.add_argument("--far", help="lo,hi metres"),
                          p.add_argument("--row-step", dest="row_step", type=float)),
        "seed": lambda: p.add_argument("--seed", type=int),
        "jobs": lambda: p.add_argument("--jobs", type=int),
        "out": lambda: p.add_argument("--out"),
    }
    p.add_argument("--config", help="JSON config or run manifest")
    for n in names:
        opts[n]()


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="clf", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="produce .clabel.json files and a manifest")
    p.add_argument("--map")
    p.add_argument("--trajectory")
    p.add_argument("--calibration")
    p.add_argument("--masks", help="directory of <camera>/<t_ns>.smask")
    p.add_argument("--spacing", type=float)
    p.add_argument("--max-depth", dest="max_depth", type=float)
    p.add_argument("--min-px-gap", dest="min_px_gap", type=float)
    p.add_argument("--min-keypoints", dest="min_keypoints", type=int)
    p.add_argument("--min-length", dest="min_length", type=float)
    p.add_argument("--spline-step", dest="spline_step", type=float)
    _common(p, "t_occ", "ontology", "grid", "seed", "jobs", "out")

    p = sub.add_parser("sample-train", help="pick one frame per window")
    p.add_argument("--labels")
    p.add_argument("--masks")
    p.add_argument("--window", type=int)
    _common(p, "seed", "out")

    p = sub.add_parser("filter", help="re-apply a stricter occlusion threshold")
    p.add_argument("--labels")
    p.add_argument("--calibration")
    _common(p, "t_occ", "grid", "out")

    p = sub.add_parser("decode", help="head outputs (.bevout) to polylines")
    p.add_argument("--bevout")
    p.add_argument("--conf-threshold", dest="conf_threshold", type=float)
    p.add_argument("--embed-radius", dest="embed_radius", type=float)
    p.add_argument("--min-cells", dest="min_cells", type=int)
    _common(p, "grid", "out")

    p = sub.add_parser("eval", help="F1 and X/Z errors")
    p.add_argument("--pred")
    p.add_argument("--gt")
    _common(p, "match", "out")

    p = sub.add_parser("render", help="SVG overlays")
    p.add_argument("--labels")
    p.add_argument("--calibration")
    p.add_argument("--images")
    _common(p, "out")

    p = sub.add_parser("stats", help="dataset summary")
    p.add_argument("--labels")
    p.add_argument("--splits")
    _common(p, "out")

    p = sub.add_parser("synth", help="write a synthetic scene bundle")
    p.add_argument("--n-lanes", dest="n_lanes", type=int, default=3)
    p.add_argument("--curvature", type=float, default=0.0)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--cameras", default="front_center")
    p.add_argument("--occluder", action="append", help="lane,start,end,category")
    p.add_argument("--seed", type=int)
    p.add_argument("--out")
    return parser


COMMANDS = {
    "generate": cmd_generate,
    "sample-train": cmd_sample_train,
    "filter": cmd_filter,
    "decode": cmd_decode,
    "eval": cmd_eval,
    "render": cmd_render,
    "stats": cmd_stats,
}


def main(argv=None) -> int:
    level = os.environ.get("CLF_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        if args.command == "synth":
            return cmd_synth(args)
        cfg = resolve_config(args)
        COMMANDS[args.command](cfg)
    except UsageError as exc:
        print(f"clf {args.command}: {exc}", file=sys.stderr)
        return 2
    except (CenterlineError, OSError) as exc:
        print(f"clf {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:  # bad numeric settings
        print(f"clf {args.command}: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
