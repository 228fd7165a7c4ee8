"""Semantic category ontology and occlusion-aware keypoint filtering.

Every semantic class maps to a subcategory, and every subcategory to one of
three parent categories:

``valid``
    drivable surface; the keypoint is kept.
``occlusion_valid``
    on-road occluders with context (vehicles, people); the keypoint is kept
    but counts as occluded.
``invalid``
    context-free occluders (buildings, vegetation, sky, ...); the keypoint is
    dropped and counts as occluded.

A centerline's occlusion ratio is ``n_occluded / n_total`` and the whole
centerline is discarded once that ratio reaches the threshold ``t_occ``.
"""
from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from typing import Dict

import numpy as np

from .errors import EmptyCenterline, LengthMismatch, OutOfRange, SchemaError
from .ingest import UNLABELED, load_json, validate


class Category(str, enum.Enum):
    VALID = "valid"
    OCCLUSION_VALID = "occlusion_valid"
    INVALID = "invalid"

    @property
    def code(self) -> int:
        return _CODES[self]


_CODES = {Category.VALID: 0, Category.OCCLUSION_VALID: 1, Category.INVALID: 2}
CATEGORY_BY_CODE = (Category.VALID, Category.OCCLUSION_VALID, Category.INVALID)

ONTOLOGY_SCHEMA = {
    "type": "object",
    "required": ["subcategories", "parents"],
    "properties": {
        "subcategories": {
            "type": "object",
            "additionalProperties": {
                "type": "array",
                "items": {"type": "integer", "minimum": 0, "maximum": 255},
            },
        },
        "parents": {
            "type": "object",
            "required": ["valid", "occlusion_valid", "invalid"],
            "properties": {c.value: {"type": "array", "items": {"type": "string"}} for c in Category},
            "additionalProperties": False,
        },
        "class_names": {"type": "object", "additionalProperties": {"type": "string"}},
    },
    "additionalProperties": False,
}


@dataclass(frozen=True, eq=False)
class OcclusionOntology:
    class_to_subcategory: Dict[int, str]
    subcategory_to_parent: Dict[str, Category]
    class_names: Dict[int, str] = field(default_factory=dict)

    def __post_init__(self):
        for sub in self.class_to_subcategory.values():
            if sub not in self.subcategory_to_parent:
                raise SchemaError(f"subcategory {sub!r} has no parent category")
        if UNLABELED in self.class_to_subcategory:
            sub = self.class_to_subcategory[UNLABELED]
            if self.subcategory_to_parent[sub] is not Category.INVALID:
                raise SchemaError("the unlabeled class 255 must resolve to 'invalid'")
        table = np.full(256, Category.INVALID.code, dtype=np.int8)
        for cid, sub in self.class_to_subcategory.items():
            table[cid] = self.subcategory_to_parent[sub].code
        table.setflags(write=False)
        object.__setattr__(self, "table", table)

    def categorize(self, class_id) -> Category:
        return categorize(class_id, self)

    def categories(self, class_ids) -> np.ndarray:
        """Vectorised lookup returning category codes (0 valid, 1 occlusion_valid, 2 invalid)."""
        return self.table[np.asarray(class_ids, dtype=np.intp)]

    def representative_class(self, category) -> int:
        """Smallest class id whose parent category is ``category``."""
        category = Category(category)
        ids = sorted(c for c, s in self.class_to_subcategory.items()
                     if self.subcategory_to_parent[s] is category)
        if not ids:
            raise KeyError(f"no class maps to {category.value}")
        return ids[0]

    def to_dict(self) -> dict:
        subs = {s: [] for s in self.subcategory_to_parent}
        for cid in sorted(self.class_to_subcategory):
            subs[self.class_to_subcategory[cid]].append(cid)
        parents = {c.value: [s for s, p in self.subcategory_to_parent.items() if p is c] for c in Category}
        doc = {"subcategories": subs, "parents": parents}
        if self.class_names:
            doc["class_names"] = {str(k): v for k, v in sorted(self.class_names.items())}
        return doc


def parse_ontology(data) -> OcclusionOntology:
    doc = load_json(data, "ontology")
    validate(doc, ONTOLOGY_SCHEMA, "ontology")
    sub_parent = {}
    for cat in Category:
        for sub in doc["parents"][cat.value]:
            if sub in sub_parent:
                raise SchemaError(f"subcategory {sub!r} has two parents", f"/parents/{cat.value}")
            sub_parent[sub] = cat
    class_sub = {}
    for sub, ids in doc["subcategories"].items():
        if sub not in sub_parent:
            raise SchemaError(f"subcategory {sub!r} has no parent category", f"/subcategories/{sub}")
        for cid in ids:
            cid = int(cid)
            if cid in class_sub:
                raise SchemaError(f"class {cid} listed in two subcategories", f"/subcategories/{sub}")
            class_sub[cid] = sub
    names = {int(k): v for k, v in doc.get("class_names", {}).items() if k.isdigit()}
    return OcclusionOntology(class_sub, sub_parent, names)


def default_ontology() -> OcclusionOntology:
    """The shipped nine-subcategory ontology over Mapillary-Vistas-style class ids."""
    data = resources.files("centerline_factory").joinpath("data/default.ontology.json").read_bytes()
    return parse_ontology(data)


def categorize(class_id, ontology: OcclusionOntology) -> Category:
    sub = ontology.class_to_subcategory.get(int(class_id))
    if sub is None:
        return Category.INVALID
    return ontology.subcategory_to_parent[sub]


def sample_classes(mask, pixels) -> np.ndarray:
    """Class id under each pixel position.

    A continuous position ``(u, v)`` belongs to the integer pixel
    ``(floor(u), floor(v))``, i.e. pixel ``i`` covers ``[i, i + 1)``.
    Positions outside the raster are an upstream bug and raise ``OutOfRange``.
    """
    pix = np.asarray(pixels, dtype=float).reshape(-1, 2)
    col = np.floor(pix[:, 0]).astype(np.int64)
    row = np.floor(pix[:, 1]).astype(np.int64)
    outside = (col < 0) | (col >= mask.width) | (row < 0) | (row >= mask.height)
    if np.any(outside):
        i = int(np.flatnonzero(outside)[0])
        raise OutOfRange(f"keypoint {i} at {tuple(pix[i])} lies outside the {mask.width}x{mask.height} mask")
    return mask.labels[row, col]


@dataclass(frozen=True)
class OcclusionVerdict:
    kept: tuple
    n_total: int
    n_occluded: int
    removed: bool

    @property
    def ratio(self) -> float:
        return self.n_occluded / self.n_total

    @property
    def fraction(self) -> Fraction:
        return Fraction(self.n_occluded, self.n_total)


def occlusion_verdict(class_ids, ontology: OcclusionOntology, t_occ: float) -> OcclusionVerdict:
    codes = ontology.categories(class_ids)
    n = len(codes)
    if n == 0:
        raise EmptyCenterline("centerline has no keypoints")
    n_occ = int(np.count_nonzero(codes != Category.VALID.code))
    kept = tuple(int(j) for j in np.flatnonzero(codes != Category.INVALID.code))
    return OcclusionVerdict(kept, n, n_occ, removed=not (n_occ / n < t_occ))


def filter_keypoints(P, P_labels, ontology: OcclusionOntology, t_occ: float):
    """Occlusion filtering over a batch of centerlines.

    ``P[i]`` holds the keypoints of centerline ``i`` (a sequence or an array
    whose first axis indexes keypoints) and ``P_labels[i]`` their class ids.
    Returns ``(verdicts, P_filtered)``: one verdict per input centerline and
    the kept keypoints of every centerline that survives, in input order.
    """
    if t_occ < 0:
        raise ValueError("t_occ must be non-negative")
    if len(P) != len(P_labels):
        raise LengthMismatch(f"{len(P)} centerlines but {len(P_labels)} label lists")
    verdicts, filtered = [], []
    for i, (points, labels) in enumerate(zip(P, P_labels)):
        if len(points) != len(labels):
            raise LengthMismatch(f"centerline {i}: {len(points)} keypoints but {len(labels)} labels")
        verdict = occlusion_verdict(labels, ontology, t_occ)
        verdicts.append(verdict)
        if not verdict.removed:
            if isinstance(points, np.ndarray):
                filtered.append(points[list(verdict.kept)])
            else:
                filtered.append([points[j] for j in verdict.kept])
    return verdicts, filtered


def retained_ratio_mask(ratios, t_occ: float) -> np.ndarray:
    """Which of the given occlusion ratios survive threshold ``t_occ``."""
    return np.asarray(ratios, dtype=float) < t_occ
