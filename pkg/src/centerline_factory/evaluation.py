"""Centerline matching and benchmark metrics (F1, X/Z errors near and far).

Polylines live in the BEV frame (x lateral, y forward, z up). Both sides are
sampled at the same longitudinal rows; a prediction and a ground-truth lane
are compatible when their mean lateral gap over shared rows is within the
match threshold. Matching maximises the number of compatible pairs and,
among those, minimises the summed gap. X/Z errors are averaged over matched
points (not lanes) within each band.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linear_sum_assignment


@dataclass(frozen=True)
class MatchSpec:
    match_threshold: float = 1.5
    near_band: Tuple[float, float] = (0.0, 40.0)
    far_band: Tuple[float, float] = (40.0, 100.0)
    row_step: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "near_band", tuple(float(v) for v in self.near_band))
        object.__setattr__(self, "far_band", tuple(float(v) for v in self.far_band))
        if not self.match_threshold > 0:
            raise ValueError("match_threshold must be positive")
        if not self.row_step > 0:
            raise ValueError("row_step must be positive")
        (a0, a1), (b0, b1) = self.near_band, self.far_band
        if not (a0 < a1 and b0 < b1):
            raise ValueError("bands must be non-empty intervals")
        if a0 < b1 and b0 < a1:
            raise ValueError("near and far bands overlap")

    def rows(self) -> np.ndarray:
        lo = min(self.near_band[0], self.far_band[0])
        hi = max(self.near_band[1], self.far_band[1])
        n = int(np.floor((hi - lo) / self.row_step + 1e-9))
        return lo + (np.arange(n) + 0.5) * self.row_step

    def to_dict(self) -> dict:
        d = asdict(self)
        d["near_band"] = list(self.near_band)
        d["far_band"] = list(self.far_band)
        return d


def sample_rows(polyline, rows) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Interpolate x and z at the given y rows; rows outside the polyline's
    y-span are flagged invalid."""
    P = np.asarray(polyline, dtype=float).reshape(-1, 3)
    valid = np.zeros(len(rows), bool)
    x = np.full(len(rows), np.nan)
    z = np.full(len(rows), np.nan)
    if len(P) == 0:
        return x, z, valid
    P = P[np.argsort(P[:, 1], kind="stable")]
    valid = (rows >= P[0, 1]) & (rows <= P[-1, 1])
    if len(P) == 1:
        x[valid], z[valid] = P[0, 0], P[0, 2]
        return x, z, valid
    x[valid] = np.interp(rows[valid], P[:, 1], P[:, 0])
    z[valid] = np.interp(rows[valid], P[:, 1], P[:, 2])
    return x, z, valid


@dataclass
class Assignment:
    pairs: List[Tuple[int, int]]
    cost: np.ndarray        # (n_pred, n_gt) mean |dx|, inf when incompatible
    n_pred: int
    n_gt: int
    rows: np.ndarray
    pred_samples: list
    gt_samples: list

    @property
    def unmatched_pred(self) -> List[int]:
        used = {i for i, _ in self.pairs}
        return [i for i in range(self.n_pred) if i not in used]

    @property
    def unmatched_gt(self) -> List[int]:
        used = {j for _, j in self.pairs}
        return [j for j in range(self.n_gt) if j not in used]

    @property
    def total_cost(self) -> float:
        return float(sum(self.cost[i, j] for i, j in self.pairs))


def cost_matrix(pred_samples, gt_samples, threshold: float) -> np.ndarray:
    cost = np.full((len(pred_samples), len(gt_samples)), np.inf)
    for i, (px, _, pv) in enumerate(pred_samples):
        for j, (gx, _, gv) in enumerate(gt_samples):
            shared = pv & gv
            if not np.any(shared):
                continue
            gap = float(np.mean(np.abs(px[shared] - gx[shared])))
            if gap <= threshold:
                cost[i, j] = gap
    return cost


def match(pred: Sequence, gt: Sequence, spec: MatchSpec = MatchSpec()) -> Assignment:
    rows = spec.rows()
    ps = [sample_rows(p, rows) for p in pred]
    gs = [sample_rows(g, rows) for g in gt]
    cost = cost_matrix(ps, gs, spec.match_threshold)
    pairs = []
    if cost.size:
        finite = np.isfinite(cost)
        # an incompatible pair must cost more than any full set of compatible ones
        penalty = spec.match_threshold * (min(cost.shape) + 1) + 1.0
        r, c = linear_sum_assignment(np.where(finite, cost, penalty))
        pairs = [(int(i), int(j)) for i, j in zip(r, c) if finite[i, j]]
    return Assignment(pairs, cost, len(ps), len(gs), rows, ps, gs)


@dataclass
class Tally:
    """Additive per-frame counts; summing tallies is order-independent."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    x_near_sum: float = 0.0
    x_near_n: int = 0
    x_far_sum: float = 0.0
    x_far_n: int = 0
    z_near_sum: float = 0.0
    z_near_n: int = 0
    z_far_sum: float = 0.0
    z_far_n: int = 0

    def __add__(self, other: "Tally") -> "Tally":
        return Tally(**{k: getattr(self, k) + getattr(other, k) for k in self.__dataclass_fields__})

    def report(self, spec: MatchSpec = MatchSpec()) -> "MetricsReport":
        return MetricsReport.from_tally(self, spec)


def _mean(s, n):
    return s / n if n else None


@dataclass
class MetricsReport:
    f1: float
    precision: float
    recall: float
    x_err_near: Optional[float]
    x_err_far: Optional[float]
    z_err_near: Optional[float]
    z_err_far: Optional[float]
    tp: int
    fp: int
    fn: int
    degenerate: bool = False

    @classmethod
    def from_tally(cls, t: Tally, spec: MatchSpec = MatchSpec()) -> "MetricsReport":
        degenerate = (t.tp + t.fp == 0) or (t.tp + t.fn == 0)
        p = t.tp / (t.tp + t.fp) if t.tp + t.fp else 0.0
        r = t.tp / (t.tp + t.fn) if t.tp + t.fn else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        return cls(f1, p, r,
                   _mean(t.x_near_sum, t.x_near_n), _mean(t.x_far_sum, t.x_far_n),
                   _mean(t.z_near_sum, t.z_near_n), _mean(t.z_far_sum, t.z_far_n),
                   t.tp, t.fp, t.fn, degenerate)

    def to_dict(self) -> dict:
        return asdict(self)


def tally(assignment: Assignment, spec: MatchSpec = MatchSpec()) -> Tally:
    t = Tally(tp=len(assignment.pairs),
              fp=assignment.n_pred - len(assignment.pairs),
              fn=assignment.n_gt - len(assignment.pairs))
    rows = assignment.rows
    near = (rows >= spec.near_band[0]) & (rows < spec.near_band[1])
    far = (rows >= spec.far_band[0]) & (rows < spec.far_band[1])
    for i, j in assignment.pairs:
        px, pz, pv = assignment.pred_samples[i]
        gx, gz, gv = assignment.gt_samples[j]
        shared = pv & gv
        dx = np.abs(px - gx)
        dz = np.abs(pz - gz)
        for band, name in ((near, "near"), (far, "far")):
            m = shared & band
            n = int(np.count_nonzero(m))
            setattr(t, f"x_{name}_sum", getattr(t, f"x_{name}_sum") + float(dx[m].sum()))
            setattr(t, f"x_{name}_n", getattr(t, f"x_{name}_n") + n)
            setattr(t, f"z_{name}_sum", getattr(t, f"z_{name}_sum") + float(dz[m].sum()))
            setattr(t, f"z_{name}_n", getattr(t, f"z_{name}_n") + n)
    return t


def score(assignment: Assignment, spec: MatchSpec = MatchSpec()) -> MetricsReport:
    return MetricsReport.from_tally(tally(assignment, spec), spec)


def evaluate(pred: Sequence, gt: Sequence, spec: MatchSpec = MatchSpec()) -> MetricsReport:
    """Match and score one frame."""
    return score(match(pred, gt, spec), spec)


def evaluate_corpus(frames, spec: MatchSpec = MatchSpec()):
    """``frames`` yields ``(frame_id, pred, gt)``. Returns (per-frame rows, corpus report)."""
    rows, total = [], Tally()
    for frame_id, pred, gt in frames:
        t = tally(match(pred, gt, spec), spec)
        total = total + t
        rows.append({"frame_id": frame_id, **MetricsReport.from_tally(t, spec).to_dict()})
    return rows, MetricsReport.from_tally(total, spec)
