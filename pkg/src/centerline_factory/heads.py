"""Loss kernels for the 2D and 3D centerline heads, and the BEV decoder.

Every kernel returns ``(value, gradient)`` where the gradient is taken with
respect to the prediction argument and has its shape. Embedding fields are an
``(..., D)`` array of vectors plus an ``(...)`` array of instance ids where
0 marks background.
"""
from __future__ import annotations

import struct
import warnings
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.special import expit, logit

from .errors import DegenerateMaskWarning, NoForeground, SchemaError, ShapeMismatch
from .labelgen import BEVGridSpec, BEVTargets

BCE_EPS = 1e-7


@dataclass(frozen=True)
class LossParams:
    delta_pull: float = 0.5
    delta_push: float = 3.0
    lambda_2d_pull: float = 1.0
    lambda_2d_push: float = 1.0
    lambda_2d_seg: float = 2.0
    lambda_3d_pull: float = 1.0
    lambda_3d_push: float = 1.0
    lambda_3d_seg: float = 2.0
    lambda_3d_offset: float = 1.0
    lambda_3d_height: float = 1.0

    def __post_init__(self):
        if any(v < 0 for v in vars(self).values()):
            raise ValueError("loss parameters must be non-negative")
        if not self.delta_push > 2 * self.delta_pull:
            raise ValueError("delta_push must exceed 2 * delta_pull")


def _flatten_field(embed, instance):
    embed = np.asarray(embed, dtype=float)
    instance = np.asarray(instance)
    if embed.shape[:-1] != instance.shape:
        raise ShapeMismatch(f"embedding {embed.shape} does not match instance grid {instance.shape}")
    return embed.reshape(-1, embed.shape[-1]), instance.reshape(-1)


def _instance_means(x, ids):
    labels = np.unique(ids[ids > 0])
    index = np.searchsorted(labels, ids)
    fg = ids > 0
    counts = np.bincount(index[fg], minlength=len(labels)).astype(float)
    sums = np.zeros((len(labels), x.shape[1]))
    np.add.at(sums, index[fg], x[fg])
    return labels, index, counts, sums / counts[:, None]


def pull_loss(embed, instance, delta_pull: float):
    """Mean over instances of the mean squared hinge ``[|mu_c - x_i| - delta]_+^2``."""
    x, ids = _flatten_field(embed, instance)
    fg = ids > 0
    if not np.any(fg):
        raise NoForeground("pull loss needs at least one instance")
    labels, index, counts, mu = _instance_means(x, ids)
    C = len(labels)
    diff = mu[index[fg]] - x[fg]
    dist = np.linalg.norm(diff, axis=1)
    hinge = np.maximum(dist - delta_pull, 0.0)
    n_c = counts[index[fg]]
    value = float(np.sum(hinge ** 2 / n_c) / C)

    # d dist_i / d x_j = u_i / N_c - [i == j] u_i with u_i = (mu - x_i) / |mu - x_i|
    u = np.divide(diff, dist[:, None], out=np.zeros_like(diff), where=dist[:, None] > 0)
    w = (2.0 / (C * n_c))[:, None] * hinge[:, None] * u
    per_inst = np.zeros((C, x.shape[1]))
    np.add.at(per_inst, index[fg], w)
    g = np.zeros_like(x)
    g[fg] = per_inst[index[fg]] / n_c[:, None] - w
    return value, g.reshape(np.shape(embed))


def push_loss(embed, instance, delta_push: float):
    """Mean over ordered instance pairs of ``[delta - |mu_a - mu_b|]_+^2``; 0 when C < 2."""
    x, ids = _flatten_field(embed, instance)
    fg = ids > 0
    g = np.zeros_like(x)
    if not np.any(fg):
        return 0.0, g.reshape(np.shape(embed))
    labels, index, counts, mu = _instance_means(x, ids)
    C = len(labels)
    if C < 2:
        return 0.0, g.reshape(np.shape(embed))
    diff = mu[:, None, :] - mu[None, :, :]
    dist = np.linalg.norm(diff, axis=2)
    off = ~np.eye(C, dtype=bool)
    hinge = np.where(off, np.maximum(delta_push - dist, 0.0), 0.0)
    norm = 1.0 / (C * (C - 1))
    value = float(norm * np.sum(hinge ** 2))
    # both ordered pairs (a, b) and (b, a) depend on mu_a
    u = np.divide(diff, dist[..., None], out=np.zeros_like(diff), where=dist[..., None] > 0)
    g_mu = -4.0 * norm * np.sum(hinge[..., None] * u, axis=1)
    g[fg] = g_mu[index[fg]] / counts[index[fg]][:, None]
    return value, g.reshape(np.shape(embed))


def embed_loss(embed, instance, params: LossParams = LossParams(), head: str = "3d"):
    """``lambda_pull * pull + lambda_push * push`` for the chosen head."""
    lp = getattr(params, f"lambda_{head}_pull")
    ls = getattr(params, f"lambda_{head}_push")
    v_pull, g_pull = pull_loss(embed, instance, params.delta_pull)
    v_push, g_push = push_loss(embed, instance, params.delta_push)
    return lp * v_pull + ls * v_push, lp * g_pull + ls * g_push


def weighted_bce(conf, gt_mask, eps: float = BCE_EPS):
    """Binary cross-entropy with inverse class-frequency weights.

    ``w_fg = N / (2 N_fg)`` and ``w_bg = N / (2 N_bg)``; the loss is the mean
    weighted per-element BCE. If either class is absent the weights are
    undefined and plain BCE is used, with a ``DegenerateMaskWarning``.
    """
    p_raw = np.asarray(conf, dtype=float)
    y = np.asarray(gt_mask).astype(bool)
    if p_raw.shape != y.shape:
        raise ShapeMismatch(f"conf {p_raw.shape} vs mask {y.shape}")
    n = y.size
    n_fg = int(np.count_nonzero(y))
    n_bg = n - n_fg
    if n_fg == 0 or n_bg == 0:
        warnings.warn("mask has a single class; falling back to unweighted BCE", DegenerateMaskWarning, stacklevel=2)
        w = np.ones(y.shape)
    else:
        w = np.where(y, n / (2.0 * n_fg), n / (2.0 * n_bg))
    p = np.clip(p_raw, eps, 1.0 - eps)
    per = -np.where(y, np.log(p), np.log1p(-p))
    value = float(np.sum(w * per) / n)
    dp = np.where(y, -1.0 / p, 1.0 / (1.0 - p))
    inside = (p_raw > eps) & (p_raw < 1.0 - eps)
    grad = np.where(inside, w * dp / n, 0.0)
    return value, grad


def offset_loss(x_offset_logits, gt_x_offset, seg_mask):
    """``sum over lane cells of (sigmoid(logit) - gt)^2``."""
    a = np.asarray(x_offset_logits, dtype=float)
    gt = np.asarray(gt_x_offset, dtype=float)
    m = np.asarray(seg_mask).astype(bool)
    if not (a.shape == gt.shape == m.shape):
        raise ShapeMismatch(f"logits {a.shape}, target {gt.shape}, mask {m.shape}")
    s = expit(a)
    r = np.where(m, s - np.where(m, gt, 0.0), 0.0)
    return float(np.sum(r * r)), 2.0 * r * s * (1.0 - s)


def height_loss(height, gt_height, seg_mask):
    """``sum over lane cells of (h_pred - h)^2``."""
    h = np.asarray(height, dtype=float)
    gt = np.asarray(gt_height, dtype=float)
    m = np.asarray(seg_mask).astype(bool)
    if not (h.shape == gt.shape == m.shape):
        raise ShapeMismatch(f"height {h.shape}, target {gt.shape}, mask {m.shape}")
    r = np.where(m, h - np.where(m, gt, 0.0), 0.0)
    return float(np.sum(r * r)), 2.0 * r


def total_2d_loss(conf, gt_mask, embed, instance, params: LossParams = LossParams(), return_terms=False):
    e, _ = embed_loss(embed, instance, params, head="2d")
    seg, _ = weighted_bce(conf, gt_mask)
    total = e + params.lambda_2d_seg * seg
    if return_terms:
        return total, {"embed": e, "seg": seg}
    return total


def total_3d_loss(out: "HeadOutput", targets: BEVTargets, params: LossParams = LossParams(), return_terms=False):
    e, _ = embed_loss(out.embed, targets.instance, params, head="3d")
    seg, _ = weighted_bce(out.conf, targets.seg)
    off, _ = offset_loss(out.x_offset_logits, targets.x_offset, targets.seg)
    hgt, _ = height_loss(out.height, targets.height, targets.seg)
    total = (e + params.lambda_3d_seg * seg + params.lambda_3d_offset * off
             + params.lambda_3d_height * hgt)
    if return_terms:
        return total, {"embed": e, "seg": seg, "offset": off, "height": hgt}
    return total


# ------------------------------------------------------------------ head output

BEVOUT_MAGIC = b"BVO1"
_BEVOUT_HEADER = struct.Struct("<4sIII")


@dataclass(frozen=True, eq=False)
class HeadOutput:
    conf: np.ndarray             # (s2, s1) in [0, 1]
    embed: np.ndarray            # (s2, s1, N_e)
    x_offset_logits: np.ndarray  # (s2, s1)
    height: np.ndarray           # (s2, s1)

    def __post_init__(self):
        shape = np.shape(self.conf)
        if not (np.shape(self.x_offset_logits) == shape == np.shape(self.height)
                and np.shape(self.embed)[:-1] == shape and len(shape) == 2):
            raise ShapeMismatch("head output planes disagree in shape")
        c = np.asarray(self.conf)
        if np.any((c < 0) | (c > 1)):
            raise ValueError("confidence must lie in [0, 1]")

    @property
    def n_embed(self) -> int:
        return self.embed.shape[-1]

    @classmethod
    def from_targets(cls, targets: BEVTargets, n_embed: int = 4, separation: float = 10.0) -> "HeadOutput":
        """A perfect prediction for ``targets``: conf = seg, exact logits and
        heights, and instance ``k`` embedded at ``k * separation`` on the first axis."""
        seg = targets.seg.astype(float)
        with np.errstate(divide="ignore"):
            logits = np.where(targets.seg > 0, logit(np.nan_to_num(targets.x_offset)), 0.0)
        embed = np.zeros(targets.seg.shape + (n_embed,))
        embed[..., 0] = targets.instance * separation
        height = np.where(targets.seg > 0, np.nan_to_num(targets.height), 0.0)
        return cls(seg, embed, logits, height)


def write_bevout(out: HeadOutput) -> bytes:
    s2, s1 = out.conf.shape
    parts = [_BEVOUT_HEADER.pack(BEVOUT_MAGIC, s1, s2, out.n_embed)]
    for plane in (out.conf, out.embed, out.x_offset_logits, out.height):
        parts.append(np.ascontiguousarray(plane, dtype="<f4").tobytes())
    return b"".join(parts)


def read_bevout(data) -> HeadOutput:
    data = bytes(data)
    if len(data) < _BEVOUT_HEADER.size:
        raise SchemaError("bevout shorter than its header", "header")
    magic, s1, s2, ne = _BEVOUT_HEADER.unpack_from(data)
    if magic != BEVOUT_MAGIC:
        raise SchemaError(f"bad magic {magic!r}", "header/magic")
    if s1 == 0 or s2 == 0 or ne == 0:
        raise SchemaError("zero-sized bevout", "header")
    n = s1 * s2
    want = _BEVOUT_HEADER.size + 4 * n * (3 + ne)
    if len(data) != want:
        raise SchemaError(f"expected {want} bytes for {s1}x{s2}x{ne}, got {len(data)}", "payload")
    flat = np.frombuffer(data, dtype="<f4", offset=_BEVOUT_HEADER.size).astype(float)
    conf = flat[:n].reshape(s2, s1)
    embed = flat[n:n + n * ne].reshape(s2, s1, ne)
    logits = flat[n + n * ne:2 * n + n * ne].reshape(s2, s1)
    height = flat[2 * n + n * ne:].reshape(s2, s1)
    try:
        return HeadOutput(conf, embed, logits, height)
    except ValueError as exc:
        raise SchemaError(str(exc), "payload/conf") from None


# ---------------------------------------------------------------------- decode

def cluster_cells(out: HeadOutput, conf_threshold: float = 0.5, embed_radius: float = 1.5) -> np.ndarray:
    """Greedy embedding clustering of confident cells.

    Seeds at the most confident unassigned cell and absorbs, in decreasing
    confidence order, every unassigned cell whose embedding lies within
    ``embed_radius`` of the running cluster mean. Returns an ``(s2, s1)``
    label grid, 0 for unassigned.
    """
    conf = np.asarray(out.conf, dtype=float)
    flat_conf = conf.ravel()
    cand = np.flatnonzero(flat_conf >= conf_threshold)
    order = cand[np.argsort(-flat_conf[cand], kind="stable")]
    emb = out.embed.reshape(-1, out.n_embed)
    labels = np.zeros(conf.size, np.int32)
    free = np.ones(len(order), bool)
    k = 0
    for i in range(len(order)):
        if not free[i]:
            continue
        k += 1
        free[i] = False
        labels[order[i]] = k
        total = emb[order[i]].copy()
        count = 1
        for j in np.flatnonzero(free):
            e = emb[order[j]]
            if np.linalg.norm(e - total / count) < embed_radius:
                free[j] = False
                labels[order[j]] = k
                total += e
                count += 1
    return labels.reshape(conf.shape)


def decode_bev(out: HeadOutput, grid: BEVGridSpec = BEVGridSpec(), conf_threshold: float = 0.5,
               embed_radius: float = 1.5, min_cells: int = 2) -> List[np.ndarray]:
    """Turn head outputs into BEV-frame 3D polylines sorted by y.

    Within a cluster each row contributes its most confident cell, placed at
    ``x = left edge + sigmoid(logit) * cell``, ``y = row centre``, ``z = height``.
    """
    if out.conf.shape != grid.shape:
        raise ShapeMismatch(f"head output {out.conf.shape} does not match grid {grid.shape}")
    labels = cluster_cells(out, conf_threshold, embed_radius)
    lines = []
    for k in range(1, int(labels.max(initial=0)) + 1):
        rows, cols = np.nonzero(labels == k)
        if len(rows) < min_cells:
            continue
        c = out.conf[rows, cols]
        # best cell per row: sort by row then by descending confidence
        order = np.lexsort((-c, rows))
        rows, cols = rows[order], cols[order]
        head = np.concatenate([[True], rows[1:] != rows[:-1]])
        rows, cols = rows[head], cols[head]
        x = grid.x_min + (cols + expit(out.x_offset_logits[rows, cols])) * grid.cell
        y = grid.y_min + (rows + 0.5) * grid.cell
        z = out.height[rows, cols]
        lines.append(np.stack([x, y, z], axis=1))
    return lines
