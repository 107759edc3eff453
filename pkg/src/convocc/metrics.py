"""Volumetric IoU, Chamfer-L1, normal consistency and F-score."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.spatial import cKDTree

from .geometry import SceneSpec, TriangleMesh, occupancy_query, sample_surface

Solid = Union[SceneSpec, TriangleMesh, Callable[[np.ndarray], np.ndarray]]
Surface = Union[SceneSpec, TriangleMesh]


# ----------------------------------------------------------------------------
# inside tests


def mesh_contains(mesh: TriangleMesh, points: np.ndarray, bins: int = 64) -> np.ndarray:
    """Parity of +x ray crossings; triangles are bucketed on a (y, z) grid."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros(len(pts), dtype=bool)
    if mesh.is_empty or len(pts) == 0:
        return out
    tri = mesh.vertices[mesh.triangles]
    yz = tri[:, :, 1:]
    lo = np.minimum(yz.min(axis=(0, 1)), pts[:, 1:].min(axis=0))
    hi = np.maximum(yz.max(axis=(0, 1)), pts[:, 1:].max(axis=0))
    span = np.where(hi > lo, hi - lo, 1.0)

    def cell(v):
        return np.clip(((v - lo) / span * bins).astype(np.int64), 0, bins - 1)

    tlo, thi = cell(yz.min(axis=1)), cell(yz.max(axis=1))
    pairs_t, pairs_b = [], []
    ny = thi[:, 0] - tlo[:, 0] + 1
    nz = thi[:, 1] - tlo[:, 1] + 1
    for dy in range(int(ny.max())):
        for dz in range(int(nz.max())):
            ok = (dy < ny) & (dz < nz)
            t = np.flatnonzero(ok)
            pairs_t.append(t)
            pairs_b.append((tlo[t, 0] + dy) * bins + tlo[t, 1] + dz)
    pt_t = np.concatenate(pairs_t)
    pt_b = np.concatenate(pairs_b)
    order = np.argsort(pt_b, kind="stable")
    pt_t, pt_b = pt_t[order], pt_b[order]
    starts = np.searchsorted(pt_b, np.arange(bins * bins + 1))
    pc = cell(pts[:, 1:])
    pb = pc[:, 0] * bins + pc[:, 1]
    porder = np.argsort(pb, kind="stable")
    pstarts = np.searchsorted(pb[porder], np.arange(bins * bins + 1))
    counts = np.zeros(len(pts), dtype=np.int64)
    a, b, c = tri[:, 0], tri[:, 1], tri[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        for bidx in np.flatnonzero(np.diff(pstarts) > 0):
            _count_hits(bidx, starts, pstarts, pt_t, porder, pts, a, b, c, counts)
    return counts % 2 == 1


def _count_hits(bidx, starts, pstarts, pt_t, porder, pts, a, b, c, counts) -> None:
    """Add +x ray crossings for the points of one (y, z) bucket."""
    ts = pt_t[starts[bidx]:starts[bidx + 1]]
    if ts.size == 0:
        return
    ps = porder[pstarts[bidx]:pstarts[bidx + 1]]
    p = pts[ps][:, None, :]
    A, B, C = a[ts][None], b[ts][None], c[ts][None]
    # barycentric coordinates in the (y, z) projection
    d = (B[..., 1] - C[..., 1]) * (A[..., 2] - C[..., 2]) - (B[..., 2] - C[..., 2]) * (A[..., 1] - C[..., 1])
    w0 = ((B[..., 1] - C[..., 1]) * (p[..., 2] - C[..., 2]) - (B[..., 2] - C[..., 2]) * (p[..., 1] - C[..., 1])) / d
    w1 = ((C[..., 1] - A[..., 1]) * (p[..., 2] - C[..., 2]) - (C[..., 2] - A[..., 2]) * (p[..., 1] - C[..., 1])) / d
    w2 = 1.0 - w0 - w1
    hit = (d != 0) & (w0 >= 0) & (w1 >= 0) & (w2 >= 0)
    x = w0 * A[..., 0] + w1 * B[..., 0] + w2 * C[..., 0]
    counts[ps] += np.sum(hit & (x > p[..., 0]), axis=1)


def solid_contains(solid: Solid, points: np.ndarray, threshold: float = 0.5) -> np.ndarray:
    if isinstance(solid, SceneSpec):
        return occupancy_query(solid, points).astype(bool)
    if isinstance(solid, TriangleMesh):
        return mesh_contains(solid, points)
    return np.asarray(solid(points)).reshape(-1) >= threshold


def volumetric_iou(pred: Solid, truth: Solid, n_samples: int = 100_000, seed: int = 0) -> float:
    """|A and B| / |A or B| over uniform samples in the unit cube; both empty gives 1."""
    if n_samples < 1:
        raise ValueError("n_samples must be positive")
    pts = np.random.default_rng(seed).uniform(size=(n_samples, 3))
    a = solid_contains(pred, pts)
    b = solid_contains(truth, pts)
    union = np.count_nonzero(a | b)
    if union == 0:
        return 1.0
    return np.count_nonzero(a & b) / union


# ----------------------------------------------------------------------------
# surface samples and nearest neighbours


def surface_samples(surface: Surface, n: int, seed, single_surface: bool = False):
    """(points, normals) drawn area-weighted from a mesh or an analytic scene."""
    if isinstance(surface, SceneSpec):
        pc = sample_surface(surface, n, 0.0, seed=seed, single_surface=single_surface)
        return pc.points, pc.normals
    if surface.is_empty:
        raise ValueError("mesh is empty")
    return surface.sample(n, np.random.default_rng(seed))


def nearest(query: np.ndarray, ref: np.ndarray, workers: int = 1) -> tuple[np.ndarray, np.ndarray]:
    """Distance to and index of the nearest ``ref`` point for every ``query`` point."""
    dist, idx = cKDTree(ref).query(query, k=1, workers=workers)
    return dist, idx


def nearest_brute(query: np.ndarray, ref: np.ndarray, block: int = 512) -> tuple[np.ndarray, np.ndarray]:
    dist = np.empty(len(query))
    idx = np.empty(len(query), dtype=np.int64)
    for s in range(0, len(query), block):
        q = query[s:s + block]
        d2 = ((q[:, None, :] - ref[None]) ** 2).sum(-1)
        j = np.argmin(d2, axis=1)
        idx[s:s + block] = j
        dist[s:s + block] = np.sqrt(d2[np.arange(len(q)), j])
    return dist, idx


@dataclass
class SurfaceMatch:
    pred_to_truth: np.ndarray
    truth_to_pred: np.ndarray
    normal_pred: np.ndarray
    normal_truth: np.ndarray


def match_surfaces(pred: Surface, truth: Surface, n_points: int, seed: int,
                   single_surface: bool = False, workers: int = 1) -> SurfaceMatch:
    # one sample stream per surface, seeded alike: identical inputs give identical samples
    pp, pn = surface_samples(pred, n_points, [seed, 0], single_surface)
    tp, tn = surface_samples(truth, n_points, [seed, 0], single_surface)
    d_pt, i_pt = nearest(pp, tp, workers)
    d_tp, i_tp = nearest(tp, pp, workers)
    cos_p = np.abs(np.sum(pn * tn[i_pt], axis=1))
    cos_t = np.abs(np.sum(tn * pn[i_tp], axis=1))
    return SurfaceMatch(d_pt, d_tp, cos_p, cos_t)


def _empty(surface: Surface) -> bool:
    return isinstance(surface, TriangleMesh) and surface.is_empty


def chamfer_l1(pred: Surface, truth: Surface, n_points: int = 100_000, seed: int = 0,
               single_surface: bool = False) -> float:
    """Mean of accuracy and completeness; +inf if either surface is empty."""
    if _empty(pred) or _empty(truth):
        return math.inf
    m = match_surfaces(pred, truth, n_points, seed, single_surface)
    return 0.5 * (float(m.pred_to_truth.mean()) + float(m.truth_to_pred.mean()))


def normal_consistency(pred: Surface, truth: Surface, n_points: int = 100_000, seed: int = 0,
                       single_surface: bool = False) -> float:
    if _empty(pred) or _empty(truth):
        return 0.0
    m = match_surfaces(pred, truth, n_points, seed, single_surface)
    return 0.5 * (float(m.normal_pred.mean()) + float(m.normal_truth.mean()))


def f_score_from(match: SurfaceMatch, threshold: float) -> tuple[float, float, float]:
    precision = float(np.mean(match.pred_to_truth <= threshold))
    recall = float(np.mean(match.truth_to_pred <= threshold))
    if precision + recall == 0:
        return 0.0, precision, recall
    return 2 * precision * recall / (precision + recall), precision, recall


def f_score(pred: Surface, truth: Surface, threshold: float = 0.01, n_points: int = 100_000,
            seed: int = 0, single_surface: bool = False) -> float:
    if not threshold > 0:
        raise ValueError("F-score threshold must be positive")
    if _empty(pred) or _empty(truth):
        return 0.0
    return f_score_from(match_surfaces(pred, truth, n_points, seed, single_surface), threshold)[0]


# ----------------------------------------------------------------------------
# reports

COLUMNS = (("iou", "IoU"), ("chamfer_l1", "Chamfer-L1"), ("normal_consistency", "Normal C."),
           ("f_score", "F-Score"))


@dataclass
class EvalReport:
    iou: float
    chamfer_l1: float
    normal_consistency: float
    f_score: float
    precision: float
    recall: float
    fscore_threshold: float
    n_points: int
    n_iou_samples: int
    seed: int
    single_surface: bool = False
    flags: list = field(default_factory=list)

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(d["chamfer_l1"]):
            d["chamfer_l1"] = "inf"
        return json.dumps(d, indent=1, sort_keys=True)

    def table(self) -> str:
        heads = [h for _, h in COLUMNS]
        vals = [f"{getattr(self, k):.4f}" for k, _ in COLUMNS]
        widths = [max(len(h), len(v)) for h, v in zip(heads, vals)]
        line1 = "  ".join(h.rjust(w) for h, w in zip(heads, widths))
        line2 = "  ".join(v.rjust(w) for v, w in zip(vals, widths))
        return line1 + "\n" + line2


def evaluate(pred: TriangleMesh, truth: Surface, fscore_threshold: float = 0.01, n_points: int = 100_000,
             n_iou_samples: int = 100_000, seed: int = 0, single_surface: bool = False,
             workers: int = 1) -> EvalReport:
    """All four metrics; IoU needs ``truth`` to be a scene or a closed mesh."""
    if not fscore_threshold > 0:
        raise ValueError("F-score threshold must be positive")
    flags = []
    iou = volumetric_iou(pred, truth, n_iou_samples, seed)
    if _empty(pred) or _empty(truth):
        flags.append("empty mesh")
        return EvalReport(iou, math.inf, 0.0, 0.0, 0.0, 0.0, fscore_threshold, n_points, n_iou_samples,
                          seed, single_surface, flags)
    m = match_surfaces(pred, truth, n_points, seed, single_surface, workers)
    cd = 0.5 * (float(m.pred_to_truth.mean()) + float(m.truth_to_pred.mean()))
    nc = 0.5 * (float(m.normal_pred.mean()) + float(m.normal_truth.mean()))
    fs, p, r = f_score_from(m, fscore_threshold)
    return EvalReport(iou, cd, nc, fs, p, r, fscore_threshold, n_points, n_iou_samples, seed,
                      single_surface, flags)
