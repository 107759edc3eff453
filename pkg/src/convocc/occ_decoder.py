"""Query features from processed grids and the residual occupancy head."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
import scipy.sparse as sp

from . import grad as G
from .encoder import LAYOUT_AXES, FeatureGrid, clamp_unit
from .grad import Tensor
from .nn import Linear, Module

INTERP_MODES = ("bilinear", "nearest")


@dataclass
class OccHeadConfig:
    hidden_dim: int = 32
    resnet_blocks: int = 5
    coord_dim: int = 6
    feature_dim: int = 32


def grid_coords(points: np.ndarray, spatial: Sequence[int]) -> np.ndarray:
    """Map unit-cube coordinates to sampling coordinates of a cell-centred grid.

    Grid sampling places node ``i`` at ``i / (R - 1)``; cell centres live at
    ``(i + 0.5) / R``, so ``g = (u R - 0.5) / (R - 1)``, clamped to the outer
    centres.
    """
    ext = np.asarray(spatial, dtype=np.float64)
    g = (clamp_unit(points) * ext - 0.5) / np.maximum(ext - 1, 1)
    return np.clip(g, 0.0, 1.0)


def _sample(grid: FeatureGrid, points: np.ndarray, mode: str) -> Tensor:
    b = grid.data.shape[0]
    m = points.shape[1]
    axes = list(LAYOUT_AXES[grid.layout])
    spatial = grid.resolution
    if mode == "nearest":
        kind = "nearest"
    else:
        kind = "bilinear" if len(spatial) == 2 else "trilinear"
    coords = grid_coords(points[..., axes], spatial)
    mats = [G.ops.sample_operator(spatial, coords[i], kind) for i in range(b)]
    mat = mats[0] if b == 1 else sp.block_diag(mats, format="csr")
    return G.sparse_apply(mat, grid.data, out_lead=(b, m), op=f"sample_{grid.layout}")


def query_feature(grids: Sequence[FeatureGrid], points: np.ndarray, mode: str = "bilinear") -> Tensor:
    """psi(p): sum of every grid's interpolated feature at ``points`` (B, M, 3)."""
    if not grids:
        raise ValueError("query_feature needs at least one feature grid")
    if mode not in INTERP_MODES:
        raise ValueError(f"unknown interpolation mode {mode!r}; valid: {', '.join(INTERP_MODES)}")
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    d = {g.channels for g in grids}
    if len(d) != 1:
        raise ValueError(f"feature grids disagree on channel count: {sorted(d)}")
    psi = None
    for grid in grids:
        f = _sample(grid, pts, mode)
        psi = f if psi is None else G.add(psi, f)
    return psi


class OccupancyHead(Module):
    """h = lift(p); per block x = h + W psi, h = x + FC(relu(FC(relu(x)))); logit = out(relu(h))."""

    def __init__(self, cfg: OccHeadConfig, rng: np.random.Generator, dtype=np.float64):
        hd = cfg.hidden_dim
        self.cfg = cfg
        self.lift = Linear(cfg.coord_dim, hd, rng, dtype)
        self.inject = [Linear(cfg.feature_dim, hd, rng, dtype) for _ in range(cfg.resnet_blocks)]
        self.fc0 = [Linear(hd, hd, rng, dtype) for _ in range(cfg.resnet_blocks)]
        self.fc1 = [Linear(hd, hd, rng, dtype) for _ in range(cfg.resnet_blocks)]
        self.out = Linear(hd, 1, rng, dtype, zero=True)

    def logits(self, coords: Tensor, psi: Tensor) -> Tensor:
        """``coords`` (B, M, c); ``psi`` (B, M, d) or a per-item code (B, d)."""
        if not np.isfinite(psi.data).all():
            raise G.GradError("occupancy head: non-finite query feature psi")
        b, m = coords.shape[:2]
        per_item = psi.ndim == 2
        h = self.lift(coords)
        for inj, f0, f1 in zip(self.inject, self.fc0, self.fc1):
            c = inj(psi)
            if per_item:
                c = G.reshape(c, (b, 1, c.shape[-1]))
            x = G.add(h, c)
            h = G.add(x, f1(G.relu(f0(G.relu(x)))))
        return G.reshape(self.out(G.relu(h)), (b, m))


def occupancy_forward(head: OccupancyHead, coords: Tensor, psi: Tensor) -> Tensor:
    """Occupancy probabilities in [0, 1] for each query."""
    return G.sigmoid(head.logits(coords, psi))


def predict_batch(model, inputs, points: np.ndarray, chunk: int = 100_000) -> np.ndarray:
    """Full pipeline evaluation; see ``ConvOccNet.predict``."""
    return model.predict(inputs, points, chunk=chunk)
