"""Point and voxel encoders that scatter learned features onto planes and volumes.

Grids are channels-last ``(B, *spatial, d)``. Cell ``c`` along an axis with
``R`` cells covers ``[c / R, (c + 1) / R)`` and its feature sits at the cell
centre ``(c + 0.5) / R``.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from . import grad as G
from .grad import Tensor
from .nn import Conv, Linear, Module

MODES = ("single_plane", "three_planes", "volume", "hybrid", "global_baseline")
PLANE_AXES = {"plane_xy": (0, 1), "plane_xz": (0, 2), "plane_yz": (1, 2)}
LAYOUT_AXES = dict(PLANE_AXES, volume=(0, 1, 2))


@dataclass
class EncoderConfig:
    mode: str = "three_planes"
    plane_resolution: int = 64
    volume_resolution: int = 32
    feature_dim: int = 32
    point_net_blocks: int = 5

    def validate(self) -> None:
        if self.mode not in MODES:
            raise ValueError(f"unknown encoder mode {self.mode!r}; valid modes: {', '.join(MODES)}")
        if self.plane_resolution < 2 or self.volume_resolution < 2:
            raise ValueError("grid resolutions must be >= 2")
        if self.feature_dim < 1 or self.point_net_blocks < 0:
            raise ValueError("feature_dim must be >= 1 and point_net_blocks >= 0")

    @property
    def layouts(self) -> tuple[str, ...]:
        return {
            "single_plane": ("plane_xy",),
            "three_planes": ("plane_xy", "plane_xz", "plane_yz"),
            "volume": ("volume",),
            "hybrid": ("plane_xy", "plane_xz", "plane_yz", "volume"),
            "global_baseline": (),
        }[self.mode]


@dataclass
class Lattice:
    """Cells per axis for the plane family and for the volume.

    A plane layout takes its two extents from ``plane_cells``; e.g. ``plane_xz``
    has spatial shape ``(plane_cells[0], plane_cells[2])``.
    """

    layouts: tuple[str, ...]
    plane_cells: tuple[int, int, int] = (64, 64, 64)
    volume_cells: tuple[int, int, int] = (32, 32, 32)

    @classmethod
    def from_config(cls, cfg: EncoderConfig, volume_cells: Optional[Sequence[int]] = None) -> "Lattice":
        vc = tuple(int(v) for v in volume_cells) if volume_cells is not None else (cfg.volume_resolution,) * 3
        return cls(cfg.layouts, (cfg.plane_resolution,) * 3, vc)

    def spatial(self, layout: str) -> tuple[int, ...]:
        src = self.volume_cells if layout == "volume" else self.plane_cells
        return tuple(src[a] for a in LAYOUT_AXES[layout])

    def axis_cells(self) -> Optional[np.ndarray]:
        """Finest cell count along each axis over the active layouts (None if gridless)."""
        if not self.layouts:
            return None
        cells = np.zeros(3, dtype=np.int64)
        for lay in self.layouts:
            src = self.volume_cells if lay == "volume" else self.plane_cells
            for a in LAYOUT_AXES[lay]:
                cells[a] = max(cells[a], src[a])
        # an axis no layout sees (single plane: z) still gets a period
        cells[cells == 0] = max(self.plane_cells)
        return cells


@dataclass
class FeatureGrid:
    layout: str
    data: Tensor  # (B, *spatial, d)

    def __post_init__(self):
        if self.layout not in LAYOUT_AXES:
            raise ValueError(f"unknown layout {self.layout!r}")
        want = len(LAYOUT_AXES[self.layout])
        if self.data.ndim != want + 2:
            raise ValueError(f"{self.layout} grid needs {want} spatial dims, data has shape {self.data.shape}")

    @property
    def resolution(self) -> tuple[int, ...]:
        return tuple(self.data.shape[1:-1])

    @property
    def channels(self) -> int:
        return self.data.shape[-1]


def clamp_unit(points: np.ndarray) -> np.ndarray:
    return np.clip(np.asarray(points, dtype=np.float64), 0.0, 1.0)


def cell_indices(points: np.ndarray, layout: str, spatial: Sequence[int]) -> np.ndarray:
    """Flat cell index of each point: floor(u * R) clamped to R - 1 per axis."""
    u = clamp_unit(points)[..., list(LAYOUT_AXES[layout])]
    ext = np.asarray(spatial, dtype=np.int64)
    idx = np.minimum(np.floor(u * ext).astype(np.int64), ext - 1)
    strides = np.array([int(np.prod(ext[a + 1:])) for a in range(len(ext))], dtype=np.int64)
    return idx @ strides


def coordinate_features(points: np.ndarray, lattice: Optional[Lattice]) -> np.ndarray:
    """Per-point coordinate input. Gridded modes use a cell-periodic encoding.

    ``[sin(2 pi u R), cos(2 pi u R)]`` per axis repeats every cell, so moving a
    point by whole cells leaves it unchanged; where the point sits inside its
    cell is still recoverable. The gridless baseline uses raw coordinates.
    """
    u = clamp_unit(points)
    if lattice is None or not lattice.layouts:
        return u
    phase = 2.0 * np.pi * u * lattice.axis_cells()
    return np.concatenate([np.sin(phase), np.cos(phase)], axis=-1)


def coordinate_dim(cfg: EncoderConfig) -> int:
    return 3 if cfg.mode == "global_baseline" else 6


def pool_operator(points: np.ndarray, lattice: Lattice) -> sp.csr_matrix:
    """(B*N x B*N) sparse local-pool: per-layout cell means gathered back, summed.

    ``points`` is (B, N, 3). Without any grid layout the whole item is one cell.
    """
    b, n, _ = points.shape
    item = np.repeat(np.arange(b, dtype=np.int64), n)
    if not lattice.layouts:
        groups = [(item, b)]
    else:
        groups = []
        for lay in lattice.layouts:
            ncell = int(np.prod(lattice.spatial(lay)))
            flat = item * ncell + cell_indices(points, lay, lattice.spatial(lay)).reshape(-1)
            groups.append((flat, b * ncell))
    total = None
    for flat, ncell in groups:
        op = G.ops.gather_operator(flat, ncell) @ G.ops.mean_operator(flat, ncell)
        total = op if total is None else total + op
    return total.tocsr()


class PointNet(Module):
    """Shallow point network: lift to d, then blocks of (linear, relu, local-pool concat)."""

    def __init__(self, cfg: EncoderConfig, in_dim: int, rng: np.random.Generator, dtype=np.float64):
        d = cfg.feature_dim
        self.lift = Linear(in_dim, d, rng, dtype)
        self.blocks = [Linear(d, d, rng, dtype) for _ in range(cfg.point_net_blocks)]
        self.merges = [Linear(2 * d, d, rng, dtype) for _ in range(cfg.point_net_blocks)]

    def __call__(self, coords: Tensor, pool: sp.csr_matrix) -> Tensor:
        b, n, _ = coords.shape
        h = self.lift(coords)
        for blk, merge in zip(self.blocks, self.merges):
            a = G.relu(blk(h))
            pooled = G.sparse_apply(pool, a, out_lead=(b, n), op="local_pool")
            h = merge(G.concat([a, pooled], axis=-1))
        return h


class VoxelEncoder(Module):
    """One 3x3x3 convolution (pad 1) lifting binary occupancy to d channels."""

    def __init__(self, cfg: EncoderConfig, rng: np.random.Generator, dtype=np.float64):
        self.conv = Conv(3, 1, cfg.feature_dim, rng, kernel=3, dtype=dtype)

    def __call__(self, occupancy: np.ndarray) -> Tensor:
        occ = np.asarray(occupancy)
        if occ.ndim == 3:
            occ = occ[None]
        x = Tensor(occ[..., None].astype(self.conv.weight.dtype))
        return self.conv(x)


def pointnet_encode(net: PointNet, points: np.ndarray, lattice: Optional[Lattice]) -> Tensor:
    """Per-point features (B, N, d); a single (N, 3) cloud is treated as B = 1."""
    pts = np.asarray(points, dtype=np.float64)
    if pts.ndim == 2:
        pts = pts[None]
    if pts.shape[1] < 1:
        raise ValueError("point cloud must contain at least one point")
    lat = lattice if lattice is not None else Lattice(())
    dtype = net.lift.weight.dtype
    coords = Tensor(coordinate_features(pts, lat).astype(dtype))
    return net(coords, pool_operator(clamp_unit(pts), lat))


def voxel_encode(enc: VoxelEncoder, occupancy: np.ndarray, resolution: Optional[int] = None) -> Tensor:
    occ = np.asarray(occupancy)
    if resolution is not None and occ.shape[-1] != resolution:
        raise ValueError(f"voxel grid resolution {occ.shape[-1]} does not match configured {resolution}")
    return enc(occ)


def voxel_centers(resolution: int) -> np.ndarray:
    idx = np.stack(np.meshgrid(*[np.arange(resolution)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
    return (idx + 0.5) / resolution


def project_and_pool(features: Tensor, positions: np.ndarray, layout: str,
                     spatial: Sequence[int]) -> FeatureGrid:
    """Scatter-average per-point features (B, N, d) into a (B, *spatial, d) grid."""
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim == 2:
        pos = pos[None]
    feats = features if features.ndim == 3 else G.reshape(features, (1,) + features.shape)
    b, n, d = feats.shape
    spatial = tuple(int(s) for s in spatial)
    ncell = int(np.prod(spatial))
    flat = (np.repeat(np.arange(b, dtype=np.int64), n) * ncell
            + cell_indices(pos, layout, spatial).reshape(-1))
    grid = G.scatter_mean(flat, G.reshape(feats, (b * n, d)), b * ncell)
    return FeatureGrid(layout, G.reshape(grid, (b,) + spatial + (d,)))


def global_encode(features: Tensor) -> Tensor:
    """Max over points: (B, N, d) -> (B, d)."""
    feats = features if features.ndim == 3 else G.reshape(features, (1,) + features.shape)
    return G.amax(feats, axis=1)
