"""Fully-convolutional reconstruction of large regions from overlapping crops.

The region ``G`` is tiled into cubes of ``stride`` scene units. Each tile's
crop extends it by ``margin`` volume cells on every side, clipped to ``G``.
Queries inside a tile are answered only from that tile's crop. Tiles and
margins are whole multiples of the U-Net's coarsest cell so pooling windows
line up with the whole-region grid.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from ..geometry import TriangleMesh
from ..model import ConvOccNet
from ..unet import dependency_radius
from .mise import MiseConfig, mise_extract


@dataclass
class SlidingWindowConfig:
    stride: float = 0.5
    margin: Optional[int] = None  # volume cells; None = smallest valid value
    cell: Optional[float] = None  # scene units per cell; None = 1 / volume_resolution
    strict: bool = True

    def crop_size(self, model: ConvOccNet) -> float:
        cell = self.cell_size(model)
        return self.stride + 2 * self.margin_cells(model) * cell

    def cell_size(self, model: ConvOccNet) -> float:
        return self.cell if self.cell is not None else 1.0 / model.cfg.encoder.volume_resolution

    def margin_cells(self, model: ConvOccNet) -> int:
        return required_margin(model) if self.margin is None else int(self.margin)


def _volume_depth(model: ConvOccNet) -> int:
    if model.cfg.encoder.mode != "volume" or model.cfg.input_kind != "points":
        raise ValueError("sliding-window reconstruction needs a volume-mode point-cloud model "
                         f"(got mode {model.cfg.encoder.mode!r}, input {model.cfg.input_kind!r})")
    return model.volume_unet.cfg.depth


def receptive_field_radius(model: ConvOccNet) -> int:
    """Cells beyond a query's own cell that can influence its prediction.

    The U-Net's exact dependency radius plus one cell for the interpolation stencil.
    """
    return dependency_radius(_volume_depth(model)) + 1


def required_margin(model: ConvOccNet) -> int:
    """The receptive-field radius rounded up to the pooling alignment."""
    step = 2 ** _volume_depth(model)
    r = receptive_field_radius(model)
    return -(-r // step) * step


class TiledField:
    """Occupancy evaluator stitched from per-crop encodings (scene coordinates)."""

    def __init__(self, model: ConvOccNet, points: np.ndarray, cfg: SlidingWindowConfig,
                 bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), whole: bool = False):
        depth = _volume_depth(model)
        step = 2 ** depth
        self.model = model
        self.cell = cfg.cell_size(model)
        tile = cfg.stride / self.cell
        self.tile = int(round(tile))
        if abs(tile - self.tile) > 1e-9 * max(1.0, tile) or self.tile < 1:
            raise ValueError(f"stride {cfg.stride} is not a whole number of cells of size {self.cell}")
        if self.tile % step:
            raise ValueError(f"stride spans {self.tile} cells; it must be a multiple of {step}")
        self.margin = cfg.margin_cells(model)
        if self.margin < 0 or self.margin % step:
            raise ValueError(f"margin {self.margin} cells must be a non-negative multiple of {step}")
        if cfg.strict and self.margin < receptive_field_radius(model):
            raise ValueError(f"margin {self.margin} cells is below the receptive-field radius "
                             f"{receptive_field_radius(model)}")
        lo = np.asarray(bounds[0], dtype=np.float64)
        hi = np.asarray(bounds[1], dtype=np.float64)
        self.tiles = np.maximum(np.ceil((hi - lo) / cfg.stride - 1e-9).astype(np.int64), 1)
        self.cells = self.tiles * self.tile
        self.lo = lo
        self.hi = lo + self.cells * self.cell
        self.whole = whole
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        self.points = pts
        self.point_cells = self._cells_of(pts)
        self._cache: dict = {}

    @property
    def bounds(self):
        return self.lo, self.hi

    def _cells_of(self, p: np.ndarray) -> np.ndarray:
        c = np.floor((p - self.lo) / self.cell).astype(np.int64)
        return np.clip(c, 0, self.cells - 1)

    def crop(self, tile: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        """Cell range [a, b) of a tile's crop."""
        if self.whole:
            return np.zeros(3, dtype=np.int64), self.cells.copy()
        t = np.asarray(tile, dtype=np.int64)
        a = np.maximum(t * self.tile - self.margin, 0)
        b = np.minimum((t + 1) * self.tile + self.margin, self.cells)
        return a, b

    def _frame(self, a, b):
        origin = self.lo + a * self.cell
        extent = (b - a) * self.cell
        return origin, extent

    def encoding(self, tile: Sequence[int]):
        key = (0, 0, 0) if self.whole else tuple(int(v) for v in tile)
        if key not in self._cache:
            a, b = self.crop(key)
            sel = np.all((self.point_cells >= a) & (self.point_cells < b), axis=1)
            origin, extent = self._frame(a, b)
            u = (self.points[sel] - origin) / extent
            self._cache[key] = self.model.encode(u[None] if len(u) else np.zeros((1, 0, 3)),
                                                 volume_cells=tuple(int(v) for v in b - a))
        return self._cache[key]

    def __call__(self, p: np.ndarray, chunk: int = 100_000) -> np.ndarray:
        p = np.asarray(p, dtype=np.float64).reshape(-1, 3)
        out = np.empty(len(p))
        if self.whole:
            tiles = np.zeros((len(p), 3), dtype=np.int64)
        else:
            tiles = self._cells_of(p) // self.tile
        flat = np.ravel_multi_index(tiles.T, tuple(self.tiles))
        for key in np.unique(flat):
            rows = np.flatnonzero(flat == key)
            t = np.unravel_index(int(key), tuple(self.tiles))
            a, b = self.crop(t)
            origin, extent = self._frame(a, b)
            u = (p[rows] - origin) / extent
            out[rows] = self.model.predict_encoded(self.encoding(t), u, chunk)
        return out


def sliding_window_reconstruct(model: ConvOccNet, points: np.ndarray, cfg: SlidingWindowConfig,
                               mise: Optional[MiseConfig] = None,
                               bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))) -> TriangleMesh:
    field = TiledField(model, points, cfg, bounds)
    return mise_extract(field, mise, bounds=field.bounds).mesh
