"""Multiresolution iso-surface extraction: refine only where the surface can be."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np
from scipy import ndimage

from ..geometry import TriangleMesh
from .mcubes import marching_cubes


@dataclass
class MiseConfig:
    initial_resolution: int = 32
    final_resolution: int = 128
    threshold: float = 0.5
    batch_points: int = 200_000

    def validate(self) -> None:
        r0, r1 = self.initial_resolution, self.final_resolution
        if r0 < 1 or r1 < r0:
            raise ValueError("need 1 <= initial_resolution <= final_resolution")
        ratio = r1 // r0
        if r1 % r0 or ratio & (ratio - 1):
            raise ValueError(f"final resolution {r1} must be initial {r0} times a power of two")

    @property
    def steps(self) -> int:
        return int(round(np.log2(self.final_resolution // self.initial_resolution)))


class CountingEvaluator:
    """Wraps an evaluator and counts the points it is asked about."""

    def __init__(self, fn: Callable[[np.ndarray], np.ndarray]):
        self.fn = fn
        self.calls = 0
        self.batches = 0

    def __call__(self, points: np.ndarray) -> np.ndarray:
        self.calls += len(points)
        self.batches += 1
        return self.fn(points)


@dataclass
class MiseResult:
    mesh: TriangleMesh
    field: np.ndarray
    evaluated: np.ndarray  # bool mask of exactly evaluated final nodes
    calls: int


def _upsample(values: np.ndarray) -> np.ndarray:
    """Trilinear refinement of a node grid: (n+1)^3 -> (2n+1)^3."""
    out = values
    for axis in range(3):
        n = out.shape[axis]
        shape = list(out.shape)
        shape[axis] = 2 * n - 1
        fine = np.empty(shape)
        even = [slice(None)] * 3
        even[axis] = slice(0, None, 2)
        odd = [slice(None)] * 3
        odd[axis] = slice(1, None, 2)
        lo = [slice(None)] * 3
        lo[axis] = slice(0, -1)
        hi = [slice(None)] * 3
        hi[axis] = slice(1, None)
        fine[tuple(even)] = out
        fine[tuple(odd)] = 0.5 * (out[tuple(lo)] + out[tuple(hi)])
        out = fine
    return out


def _mixed_cells(values: np.ndarray, tau: float) -> np.ndarray:
    inside = values > tau
    n = np.array(values.shape) - 1
    any_in = np.zeros(tuple(n), dtype=bool)
    all_in = np.ones(tuple(n), dtype=bool)
    for dx in (0, 1):
        for dy in (0, 1):
            for dz in (0, 1):
                c = inside[dx:dx + n[0], dy:dy + n[1], dz:dz + n[2]]
                any_in |= c
                all_in &= c
    return any_in & ~all_in


def node_points(shape: Sequence[int], idx: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    n = np.array(shape) - 1
    return lo + (hi - lo) * idx / n


def mise_extract(evaluator: Callable[[np.ndarray], np.ndarray], cfg: Optional[MiseConfig] = None,
                 bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0))) -> MiseResult:
    """Adaptive evaluation on a node lattice over ``bounds`` followed by marching cubes.

    A lattice of ``R`` cells per axis has ``R + 1`` nodes at ``lo + (hi - lo) i / R``.
    """
    cfg = cfg or MiseConfig()
    cfg.validate()
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    tau = cfg.threshold
    counter = CountingEvaluator(evaluator)

    def evaluate(idx: np.ndarray, shape) -> np.ndarray:
        pts = node_points(shape, idx, lo, hi)
        out = np.empty(len(pts))
        for s in range(0, len(pts), cfg.batch_points):
            out[s:s + cfg.batch_points] = np.asarray(counter(pts[s:s + cfg.batch_points]), dtype=np.float64).reshape(-1)
        return out

    r = cfg.initial_resolution
    shape = (r + 1,) * 3
    idx = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=1)
    values = evaluate(idx, shape).reshape(shape)
    exact = np.ones(shape, dtype=bool)
    structure = np.ones((3, 3, 3), dtype=bool)
    for _ in range(cfg.steps):
        active = ndimage.binary_dilation(_mixed_cells(values, tau), structure=structure)
        values = _upsample(values)
        fine_exact = np.zeros(values.shape, dtype=bool)
        fine_exact[::2, ::2, ::2] = exact
        exact = fine_exact
        # every fine node of an active coarse cell
        need = np.zeros(values.shape, dtype=bool)
        cells = np.argwhere(active)
        if len(cells):
            for dx in range(3):
                for dy in range(3):
                    for dz in range(3):
                        need[2 * cells[:, 0] + dx, 2 * cells[:, 1] + dy, 2 * cells[:, 2] + dz] = True
        todo = np.argwhere(need & ~exact)
        if len(todo):
            values[todo[:, 0], todo[:, 1], todo[:, 2]] = evaluate(todo, values.shape)
            exact[todo[:, 0], todo[:, 1], todo[:, 2]] = True
    spacing = (hi - lo) / (np.array(values.shape) - 1)
    mesh = marching_cubes(values, tau, origin=lo, spacing=spacing)
    return MiseResult(mesh, values, exact, counter.calls)


def dense_field(evaluator: Callable[[np.ndarray], np.ndarray], resolution: int,
                bounds=((0.0, 0.0, 0.0), (1.0, 1.0, 1.0)), batch: int = 200_000) -> np.ndarray:
    """Exhaustive evaluation on the (resolution + 1)^3 node lattice."""
    lo = np.asarray(bounds[0], dtype=np.float64)
    hi = np.asarray(bounds[1], dtype=np.float64)
    shape = (resolution + 1,) * 3
    idx = np.stack(np.unravel_index(np.arange(int(np.prod(shape))), shape), axis=1)
    pts = node_points(shape, idx, lo, hi)
    out = np.empty(len(pts))
    for s in range(0, len(pts), batch):
        out[s:s + batch] = np.asarray(evaluator(pts[s:s + batch])).reshape(-1)
    return out.reshape(shape)
