from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np


@dataclass
class PointCloud:
    points: np.ndarray
    normals: Optional[np.ndarray] = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.points.shape[0] < 1:
            raise ValueError("point cloud must contain at least one point")
        if self.normals is not None:
            self.normals = np.asarray(self.normals, dtype=np.float64).reshape(-1, 3)
            if self.normals.shape != self.points.shape:
                raise ValueError("normals must align with points")

    def __len__(self) -> int:
        return self.points.shape[0]


@dataclass
class VoxelGrid:
    """Binary occupancy on an R^3 lattice covering [origin, origin + R * cell]^3."""

    occupancy: np.ndarray
    origin: np.ndarray = None
    cell: float = None

    def __post_init__(self):
        occ = np.asarray(self.occupancy)
        if occ.ndim != 3 or len(set(occ.shape)) != 1:
            raise ValueError(f"voxel grid must be R x R x R, got {occ.shape}")
        if not np.all((occ == 0) | (occ == 1)):
            raise ValueError("voxel occupancy entries must be 0 or 1")
        self.occupancy = occ.astype(np.uint8)
        self.origin = np.zeros(3) if self.origin is None else np.asarray(self.origin, float)
        self.cell = 1.0 / occ.shape[0] if self.cell is None else float(self.cell)

    @property
    def resolution(self) -> int:
        return self.occupancy.shape[0]

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Occupancy of the voxel holding each point; points outside the lattice are empty."""
        idx = np.floor((np.asarray(points, float) - self.origin) / self.cell).astype(np.int64)
        ok = np.all((idx >= 0) & (idx < self.resolution), axis=-1)
        out = np.zeros(len(idx), dtype=bool)
        out[ok] = self.occupancy[tuple(idx[ok].T)] == 1
        return out

    def centers(self) -> np.ndarray:
        r = self.resolution
        idx = np.stack(np.meshgrid(*[np.arange(r)] * 3, indexing="ij"), axis=-1).reshape(-1, 3)
        return self.origin + (idx + 0.5) * self.cell

    def world_to_grid(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.origin) / self.cell

    def contains(self, points: np.ndarray) -> np.ndarray:
        """Piecewise-constant occupancy: the voxel containing each point."""
        idx = np.floor(self.world_to_grid(points)).astype(np.int64)
        r = self.resolution
        inside = np.all((idx >= 0) & (idx < r), axis=1)
        out = np.zeros(len(idx), dtype=bool)
        i = idx[inside]
        out[inside] = self.occupancy[i[:, 0], i[:, 1], i[:, 2]] == 1
        return out


@dataclass
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.asarray(self.triangles, dtype=np.int64).reshape(-1, 3)

    @property
    def is_empty(self) -> bool:
        return self.triangles.shape[0] == 0

    def validate(self) -> None:
        t = self.triangles
        if t.size and (t.min() < 0 or t.max() >= len(self.vertices)):
            raise ValueError("triangle index out of range")
        if np.any((t[:, 0] == t[:, 1]) | (t[:, 1] == t[:, 2]) | (t[:, 0] == t[:, 2])):
            raise ValueError("degenerate triangle with repeated indices")

    def face_areas_normals(self) -> tuple[np.ndarray, np.ndarray]:
        v = self.vertices[self.triangles]
        cr = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        norm = np.linalg.norm(cr, axis=1)
        with np.errstate(invalid="ignore", divide="ignore"):
            normals = np.where(norm[:, None] > 0, cr / norm[:, None], 0.0)
        return 0.5 * norm, normals

    def edge_use_counts(self) -> np.ndarray:
        """How many triangles share each undirected edge."""
        t = self.triangles
        e = np.concatenate([t[:, [0, 1]], t[:, [1, 2]], t[:, [2, 0]]])
        e.sort(axis=1)
        _, counts = np.unique(e, axis=0, return_counts=True)
        return counts

    def is_closed(self) -> bool:
        return not self.is_empty and bool(np.all(self.edge_use_counts() == 2))

    def sample(self, n: int, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
        """Area-weighted surface samples with their face normals."""
        areas, normals = self.face_areas_normals()
        total = areas.sum()
        if total <= 0:
            raise ValueError("mesh has zero surface area")
        face = rng.choice(len(areas), size=n, p=areas / total)
        u, v = rng.uniform(size=(2, n))
        flip = u + v > 1
        u[flip], v[flip] = 1 - u[flip], 1 - v[flip]
        tri = self.vertices[self.triangles[face]]
        pts = tri[:, 0] + u[:, None] * (tri[:, 1] - tri[:, 0]) + v[:, None] * (tri[:, 2] - tri[:, 0])
        return pts, normals[face]

    def transformed(self, rotation: np.ndarray, translation: np.ndarray) -> "TriangleMesh":
        return TriangleMesh(self.vertices @ np.asarray(rotation).T + translation, self.triangles.copy())
