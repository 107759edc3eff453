"""CSG scenes: generation, normalization, occupancy, surface sampling, voxelization."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from .primitives import BOUNDARY_EPS, KINDS, Primitive, random_rotation, rotation_z
from .types import PointCloud, VoxelGrid

SLAB_THICKNESS = 0.01


@dataclass
class SceneSpec:
    primitives: list[Primitive] = field(default_factory=list)
    ground: Optional[Primitive] = None
    walls: list[Primitive] = field(default_factory=list)
    bounds: tuple[np.ndarray, np.ndarray] = field(
        default_factory=lambda: (np.zeros(3), np.ones(3)))
    seed: Optional[int] = None

    def __post_init__(self):
        self.bounds = (np.asarray(self.bounds[0], float), np.asarray(self.bounds[1], float))

    @property
    def members(self) -> list[Primitive]:
        return list(self.primitives) + ([self.ground] if self.ground is not None else []) + list(self.walls)

    def sdf(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
        if not self.members:
            return np.full(len(points), np.inf)
        return np.min([m.sdf(points) for m in self.members], axis=0)

    def transformed(self, norm: "Normalization") -> "SceneSpec":
        return SceneSpec(
            [p.transformed(norm.scale, norm.offset) for p in self.primitives],
            None if self.ground is None else self.ground.transformed(norm.scale, norm.offset),
            [w.transformed(norm.scale, norm.offset) for w in self.walls],
            (norm.apply(self.bounds[0]), norm.apply(self.bounds[1])),
            self.seed,
        )

    def to_dict(self) -> dict:
        return {
            "seed": self.seed,
            "bounds": [self.bounds[0].tolist(), self.bounds[1].tolist()],
            "primitives": [p.to_dict() for p in self.primitives],
            "ground": None if self.ground is None else self.ground.to_dict(),
            "walls": [w.to_dict() for w in self.walls],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        return cls(
            [Primitive.from_dict(p) for p in d.get("primitives", [])],
            None if d.get("ground") is None else Primitive.from_dict(d["ground"]),
            [Primitive.from_dict(w) for w in d.get("walls", [])],
            (np.array(d["bounds"][0]), np.array(d["bounds"][1])),
            d.get("seed"),
        )

    @classmethod
    def from_json(cls, text: str) -> "SceneSpec":
        return cls.from_dict(json.loads(text))


@dataclass
class Normalization:
    """Similarity ``x -> scale * x + offset`` from world to the unit cube."""

    scale: float
    offset: np.ndarray

    def apply(self, x: np.ndarray) -> np.ndarray:
        return self.scale * np.asarray(x, dtype=np.float64) + self.offset

    def inverse(self, y: np.ndarray) -> np.ndarray:
        return (np.asarray(y, dtype=np.float64) - self.offset) / self.scale


def normalize_scene(scene: SceneSpec, padding: float = 0.1) -> Normalization:
    """Isotropic map taking the scene bounds into [padding/2, 1 - padding/2]^3, centred."""
    if not 0.0 <= padding < 0.5:
        raise ValueError(f"padding must lie in [0, 0.5), got {padding}")
    lo, hi = scene.bounds
    extent = float(np.max(hi - lo))
    if extent <= 0:
        raise ValueError("scene bounds are degenerate (zero extent on every axis)")
    scale = (1.0 - padding) / extent
    center = 0.5 * (lo + hi)
    return Normalization(scale, 0.5 - scale * center)


def occupancy_query(scene: SceneSpec, points: np.ndarray) -> np.ndarray:
    """1 where a point lies in the CSG union (boundary counts as inside)."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    occ = np.zeros(len(points), dtype=bool)
    for m in scene.members:
        occ |= m.contains(points)
    return occ.astype(np.uint8)


def _slab_faces_toward(scene: SceneSpec) -> np.ndarray:
    lo, hi = scene.bounds
    return 0.5 * (lo + hi)


def sample_surface(scene: SceneSpec, n: int, noise_sigma: float = 0.0, seed=0,
                   single_surface: bool = False) -> PointCloud:
    """Area-weighted samples on the union's boundary plus isotropic Gaussian noise.

    Candidate samples on a member surface that lie strictly inside another
    member are discarded, so every kept sample is on the union boundary.
    ``single_surface`` samples only the inward-facing side of ground/wall slabs.
    Returned normals are the pre-noise surface normals.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be >= 0")
    members = scene.members
    toward = _slab_faces_toward(scene)

    def area(m: Primitive) -> float:
        if single_surface and m.role in ("ground", "wall"):
            s = m.scale
            i = int(np.argmin(s))
            others = [a for a in range(3) if a != i]
            return 4.0 * s[others[0]] * s[others[1]]
        return m.area()

    areas = np.array([area(m) for m in members], dtype=np.float64)
    if not len(members) or areas.sum() <= 0:
        raise ValueError("scene has zero total surface area")
    rng = np.random.default_rng(seed)
    probs = areas / areas.sum()
    pts, nrm = [], []
    have = 0
    while have < n:
        batch = max(64, int(1.25 * (n - have)) + 16)
        which = rng.choice(len(members), size=batch, p=probs)
        counts = np.bincount(which, minlength=len(members))
        round_pts, round_nrm = [], []
        for k, m in enumerate(members):
            if counts[k] == 0:
                continue
            slab = single_surface and m.role in ("ground", "wall")
            p, q = m.sample_surface(int(counts[k]), rng, single_face=slab, toward=toward)
            keep = np.ones(len(p), dtype=bool)
            for j, other in enumerate(members):
                if j != k:
                    keep &= other.sdf(p) >= -BOUNDARY_EPS
            round_pts.append(p[keep])
            round_nrm.append(q[keep])
        # shuffle so truncating the final round stays area-weighted
        order = rng.permutation(sum(len(a) for a in round_pts))
        pts.append(np.concatenate(round_pts)[order])
        nrm.append(np.concatenate(round_nrm)[order])
        have += len(order)
    points = np.concatenate(pts)[:n]
    normals = np.concatenate(nrm)[:n]
    if noise_sigma > 0:
        points = points + rng.normal(scale=noise_sigma, size=points.shape)
    return PointCloud(points, normals)


def voxelize(scene: SceneSpec, resolution: int, origin=(0.0, 0.0, 0.0), extent: float = 1.0) -> VoxelGrid:
    """Voxel occupied iff its centre is inside the scene."""
    if resolution < 2:
        raise ValueError("resolution must be >= 2")
    grid = VoxelGrid(np.zeros((resolution,) * 3, dtype=np.uint8), np.asarray(origin, float),
                     extent / resolution)
    occ = occupancy_query(scene, grid.centers())
    grid.occupancy = occ.reshape((resolution,) * 3)
    return grid


# ----------------------------------------------------------------------------
# generation


@dataclass
class SceneGenConfig:
    """Ranges for the random scene generator (world units)."""

    object_count: tuple[int, int] = (4, 8)
    kinds: tuple[str, ...] = KINDS
    size_range: tuple[float, float] = (0.05, 0.15)
    min_aspect: float = 0.3
    ground_plane: bool = True
    wall_probability: float = 0.5
    ratio_range: tuple[float, float] = (0.5, 1.0)
    floor_length: float = 1.0
    height: float = 0.5
    rotation: str = "z"

    def validate(self) -> None:
        lo, hi = self.object_count
        if lo < 0 or hi < lo:
            raise ValueError(f"invalid object_count range {self.object_count}")
        if not set(self.kinds) <= set(KINDS) or not self.kinds:
            raise ValueError(f"kinds must be a non-empty subset of {KINDS}")
        if self.size_range[0] <= 0 or self.size_range[1] < self.size_range[0]:
            raise ValueError(f"invalid size_range {self.size_range}")
        if not 0 < self.min_aspect <= 1:
            raise ValueError("min_aspect must lie in (0, 1]")
        if self.rotation not in ("z", "full", "none"):
            raise ValueError("rotation must be 'z', 'full' or 'none'")
        if not 0 <= self.wall_probability <= 1:
            raise ValueError("wall_probability must lie in [0, 1]")
        # worst-case object diameter must fit the smallest free extent
        diam = 2 * self.size_range[1] * (np.sqrt(3) if self.rotation == "full" else np.sqrt(2))
        free = min(self.floor_length * self.ratio_range[0], self.height) - 2 * SLAB_THICKNESS
        if diam > free:
            raise ValueError(
                f"infeasible config: objects up to {diam:.3f} across do not fit bounds of {free:.3f}")

    @classmethod
    def objects(cls) -> "SceneGenConfig":
        """Single floating primitive in a unit box, any orientation."""
        return cls(object_count=(1, 1), size_range=(0.15, 0.28), ground_plane=False,
                   wall_probability=0.0, ratio_range=(1.0, 1.0), floor_length=1.0, height=1.0,
                   rotation="full")

    def to_dict(self) -> dict:
        return asdict(self)


def _random_shape(kind: str, size: float, cfg: SceneGenConfig, rng) -> np.ndarray:
    if kind == "sphere":
        return np.full(3, size)
    if kind == "box":
        return size * rng.uniform(cfg.min_aspect, 1.0, size=3)
    r = size * rng.uniform(cfg.min_aspect, 1.0)
    return np.array([r, r, size * rng.uniform(cfg.min_aspect, 1.0)])


def generate_scene(cfg: SceneGenConfig, seed: int) -> SceneSpec:
    """Random scene: optional ground slab with random width/length ratio, walls, primitives."""
    cfg.validate()
    rng = np.random.default_rng(seed)
    ratio = rng.uniform(*cfg.ratio_range)
    hi = np.array([cfg.floor_length, cfg.floor_length * ratio, cfg.height])
    lo = np.zeros(3)
    t = SLAB_THICKNESS
    ground = None
    floor_z = 0.0
    if cfg.ground_plane:
        ground = Primitive("box", np.eye(3), [hi[0] / 2, hi[1] / 2, t / 2], [hi[0] / 2, hi[1] / 2, t / 2],
                           role="ground")
        floor_z = t
    walls = []
    inset_lo = lo.copy()
    inset_hi = hi.copy()
    for axis in (0, 1):
        for side in (0, 1):
            if rng.uniform() >= cfg.wall_probability:
                continue
            half = hi / 2
            center = hi / 2
            half = half.copy()
            center = center.copy()
            half[axis] = t / 2
            center[axis] = t / 2 if side == 0 else hi[axis] - t / 2
            walls.append(Primitive("box", np.eye(3), center, half, role="wall"))
            if side == 0:
                inset_lo[axis] = t
            else:
                inset_hi[axis] = hi[axis] - t
    inset_lo[2] = floor_z
    count = int(rng.integers(cfg.object_count[0], cfg.object_count[1] + 1))
    objects = []
    for _ in range(count):
        kind = str(rng.choice(list(cfg.kinds)))
        dims = _random_shape(kind, rng.uniform(*cfg.size_range), cfg, rng)
        if cfg.rotation == "full":
            rot = random_rotation(rng)
        elif cfg.rotation == "z":
            rot = rotation_z(rng.uniform(0, 2 * np.pi))
        else:
            rot = np.eye(3)
        prim = Primitive(kind, rot, np.zeros(3), dims)
        a_lo, a_hi = prim.aabb()
        half = (a_hi - a_lo) / 2
        span_lo = inset_lo + half
        span_hi = inset_hi - half
        center = rng.uniform(span_lo, np.maximum(span_hi, span_lo))
        if cfg.ground_plane:
            center[2] = floor_z + half[2]
        prim.translation = center
        objects.append(prim)
    return SceneSpec(objects, ground, walls, (lo, hi), int(seed))


def object_scene(seed: int, cfg: Optional[SceneGenConfig] = None, padding: float = 0.1) -> SceneSpec:
    """A generated scene mapped into the unit cube."""
    cfg = cfg or SceneGenConfig.objects()
    scene = generate_scene(cfg, seed)
    return scene.transformed(normalize_scene(scene, padding))


def sphere_scene(radius: float = 0.4, center: Sequence[float] = (0.5, 0.5, 0.5)) -> SceneSpec:
    return SceneSpec([Primitive("sphere", np.eye(3), center, [radius] * 3)])


def box_scene(lo: Sequence[float], hi: Sequence[float]) -> SceneSpec:
    lo = np.asarray(lo, float)
    hi = np.asarray(hi, float)
    return SceneSpec([Primitive("box", np.eye(3), (lo + hi) / 2, (hi - lo) / 2)])
