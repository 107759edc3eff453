"""Synthetic datasets: generation into shards, loading, and batch assembly."""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .geometry import (
    SceneGenConfig,
    SceneSpec,
    Shard,
    VoxelGrid,
    generate_scene,
    normalize_scene,
    occupancy_query,
    read_shard,
    sample_surface,
    voxelize,
    write_shard,
)

TASKS = ("object_points", "object_voxels", "scene_points")
MANIFEST = "manifest.json"


@dataclass
class DataConfig:
    task: str = "object_points"
    n_train: int = 50
    n_val: int = 10
    input_points: int = 3000
    noise: float = 0.05
    query_pool: int = 100_000
    voxel_resolution: int = 32
    padding: float = 0.1
    seed: int = 0
    scene: dict = field(default_factory=dict)

    def validate(self) -> None:
        if self.task not in TASKS:
            raise ValueError(f"unknown task {self.task!r}; valid tasks: {', '.join(TASKS)}")
        if self.n_train < 0 or self.n_val < 0 or self.n_train + self.n_val < 1:
            raise ValueError("dataset needs at least one scene")
        if self.input_points < 1 or self.query_pool < 1:
            raise ValueError("input_points and query_pool must be positive")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")
        self.scene_config().validate()

    def scene_config(self) -> SceneGenConfig:
        base = SceneGenConfig() if self.task == "scene_points" else SceneGenConfig.objects()
        known = {f.name for f in fields(SceneGenConfig)}
        bad = set(self.scene) - known
        if bad:
            raise ValueError(f"unknown scene keys: {sorted(bad)}")
        vals = asdict(base)
        vals.update({k: tuple(v) if isinstance(v, list) else v for k, v in self.scene.items()})
        return SceneGenConfig(**vals)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Item:
    scene: SceneSpec
    points: np.ndarray
    query_points: np.ndarray
    query_labels: np.ndarray
    voxels: Optional[VoxelGrid] = None
    seed: int = 0


def scene_seed(base: int, index: int) -> int:
    return int(np.random.SeedSequence([base, index]).generate_state(1)[0])


def make_item(cfg: DataConfig, index: int) -> Item:
    """Scene ``index`` of the dataset, normalized into the unit cube."""
    seed = scene_seed(cfg.seed, index)
    raw = generate_scene(cfg.scene_config(), seed)
    if cfg.task != "scene_points" and raw.primitives:
        # object tasks use the canonical-cube convention: the object's own box is normalized
        boxes = [p.aabb() for p in raw.primitives]
        raw.bounds = (np.min([b[0] for b in boxes], axis=0), np.max([b[1] for b in boxes], axis=0))
    scene = raw.transformed(normalize_scene(raw, cfg.padding))
    cloud = sample_surface(scene, cfg.input_points, cfg.noise, seed=seed)
    rng = np.random.default_rng([seed, 1])
    # labels are taken at the stored (f32) coordinates
    q = rng.uniform(size=(cfg.query_pool, 3)).astype(np.float32).astype(np.float64)
    labels = occupancy_query(scene, q)
    vox = voxelize(scene, cfg.voxel_resolution) if cfg.task == "object_voxels" else None
    pts = cloud.points.astype(np.float32).astype(np.float64)
    return Item(scene, pts, q, labels, vox, seed)


def _shard_name(index: int) -> str:
    return f"shard_{index:05d}"


def _write_one(args) -> dict:
    cfg, index, out = args
    item = make_item(cfg, index)
    write_shard(Path(out) / _shard_name(index), Shard(item.points, item.query_points, item.query_labels,
                                                     item.scene, item.voxels))
    return {"index": index, "seed": item.seed, "objects": len(item.scene.primitives),
            "ground": item.scene.ground is not None, "walls": len(item.scene.walls),
            "split": "train" if index < cfg.n_train else "val",
            "positive_fraction": round(float(item.query_labels.mean()), 6)}


def generate_dataset(cfg: DataConfig, out_dir, jobs: int = 1) -> dict:
    """Write ``n_train + n_val`` shards and a manifest; returns the manifest."""
    cfg.validate()
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as e:
        raise OSError(f"cannot create dataset directory {out}: {e}") from e
    total = cfg.n_train + cfg.n_val
    tasks = [(cfg, i, str(out)) for i in range(total)]
    if jobs > 1 and total > 1:
        with ProcessPoolExecutor(max_workers=jobs) as ex:
            entries = list(ex.map(_write_one, tasks))
    else:
        entries = [_write_one(t) for t in tasks]
    manifest = {"config": cfg.to_dict(), "shards": [dict(e, path=_shard_name(e["index"])) for e in entries]}
    (out / MANIFEST).write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    return manifest


@dataclass
class Dataset:
    config: DataConfig
    train: list
    val: list


def load_dataset(directory) -> Dataset:
    d = Path(directory)
    mpath = d / MANIFEST
    if not mpath.exists():
        raise FileNotFoundError(f"dataset manifest not found: {mpath}")
    manifest = json.loads(mpath.read_text())
    cfg = DataConfig(**manifest["config"])
    train, val = [], []
    for entry in manifest["shards"]:
        sh = read_shard(d / entry["path"])
        item = Item(sh.scene, sh.points, sh.query_points, sh.query_labels, sh.voxels, entry["seed"])
        (train if entry["split"] == "train" else val).append(item)
    if not train and not val:
        raise ValueError(f"dataset {d} has no shards")
    return Dataset(cfg, train, val)


def build_dataset(cfg: DataConfig) -> Dataset:
    """In-memory equivalent of generate + load."""
    cfg.validate()
    items = [make_item(cfg, i) for i in range(cfg.n_train + cfg.n_val)]
    return Dataset(cfg, items[: cfg.n_train], items[cfg.n_train:])


def model_inputs(items: Sequence[Item], input_kind: str) -> np.ndarray:
    if input_kind == "voxels":
        if any(it.voxels is None for it in items):
            raise ValueError("voxel input requested but the dataset has no voxel grids")
        return np.stack([it.voxels.occupancy for it in items])
    n = min(len(it.points) for it in items)
    return np.stack([it.points[:n] for it in items])
