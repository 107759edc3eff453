"""The full pipeline: encoder, U-Nets, query features and occupancy head."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from typing import Optional, Sequence

import numpy as np

from . import grad as G
from .encoder import (
    EncoderConfig,
    FeatureGrid,
    Lattice,
    PointNet,
    VoxelEncoder,
    coordinate_dim,
    coordinate_features,
    global_encode,
    pointnet_encode,
    project_and_pool,
    voxel_centers,
    voxel_encode,
)
from .grad import Tensor
from .nn import Module
from .occ_decoder import INTERP_MODES, OccHeadConfig, OccupancyHead, query_feature
from .unet import UNet, UNetConfig, receptive_field_depth

INPUT_KINDS = ("points", "voxels")
DTYPES = {"float64": np.float64, "float32": np.float32}


@dataclass
class ModelConfig:
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    input_kind: str = "points"
    voxel_resolution: int = 32
    interp: str = "bilinear"
    plane_depth: Optional[int] = None
    volume_depth: Optional[int] = None
    unet_base_channels: Optional[int] = None
    head_hidden: int = 32
    head_blocks: int = 5
    dtype: str = "float64"
    seed: int = 0

    def validate(self) -> None:
        self.encoder.validate()
        if self.input_kind not in INPUT_KINDS:
            raise ValueError(f"unknown input kind {self.input_kind!r}; valid: {', '.join(INPUT_KINDS)}")
        if self.interp not in INTERP_MODES:
            raise ValueError(f"unknown interpolation {self.interp!r}; valid: {', '.join(INTERP_MODES)}")
        if self.dtype not in DTYPES:
            raise ValueError(f"dtype must be one of {sorted(DTYPES)}")
        if self.head_hidden < 1 or self.head_blocks < 0:
            raise ValueError("head sizes must be positive")

    def depth_for(self, layout: str, resolution: int) -> int:
        override = self.volume_depth if layout == "volume" else self.plane_depth
        return receptive_field_depth(resolution) if override is None else int(override)

    def to_dict(self) -> dict:
        d = asdict(self)
        return {k: v for k, v in d.items() if v is not None}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown model config keys: {sorted(unknown)}")
        enc = d.pop("encoder", {})
        enc_known = {f.name for f in fields(EncoderConfig)}
        if set(enc) - enc_known:
            raise ValueError(f"unknown encoder config keys: {sorted(set(enc) - enc_known)}")
        return cls(encoder=EncoderConfig(**enc), **d)


@dataclass
class Encoding:
    lattice: Lattice
    grids: list = field(default_factory=list)
    code: Optional[Tensor] = None  # global baseline only


class ConvOccNet(Module):
    def __init__(self, cfg: ModelConfig):
        cfg.validate()
        self.cfg = cfg
        dtype = DTYPES[cfg.dtype]
        rng = np.random.default_rng(cfg.seed)
        ec = cfg.encoder
        d = ec.feature_dim
        if cfg.input_kind == "points":
            self.points_net = PointNet(ec, coordinate_dim(ec), rng, dtype)
        else:
            self.voxel_net = VoxelEncoder(ec, rng, dtype)
        layouts = ec.layouts
        base = cfg.unet_base_channels or d
        if any(lay != "volume" for lay in layouts):
            self.plane_unet = UNet(UNetConfig(2, cfg.depth_for("plane", ec.plane_resolution), base, d, d), rng, dtype)
        if "volume" in layouts:
            self.volume_unet = UNet(UNetConfig(3, cfg.depth_for("volume", ec.volume_resolution), base, d, d), rng, dtype)
        self.head = OccupancyHead(OccHeadConfig(cfg.head_hidden, cfg.head_blocks, coordinate_dim(ec), d), rng, dtype)

    @property
    def dtype(self):
        return DTYPES[self.cfg.dtype]

    def lattice(self, volume_cells: Optional[Sequence[int]] = None) -> Lattice:
        return Lattice.from_config(self.cfg.encoder, volume_cells)

    # ------------------------------------------------------------------

    def point_features(self, inputs: np.ndarray, lattice: Lattice) -> tuple[Tensor, np.ndarray]:
        """Per-element features (B, N, d) and their unit-cube positions (B, N, 3)."""
        if self.cfg.input_kind == "points":
            pts = np.asarray(inputs, dtype=np.float64)
            if pts.ndim == 2:
                pts = pts[None]
            if pts.shape[1] == 0:
                raise ValueError("point cloud must contain at least one point")
            return pointnet_encode(self.points_net, pts, lattice), pts
        occ = np.asarray(inputs)
        if occ.ndim == 3:
            occ = occ[None]
        r = occ.shape[-1]
        if r != self.cfg.voxel_resolution:
            raise ValueError(f"voxel grid resolution {r} does not match configured {self.cfg.voxel_resolution}")
        feats = voxel_encode(self.voxel_net, occ)
        b = occ.shape[0]
        feats = G.reshape(feats, (b, r ** 3, feats.shape[-1]))
        return feats, np.broadcast_to(voxel_centers(r), (b, r ** 3, 3))

    def encode(self, inputs, volume_cells: Optional[Sequence[int]] = None) -> Encoding:
        lattice = self.lattice(volume_cells)
        if self.cfg.input_kind == "points" and lattice.layouts and np.asarray(inputs).size == 0:
            # no points: every input grid is zero before the U-Nets
            d = self.cfg.encoder.feature_dim
            grids = [FeatureGrid(lay, Tensor(np.zeros((1,) + lattice.spatial(lay) + (d,), dtype=self.dtype)))
                     for lay in lattice.layouts]
            return Encoding(lattice, grids=self._process(grids))
        feats, pos = self.point_features(inputs, lattice)
        if not lattice.layouts:
            return Encoding(lattice, code=global_encode(feats))
        grids = [project_and_pool(feats, pos, lay, lattice.spatial(lay)) for lay in lattice.layouts]
        return Encoding(lattice, grids=self._process(grids))

    def _process(self, grids: list[FeatureGrid]) -> list[FeatureGrid]:
        planes = [g for g in grids if g.layout != "volume"]
        out = {}
        if planes and len({g.resolution for g in planes}) == 1:
            # one pass with the planes stacked on the batch axis; weights are shared
            b = planes[0].data.shape[0]
            stacked = self.plane_unet(G.concat([g.data for g in planes], axis=0))
            for i, g in enumerate(planes):
                out[g.layout] = G.take(stacked, slice(i * b, (i + 1) * b))
        else:
            for g in planes:
                out[g.layout] = self.plane_unet(g.data)
        for g in grids:
            if g.layout == "volume":
                out["volume"] = self.volume_unet(g.data)
        return [FeatureGrid(g.layout, out[g.layout]) for g in grids]

    def decode(self, enc: Encoding, points: np.ndarray) -> Tensor:
        """Logits (B, M) for query points (B, M, 3) in the unit cube."""
        pts = np.asarray(points, dtype=np.float64)
        if pts.ndim == 2:
            pts = pts[None]
        coords = Tensor(coordinate_features(pts, enc.lattice).astype(self.dtype))
        if enc.code is not None:
            psi = enc.code
        else:
            psi = query_feature(enc.grids, pts, self.cfg.interp)
        return self.head.logits(coords, psi)

    def logits(self, inputs, points: np.ndarray) -> Tensor:
        return self.decode(self.encode(inputs), points)

    def predict(self, inputs, points: np.ndarray, chunk: int = 100_000) -> np.ndarray:
        """Probabilities (B, M); queries are decoded in chunks against one encoding."""
        enc = self.encode(inputs)
        return self.predict_encoded(enc, points, chunk)

    def predict_encoded(self, enc: Encoding, points: np.ndarray, chunk: int = 100_000) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float64)
        squeeze = pts.ndim == 2
        if squeeze:
            pts = pts[None]
        outs = []
        for lo in range(0, max(pts.shape[1], 1), chunk):
            outs.append(G.ops._sigmoid(self.decode(enc, pts[:, lo:lo + chunk]).data))
        prob = np.concatenate(outs, axis=1) if outs else np.zeros(pts.shape[:2])
        return prob[0] if squeeze else prob

    def evaluator(self, inputs, chunk: int = 100_000):
        """p (M, 3) -> probabilities (M,) for a single input item."""
        enc = self.encode(inputs)
        return lambda p: self.predict_encoded(enc, np.asarray(p, dtype=np.float64), chunk)
