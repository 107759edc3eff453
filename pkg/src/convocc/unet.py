"""2D/3D U-Nets over channels-last feature grids."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import grad as G
from .grad import Tensor
from .nn import Conv, Module


def _is_pow2(n: int) -> bool:
    return n >= 1 and n & (n - 1) == 0


def analytic_receptive_field(depth: int) -> int:
    """Receptive field (cells) credited to a U-Net of the given depth.

    Each level ``l = 0..depth`` runs two 3-kernel convolutions on cells that are
    ``2^l`` input cells wide, widening the field by ``2 * 2^l``. The sum is
    ``2^(depth+2) - 2``.
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    return sum(2 * 2 ** level for level in range(depth + 1))


def receptive_field_depth(resolution: int) -> int:
    """Smallest depth whose analytic receptive field covers ``resolution`` cells."""
    resolution = int(resolution)
    if resolution < 4 or not _is_pow2(resolution):
        raise ValueError(f"resolution must be a power of two >= 4, got {resolution}")
    depth = 1
    while analytic_receptive_field(depth) < resolution:
        depth += 1
    return depth


@dataclass
class UNetConfig:
    dims: int = 2
    depth: int = 5
    base_channels: int = 32
    in_channels: int = 32
    out_channels: int = 32
    max_factor: int = 8

    def validate(self) -> None:
        if self.dims not in (2, 3):
            raise ValueError(f"U-Net dims must be 2 or 3, got {self.dims}")
        if self.depth < 1:
            raise ValueError("U-Net depth must be >= 1")
        if min(self.base_channels, self.in_channels, self.out_channels) < 1:
            raise ValueError("channel counts must be positive")

    def channels(self, level: int) -> int:
        return min(self.base_channels * 2 ** level, self.max_factor * self.base_channels)


class UNet(Module):
    """Hourglass: per level two 3-kernel convs + ReLU, 2x average pooling down,
    nearest upsampling + conv up, skip concatenation, final linear 1-kernel conv.
    """

    def __init__(self, cfg: UNetConfig, rng: np.random.Generator, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        dm = cfg.dims
        self.down = []
        c_prev = cfg.in_channels
        for level in range(cfg.depth + 1):
            c = cfg.channels(level)
            self.down.append([Conv(dm, c_prev, c, rng, dtype=dtype), Conv(dm, c, c, rng, dtype=dtype)])
            c_prev = c
        self.up = []
        for level in reversed(range(cfg.depth)):
            c = cfg.channels(level)
            self.up.append([Conv(dm, c_prev, c, rng, dtype=dtype),
                            Conv(dm, 2 * c, c, rng, dtype=dtype),
                            Conv(dm, c, c, rng, dtype=dtype)])
            c_prev = c
        self.final = Conv(dm, c_prev, cfg.out_channels, rng, kernel=1, dtype=dtype)

    def named_parameters(self, prefix: str = ""):
        for i, pair in enumerate(self.down):
            for j, conv in enumerate(pair):
                yield from conv.named_parameters(f"{prefix}down.{i}.{j}.")
        for i, triple in enumerate(self.up):
            for j, conv in enumerate(triple):
                yield from conv.named_parameters(f"{prefix}up.{i}.{j}.")
        yield from self.final.named_parameters(f"{prefix}final.")

    def __call__(self, x: Tensor) -> Tensor:
        cfg = self.cfg
        spatial = x.shape[1:-1]
        if len(spatial) != cfg.dims:
            raise ValueError(f"{cfg.dims}-D U-Net got input of shape {x.shape}")
        step = 2 ** cfg.depth
        if any(s % step for s in spatial):
            raise ValueError(f"U-Net depth {cfg.depth}: spatial extents {spatial} not divisible by {step}")
        skips = []
        h = x
        for level, (c1, c2) in enumerate(self.down):
            h = G.relu(c2(G.relu(c1(h))))
            if level < cfg.depth:
                skips.append(h)
                h = G.avg_pool(h, 2)
        for (cu, cm, c2), skip in zip(self.up, reversed(skips)):
            h = G.relu(cu(G.upsample_nearest(h, 2)))
            h = G.relu(c2(G.relu(cm(G.concat([skip, h], axis=-1)))))
        return self.final(h)


def dependency_radius(depth: int) -> int:
    """Exact half-width (cells) of the set of inputs any U-Net output depends on.

    Propagates 1-D support through the same layer sequence as ``UNet``:
    3-kernel convs dilate by one cell at their level, pooling and nearest
    upsampling map supports between levels, skips take unions. The maximum
    is taken over every input phase modulo ``2^depth``.
    """
    if depth < 1:
        raise ValueError("depth must be >= 1")
    period = 2 ** depth
    length = period * (8 * depth + 8)
    centre = length // 2

    def conv3(s):
        out = s.copy()
        out[1:] |= s[:-1]
        out[:-1] |= s[1:]
        return out

    radius = 0
    for phase in range(period):
        s = np.zeros(length, dtype=bool)
        p = centre + phase
        s[p] = True
        skips = []
        for level in range(depth + 1):
            s = conv3(conv3(s))
            if level < depth:
                skips.append(s)
                s = s.reshape(-1, 2).any(axis=1)
        for skip in reversed(skips):
            s = conv3(np.repeat(s, 2))
            s = conv3(conv3(s | skip))
        idx = np.flatnonzero(s)
        radius = max(radius, int(p - idx.min()), int(idx.max() - p))
    return radius


def unet_for(dims: int, resolution: int, channels: int, rng: np.random.Generator,
             depth: Optional[int] = None, base_channels: Optional[int] = None,
             dtype=np.float64) -> UNet:
    depth = receptive_field_depth(resolution) if depth is None else int(depth)
    cfg = UNetConfig(dims=dims, depth=depth, base_channels=base_channels or channels,
                     in_channels=channels, out_channels=channels)
    return UNet(cfg, rng, dtype)
