"""Meshes from occupancy fields: marching cubes, MISE and sliding-window reconstruction."""

from .mcubes import case_triangles, marching_cubes
from .meshio import encode_off, encode_ply, read_mesh, write_mesh
from .mise import CountingEvaluator, MiseConfig, MiseResult, dense_field, mise_extract
from .sliding import (
    SlidingWindowConfig,
    TiledField,
    receptive_field_radius,
    required_margin,
    sliding_window_reconstruct,
)

__all__ = [name for name in dir() if not name.startswith("_")]
