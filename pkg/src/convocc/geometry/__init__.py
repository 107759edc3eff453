"""Synthetic scenes with exact occupancy, surface sampling, voxelization and shard I/O."""

from .io import FormatError, Shard, read_point_cloud, read_shard, read_voxels, write_point_cloud, write_shard
from .primitives import KINDS, Primitive, random_rotation, rotation_z
from .scene import (
    SLAB_THICKNESS,
    Normalization,
    SceneGenConfig,
    SceneSpec,
    box_scene,
    generate_scene,
    normalize_scene,
    object_scene,
    occupancy_query,
    sample_surface,
    sphere_scene,
    voxelize,
)
from .types import PointCloud, TriangleMesh, VoxelGrid
