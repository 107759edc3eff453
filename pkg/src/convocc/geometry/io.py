"""Binary dataset shard formats and point-cloud readers.

All binary formats are little-endian:

* point cloud: ``b"COPC1"``, u32 N, N x 3 f32
* queries:     ``b"COQY1"``, u32 M, M x 3 f32 coords, M u8 labels
* voxels:      ``b"COVX1"``, u32 R, ceil(R^3 / 8) bytes of occupancy bits,
  C order, most significant bit first
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .scene import SceneSpec
from .types import PointCloud, VoxelGrid

POINTS_MAGIC = b"COPC1"
QUERIES_MAGIC = b"COQY1"
VOXELS_MAGIC = b"COVX1"

POINTS_FILE = "pointcloud.bin"
QUERIES_FILE = "queries.bin"
SCENE_FILE = "scene.json"
VOXELS_FILE = "voxels.bin"


class FormatError(ValueError):
    """Malformed input file; carries the byte offset where parsing failed."""

    def __init__(self, path, offset: int, message: str):
        self.path = str(path)
        self.offset = offset
        super().__init__(f"{path}: byte offset {offset}: {message}")


def _read_header(buf: bytes, path, magic: bytes) -> int:
    if len(buf) < len(magic) + 4:
        raise FormatError(path, len(buf), f"truncated header (expected {magic!r} + u32 count)")
    if buf[: len(magic)] != magic:
        raise FormatError(path, 0, f"bad magic {buf[:len(magic)]!r}, expected {magic!r}")
    return struct.unpack_from("<I", buf, len(magic))[0]


def _need(buf: bytes, path, offset: int, nbytes: int, what: str) -> None:
    if len(buf) < offset + nbytes:
        raise FormatError(path, len(buf), f"truncated {what}: need {nbytes} bytes from offset {offset}")


def encode_points(points: np.ndarray) -> bytes:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    return POINTS_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes()


def decode_points(buf: bytes, path="<bytes>") -> np.ndarray:
    n = _read_header(buf, path, POINTS_MAGIC)
    off = len(POINTS_MAGIC) + 4
    _need(buf, path, off, 12 * n, "point payload")
    return np.frombuffer(buf, dtype="<f4", count=3 * n, offset=off).reshape(n, 3).astype(np.float64)


def encode_queries(points: np.ndarray, labels: np.ndarray) -> bytes:
    pts = np.ascontiguousarray(points, dtype="<f4").reshape(-1, 3)
    lab = np.ascontiguousarray(labels, dtype=np.uint8).reshape(-1)
    if len(lab) != len(pts):
        raise ValueError("labels must align with query points")
    return QUERIES_MAGIC + struct.pack("<I", len(pts)) + pts.tobytes() + lab.tobytes()


def decode_queries(buf: bytes, path="<bytes>") -> tuple[np.ndarray, np.ndarray]:
    m = _read_header(buf, path, QUERIES_MAGIC)
    off = len(QUERIES_MAGIC) + 4
    _need(buf, path, off, 13 * m, "query payload")
    pts = np.frombuffer(buf, dtype="<f4", count=3 * m, offset=off).reshape(m, 3).astype(np.float64)
    lab = np.frombuffer(buf, dtype=np.uint8, count=m, offset=off + 12 * m).copy()
    if np.any(lab > 1):
        bad = int(np.argmax(lab > 1))
        raise FormatError(path, off + 12 * m + bad, "query label is not 0 or 1")
    return pts, lab


def encode_voxels(grid: VoxelGrid) -> bytes:
    bits = np.packbits(grid.occupancy.astype(np.uint8).reshape(-1))
    return VOXELS_MAGIC + struct.pack("<I", grid.resolution) + bits.tobytes()


def decode_voxels(buf: bytes, path="<bytes>") -> VoxelGrid:
    r = _read_header(buf, path, VOXELS_MAGIC)
    off = len(VOXELS_MAGIC) + 4
    nbytes = (r ** 3 + 7) // 8
    _need(buf, path, off, nbytes, "voxel payload")
    bits = np.unpackbits(np.frombuffer(buf, dtype=np.uint8, count=nbytes, offset=off))[: r ** 3]
    return VoxelGrid(bits.reshape(r, r, r))


# ----------------------------------------------------------------------------
# external point clouds


def _read_xyz(text: str, path) -> np.ndarray:
    rows = []
    offset = 0
    for line in text.splitlines(keepends=True):
        stripped = line.split("#", 1)[0].strip()
        if stripped:
            parts = stripped.replace(",", " ").split()
            try:
                vals = [float(v) for v in parts[:3]]
            except ValueError:
                raise FormatError(path, offset, f"cannot parse coordinates from {stripped[:40]!r}") from None
            if len(vals) < 3:
                raise FormatError(path, offset, "expected at least 3 values per line")
            rows.append(vals)
        offset += len(line.encode())
    return np.array(rows, dtype=np.float64).reshape(-1, 3)


_PLY_TYPES = {"char": "i1", "int8": "i1", "uchar": "u1", "uint8": "u1", "short": "<i2",
              "int16": "<i2", "ushort": "<u2", "uint16": "<u2", "int": "<i4", "int32": "<i4",
              "uint": "<u4", "uint32": "<u4", "float": "<f4", "float32": "<f4",
              "double": "<f8", "float64": "<f8"}


def _read_ply_points(buf: bytes, path) -> np.ndarray:
    end = buf.find(b"end_header\n")
    if end < 0:
        raise FormatError(path, 0, "PLY header has no end_header line")
    header = buf[:end].decode("ascii", errors="replace").splitlines()
    body = end + len(b"end_header\n")
    if not header or header[0].strip() != "ply":
        raise FormatError(path, 0, "missing 'ply' signature")
    fmt = None
    count = None
    props: list[tuple[str, str]] = []
    current = None
    for line in header[1:]:
        tok = line.split()
        if not tok:
            continue
        if tok[0] == "format":
            fmt = tok[1]
        elif tok[0] == "element":
            current = tok[1]
            if current == "vertex":
                count = int(tok[2])
        elif tok[0] == "property" and current == "vertex":
            if tok[1] == "list":
                raise FormatError(path, 0, "list properties on vertices are not supported")
            if tok[1] not in _PLY_TYPES:
                raise FormatError(path, 0, f"unknown PLY property type {tok[1]!r}")
            props.append((tok[2], _PLY_TYPES[tok[1]]))
    if fmt != "binary_little_endian":
        raise FormatError(path, 0, f"unsupported PLY format {fmt!r} (need binary_little_endian)")
    if count is None:
        raise FormatError(path, 0, "PLY has no vertex element")
    names = [p[0] for p in props]
    if not {"x", "y", "z"} <= set(names):
        raise FormatError(path, 0, "PLY vertex element lacks x/y/z")
    dtype = np.dtype(props)
    _need(buf, path, body, dtype.itemsize * count, "PLY vertex payload")
    rec = np.frombuffer(buf, dtype=dtype, count=count, offset=body)
    return np.stack([rec["x"], rec["y"], rec["z"]], axis=1).astype(np.float64)


def read_point_cloud(path) -> PointCloud:
    """Read a COPC1, binary little-endian PLY, or ASCII XYZ point cloud."""
    path = Path(path)
    buf = path.read_bytes()
    if buf.startswith(POINTS_MAGIC):
        pts = decode_points(buf, path)
    elif buf.startswith(b"ply"):
        pts = _read_ply_points(buf, path)
    else:
        try:
            text = buf.decode("utf-8")
        except UnicodeDecodeError as e:
            raise FormatError(path, e.start, "not a known point cloud format") from None
        pts = _read_xyz(text, path)
    if len(pts) == 0:
        raise FormatError(path, len(buf), "point cloud is empty")
    if not np.isfinite(pts).all():
        raise FormatError(path, 0, "point cloud has non-finite coordinates")
    return PointCloud(pts)


def write_point_cloud(path, points: np.ndarray) -> None:
    Path(path).write_bytes(encode_points(points))


def read_voxels(path) -> VoxelGrid:
    path = Path(path)
    return decode_voxels(path.read_bytes(), path)


# ----------------------------------------------------------------------------
# shards


@dataclass
class Shard:
    points: np.ndarray
    query_points: np.ndarray
    query_labels: np.ndarray
    scene: SceneSpec
    voxels: Optional[VoxelGrid] = None


def write_shard(directory, shard: Shard) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    (d / POINTS_FILE).write_bytes(encode_points(shard.points))
    (d / QUERIES_FILE).write_bytes(encode_queries(shard.query_points, shard.query_labels))
    (d / SCENE_FILE).write_text(shard.scene.to_json() + "\n")
    if shard.voxels is not None:
        (d / VOXELS_FILE).write_bytes(encode_voxels(shard.voxels))


def read_shard(directory) -> Shard:
    d = Path(directory)
    for name in (POINTS_FILE, QUERIES_FILE, SCENE_FILE):
        if not (d / name).exists():
            raise FileNotFoundError(f"shard {d} is missing {name}")
    pts = decode_points((d / POINTS_FILE).read_bytes(), d / POINTS_FILE)
    qp, ql = decode_queries((d / QUERIES_FILE).read_bytes(), d / QUERIES_FILE)
    scene = SceneSpec.from_json((d / SCENE_FILE).read_text())
    vox = read_voxels(d / VOXELS_FILE) if (d / VOXELS_FILE).exists() else None
    return Shard(pts, qp, ql, scene, vox)


def scene_summary(directory) -> dict:
    return json.loads((Path(directory) / SCENE_FILE).read_text())
