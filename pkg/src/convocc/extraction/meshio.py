"""Binary PLY and OFF mesh files."""

from __future__ import annotations

from pathlib import Path

import numpy as np

from ..geometry import TriangleMesh
from ..geometry.io import FormatError


def encode_ply(mesh: TriangleMesh) -> bytes:
    v = np.ascontiguousarray(mesh.vertices, dtype="<f4")
    t = np.ascontiguousarray(mesh.triangles, dtype="<u4")
    header = (
        "ply\nformat binary_little_endian 1.0\n"
        f"element vertex {len(v)}\nproperty float x\nproperty float y\nproperty float z\n"
        f"element face {len(t)}\nproperty list uchar uint vertex_indices\nend_header\n"
    ).encode()
    rec = np.empty(len(t), dtype=[("n", "u1"), ("idx", "<u4", (3,))])
    rec["n"] = 3
    rec["idx"] = t
    return header + v.tobytes() + rec.tobytes()


def encode_off(mesh: TriangleMesh) -> bytes:
    lines = ["OFF", f"{len(mesh.vertices)} {len(mesh.triangles)} 0"]
    lines += [" ".join(f"{c:.9g}" for c in row) for row in mesh.vertices.tolist()]
    lines += ["3 " + " ".join(str(i) for i in row) for row in mesh.triangles.tolist()]
    return ("\n".join(lines) + "\n").encode()


def write_mesh(path, mesh: TriangleMesh, fmt: str = None) -> str:
    path = Path(path)
    fmt = (fmt or path.suffix.lstrip(".") or "ply").lower()
    if fmt == "ply":
        data = encode_ply(mesh)
    elif fmt == "off":
        data = encode_off(mesh)
    else:
        raise ValueError(f"unknown mesh format {fmt!r}; use ply or off")
    path.write_bytes(data)
    return fmt


def _read_ply(buf: bytes, path) -> TriangleMesh:
    end = buf.find(b"end_header\n")
    if not buf.startswith(b"ply") or end < 0:
        raise FormatError(path, 0, "not a PLY file")
    header = buf[:end].decode("ascii", errors="replace").splitlines()
    if "format binary_little_endian 1.0" not in header:
        raise FormatError(path, 0, "only binary little-endian PLY meshes are supported")
    nv = nf = None
    for line in header:
        tok = line.split()
        if tok[:2] == ["element", "vertex"]:
            nv = int(tok[2])
        elif tok[:2] == ["element", "face"]:
            nf = int(tok[2])
    if nv is None or nf is None:
        raise FormatError(path, 0, "PLY mesh needs vertex and face elements")
    off = end + len(b"end_header\n")
    need = off + 12 * nv + 13 * nf
    if len(buf) < need:
        raise FormatError(path, len(buf), f"truncated PLY payload, expected {need} bytes")
    v = np.frombuffer(buf, dtype="<f4", count=3 * nv, offset=off).reshape(nv, 3)
    rec = np.frombuffer(buf, dtype=[("n", "u1"), ("idx", "<u4", (3,))], count=nf, offset=off + 12 * nv)
    if nf and np.any(rec["n"] != 3):
        raise FormatError(path, off + 12 * nv, "only triangle faces are supported")
    return TriangleMesh(v.astype(np.float64), rec["idx"].astype(np.int64))


def _read_off(text: str, path) -> TriangleMesh:
    tokens = text.split()
    if not tokens or tokens[0] != "OFF":
        raise FormatError(path, 0, "missing OFF signature")
    try:
        nv, nf = int(tokens[1]), int(tokens[2])
        vals = tokens[4:4 + 3 * nv]
        v = np.array(vals, dtype=np.float64).reshape(nv, 3)
        rest = tokens[4 + 3 * nv:]
        faces = np.array(rest[: 4 * nf], dtype=np.int64).reshape(nf, 4)
    except (ValueError, IndexError):
        raise FormatError(path, 0, "malformed OFF body") from None
    if np.any(faces[:, 0] != 3):
        raise FormatError(path, 0, "only triangle faces are supported")
    return TriangleMesh(v, faces[:, 1:])


def read_mesh(path) -> TriangleMesh:
    path = Path(path)
    buf = path.read_bytes()
    mesh = _read_ply(buf, path) if buf.startswith(b"ply") else _read_off(buf.decode("utf-8", "replace"), path)
    mesh.validate()
    return mesh
