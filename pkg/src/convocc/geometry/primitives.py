"""Analytic primitives with exact signed distance, occupancy and surface sampling."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

KINDS = ("sphere", "box", "cylinder")
# Boundary tolerance (world units): points this close to a surface count as inside.
BOUNDARY_EPS = 1e-9


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    """Uniform rotation from a random unit quaternion."""
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    return np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])


def rotation_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


@dataclass
class Primitive:
    """A transformed sphere, box or cylinder.

    ``scale`` holds the shape's dimensions in its local frame: sphere radius
    (all three equal), box half-extents, cylinder (radius, radius,
    half-height) with the axis along local z.  ``role`` marks thin slabs
    ("ground"/"wall") so metrics can treat them as single surfaces.
    """

    kind: str
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: np.ndarray = field(default_factory=lambda: np.ones(3))
    role: str = "object"

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        self.scale = np.asarray(self.scale, dtype=np.float64).reshape(3)
        if self.kind not in KINDS:
            raise ValueError(f"unknown primitive kind {self.kind!r}; expected one of {KINDS}")
        if np.any(self.scale <= 0):
            raise ValueError(f"primitive scale must be strictly positive, got {self.scale}")
        r = self.rotation
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9) or np.linalg.det(r) < 0:
            raise ValueError("rotation must be orthonormal with determinant +1")
        if self.kind == "sphere" and not np.allclose(self.scale, self.scale[0]):
            raise ValueError("sphere scale must be isotropic")
        if self.kind == "cylinder" and not np.isclose(self.scale[0], self.scale[1]):
            raise ValueError("cylinder scale must have equal x/y (radius) components")

    def to_local(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=np.float64) - self.translation) @ self.rotation

    def sdf(self, points: np.ndarray) -> np.ndarray:
        p = self.to_local(points)
        s = self.scale
        if self.kind == "sphere":
            return np.linalg.norm(p, axis=-1) - s[0]
        if self.kind == "box":
            q = np.abs(p) - s
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        d = np.stack([np.hypot(p[:, 0], p[:, 1]) - s[0], np.abs(p[:, 2]) - s[2]], axis=-1)
        return np.minimum(d.max(axis=-1), 0.0) + np.linalg.norm(np.maximum(d, 0.0), axis=-1)

    def contains(self, points: np.ndarray) -> np.ndarray:
        return self.sdf(points) <= BOUNDARY_EPS

    def area(self) -> float:
        s = self.scale
        if self.kind == "sphere":
            return 4.0 * np.pi * s[0] ** 2
        if self.kind == "box":
            return 8.0 * (s[0] * s[1] + s[1] * s[2] + s[0] * s[2])
        return 2.0 * np.pi * s[0] * 2.0 * s[2] + 2.0 * np.pi * s[0] ** 2

    def volume(self) -> float:
        s = self.scale
        if self.kind == "sphere":
            return 4.0 / 3.0 * np.pi * s[0] ** 3
        if self.kind == "box":
            return 8.0 * s[0] * s[1] * s[2]
        return np.pi * s[0] ** 2 * 2.0 * s[2]

    def aabb(self) -> tuple[np.ndarray, np.ndarray]:
        r, s, t = self.rotation, self.scale, self.translation
        if self.kind == "sphere":
            half = np.full(3, s[0])
        elif self.kind == "box":
            half = np.abs(r) @ s
        else:
            axis = r[:, 2]
            half = np.abs(axis) * s[2] + s[0] * np.sqrt(np.clip(1.0 - axis ** 2, 0.0, None))
        return t - half, t + half

    def _face_table(self, single_face: bool, toward: np.ndarray | None):
        """(area, axis, sign) for the box faces to sample from."""
        s = self.scale
        faces = []
        for axis in range(3):
            others = [a for a in range(3) if a != axis]
            a = 4.0 * s[others[0]] * s[others[1]]
            for sign in (-1.0, 1.0):
                faces.append((a, axis, sign))
        if single_face:
            thin = int(np.argmin(s))
            target = np.zeros(3) if toward is None else self.to_local(toward[None])[0]
            sign = 1.0 if target[thin] >= 0 else -1.0
            faces = [f for f in faces if f[1] == thin and f[2] == sign]
        return faces

    def sample_surface(self, n: int, rng: np.random.Generator, single_face: bool = False,
                       toward: np.ndarray | None = None) -> tuple[np.ndarray, np.ndarray]:
        """``n`` area-uniform surface points and outward unit normals (world frame).

        ``single_face`` restricts a box to the face of its thinnest axis that
        points toward ``toward`` (world point); used for slabs.
        """
        s = self.scale
        if self.kind == "sphere":
            d = rng.normal(size=(n, 3))
            d /= np.linalg.norm(d, axis=1, keepdims=True)
            local, normal = d * s[0], d
        elif self.kind == "box":
            faces = self._face_table(single_face, toward)
            areas = np.array([f[0] for f in faces])
            which = rng.choice(len(faces), size=n, p=areas / areas.sum())
            local = rng.uniform(-1.0, 1.0, size=(n, 3)) * s
            normal = np.zeros((n, 3))
            for k, (_, axis, sign) in enumerate(faces):
                sel = which == k
                local[sel, axis] = sign * s[axis]
                normal[sel, axis] = sign
        else:
            r, h = s[0], s[2]
            parts = np.array([2 * np.pi * r * 2 * h, np.pi * r * r, np.pi * r * r])
            which = rng.choice(3, size=n, p=parts / parts.sum())
            theta = rng.uniform(0.0, 2 * np.pi, size=n)
            # caps: uniform on disc via sqrt radius
            rad = np.where(which == 0, r, r * np.sqrt(rng.uniform(size=n)))
            z = np.where(which == 0, rng.uniform(-h, h, size=n), np.where(which == 1, h, -h))
            local = np.stack([rad * np.cos(theta), rad * np.sin(theta), z], axis=1)
            normal = np.zeros((n, 3))
            lat = which == 0
            normal[lat, 0] = np.cos(theta[lat])
            normal[lat, 1] = np.sin(theta[lat])
            normal[which == 1, 2] = 1.0
            normal[which == 2, 2] = -1.0
        points = local @ self.rotation.T + self.translation
        return points, normal @ self.rotation.T

    def transformed(self, scale: float, offset: np.ndarray) -> "Primitive":
        """Image under the similarity ``x -> scale * x + offset``."""
        return Primitive(self.kind, self.rotation.copy(), scale * self.translation + offset,
                         scale * self.scale, self.role)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "role": self.role,
            "rotation": self.rotation.tolist(),
            "translation": self.translation.tolist(),
            "scale": self.scale.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Primitive":
        return cls(d["kind"], np.array(d["rotation"]), np.array(d["translation"]),
                   np.array(d["scale"]), d.get("role", "object"))
