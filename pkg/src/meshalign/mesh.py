"""Neural meshes: triangle geometry with per-vertex banks of unit features."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

FEATURE_NORM_TOL = 1e-4


class MeshError(ValueError):
    """Raised when a mesh or transform violates its invariants."""


def _as_banks(banks, n_vertices: int, dim: int) -> tuple[np.ndarray, ...]:
    out = []
    for bank in banks:
        arr = np.asarray(bank, dtype=float)
        arr = np.zeros((0, dim)) if arr.size == 0 else arr.reshape(-1, dim)
        out.append(arr)
    if len(out) != n_vertices:
        raise MeshError(f"expected {n_vertices} feature banks, got {len(out)}")
    return tuple(out)


@dataclass(frozen=True, eq=False)
class NeuralMesh:
    """Triangle mesh whose vertices carry zero or more D-dim unit features.

    ``feature_banks[i]`` is an ``(n_i, D)`` array; ``n_i == 0`` marks a vertex
    that was never observed.
    """

    vertices: np.ndarray
    faces: np.ndarray
    feature_banks: tuple[np.ndarray, ...]
    feature_dim: int

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=float).reshape(-1, 3)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        banks = _as_banks(self.feature_banks, len(v), int(self.feature_dim))
        v.setflags(write=False)
        f.setflags(write=False)
        for b in banks:
            b.setflags(write=False)
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "feature_banks", banks)
        object.__setattr__(self, "feature_dim", int(self.feature_dim))
        self.validate()

    @classmethod
    def geometry_only(cls, vertices, faces, feature_dim: int = 0) -> "NeuralMesh":
        n = len(np.asarray(vertices).reshape(-1, 3))
        return cls(vertices, faces, tuple(np.zeros((0, feature_dim)) for _ in range(n)), feature_dim)

    def validate(self) -> None:
        n = len(self.vertices)
        if not np.all(np.isfinite(self.vertices)):
            raise MeshError("non-finite vertex coordinates")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= n:
                raise MeshError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise MeshError("degenerate face with repeated vertex index")
        for i, bank in enumerate(self.feature_banks):
            if len(bank) == 0:
                continue
            norms = np.linalg.norm(bank, axis=1)
            if np.any(np.abs(norms - 1.0) > FEATURE_NORM_TOL):
                raise MeshError(f"vertex {i} has a feature with norm outside 1 +/- {FEATURE_NORM_TOL}")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def bank_sizes(self) -> np.ndarray:
        return np.array([len(b) for b in self.feature_banks], dtype=np.int64)

    @property
    def featured(self) -> np.ndarray:
        """Indices of vertices with a non-empty feature bank."""
        return np.flatnonzero(self.bank_sizes > 0)

    def with_vertices(self, vertices) -> "NeuralMesh":
        return NeuralMesh(vertices, self.faces, self.feature_banks, self.feature_dim)

    def with_banks(self, banks, feature_dim: int | None = None) -> "NeuralMesh":
        dim = self.feature_dim if feature_dim is None else feature_dim
        return NeuralMesh(self.vertices, self.faces, tuple(banks), dim)


@dataclass(frozen=True, eq=False)
class SimilarityTransform:
    """x -> scale * rotation @ x + translation."""

    scale: float = 1.0
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        s = float(self.scale)
        if not s > 0 or not np.isfinite(s):
            raise MeshError(f"scale must be positive, got {s}")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise MeshError("rotation is not a proper orthonormal matrix")
        r.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "scale", s)

    @classmethod
    def identity(cls) -> "SimilarityTransform":
        return cls()

    def apply(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        return self.scale * p @ self.rotation.T + self.translation

    def compose(self, other: "SimilarityTransform") -> "SimilarityTransform":
        """Return ``self ∘ other`` (apply ``other`` first)."""
        return SimilarityTransform(
            self.scale * other.scale,
            self.rotation @ other.rotation,
            self.scale * self.rotation @ other.translation + self.translation,
        )

    def inverse(self) -> "SimilarityTransform":
        rt = self.rotation.T
        return SimilarityTransform(1.0 / self.scale, rt, -(rt @ self.translation) / self.scale)

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "SimilarityTransform":
        return cls(d["scale"], np.reshape(d["rotation"], (3, 3)), d["translation"])


def compose(t2: SimilarityTransform, t1: SimilarityTransform) -> SimilarityTransform:
    return t2.compose(t1)


def apply_transform(mesh: NeuralMesh, t: SimilarityTransform) -> NeuralMesh:
    return mesh.with_vertices(t.apply(mesh.vertices))


def point_diameter(points) -> float:
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) == 0:
        raise MeshError("diameter of an empty point set")
    if len(p) == 1:
        return 0.0
    # The farthest pair lies on the convex hull; fall back to blocked brute force
    # for small or degenerate inputs.
    if len(p) > 64:
        try:
            from scipy.spatial import ConvexHull

            p = p[ConvexHull(p).vertices]
        except Exception:
            pass
    best = 0.0
    for start in range(0, len(p), 512):
        block = p[start:start + 512]
        d2 = ((block[:, None, :] - p[None, :, :]) ** 2).sum(-1)
        best = max(best, float(d2.max()))
    return float(np.sqrt(best))


def mesh_diameter(mesh: NeuralMesh) -> float:
    return point_diameter(mesh.vertices)


def normalize_rows(x, eps: float = 1e-12) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    n = np.linalg.norm(x, axis=-1, keepdims=True)
    return x / np.maximum(n, eps)


def rotation_about_axis(axis: Sequence[float], angle_rad: float) -> np.ndarray:
    """Rodrigues rotation matrix."""
    a = np.asarray(axis, dtype=float)
    a = a / np.linalg.norm(a)
    k = np.array([[0, -a[2], a[1]], [a[2], 0, -a[0]], [-a[1], a[0], 0]])
    return np.eye(3) + np.sin(angle_rad) * k + (1 - np.cos(angle_rad)) * (k @ k)


def axis_angle_to_matrix(w) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    angle = np.linalg.norm(w)
    if angle < 1e-15:
        return np.eye(3)
    return rotation_about_axis(w / angle, angle)


def orthonormalize(r) -> np.ndarray:
    """Nearest proper rotation to ``r`` in the Frobenius sense."""
    u, _, vt = np.linalg.svd(np.asarray(r, dtype=float))
    d = np.sign(np.linalg.det(u @ vt))
    return u @ np.diag([1.0, 1.0, d]) @ vt


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    q = rng.normal(size=4)
    q /= np.linalg.norm(q)
    w, x, y, z = q
    r = np.array([
        [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
        [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
        [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
    ])
    return orthonormalize(r)


def face_normals(vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, dtype=float)
    f = np.asarray(faces, dtype=np.int64)
    return np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])


def vertex_normals(vertices, faces) -> np.ndarray:
    v = np.asarray(vertices, dtype=float)
    fn = face_normals(v, faces)
    out = np.zeros_like(v)
    for k in range(3):
        np.add.at(out, np.asarray(faces)[:, k], fn)
    return normalize_rows(out)


def edge_face_counts(faces) -> dict[tuple[int, int], int]:
    counts: dict[tuple[int, int], int] = {}
    for a, b, c in np.asarray(faces, dtype=np.int64):
        for u, w in ((a, b), (b, c), (c, a)):
            key = (int(min(u, w)), int(max(u, w)))
            counts[key] = counts.get(key, 0) + 1
    return counts


def is_closed_manifold(faces) -> bool:
    """Every undirected edge bounds exactly two faces."""
    counts = edge_face_counts(faces)
    return bool(counts) and all(c == 2 for c in counts.values())


def euler_characteristic(n_vertices_used: int, faces) -> int:
    return n_vertices_used - len(edge_face_counts(faces)) + len(np.asarray(faces))


def project_vertex(v, camera) -> tuple[np.ndarray, float, bool]:
    """Pinhole projection of one world point.

    Returns ``(pixel_xy, depth, in_front)``; points with ``depth <= 0`` are
    flagged ``in_front=False`` and their pixel is NaN.
    """
    uv, depth = camera.project(np.asarray(v, dtype=float).reshape(1, 3))
    in_front = bool(depth[0] > 0)
    return uv[0], float(depth[0]), in_front
