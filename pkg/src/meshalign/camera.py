"""Pinhole camera with world-to-camera extrinsics."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True, eq=False)
class Camera:
    intrinsics: np.ndarray
    rotation: np.ndarray  # world -> camera
    translation: np.ndarray  # world -> camera
    width: int
    height: int

    def __post_init__(self):
        k = np.array(self.intrinsics, dtype=float).reshape(3, 3)
        r = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if abs(k[2, 2] - 1.0) > 1e-12 or np.any(k[2, :2] != 0) or k[1, 0] != 0:
            raise ValueError("intrinsics must be upper-triangular with K[2,2] = 1")
        if k[0, 0] <= 0 or k[1, 1] <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1) > 1e-9:
            raise ValueError("camera rotation is not orthonormal")
        if int(self.width) <= 0 or int(self.height) <= 0:
            raise ValueError("image size must be positive")
        for a in (k, r, t):
            a.setflags(write=False)
        object.__setattr__(self, "intrinsics", k)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))

    @classmethod
    def look_at(cls, eye, target, up, focal: float, width: int, height: int,
                principal=None) -> "Camera":
        """Camera at ``eye`` whose +z axis points at ``target``; image y runs along -up."""
        eye = np.asarray(eye, dtype=float)
        z = np.asarray(target, dtype=float) - eye
        z /= np.linalg.norm(z)
        up = np.asarray(up, dtype=float)
        x = np.cross(z, -up)
        if np.linalg.norm(x) < 1e-9:
            x = np.cross(z, np.array([1.0, 0.0, 0.0]) if abs(z[0]) < 0.9 else np.array([0.0, 1.0, 0.0]))
        x /= np.linalg.norm(x)
        y = np.cross(z, x)
        r = np.stack([x, y, z])
        cx, cy = principal if principal is not None else ((width - 1) / 2.0, (height - 1) / 2.0)
        k = np.array([[focal, 0, cx], [0, focal, cy], [0, 0, 1.0]])
        return cls(k, r, -r @ eye, width, height)

    @property
    def center(self) -> np.ndarray:
        """Camera position in world coordinates, -R^T t."""
        return -self.rotation.T @ self.translation

    @property
    def optical_axis(self) -> np.ndarray:
        """Camera +z axis expressed in world coordinates."""
        return self.rotation[2].copy()

    def to_camera(self, points) -> np.ndarray:
        return np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def project(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to pixels; returns ``(uv, depth)``.

        Pixels of points with non-positive depth are NaN.
        """
        pc = self.to_camera(np.asarray(points, dtype=float).reshape(-1, 3))
        depth = pc[:, 2]
        h = pc @ self.intrinsics.T
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = h[:, :2] / h[:, 2:3]
        uv[depth <= 0] = np.nan
        return uv, depth

    def projection_matrix(self) -> np.ndarray:
        return self.intrinsics @ np.hstack([self.rotation, self.translation[:, None]])

    def with_pose(self, rotation, translation) -> "Camera":
        return Camera(self.intrinsics, rotation, translation, self.width, self.height)

    def to_dict(self) -> dict:
        return {
            "intrinsics": [float(x) for x in self.intrinsics.ravel()],
            "rotation": [float(x) for x in self.rotation.ravel()],
            "translation": [float(x) for x in self.translation],
            "width": self.width,
            "height": self.height,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        rot = d.get("rotation", [1, 0, 0, 0, 1, 0, 0, 0, 1])
        trans = d.get("translation", [0, 0, 0])
        return cls(np.reshape(d["intrinsics"], (3, 3)), np.reshape(rot, (3, 3)), trans,
                   d["width"], d["height"])
