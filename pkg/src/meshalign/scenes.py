"""Synthetic captures: camera orbits, analytic sphere masks, noisy clouds and
the filter rejection fixtures."""
from __future__ import annotations

import numpy as np

from .camera import Camera
from .mesh import rotation_about_axis
from .reconstruction import PointCloud
from .video import Frame, VideoCaptureSet


def orbit_cameras(n: int, radius: float, elevation_deg: float = 20.0, focal: float = 100.0,
                  width: int = 128, height: int = 128, target=(0.0, 0.0, 0.0), arc_deg: float = 360.0,
                  start_deg: float = 0.0, yaw_deg: float = 0.0) -> list[Camera]:
    """Cameras on a circle at ``elevation_deg`` looking at ``target``.

    ``yaw_deg`` turns every camera about its own vertical axis afterwards, so
    the target drifts sideways in the image.
    """
    target = np.asarray(target, dtype=float)
    el = np.deg2rad(elevation_deg)
    full = abs(arc_deg - 360.0) < 1e-9
    az = np.deg2rad(start_deg + arc_deg * np.arange(n) / (n if full else max(n - 1, 1)))
    cams = []
    for a in az:
        eye = target + radius * np.array([np.cos(el) * np.cos(a), np.cos(el) * np.sin(a), np.sin(el)])
        cam = Camera.look_at(eye, target, [0, 0, 1], focal, width, height)
        if yaw_deg:
            turn = rotation_about_axis([0, 1, 0], np.deg2rad(yaw_deg))
            r = turn @ cam.rotation
            cam = cam.with_pose(r, -r @ eye)
        cams.append(cam)
    return cams


def sphere_mask(camera: Camera, center, radius: float) -> np.ndarray:
    """Pixels whose viewing ray meets the sphere in front of the camera."""
    ys, xs = np.mgrid[0:camera.height, 0:camera.width]
    pix = np.stack([xs, ys, np.ones_like(xs)], -1).reshape(-1, 3).astype(float)
    rays = pix @ np.linalg.inv(camera.intrinsics).T
    rays /= np.linalg.norm(rays, axis=1, keepdims=True)
    c = camera.to_camera(np.asarray(center, dtype=float).reshape(1, 3))[0]
    t = rays @ c
    d2 = (c @ c) - t ** 2
    hit = (d2 <= radius ** 2) & (t + np.sqrt(np.maximum(radius ** 2 - d2, 0)) > 0)
    return hit.reshape(camera.height, camera.width)


def sphere_capture(n_frames: int = 36, radius: float = 1.0, camera_distance: float = 3.0,
                   video_id: str = "sphere", **orbit_kw) -> VideoCaptureSet:
    cams = orbit_cameras(n_frames, camera_distance, **orbit_kw)
    return VideoCaptureSet(tuple(Frame(c, sphere_mask(c, np.zeros(3), radius)) for c in cams), video_id)


def noisy_sphere_cloud(n: int = 5000, radius: float = 1.0, noise: float = 0.01,
                       outlier_fraction: float = 0.05, outlier_shell=(1.5, 3.0), seed: int = 0) -> PointCloud:
    """Surface samples with radial Gaussian noise plus background outliers
    uniform in a spherical shell (radii given as multiples of ``radius``)."""
    rng = np.random.default_rng(seed)
    n_out = int(round(outlier_fraction * n))
    d = rng.normal(size=(n - n_out, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    surf = d * (radius + noise * radius * rng.normal(size=(n - n_out, 1)))
    lo, hi = outlier_shell
    od = rng.normal(size=(n_out, 3))
    od /= np.linalg.norm(od, axis=1, keepdims=True)
    r = radius * np.cbrt(rng.uniform(lo ** 3, hi ** 3, size=(n_out, 1)))
    out = od * r
    pts = np.concatenate([surf, out])
    return PointCloud(pts[rng.permutation(n)])


def filter_fixture(kind: str, n_frames: int = 36) -> VideoCaptureSet:
    """Capture sets built to pass all filters (``"good"``) or fail exactly one.

    ``"too_far"``: object covers ~5% of each frame; ``"too_close"``: close-up
    cameras all turned away from the object's center; ``"low_variance"``:
    every view comes from one narrow cluster of directions.
    """
    size, focal = 128, 100.0
    if kind == "good":
        # sphere of radius 1 seen from 2.6 units fills roughly 30% of the frame
        cams = orbit_cameras(n_frames, 2.6, 20.0, focal, size, size)
        r = 1.0
    elif kind == "too_far":
        cams = orbit_cameras(n_frames, 3.3, 20.0, focal, size, size)
        r = 0.52
    elif kind == "too_close":
        cams = orbit_cameras(n_frames, 1.6, 20.0, focal, size, size, yaw_deg=28.0)
        r = 1.0
    elif kind == "low_variance":
        cams = orbit_cameras(n_frames, 3.3, 20.0, focal, size, size, arc_deg=20.0)
        r = 1.0
    else:
        raise ValueError(f"unknown fixture {kind!r}")
    return VideoCaptureSet(tuple(Frame(c, sphere_mask(c, np.zeros(3), r)) for c in cams), kind)
