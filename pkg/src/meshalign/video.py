"""Capture sets (cameras + object masks) and the video-quality filters."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .camera import Camera
from .io import dump_json, load_json, read_pgm, write_feature_grid, write_pgm

TOO_FAR = "TooFar"
TOO_CLOSE = "TooClose"
LOW_VIEWPOINT_VARIANCE = "LowViewpointVariance"

N_VIEW_BINS = 38
_N_BANDS = 4
_N_SECTORS = 9


class DegenerateGeometryError(ValueError):
    """Camera configuration does not determine the requested quantity."""


@dataclass(frozen=True)
class Frame:
    camera: Camera
    mask: np.ndarray  # (height, width) bool

    def __post_init__(self):
        m = np.asarray(self.mask).astype(bool)
        if m.shape != (self.camera.height, self.camera.width):
            raise ValueError(f"mask shape {m.shape} does not match camera {self.camera.height}x{self.camera.width}")
        m.setflags(write=False)
        object.__setattr__(self, "mask", m)


@dataclass(frozen=True)
class VideoCaptureSet:
    frames: tuple[Frame, ...]
    video_id: str = ""

    def __post_init__(self):
        frames = tuple(self.frames)
        if len(frames) < 2:
            raise ValueError("a capture set needs at least 2 frames")
        object.__setattr__(self, "frames", frames)

    @property
    def cameras(self) -> list[Camera]:
        return [f.camera for f in self.frames]

    @property
    def masks(self) -> list[np.ndarray]:
        return [f.mask for f in self.frames]

    def __len__(self):
        return len(self.frames)


def load_capture_set(manifest_path, video_id: str | None = None) -> VideoCaptureSet:
    """Read a capture manifest: ``{"video_id"?, "frames": [{intrinsics, rotation,
    translation, width, height, mask_path}]}``; mask paths are relative to the
    manifest's directory."""
    manifest_path = Path(manifest_path)
    data = load_json(manifest_path)
    frames = []
    for fr in data["frames"]:
        cam = Camera.from_dict(fr)
        mask = read_pgm(manifest_path.parent / fr["mask_path"])
        frames.append(Frame(cam, mask))
    vid = video_id if video_id is not None else data.get("video_id", manifest_path.stem)
    return VideoCaptureSet(tuple(frames), vid)



def write_capture_set(directory, v: VideoCaptureSet, feature_maps=None) -> Path:
    """Write ``manifest.json`` plus ``masks/NNNN.pgm`` (and ``features/NNNN.nmfg``
    when ``feature_maps`` is given); returns the manifest path."""
    d = Path(directory)
    (d / "masks").mkdir(parents=True, exist_ok=True)
    if feature_maps is not None:
        if len(feature_maps) != len(v.frames):
            raise ValueError(f"{len(feature_maps)} feature maps for {len(v.frames)} frames")
        (d / "features").mkdir(exist_ok=True)
    frames = []
    for i, fr in enumerate(v.frames):
        rec = fr.camera.to_dict()
        rec["mask_path"] = f"masks/{i:04d}.pgm"
        write_pgm(d / rec["mask_path"], fr.mask)
        if feature_maps is not None:
            rec["feature_path"] = f"features/{i:04d}.nmfg"
            write_feature_grid(d / rec["feature_path"], feature_maps[i])
        frames.append(rec)
    dump_json(d / "manifest.json", {"video_id": v.video_id, "frames": frames})
    return d / "manifest.json"


# -- measurements ------------------------------------------------------------

def average_visibility(v: VideoCaptureSet) -> float:
    """Mean fraction of object pixels over all frames (each frame weighted equally)."""
    if len(v.frames) == 0:
        raise ValueError("empty capture set")
    return float(np.mean([f.mask.mean() for f in v.frames]))


def triangulate_center(v: VideoCaptureSet, form: str = "projected") -> np.ndarray:
    """Least-squares point closest to all optical-axis rays.

    ``form="projected"`` solves ``sum(I - n n^T) c = sum(I - n n^T) r``, the
    stationarity condition of the summed squared point-to-ray distances.
    ``form="literal"`` solves ``sum(n n^T) c = sum(n n^T) r`` instead.
    """
    centers = np.array([c.center for c in v.cameras])
    axes = np.array([c.optical_axis for c in v.cameras])
    outer = axes[:, :, None] * axes[:, None, :]
    if form == "projected":
        m = np.eye(3)[None] - outer
    elif form == "literal":
        m = outer
    else:
        raise ValueError(f"unknown triangulation form {form!r}")
    a = m.sum(0)
    b = np.einsum("kij,kj->i", m, centers)
    w = np.linalg.eigvalsh(a)
    if w[0] <= 1e-9 * max(w[-1], 1e-300):
        raise DegenerateGeometryError("optical axes do not determine a center (parallel or too few views)")
    return np.linalg.solve(a, b)


def center_in_focus(camera: Camera, c, rect_fraction: float = 0.6) -> bool:
    uv, depth = camera.project(np.asarray(c, dtype=float).reshape(1, 3))
    if not depth[0] > 0:
        return False
    u, w_ = uv[0]
    half_w = rect_fraction * camera.width / 2.0
    half_h = rect_fraction * camera.height / 2.0
    cx, cy = camera.width / 2.0, camera.height / 2.0
    return bool(abs(u - cx) <= half_w and abs(w_ - cy) <= half_h)


def center_focus_fraction(v: VideoCaptureSet, c, rect_fraction: float = 0.6) -> float:
    """Fraction of frames that see ``c`` in front of the camera and inside the
    centred rectangle spanning ``rect_fraction`` of the width and height."""
    return float(np.mean([center_in_focus(cam, c, rect_fraction) for cam in v.cameras]))


# -- 38-bin sphere partition -------------------------------------------------
# Two polar caps above |z| = sin(60 deg) plus four latitude bands of 30 degrees
# between -60 and +60, each split into nine 40-degree longitude sectors.

_CAP_LAT = np.deg2rad(60.0)


def view_bin(directions) -> np.ndarray:
    """Bin index in [0, 38) for each unit direction.

    Bin 0 is the south cap, bins 1..36 are band-major (south to north) with
    sector index from azimuth 0, bin 37 is the north cap.
    """
    d = np.asarray(directions, dtype=float).reshape(-1, 3)
    d = d / np.linalg.norm(d, axis=1, keepdims=True)
    lat = np.arcsin(np.clip(d[:, 2], -1.0, 1.0))
    az = np.mod(np.arctan2(d[:, 1], d[:, 0]), 2 * np.pi)
    band = np.floor((lat + _CAP_LAT) / (2 * _CAP_LAT / _N_BANDS)).astype(np.int64)
    sector = np.minimum((az / (2 * np.pi / _N_SECTORS)).astype(np.int64), _N_SECTORS - 1)
    out = 1 + np.clip(band, 0, _N_BANDS - 1) * _N_SECTORS + sector
    out[lat < -_CAP_LAT] = 0
    out[lat >= _CAP_LAT] = N_VIEW_BINS - 1
    return out


def bin_representatives() -> np.ndarray:
    """One unit direction at the centre of each of the 38 bins."""
    reps = [[0.0, 0.0, -1.0]]
    band_h = 2 * _CAP_LAT / _N_BANDS
    for b in range(_N_BANDS):
        lat = -_CAP_LAT + (b + 0.5) * band_h
        for s in range(_N_SECTORS):
            az = (s + 0.5) * 2 * np.pi / _N_SECTORS
            reps.append([np.cos(lat) * np.cos(az), np.cos(lat) * np.sin(az), np.sin(lat)])
    reps.append([0.0, 0.0, 1.0])
    return np.array(reps)


def viewpoint_coverage(v: VideoCaptureSet, c) -> float:
    """Occupied fraction of the 38 direction bins around ``c``."""
    rel = np.array([cam.center for cam in v.cameras]) - np.asarray(c, dtype=float)
    norms = np.linalg.norm(rel, axis=1)
    keep = norms > 1e-12
    if not keep.any():
        raise DegenerateGeometryError("all camera centers coincide with the object center")
    return len(np.unique(view_bin(rel[keep]))) / N_VIEW_BINS


# -- filtering ---------------------------------------------------------------

@dataclass(frozen=True)
class FilterConfig:
    min_visibility: float = 0.10
    focus_rect_fraction: float = 0.60
    min_focus_fraction: float = 0.80
    min_coverage: float = 0.15
    check_visibility: bool = True
    check_focus: bool = True
    check_coverage: bool = True
    center_form: str = "projected"

    @classmethod
    def from_dict(cls, d: dict) -> "FilterConfig":
        return cls(**d)


@dataclass
class FilterReport:
    avg_visibility: float
    center_focus_fraction: float
    viewpoint_coverage: float
    center_3d: np.ndarray | None
    reject_reasons: list[str] = field(default_factory=list)
    video_id: str = ""

    @property
    def accepted(self) -> bool:
        return not self.reject_reasons

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "avg_visibility": self.avg_visibility,
            "center_focus_fraction": self.center_focus_fraction,
            "viewpoint_coverage": self.viewpoint_coverage,
            "center_3d": None if self.center_3d is None else [float(x) for x in self.center_3d],
            "accepted": self.accepted,
            "reject_reasons": list(self.reject_reasons),
        }


def filter_video(v: VideoCaptureSet, cfg: FilterConfig = FilterConfig()) -> FilterReport:
    """Apply the visibility (too far), centring (too close) and viewpoint
    coverage checks; a degenerate center counts as low viewpoint variance."""
    reasons = []
    vis = average_visibility(v)
    if cfg.check_visibility and vis < cfg.min_visibility:
        reasons.append(TOO_FAR)
    try:
        c = triangulate_center(v, cfg.center_form)
    except DegenerateGeometryError:
        c = None
    if c is None:
        focus, coverage = 0.0, 0.0
        if cfg.check_focus or cfg.check_coverage:
            reasons.append(LOW_VIEWPOINT_VARIANCE)
    else:
        focus = center_focus_fraction(v, c, cfg.focus_rect_fraction)
        try:
            coverage = viewpoint_coverage(v, c)
        except DegenerateGeometryError:
            coverage = 0.0
        if cfg.check_focus and focus < cfg.min_focus_fraction:
            reasons.append(TOO_CLOSE)
        if cfg.check_coverage and coverage < cfg.min_coverage:
            reasons.append(LOW_VIEWPOINT_VARIANCE)
    return FilterReport(vis, focus, coverage, c, reasons, v.video_id)
