"""Seeded synthetic categories with known ground truth.

A category is a canonical shape whose vertices carry a smooth semantic
feature (optionally symmetric under a half-turn about +z, like many real
categories) mixed with a weak per-vertex identity. Each instance is a
deformed, re-sampled copy observed from a full orbit of unevenly spaced
views. Per-view features add isotropic noise, an optional pose-invariant
view-context field, and background bleed: at grazing incidence a vertex's
feature is pulled towards a per-video background vector, as happens when a
coarse feature patch straddles the silhouette. Every perturbation scales
with ``feature_view_noise_sigma``.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.spatial import ConvexHull

from .mesh import NeuralMesh, SimilarityTransform, normalize_rows, random_rotation, vertex_normals

SHAPES = ("sphere", "cube", "blob")


@dataclass(frozen=True)
class SyntheticCategorySpec:
    base_shape: str = "blob"
    shape_seed: int = 7
    instance_count: int = 10
    vertex_count: int = 200
    instance_deformation_sigma: float = 0.02  # fraction of diameter
    vertex_jitter: float = 0.3  # tangential resampling, fraction of mean edge length
    feature_dim: int = 32
    views_per_instance: int = 20
    feature_view_noise_sigma: float = 0.1
    view_context_gain: float = 0.0
    view_context_bumps: int = 12
    view_context_width: float = 0.35
    background_bleed_gain: float = 20.0
    identity_weight: float = 0.1
    semantic_bumps: int = 16
    semantic_width: float = 0.5
    feature_symmetry: str = "z2"  # "none" or "z2" (180 degrees about +z)
    shape_asymmetry: float = 0.0
    orbit_arc_range: tuple[float, float] = (360.0, 360.0)  # degrees
    orbit_elevation_range: tuple[float, float] = (10.0, 35.0)  # degrees
    orbit_warp: float = 0.9  # max non-uniformity of view spacing along the orbit
    visibility_cos: float = 0.15
    outlier_vertex_fraction: float = 0.1
    outlier_offset: float = 0.05  # fraction of diameter, radial
    scale_range: tuple[float, float] = (0.5, 2.0)
    rotation: str = "uniform"  # "uniform" or "identity"
    translation_range: float = 1.0  # fraction of diameter
    seed: int = 0

    def __post_init__(self):
        if self.base_shape not in SHAPES:
            raise ValueError(f"base_shape must be one of {SHAPES}")
        for name in ("instance_deformation_sigma", "vertex_jitter", "feature_view_noise_sigma",
                     "view_context_gain", "outlier_offset", "translation_range"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative")
        if not 0 <= self.outlier_vertex_fraction <= 1:
            raise ValueError("outlier_vertex_fraction must lie in [0, 1]")
        if self.instance_count < 1 or self.vertex_count < 8 or self.feature_dim < 2:
            raise ValueError("instance_count >= 1, vertex_count >= 8 and feature_dim >= 2 required")
        if self.views_per_instance < 1:
            raise ValueError("views_per_instance must be >= 1")
        if not 0 < self.scale_range[0] <= self.scale_range[1]:
            raise ValueError("scale_range must be positive and ordered")
        if self.feature_symmetry not in ("none", "z2"):
            raise ValueError("feature_symmetry must be 'none' or 'z2'")
        if self.rotation not in ("uniform", "identity"):
            raise ValueError("rotation must be 'uniform' or 'identity'")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SyntheticCategorySpec":
        d = dict(d)
        for k in ("orbit_arc_range", "orbit_elevation_range", "scale_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def standard_benchmark_spec(**overrides) -> SyntheticCategorySpec:
    """Blob category, 10 instances x 200 vertices, 2% deformation, 20 views,
    feature noise 0.1, 10% outlier vertices."""
    base = dict(base_shape="blob", instance_count=10, vertex_count=200, instance_deformation_sigma=0.02,
                views_per_instance=20, feature_view_noise_sigma=0.1, outlier_vertex_fraction=0.1, seed=0)
    base.update(overrides)
    return SyntheticCategorySpec(**base)


STANDARD_REFERENCES = (0, 2, 4, 6, 8)


@dataclass
class SyntheticCategory:
    spec: SyntheticCategorySpec
    canonical: NeuralMesh  # one prototype feature per vertex
    instances: list[NeuralMesh]
    ground_truth: list[SimilarityTransform]  # canonical -> instance frame
    context: object
    outlier_masks: list[np.ndarray] = field(default_factory=list)
    instance_features: list[np.ndarray] = field(default_factory=list)  # noise-free, one per vertex

    @property
    def prototype_features(self) -> np.ndarray:
        return np.stack([b[0] for b in self.canonical.feature_banks])


def fibonacci_sphere(n: int) -> np.ndarray:
    i = np.arange(n) + 0.5
    z = 1 - 2 * i / n
    r = np.sqrt(1 - z * z)
    phi = np.pi * (1 + 5 ** 0.5) * i
    return np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)


def sphere_faces(directions: np.ndarray) -> np.ndarray:
    """Outward-oriented triangulation of points on the unit sphere."""
    hull = ConvexHull(directions)
    faces = hull.simplices.copy()
    v = directions
    n = np.cross(v[faces[:, 1]] - v[faces[:, 0]], v[faces[:, 2]] - v[faces[:, 0]])
    flip = (n * v[faces].mean(1)).sum(1) < 0
    faces[flip] = faces[flip][:, ::-1]
    return faces


class _RadialField:
    """Smooth scalar field on the sphere: sum of Gaussian bumps."""

    def __init__(self, rng: np.random.Generator, n_bumps: int, amplitude: float, width: float):
        self.centers = normalize_rows(rng.normal(size=(n_bumps, 3)))
        self.amps = rng.normal(size=n_bumps) * amplitude
        self.width = width

    def __call__(self, u: np.ndarray) -> np.ndarray:
        d2 = ((u[:, None, :] - self.centers[None]) ** 2).sum(-1)
        return (self.amps[None] * np.exp(-d2 / (2 * self.width ** 2))).sum(1)


def _shape_fn(name: str, shape_seed: int, asymmetry: float):
    if name == "sphere":
        return lambda u: u.copy()
    if name == "cube":
        return lambda u: u / np.abs(u).max(axis=1, keepdims=True)
    rng = np.random.default_rng([shape_seed, 991])
    bumps = _RadialField(rng, 6, asymmetry, 0.45)
    axes = np.array([1.0, 0.72, 0.55])
    return lambda u: (u * axes) * (1.0 + bumps(u))[:, None]


def _unit_features(rng, n, d):
    return normalize_rows(rng.normal(size=(n, d)))


class _FeatureField:
    """Smooth semantic feature field on the sphere plus per-vertex identity."""

    def __init__(self, rng, spec: SyntheticCategorySpec):
        d = spec.feature_dim
        self.centers = normalize_rows(rng.normal(size=(spec.semantic_bumps, 3)))
        self.coeffs = rng.normal(size=(spec.semantic_bumps, d))
        self.width = spec.semantic_width
        self.symmetric = spec.feature_symmetry == "z2"
        self.identity = _unit_features(rng, spec.vertex_count, d)
        self.identity_weight = spec.identity_weight

    def semantic(self, u: np.ndarray) -> np.ndarray:
        def raw(x):
            d2 = ((x[:, None, :] - self.centers[None]) ** 2).sum(-1)
            return np.exp(-d2 / (2 * self.width ** 2)) @ self.coeffs
        s = raw(u)
        if self.symmetric:
            s = s + raw(u * np.array([-1.0, -1.0, 1.0]))
        return normalize_rows(s)

    def __call__(self, u: np.ndarray, index: np.ndarray) -> np.ndarray:
        return normalize_rows(self.semantic(u) + self.identity_weight * self.identity[index])


def generate_synthetic_category(spec: SyntheticCategorySpec) -> SyntheticCategory:
    rng = np.random.default_rng(spec.seed)
    shape = _shape_fn(spec.base_shape, spec.shape_seed, spec.shape_asymmetry)
    dirs = fibonacci_sphere(spec.vertex_count)
    faces = sphere_faces(dirs)
    base_v = shape(dirs)
    features = _FeatureField(rng, spec)
    index = np.arange(spec.vertex_count)
    proto_feats = features(dirs, index)
    canonical = NeuralMesh(base_v, faces, tuple(f[None] for f in proto_feats), spec.feature_dim)
    diam = float(np.ptp(base_v, axis=0).max())
    context = _ViewContext(rng, spec)
    edge = np.linalg.norm(dirs[faces[:, 0]] - dirs[faces[:, 1]], axis=1).mean()

    instances, gts, outliers, clean = [], [], [], []
    for k in range(spec.instance_count):
        irng = np.random.default_rng([spec.seed, 1000 + k])
        u = dirs
        if spec.vertex_jitter > 0:
            u = normalize_rows(u + irng.normal(size=u.shape) * spec.vertex_jitter * edge / np.sqrt(3))
        v = shape(u)
        if spec.instance_deformation_sigma > 0:
            field_ = _RadialField(irng, 8, 1.0, 0.6)
            raw = field_(u)
            raw = raw / max(raw.std(), 1e-12)
            v = v + (spec.instance_deformation_sigma * diam * raw)[:, None] * u
        n_out = int(round(spec.outlier_vertex_fraction * spec.vertex_count))
        out_mask = np.zeros(spec.vertex_count, dtype=bool)
        if n_out:
            out_mask[irng.choice(spec.vertex_count, n_out, replace=False)] = True
        v = v + (out_mask * irng.uniform(0, spec.outlier_offset * diam, spec.vertex_count))[:, None] * u
        identity = features(u, index)
        identity[out_mask] = _unit_features(irng, n_out, spec.feature_dim)

        banks = _observe(v, faces, identity, context, spec, irng)
        if spec.rotation == "uniform":
            rot = random_rotation(irng)
        else:
            rot = np.eye(3)
        scale = float(np.exp(irng.uniform(np.log(spec.scale_range[0]), np.log(spec.scale_range[1]))))
        trans = irng.uniform(-1, 1, 3) * spec.translation_range * diam
        gt = SimilarityTransform(scale, rot, trans)
        instances.append(NeuralMesh(gt.apply(v), faces, banks, spec.feature_dim))
        gts.append(gt)
        outliers.append(out_mask)
        clean.append(identity)
    return SyntheticCategory(spec, canonical, instances, gts, context, outliers, clean)


def _observe(v, faces, identity, context, spec: SyntheticCategorySpec, rng) -> tuple[np.ndarray, ...]:
    """Per-view features for every vertex facing the camera."""
    normals = vertex_normals(v, faces)
    d = spec.feature_dim
    arc = np.deg2rad(rng.uniform(*spec.orbit_arc_range))
    start = rng.uniform(0, 2 * np.pi)
    elev = np.deg2rad(rng.uniform(*spec.orbit_elevation_range))
    n_views = spec.views_per_instance
    x = arc * np.arange(n_views) / max(n_views - (0 if arc >= 2 * np.pi - 1e-9 else 1), 1)
    # videos dwell on some sides: warp the spacing by a random monotone map
    warp = rng.uniform(0, spec.orbit_warp)
    az = start + x - warp * np.sin(x - rng.uniform(0, 2 * np.pi)) * (arc / (2 * np.pi))
    view_dirs = np.stack([np.cos(elev) * np.cos(az), np.cos(elev) * np.sin(az),
                          np.full(n_views, np.sin(elev))], axis=1)
    sigma = spec.feature_view_noise_sigma
    # grazing views pick up this video's background through the patch footprint
    background = normalize_rows(rng.normal(size=(1, d)))[0]
    banks: list[list[np.ndarray]] = [[] for _ in range(len(v))]
    for k in range(n_views):
        cos = normals @ view_dirs[k]
        visible = np.flatnonzero(cos > spec.visibility_cos)
        if len(visible) == 0:
            continue
        ctx = context(normals[visible], view_dirs[k])
        noise = rng.normal(size=(len(visible), d)) / np.sqrt(d)
        graze = ((1 - cos[visible]) / (1 - spec.visibility_cos)) ** 2
        f = identity[visible] + sigma * (spec.view_context_gain * ctx + noise
                                         + spec.background_bleed_gain * graze[:, None] * background)
        f = normalize_rows(f)
        for i, row in zip(visible, f):
            banks[i].append(row)
    return tuple(np.array(b).reshape(-1, d) for b in banks)


class _ViewContext:
    """Smooth vector field over the view direction expressed in a vertex's
    local frame (tangent-up, tangent-side, normal); pose-invariant."""

    def __init__(self, rng, spec: SyntheticCategorySpec):
        d = spec.feature_dim
        self.centers = normalize_rows(rng.normal(size=(spec.view_context_bumps, 3)) * [1.0, 1.0, 0.0]
                                      + [0.0, 0.0, 1.0] * np.abs(rng.normal(size=(spec.view_context_bumps, 1))))
        self.coeffs = rng.normal(size=(spec.view_context_bumps, d)) / np.sqrt(d)
        self.width = spec.view_context_width

    def __call__(self, normals, view_dir, up=np.array([0.0, 0.0, 1.0])) -> np.ndarray:
        e1 = up[None, :] - (normals @ up)[:, None] * normals
        small = np.linalg.norm(e1, axis=1) < 1e-6
        e1[small] = [1.0, 0.0, 0.0]
        e1 = normalize_rows(e1 - (e1 * normals).sum(1, keepdims=True) * normals)
        e2 = np.cross(normals, e1)
        local = np.stack([e1 @ view_dir, e2 @ view_dir, normals @ view_dir], axis=1)
        d2 = ((local[:, None, :] - self.centers[None]) ** 2).sum(-1)
        w = np.exp(-d2 / (2 * self.width ** 2))
        return (w @ self.coeffs) / np.sqrt((w ** 2).sum(1, keepdims=True) + 1e-12)


def relative_ground_truth(gts, source: int, reference: int) -> SimilarityTransform:
    """Transform taking instance ``source`` onto instance ``reference``."""
    return gts[reference].compose(gts[source].inverse())


def render_observation(category: SyntheticCategory, k: int, camera, azimuth_deg: float, elevation_deg: float,
                       roll_deg: float, noise_sigma: float, rng: np.random.Generator,
                       distance_factor: float = 2.5, frame_index: int | None = None):
    """Feature image of instance ``k`` seen from a look-at camera.

    The instance is posed in the canonical frame, or in the frame of instance
    ``frame_index`` when given, and centred at ``distance_factor`` diameters. Object pixels carry the instance's
    noise-free vertex features plus isotropic noise; background pixels are
    random unit vectors (clutter). Returns ``(grid, pose)`` where ``pose`` maps
    that frame to the camera.
    """
    from .mesh import point_diameter
    from .pose import look_at_pose, render_vertex_ids

    inst = category.instances[k]
    v = category.ground_truth[k].inverse().apply(inst.vertices)
    if frame_index is not None:
        v = category.ground_truth[frame_index].apply(v)
    mesh = NeuralMesh.geometry_only(v, inst.faces)
    pose = look_at_pose(v.mean(0), distance_factor * point_diameter(v), azimuth_deg, elevation_deg, roll_deg)
    ids = render_vertex_ids(mesh, pose, camera)
    d = category.spec.feature_dim
    grid = rng.normal(size=ids.shape + (d,))
    fg = ids >= 0
    grid[fg] = category.instance_features[k][ids[fg]] + noise_sigma * grid[fg] / np.sqrt(d)
    return normalize_rows(grid), pose
