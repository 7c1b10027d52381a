"""Coarse meshes from SfM point clouds: mask-based cleaning, alpha shapes,
quadric decimation, and feature baking from per-frame feature maps."""
from __future__ import annotations

import heapq
import logging
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, cKDTree

from .decimate import decimate
from .mesh import NeuralMesh, normalize_rows, point_diameter
from .raster import rasterize
from .video import VideoCaptureSet

log = logging.getLogger(__name__)


class ReconstructionError(ValueError):
    pass


class AllPointsFilteredError(ReconstructionError):
    pass


class DegenerateInputError(ReconstructionError):
    pass


@dataclass(frozen=True, eq=False)
class PointCloud:
    points: np.ndarray
    confidence: np.ndarray | None = None

    def __post_init__(self):
        p = np.asarray(self.points, dtype=float).reshape(-1, 3)
        if not np.all(np.isfinite(p)):
            raise ValueError("point cloud has non-finite coordinates")
        object.__setattr__(self, "points", p)
        if self.confidence is not None:
            c = np.asarray(self.confidence, dtype=float).reshape(-1)
            if len(c) != len(p):
                raise ValueError("confidence length does not match point count")
            object.__setattr__(self, "confidence", c)

    def __len__(self):
        return len(self.points)

    def subset(self, idx) -> "PointCloud":
        return PointCloud(self.points[idx], None if self.confidence is None else self.confidence[idx])


@dataclass(frozen=True)
class ReconstructionConfig:
    downsample_target: int = 20000
    visibility_threshold: float = 0.60
    alpha_multiplier: float = 10.0
    knn_for_particle_size: int = 5
    max_faces: int = 500
    alpha_mode: str = "sculpt"  # "sculpt" or "classical"
    depth_tolerance: float = 0.01  # fraction of mesh diameter, for feature baking
    seed: int = 0

    def __post_init__(self):
        if self.downsample_target < 1 or self.knn_for_particle_size < 1 or self.max_faces < 1:
            raise ValueError("counts must be positive")
        if not 0 < self.visibility_threshold <= 1:
            raise ValueError("visibility_threshold must lie in (0, 1]")
        if self.alpha_multiplier <= 0 or self.depth_tolerance <= 0:
            raise ValueError("alpha_multiplier and depth_tolerance must be positive")
        if self.alpha_mode not in ("sculpt", "classical"):
            raise ValueError("alpha_mode must be 'sculpt' or 'classical'")

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionConfig":
        return cls(**d)


# -- cleaning ----------------------------------------------------------------

def visibility_ratios(points, v: VideoCaptureSet) -> np.ndarray:
    """Per point, the fraction of frames in which it projects onto a mask pixel.

    Projections behind the camera or outside the image count as misses.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    hits = np.zeros(len(p))
    for fr in v.frames:
        uv, depth = fr.camera.project(p)
        ok = depth > 0
        col = np.full(len(p), -1, dtype=np.int64)
        row = np.full(len(p), -1, dtype=np.int64)
        col[ok] = np.floor(uv[ok, 0] + 0.5).astype(np.int64)
        row[ok] = np.floor(uv[ok, 1] + 0.5).astype(np.int64)
        h, w = fr.mask.shape
        ok &= (col >= 0) & (col < w) & (row >= 0) & (row < h)
        hits[ok] += fr.mask[row[ok], col[ok]]
    return hits / len(v.frames)


def visibility_ratio(p, v: VideoCaptureSet) -> float:
    return float(visibility_ratios(np.asarray(p, dtype=float).reshape(1, 3), v)[0])


def clean_point_cloud(pc: PointCloud, v: VideoCaptureSet, cfg: ReconstructionConfig = ReconstructionConfig(),
                      rng: np.random.Generator | None = None) -> PointCloud:
    """Seeded uniform downsample, then drop points seen on the mask too rarely."""
    if len(pc) == 0:
        raise ReconstructionError("empty point cloud")
    rng = rng if rng is not None else np.random.default_rng(cfg.seed)
    if len(pc) > cfg.downsample_target:
        idx = np.sort(rng.choice(len(pc), cfg.downsample_target, replace=False))
        pc = pc.subset(idx)
    keep = visibility_ratios(pc.points, v) >= cfg.visibility_threshold
    if not keep.any():
        raise AllPointsFilteredError("no point passes the visibility threshold")
    return pc.subset(np.flatnonzero(keep))


def particle_size(points, k: int = 5) -> float:
    """Mean distance from each point to its k-th nearest other point."""
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if len(p) <= k:
        raise ReconstructionError(f"particle size needs more than {k} points")
    # the query point itself occupies one of the k + 1 slots at distance 0
    d, _ = cKDTree(p).query(p, k=k + 1)
    return float(d[:, k].mean())


# -- alpha shapes ------------------------------------------------------------

def circumradii(points: np.ndarray, simplices: np.ndarray) -> np.ndarray:
    """Circumradius of each tetrahedron (inf for flat ones)."""
    a = points[simplices[:, 0]]
    m = points[simplices[:, 1:]] - a[:, None, :]  # (n, 3, 3)
    rhs = 0.5 * (m ** 2).sum(-1)
    det = np.linalg.det(m)
    out = np.full(len(simplices), np.inf)
    good = np.abs(det) > 1e-14 * np.maximum((m ** 2).sum((1, 2)) ** 1.5, 1e-300)
    if good.any():
        c = np.linalg.solve(m[good], rhs[good][..., None])[..., 0]
        out[good] = np.linalg.norm(c, axis=1)
    return out


# local face k of a tetrahedron omits vertex k; this ordering is outward for
# positively oriented tetrahedra
_TET_FACES = np.array([[1, 2, 3], [0, 3, 2], [0, 1, 3], [0, 2, 1]])


def _delaunay(points: np.ndarray) -> Delaunay:
    if len(points) < 4:
        raise DegenerateInputError("alpha shape needs at least 4 points")
    centered = points - points.mean(0)
    if np.linalg.matrix_rank(centered, tol=1e-9 * max(np.abs(centered).max(), 1e-300)) < 3:
        raise DegenerateInputError("points are coplanar or collinear")
    try:
        return Delaunay(points)
    except Exception as e:  # qhull errors
        raise DegenerateInputError(f"Delaunay failed: {e}") from e


def _oriented(points, simplices):
    s = simplices.copy()
    a = points[s[:, 0]]
    vol = np.einsum("ij,ij->i", np.cross(points[s[:, 1]] - a, points[s[:, 2]] - a), points[s[:, 3]] - a)
    neg = vol < 0
    s[neg, 0], s[neg, 1] = simplices[neg, 1], simplices[neg, 0]
    return s


def _boundary_mesh(points, simplices, neighbors, kept) -> NeuralMesh:
    tris = []
    for k in range(4):
        nb = neighbors[:, k]
        outside = kept & ((nb < 0) | ~kept[np.maximum(nb, 0)])
        tris.append(simplices[outside][:, _TET_FACES[k]])
    faces = np.concatenate(tris) if tris else np.zeros((0, 3), dtype=np.int64)
    if len(faces) == 0:
        raise ReconstructionError("alpha complex is empty (alpha too small)")
    used = np.unique(faces)
    remap = np.full(len(points), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    faces = remap[faces]
    # canonical face order for determinism
    faces = faces[np.lexsort(faces.T[::-1])]
    return NeuralMesh.geometry_only(points[used], faces)


def alpha_shape(points, alpha_radius: float, mode: str = "sculpt") -> NeuralMesh:
    """Surface of an alpha complex over the 3D Delaunay tetrahedralization.

    ``mode="classical"`` keeps every tetrahedron with circumradius <= alpha and
    emits faces owned by exactly one kept tetrahedron. ``mode="sculpt"`` starts
    from the full triangulation and removes boundary tetrahedra with
    circumradius > alpha, largest first, but only when the removal keeps the
    solid a topological ball; the surface is then a closed 2-manifold.
    """
    p = np.asarray(points, dtype=float).reshape(-1, 3)
    if not alpha_radius > 0:
        raise ValueError("alpha_radius must be positive")
    tri = _delaunay(p)
    simplices = _oriented(p, tri.simplices.astype(np.int64))
    # swapping two vertices also swaps which neighbor sits opposite them
    neighbors = tri.neighbors.astype(np.int64).copy()
    flipped = np.any(simplices != tri.simplices, axis=1)
    neighbors[flipped, 0], neighbors[flipped, 1] = tri.neighbors[flipped, 1], tri.neighbors[flipped, 0]
    radii = circumradii(p, simplices)
    if mode == "classical":
        kept = radii <= alpha_radius
    elif mode == "sculpt":
        kept = _sculpt(simplices, neighbors, radii, alpha_radius)
    else:
        raise ValueError(f"unknown alpha mode {mode!r}")
    return _boundary_mesh(p, simplices, neighbors, kept)


def _sculpt(simplices, neighbors, radii, alpha) -> np.ndarray:
    n_tet = len(simplices)
    kept = np.ones(n_tet, dtype=bool)
    n_pts = int(simplices.max()) + 1
    vert_bfaces = np.zeros(n_pts, dtype=np.int64)  # boundary faces touching each vertex
    vert_tets = np.bincount(simplices.ravel(), minlength=n_pts)  # kept tets touching each vertex
    edge_bfaces: dict[tuple[int, int], int] = {}

    def face_verts(t, k):
        return simplices[t][_TET_FACES[k]]

    def add_face(t, k, sign):
        fv = face_verts(t, k)
        vert_bfaces[fv] += sign
        for a, b in ((fv[0], fv[1]), (fv[1], fv[2]), (fv[2], fv[0])):
            key = (int(min(a, b)), int(max(a, b)))
            edge_bfaces[key] = edge_bfaces.get(key, 0) + sign

    def is_bface(t, k):
        nb = neighbors[t, k]
        return nb < 0 or not kept[nb]

    for t in np.flatnonzero((neighbors < 0).any(1)):
        for k in range(4):
            if neighbors[t, k] < 0:
                add_face(t, k, 1)

    def removable(t) -> bool:
        bf = [k for k in range(4) if is_bface(t, k)]
        s = simplices[t]
        if len(bf) == 1:
            return vert_bfaces[s[bf[0]]] == 0
        if len(bf) == 2:
            # the edge joining the two vertices opposite the boundary faces
            a, b = s[bf[0]], s[bf[1]]
            other = [int(x) for x in s if x not in (a, b)]
            key = (min(other), max(other))
            return edge_bfaces.get(key, 0) == 0
        if len(bf) == 3:
            # drops the apex from the surface; only if nothing else holds it
            apex = s[[k for k in range(4) if k not in bf][0]]
            return vert_tets[apex] == 1
        return False

    heap = [(-radii[t], int(t)) for t in np.flatnonzero((neighbors < 0).any(1)) if radii[t] > alpha]
    heapq.heapify(heap)
    remaining = n_tet
    while heap and remaining > 1:
        _, t = heapq.heappop(heap)
        if not kept[t] or not removable(t):
            continue
        for k in range(4):
            add_face(t, k, -1 if is_bface(t, k) else 1)
        kept[t] = False
        vert_tets[simplices[t]] -= 1
        remaining -= 1
        for k in range(4):
            nb = neighbors[t, k]
            if nb >= 0 and kept[nb] and radii[nb] > alpha:
                heapq.heappush(heap, (-radii[nb], int(nb)))
        # neighbours sharing only an edge or vertex may have become legal too
        for nb in _touching(t, simplices, neighbors, kept):
            if radii[nb] > alpha:
                heapq.heappush(heap, (-radii[nb], int(nb)))
    return kept


def _touching(t, simplices, neighbors, kept):
    # two-ring over face adjacency is enough to revisit tets whose legality
    # depends on the surface near this tet's vertices
    out = []
    for nb in neighbors[t]:
        if nb < 0:
            continue
        for nb2 in neighbors[nb]:
            if nb2 >= 0 and nb2 != t and kept[nb2]:
                out.append(int(nb2))
    return out


# -- full pipeline -----------------------------------------------------------

def reconstruct(pc: PointCloud, v: VideoCaptureSet, cfg: ReconstructionConfig = ReconstructionConfig()
                ) -> tuple[NeuralMesh, dict]:
    """Clean, alpha-shape at ``alpha_multiplier * particle_size``, decimate.

    Returns the geometry-only mesh and a dict of stage statistics.
    """
    rng = np.random.default_rng(cfg.seed)
    cleaned = clean_point_cloud(pc, v, cfg, rng)
    ps = particle_size(cleaned.points, cfg.knn_for_particle_size)
    alpha = cfg.alpha_multiplier * ps
    raw = alpha_shape(cleaned.points, alpha, cfg.alpha_mode)
    mesh, complete = decimate(raw, cfg.max_faces)
    stats = {
        "input_points": len(pc),
        "cleaned_points": len(cleaned),
        "particle_size": ps,
        "alpha_radius": alpha,
        "alpha_faces": len(raw.faces),
        "faces": len(mesh.faces),
        "decimation_complete": complete,
    }
    return mesh, stats


def sample_bilinear(grid: np.ndarray, xy: np.ndarray) -> np.ndarray:
    """Bilinear lookup of an (H, W, D) grid at continuous (x, y) positions,
    clamped to the border."""
    h, w = grid.shape[:2]
    x = np.clip(xy[:, 0], 0, w - 1)
    y = np.clip(xy[:, 1], 0, h - 1)
    x0 = np.minimum(np.floor(x).astype(np.int64), w - 1)
    y0 = np.minimum(np.floor(y).astype(np.int64), h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = (x - x0)[:, None]
    fy = (y - y0)[:, None]
    return ((1 - fx) * (1 - fy) * grid[y0, x0] + fx * (1 - fy) * grid[y0, x1]
            + (1 - fx) * fy * grid[y1, x0] + fx * fy * grid[y1, x1])


def bake_features(mesh: NeuralMesh, v: VideoCaptureSet, feature_maps, feature_dim: int | None = None,
                  depth_tolerance: float = 0.01) -> NeuralMesh:
    """Accumulate per-frame features onto the vertices that each frame sees.

    A vertex is seen when it projects inside the image onto a mask pixel and
    its depth is within ``depth_tolerance * diameter`` of the z-buffer there.
    Feature maps may be coarser than the image; pixel centres are mapped
    proportionally before bilinear sampling.
    """
    maps = [np.asarray(m, dtype=float) for m in feature_maps]
    if len(maps) != len(v.frames):
        raise ValueError(f"{len(maps)} feature maps for {len(v.frames)} frames")
    dims = {m.shape[2] for m in maps}
    if len(dims) != 1 or (feature_dim is not None and dims != {feature_dim}):
        raise ValueError(f"feature map dimension mismatch: maps have {sorted(dims)}, expected {feature_dim}")
    d = dims.pop()
    tol = depth_tolerance * point_diameter(mesh.vertices)
    banks: list[list[np.ndarray]] = [[] for _ in range(mesh.n_vertices)]
    for fr, fmap in zip(v.frames, maps):
        cam = fr.camera
        ras = rasterize(mesh.vertices, mesh.faces, cam)
        uv, depth = cam.project(mesh.vertices)
        ok = depth > 0
        col = np.full(len(uv), -1, dtype=np.int64)
        row = np.full(len(uv), -1, dtype=np.int64)
        col[ok] = np.floor(uv[ok, 0] + 0.5).astype(np.int64)
        row[ok] = np.floor(uv[ok, 1] + 0.5).astype(np.int64)
        ok &= (col >= 0) & (col < cam.width) & (row >= 0) & (row < cam.height)
        idx = np.flatnonzero(ok)
        zb = ras.depth[row[idx], col[idx]]
        seen = fr.mask[row[idx], col[idx]] & (np.abs(depth[idx] - zb) <= tol)
        idx = idx[seen]
        if len(idx) == 0:
            continue
        fh, fw = fmap.shape[:2]
        gx = (uv[idx, 0] + 0.5) * fw / cam.width - 0.5
        gy = (uv[idx, 1] + 0.5) * fh / cam.height - 0.5
        raw = sample_bilinear(fmap, np.stack([gx, gy], 1))
        nonzero = np.linalg.norm(raw, axis=1) > 1e-12  # zero vectors carry no direction
        for i, f in zip(idx[nonzero], normalize_rows(raw[nonzero])):
            banks[i].append(f)
    out = tuple(np.array(b).reshape(-1, d) for b in banks)
    return NeuralMesh(mesh.vertices, mesh.faces, out, d)
