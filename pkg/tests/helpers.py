import numpy as np

from meshalign.mesh import NeuralMesh, SimilarityTransform, normalize_rows, random_rotation


def random_neural_mesh(rng, n_vertices: int, dim: int = 8, max_bank: int = 8, empty_fraction: float = 0.2,
                       faces=None) -> NeuralMesh:
    v = rng.normal(size=(n_vertices, 3))
    banks = []
    for _ in range(n_vertices):
        k = 0 if rng.random() < empty_fraction else int(rng.integers(1, max_bank + 1))
        banks.append(normalize_rows(rng.normal(size=(k, dim))) if k else np.zeros((0, dim)))
    if not any(len(b) for b in banks):
        banks[0] = normalize_rows(rng.normal(size=(1, dim)))
    f = np.zeros((0, 3), dtype=np.int64) if faces is None else faces
    return NeuralMesh(v, f, tuple(banks), dim)


def random_similarity(rng, scale_range=(0.5, 2.0), shift: float = 1.0) -> SimilarityTransform:
    return SimilarityTransform(float(rng.uniform(*scale_range)), random_rotation(rng),
                               rng.normal(size=3) * shift)


def icosphere(subdivisions: int = 2, radius: float = 1.0):
    """Unit icosahedron refined by midpoint subdivision; outward-facing faces."""
    t = (1 + 5 ** 0.5) / 2
    v = [[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0], [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
         [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]]
    f = [[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11], [1, 5, 9], [5, 11, 4], [11, 10, 2],
         [10, 7, 6], [7, 1, 8], [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9], [4, 9, 5], [2, 4, 11],
         [6, 2, 10], [8, 6, 7], [9, 8, 1]]
    verts = [np.array(p, dtype=float) / np.linalg.norm(p) for p in v]
    for _ in range(subdivisions):
        cache = {}

        def mid(a, b):
            key = (min(a, b), max(a, b))
            if key not in cache:
                m = verts[a] + verts[b]
                verts.append(m / np.linalg.norm(m))
                cache[key] = len(verts) - 1
            return cache[key]

        nf = []
        for a, b, c in f:
            ab, bc, ca = mid(a, b), mid(b, c), mid(c, a)
            nf += [[a, ab, ca], [b, bc, ab], [c, ca, bc], [ab, bc, ca]]
        f = nf
    return radius * np.array(verts), np.array(f, dtype=np.int64)


def sample_surface(vertices, faces, n: int, rng) -> np.ndarray:
    """Area-weighted uniform samples on a triangle mesh."""
    v, f = np.asarray(vertices, float), np.asarray(faces)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    area = 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)
    k = rng.choice(len(f), n, p=area / area.sum())
    r1, r2 = np.sqrt(rng.random((n, 1))), rng.random((n, 1))
    return (1 - r1) * a[k] + r1 * (1 - r2) * b[k] + r1 * r2 * c[k]


def point_mesh_distance(points, vertices, faces) -> np.ndarray:
    """Exact distance from each point to a triangle mesh (min over faces of the
    distance to the triangle: its plane when the foot is inside, else an edge)."""
    v, f = np.asarray(vertices, float), np.asarray(faces)
    a, b, c = v[f[:, 0]], v[f[:, 1]], v[f[:, 2]]
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n, axis=1, keepdims=True)

    def seg(p, s0, s1):
        d = s1 - s0
        t = np.clip(((p - s0) * d).sum(1) / (d * d).sum(1), 0, 1)
        return np.linalg.norm(p - (s0 + t[:, None] * d), axis=1)

    out = []
    for p in np.asarray(points, float):
        h = ((p - a) * n).sum(1)
        foot = p - h[:, None] * n
        inside = np.ones(len(f), bool)
        for s0, s1 in ((a, b), (b, c), (c, a)):
            inside &= (np.cross(s1 - s0, foot - s0) * n).sum(1) >= 0
        d = np.minimum(np.minimum(seg(p, a, b), seg(p, b, c)), seg(p, c, a))
        d[inside] = np.abs(h[inside])
        out.append(d.min())
    return np.array(out)


def mesh_hausdorff(v1, f1, v2, f2, n: int, rng) -> float:
    """Sampled Hausdorff distance: surface samples of each mesh against the
    exact surface of the other."""
    return max(point_mesh_distance(sample_surface(v1, f1, n, rng), v2, f2).max(),
               point_mesh_distance(sample_surface(v2, f2, n, rng), v1, f1).max())


def cube():
    v = np.array([[x, y, z] for x in (-1.0, 1.0) for y in (-1.0, 1.0) for z in (-1.0, 1.0)])
    f = np.array([[0, 1, 3], [0, 3, 2], [4, 6, 7], [4, 7, 5], [0, 4, 5], [0, 5, 1],
                  [2, 3, 7], [2, 7, 6], [0, 2, 6], [0, 6, 4], [1, 5, 7], [1, 7, 3]], dtype=np.int64)
    return v, f
