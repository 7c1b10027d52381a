"""Quadric-error-metric edge-collapse decimation for closed triangle meshes."""
from __future__ import annotations

import heapq
import logging

import numpy as np

from .mesh import NeuralMesh

log = logging.getLogger(__name__)


def _plane_quadrics(v: np.ndarray, f: np.ndarray) -> np.ndarray:
    n = np.cross(v[f[:, 1]] - v[f[:, 0]], v[f[:, 2]] - v[f[:, 0]])
    norm = np.linalg.norm(n, axis=1, keepdims=True)
    n = n / np.maximum(norm, 1e-300)
    d = -(n * v[f[:, 0]]).sum(1, keepdims=True)
    plane = np.hstack([n, d])
    return plane[:, :, None] * plane[:, None, :]


def decimate(mesh: NeuralMesh, max_faces: int) -> tuple[NeuralMesh, bool]:
    """Collapse edges in order of quadric error until ``len(faces) <= max_faces``.

    A collapse is rejected when it would break the link condition (the result
    would be non-manifold) or flip/degenerate any surviving incident face.
    Returns ``(mesh, complete)``; ``complete`` is False when no admissible
    collapse remained before reaching the target. Output meshes carry no
    features.
    """
    if max_faces < 1:
        raise ValueError("max_faces must be >= 1")
    if len(mesh.faces) <= max_faces:
        return mesh, True

    v = np.array(mesh.vertices, dtype=float)
    f = np.array(mesh.faces, dtype=np.int64)
    face_alive = np.ones(len(f), dtype=bool)
    vfaces: list[set[int]] = [set() for _ in range(len(v))]
    for i, tri in enumerate(f):
        for x in tri:
            vfaces[x].add(i)
    fq = _plane_quadrics(v, f)
    q = np.zeros((len(v), 4, 4))
    for k in range(3):
        np.add.at(q, f[:, k], fq)
    version = np.zeros(len(v), dtype=np.int64)
    v_alive = np.ones(len(v), dtype=bool)
    n_faces = len(f)

    def cost(a, b):
        qq = q[a] + q[b]
        m = qq.copy()
        m[3] = [0, 0, 0, 1]
        cands = [v[a], v[b], 0.5 * (v[a] + v[b])]
        if abs(np.linalg.det(m)) > 1e-12:
            cands.insert(0, np.linalg.solve(m, [0, 0, 0, 1.0])[:3])
        best = None
        for p in cands:
            h = np.append(p, 1.0)
            c = float(h @ qq @ h)
            if best is None or c < best[0] - 1e-15:
                best = (max(c, 0.0), p)
        return best

    def neighbors(x):
        out = set()
        for fi in vfaces[x]:
            out.update(int(y) for y in f[fi])
        out.discard(x)
        return out

    def push(a, b):
        a, b = (a, b) if a < b else (b, a)
        c, p = cost(a, b)
        heapq.heappush(heap, (c, a, b, int(version[a]), int(version[b]), tuple(p)))

    heap: list = []
    edges = set()
    for tri in f:
        for a, b in ((tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])):
            edges.add((int(min(a, b)), int(max(a, b))))
    for a, b in sorted(edges):
        push(a, b)

    while n_faces > max_faces and heap:
        c, a, b, va, vb, p = heapq.heappop(heap)
        if not (v_alive[a] and v_alive[b]) or version[a] != va or version[b] != vb:
            continue
        shared = vfaces[a] & vfaces[b]
        if not shared:
            continue
        na, nb = neighbors(a), neighbors(b)
        opposite = set()
        for fi in shared:
            opposite.update(int(y) for y in f[fi] if y != a and y != b)
        if (na & nb) != opposite or len(shared) != 2:
            continue
        if n_faces - len(shared) < 4:
            break
        p = np.asarray(p)
        ok = True
        for fi in (vfaces[a] | vfaces[b]) - shared:
            tri = f[fi]
            old = np.cross(v[tri[1]] - v[tri[0]], v[tri[2]] - v[tri[0]])
            pts = [p if (x == a or x == b) else v[x] for x in tri]
            new = np.cross(pts[1] - pts[0], pts[2] - pts[0])
            if np.dot(old, new) <= 0 or np.linalg.norm(new) <= 1e-12 * max(np.linalg.norm(old), 1e-300):
                ok = False
                break
        if not ok:
            continue
        # collapse b into a
        for fi in shared:
            face_alive[fi] = False
            for x in f[fi]:
                vfaces[x].discard(fi)
        n_faces -= len(shared)
        for fi in list(vfaces[b]):
            f[fi][f[fi] == b] = a
            vfaces[a].add(fi)
        vfaces[b] = set()
        v_alive[b] = False
        v[a] = p
        q[a] = q[a] + q[b]
        version[a] += 1
        for x in sorted(neighbors(a)):
            push(a, x)

    complete = n_faces <= max_faces
    if not complete:
        log.warning("decimation stopped at %d faces (target %d): no admissible collapse left", n_faces, max_faces)
    faces = f[face_alive]
    used = np.unique(faces)
    remap = np.full(len(v), -1, dtype=np.int64)
    remap[used] = np.arange(len(used))
    out = NeuralMesh.geometry_only(v[used], remap[faces], mesh.feature_dim)
    return out, complete
