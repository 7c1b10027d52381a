"""Vectorized z-buffer triangle rasterizer (pixel centres at integer coordinates)."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .camera import Camera

NEAR = 1e-6
_MAX_PAIRS = 1 << 21


@dataclass(frozen=True, eq=False)
class Raster:
    depth: np.ndarray  # (H, W), inf where empty
    face: np.ndarray  # (H, W), -1 where empty
    bary: np.ndarray  # (H, W, 3) perspective-correct barycentrics

    @property
    def mask(self) -> np.ndarray:
        return self.face >= 0


def rasterize(vertices, faces, camera: Camera) -> Raster:
    """Front-most face, depth and barycentrics per pixel.

    Faces with any vertex at depth <= NEAR are skipped. Depth ties go to the
    lowest face index, so the output is deterministic.
    """
    h, w = camera.height, camera.width
    depth = np.full((h, w), np.inf)
    face_id = np.full((h, w), -1, dtype=np.int64)
    bary = np.zeros((h, w, 3))
    f = np.asarray(faces, dtype=np.int64).reshape(-1, 3)
    if len(f) == 0:
        return Raster(depth, face_id, bary)

    pc = camera.to_camera(np.asarray(vertices, dtype=float).reshape(-1, 3))
    z = pc[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        hom = pc @ camera.intrinsics.T
        uv = hom[:, :2] / hom[:, 2:3]
    front = (z[f] > NEAR).all(1)
    fids = np.flatnonzero(front)
    if len(fids) == 0:
        return Raster(depth, face_id, bary)
    tri = uv[f[fids]]  # (m, 3, 2)
    x0 = np.clip(np.ceil(tri[:, :, 0].min(1)), 0, w).astype(np.int64)
    x1 = np.clip(np.floor(tri[:, :, 0].max(1)), -1, w - 1).astype(np.int64)
    y0 = np.clip(np.ceil(tri[:, :, 1].min(1)), 0, h).astype(np.int64)
    y1 = np.clip(np.floor(tri[:, :, 1].max(1)), -1, h - 1).astype(np.int64)
    bw = np.maximum(x1 - x0 + 1, 0)
    bh = np.maximum(y1 - y0 + 1, 0)
    counts = bw * bh

    best_key = np.full(h * w, np.inf)
    best_face = np.full(h * w, -1, dtype=np.int64)
    best_b = np.zeros((h * w, 3))

    start = 0
    while start < len(fids):
        csum = np.cumsum(counts[start:])
        stop = start + max(1, int(np.searchsorted(csum, _MAX_PAIRS, side="right")))
        sl = slice(start, stop)
        start = stop
        cnt = counts[sl]
        total = int(cnt.sum())
        if total == 0:
            continue
        local = np.repeat(np.arange(sl.start, sl.stop), cnt)
        offs = np.arange(total) - np.repeat(np.cumsum(cnt) - cnt, cnt)
        px = x0[local] + offs % bw[local]
        py = y0[local] + offs // bw[local]
        t = tri[local]
        a, b, c = t[:, 0], t[:, 1], t[:, 2]
        area = (b[:, 0] - a[:, 0]) * (c[:, 1] - a[:, 1]) - (b[:, 1] - a[:, 1]) * (c[:, 0] - a[:, 0])
        ok = np.abs(area) > 1e-12
        with np.errstate(divide="ignore", invalid="ignore"):
            w0 = ((b[:, 0] - px) * (c[:, 1] - py) - (b[:, 1] - py) * (c[:, 0] - px)) / area
            w1 = ((c[:, 0] - px) * (a[:, 1] - py) - (c[:, 1] - py) * (a[:, 0] - px)) / area
        w2 = 1.0 - w0 - w1
        eps = -1e-9
        inside = ok & (w0 >= eps) & (w1 >= eps) & (w2 >= eps)
        if not inside.any():
            continue
        local, px, py = local[inside], px[inside], py[inside]
        sb = np.stack([w0[inside], w1[inside], w2[inside]], axis=1)
        zf = z[f[fids[local]]]
        inv = (sb / zf).sum(1)
        d = 1.0 / inv
        pb = (sb / zf) * d[:, None]
        pix = py * w + px
        gface = fids[local]
        # front-most per pixel, lowest face index on ties
        order = np.lexsort((gface, d, pix))
        pix_s = pix[order]
        first = np.ones(len(order), dtype=bool)
        first[1:] = pix_s[1:] != pix_s[:-1]
        sel = order[first]
        p = pix[sel]
        cand_d, cand_f = d[sel], gface[sel]
        better = (cand_d < best_key[p]) | ((cand_d == best_key[p]) & (cand_f < best_face[p]))
        p, sel = p[better], sel[better]
        best_key[p] = d[sel]
        best_face[p] = gface[sel]
        best_b[p] = pb[sel]

    hit = best_face >= 0
    depth.ravel()[hit] = best_key[hit]
    face_id.ravel()[hit] = best_face[hit]
    bary.reshape(-1, 3)[hit] = best_b[hit]
    return Raster(depth, face_id, bary)
