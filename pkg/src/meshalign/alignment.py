"""Unsupervised similarity alignment of two neural meshes.

The objective mixes a geometric term (Euclidean nearest neighbours under the
current transform) and an appearance term (nearest neighbours in feature
space), each correspondence weighted by a softmax over its cycle-consistency
validity. RANSAC over 4-vertex feature matches with Umeyama fits proposes
transforms; an iteratively reweighted Umeyama loop refines the winner.
"""
from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .mesh import NeuralMesh, SimilarityTransform, normalize_rows, point_diameter

log = logging.getLogger(__name__)

GEOMETRIC, APPEARANCE = 0, 1
MIN_MIN, MEAN_MIN = "min-min", "mean-min"


class AlignmentError(ValueError):
    pass


class DegenerateSampleError(AlignmentError):
    pass


@dataclass(frozen=True)
class AlignmentConfig:
    appearance_weight: float = 0.2
    temperature: float = 100.0
    vertex_distance: str = MEAN_MIN
    average_features: bool = False
    ransac_trials: int = 2048
    refine: bool = True
    refine_max_iters: int = 50
    refine_rel_tol: float = 1e-6
    seed: int = 0
    # "cyclical" uses the validity softmax; "uniform" gives every pair 1/n.
    weighting: str = "cyclical"
    # "joint": one softmax over both channels; "per-channel": one per channel.
    softmax_scope: str = "joint"
    # "validity": tau only inside the validity; "double": also divide logits by tau.
    temperature_placement: str = "validity"
    scale_bounds: tuple[float, float] = (0.1, 10.0)
    max_resample: int = 16
    batch_size: int = 128

    def __post_init__(self):
        if not 0.0 <= self.appearance_weight <= 1.0:
            raise ValueError("appearance_weight must lie in [0, 1]")
        if not self.temperature > 0:
            raise ValueError("temperature must be positive")
        if self.ransac_trials < 1:
            raise ValueError("ransac_trials must be >= 1")
        if self.vertex_distance not in (MIN_MIN, MEAN_MIN):
            raise ValueError(f"unknown vertex_distance {self.vertex_distance!r}")
        if self.weighting not in ("cyclical", "uniform"):
            raise ValueError(f"unknown weighting {self.weighting!r}")
        if self.softmax_scope not in ("joint", "per-channel"):
            raise ValueError(f"unknown softmax_scope {self.softmax_scope!r}")
        if self.temperature_placement not in ("validity", "double"):
            raise ValueError(f"unknown temperature_placement {self.temperature_placement!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "AlignmentConfig":
        d = dict(d)
        if "scale_bounds" in d:
            d["scale_bounds"] = tuple(d["scale_bounds"])
        return cls(**d)


@dataclass
class CorrespondenceSet:
    """Weighted vertex pairs; ``weight`` sums to one over each normalised set."""

    source_index: np.ndarray
    reference_index: np.ndarray
    channel: np.ndarray
    distance: np.ndarray
    validity: np.ndarray
    weight: np.ndarray

    def __len__(self):
        return len(self.source_index)

    @property
    def pairs(self) -> list[dict]:
        names = {GEOMETRIC: "geometric", APPEARANCE: "appearance"}
        return [
            {"source_index": int(s), "reference_index": int(r), "channel": names[int(c)],
             "distance": float(d), "validity": float(v), "weight": float(w)}
            for s, r, c, d, v, w in zip(self.source_index, self.reference_index, self.channel,
                                        self.distance, self.validity, self.weight)
        ]


@dataclass
class AlignmentResult:
    transform: SimilarityTransform | None
    loss: float = float("nan")
    ransac_loss: float = float("nan")
    loss_history: list[float] = field(default_factory=list)
    correspondences: CorrespondenceSet | None = None
    video_id: str = ""
    error: str | None = None
    metadata: dict = field(default_factory=dict)

    @property
    def ok(self) -> bool:
        return self.error is None

    def to_dict(self) -> dict:
        d = {"video_id": self.video_id, "loss": _json_float(self.loss),
             "ransac_loss": _json_float(self.ransac_loss)}
        if self.transform is not None:
            d.update(self.transform.to_dict())
        if self.error is not None:
            d["error"] = self.error
        return d


def _json_float(x: float):
    return None if x is None or not np.isfinite(x) else float(x)


# -- feature-space distances ---------------------------------------------------

def _prepare_bank(bank, cfg: AlignmentConfig) -> np.ndarray:
    b = np.asarray(bank, dtype=float)
    if cfg.average_features and len(b):
        b = normalize_rows(b.mean(axis=0, keepdims=True))
    return b


def vertex_feature_distance(bank_a, bank_b, mode: str = MEAN_MIN, average_features: bool = False) -> float:
    """Distance between two vertices' feature banks.

    ``min-min`` is the smallest pairwise distance; ``mean-min`` averages the
    nearest-feature distance over each bank and then over both directions.
    """
    a = np.asarray(bank_a, dtype=float)
    b = np.asarray(bank_b, dtype=float)
    if len(a) == 0 or len(b) == 0:
        raise AlignmentError("vertex_feature_distance needs non-empty banks")
    if average_features:
        a = normalize_rows(a.mean(axis=0, keepdims=True))
        b = normalize_rows(b.mean(axis=0, keepdims=True))
    d = np.linalg.norm(a[:, None, :] - b[None, :, :], axis=-1)
    if mode == MIN_MIN:
        return float(d.min())
    if mode == MEAN_MIN:
        return float(0.5 * (d.min(axis=0).mean() + d.min(axis=1).mean()))
    raise ValueError(f"unknown mode {mode!r}")


def feature_distance_matrix(source: NeuralMesh, reference: NeuralMesh, cfg: AlignmentConfig,
                            block: int = 64) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All-pairs vertex feature distances between featured vertices.

    Returns ``(dist, src_featured, ref_featured)`` with ``dist`` of shape
    ``(len(src_featured), len(ref_featured))``.
    """
    sf, rf = source.featured, reference.featured
    if len(sf) == 0 or len(rf) == 0:
        raise AlignmentError("no featured vertices")
    sb = [_prepare_bank(source.feature_banks[i], cfg) for i in sf]
    rb = [_prepare_bank(reference.feature_banks[j], cfg) for j in rf]
    r_rows = np.concatenate(rb)
    r_off = np.concatenate([[0], np.cumsum([len(b) for b in rb])[:-1]])
    r_sizes = np.array([len(b) for b in rb], dtype=float)
    out = np.empty((len(sf), len(rf)))
    for start in range(0, len(sb), block):
        chunk = sb[start:start + block]
        s_rows = np.concatenate(chunk)
        s_off = np.concatenate([[0], np.cumsum([len(b) for b in chunk])[:-1]])
        s_sizes = np.array([len(b) for b in chunk], dtype=float)
        dot = np.clip(s_rows @ r_rows.T, -1.0, 1.0)
        if cfg.vertex_distance == MIN_MIN:
            best = np.maximum.reduceat(np.maximum.reduceat(dot, s_off, axis=0), r_off, axis=1)
            out[start:start + len(chunk)] = np.sqrt(np.maximum(2.0 - 2.0 * best, 0.0))
        else:
            # best match within the source bank, per reference feature
            col = np.sqrt(np.maximum(2.0 - 2.0 * np.maximum.reduceat(dot, s_off, axis=0), 0.0))
            ref_to_src = np.add.reduceat(col, r_off, axis=1) / r_sizes[None, :]
            row = np.sqrt(np.maximum(2.0 - 2.0 * np.maximum.reduceat(dot, r_off, axis=1), 0.0))
            src_to_ref = np.add.reduceat(row, s_off, axis=0) / s_sizes[:, None]
            out[start:start + len(chunk)] = 0.5 * (ref_to_src + src_to_ref)
    return out, sf, rf


def feature_nn(source: NeuralMesh, reference: NeuralMesh, cfg: AlignmentConfig = AlignmentConfig()
               ) -> tuple[dict[int, int], dict[int, int]]:
    """Feature-space nearest neighbours in both directions (ties -> lowest index)."""
    ctx = MatchContext(source, reference, cfg)
    return ctx.feature_maps()


def euclidean_nn(source_points, reference_points) -> tuple[np.ndarray, np.ndarray]:
    """Exact nearest neighbours both ways; ties resolve to the lowest index.

    ``source_points`` are assumed already transformed.
    """
    a = np.asarray(source_points, dtype=float).reshape(-1, 3)
    b = np.asarray(reference_points, dtype=float).reshape(-1, 3)
    if len(a) == 0 or len(b) == 0:
        raise AlignmentError("euclidean_nn needs non-empty point sets")
    s2r = np.empty(len(a), dtype=np.int64)
    r2s_best = np.full(len(b), np.inf)
    r2s = np.zeros(len(b), dtype=np.int64)
    for start in range(0, len(a), 256):
        blk = a[start:start + 256]
        d2 = ((blk[:, None, :] - b[None, :, :]) ** 2).sum(-1)
        s2r[start:start + len(blk)] = d2.argmin(axis=1)
        col_arg = d2.argmin(axis=0)
        col_min = d2[col_arg, np.arange(len(b))]
        better = col_min < r2s_best  # strict: earlier blocks win ties
        r2s[better] = col_arg[better] + start
        r2s_best[better] = col_min[better]
    return s2r, r2s


def chamfer_distance(source: NeuralMesh, reference: NeuralMesh,
                     t: SimilarityTransform = SimilarityTransform()) -> float:
    sv = t.apply(source.vertices)
    rv = reference.vertices
    s2r, r2s = euclidean_nn(sv, rv)
    return float(np.linalg.norm(sv - rv[s2r], axis=1).sum() + np.linalg.norm(rv - sv[r2s], axis=1).sum())


# -- Umeyama -----------------------------------------------------------------

def umeyama(src_points, ref_points, weights=None) -> SimilarityTransform:
    """Weighted least-squares similarity transform mapping ``src`` onto ``ref``."""
    x = np.asarray(src_points, dtype=float).reshape(-1, 3)
    y = np.asarray(ref_points, dtype=float).reshape(-1, 3)
    if len(x) != len(y):
        raise ValueError("point sets differ in length")
    if len(x) < 3:
        raise DegenerateSampleError("umeyama needs at least 3 points")
    w = np.ones(len(x)) if weights is None else np.asarray(weights, dtype=float)
    if np.any(w < 0) or w.sum() <= 0:
        raise ValueError("weights must be non-negative with positive sum")
    w = w / w.sum()
    mx, my = w @ x, w @ y
    xc, yc = x - mx, y - my
    var_x = float(w @ (xc ** 2).sum(1))
    cov = (yc * w[:, None]).T @ xc
    sx = np.linalg.svd(xc * np.sqrt(w)[:, None], compute_uv=False)
    sy = np.linalg.svd(yc * np.sqrt(w)[:, None], compute_uv=False)
    if sx[0] <= 0 or sx[1] <= 1e-9 * sx[0] or sy[0] <= 0 or sy[1] <= 1e-9 * sy[0]:
        raise DegenerateSampleError("collinear or coincident point sample")
    u, d, vt = np.linalg.svd(cov)
    s = np.ones(3)
    if np.linalg.det(u) * np.linalg.det(vt) < 0:
        s[2] = -1.0
    r = u @ np.diag(s) @ vt
    scale = float((d * s).sum() / var_x)
    if not scale > 0:
        raise DegenerateSampleError("non-positive scale estimate")
    return SimilarityTransform(scale, _clean_rotation(r), my - scale * r @ mx)


def _clean_rotation(r: np.ndarray) -> np.ndarray:
    # one polish step keeps R R^T = I at ~1e-15 for the transform invariants
    u, _, vt = np.linalg.svd(r)
    return u @ vt


def _umeyama_batch(x: np.ndarray, y: np.ndarray):
    """Unweighted Umeyama over a batch ``(B, k, 3)``; returns scale, R, t, ok."""
    mx, my = x.mean(1, keepdims=True), y.mean(1, keepdims=True)
    xc, yc = x - mx, y - my
    var_x = (xc ** 2).sum((1, 2)) / x.shape[1]
    cov = np.einsum("bki,bkj->bij", yc, xc) / x.shape[1]
    sx = np.linalg.svd(xc, compute_uv=False)
    sy = np.linalg.svd(yc, compute_uv=False)
    ok = (sx[:, 1] > 1e-9 * sx[:, 0]) & (sy[:, 1] > 1e-9 * sy[:, 0]) & (sx[:, 0] > 0)
    u, d, vt = np.linalg.svd(cov)
    sign = np.sign(np.linalg.det(u) * np.linalg.det(vt))
    sign[sign == 0] = 1.0
    s = np.ones((len(x), 3))
    s[:, 2] = sign
    r = np.einsum("bij,bj,bjk->bik", u, s, vt)
    with np.errstate(divide="ignore", invalid="ignore"):
        scale = (d * s).sum(1) / var_x
    ok &= np.isfinite(scale) & (scale > 0)
    t = my[:, 0] - scale[:, None] * np.einsum("bij,bj->bi", r, mx[:, 0])
    return scale, r, t, ok


# -- matching context -----------------------------------------------------------

class MatchContext:
    """Transform-independent matching state for one (source, reference) pair.

    Feature nearest neighbours, cycle distances and diameters do not depend on
    the transform, so they are computed once and shared by every hypothesis.
    """

    def __init__(self, source: NeuralMesh, reference: NeuralMesh, cfg: AlignmentConfig):
        self.source, self.reference, self.cfg = source, reference, cfg
        self.src_v = source.vertices
        self.ref_v = reference.vertices
        dist, sf, rf = feature_distance_matrix(source, reference, cfg)
        self.src_featured, self.ref_featured = sf, rf
        # argmin returns the first minimum, and featured indices are ascending
        self.psi_src = rf[dist.argmin(axis=1)]  # per featured source vertex
        self.psi_ref = sf[dist.argmin(axis=0)]  # per featured reference vertex
        n_s, n_r = len(self.src_v), len(self.ref_v)
        s_map = np.full(n_s, -1, dtype=np.int64)
        s_map[sf] = self.psi_src
        r_map = np.full(n_r, -1, dtype=np.int64)
        r_map[rf] = self.psi_ref
        self.psi_src_full, self.psi_ref_full = s_map, r_map
        # cycle: i -> psi(i) in the other mesh -> back; distance in i's own frame
        self.cycle_src = np.zeros(n_s)
        self.cycle_src[sf] = np.linalg.norm(self.src_v[sf] - self.src_v[r_map[self.psi_src]], axis=1)
        self.cycle_ref = np.zeros(n_r)
        self.cycle_ref[rf] = np.linalg.norm(self.ref_v[rf] - self.ref_v[s_map[self.psi_ref]], axis=1)
        self.diam_src = point_diameter(self.src_v)
        self.diam_ref = point_diameter(self.ref_v)
        denom = 2.0 * cfg.temperature * (self.diam_src + self.diam_ref)
        self.validity_scale = 1.0 / denom if denom > 0 else 0.0
        # appearance pairs are fixed: (source idx, reference idx)
        self.app_src = np.concatenate([sf, self.psi_ref])
        self.app_ref = np.concatenate([self.psi_src, rf])

    def feature_maps(self) -> tuple[dict[int, int], dict[int, int]]:
        return ({int(i): int(j) for i, j in zip(self.src_featured, self.psi_src)},
                {int(j): int(i) for j, i in zip(self.ref_featured, self.psi_ref)})

    def validity(self, src_idx, ref_idx) -> np.ndarray:
        return -(self.cycle_src[src_idx] + self.cycle_ref[ref_idx]) * self.validity_scale

    def _weights(self, rho_geo: np.ndarray, rho_app: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Softmax weights along the last axis; inputs may be batched."""
        cfg = self.cfg
        if cfg.weighting == "uniform":
            if cfg.softmax_scope == "joint":
                n = rho_geo.shape[-1] + rho_app.shape[-1]
                return np.full(rho_geo.shape, 1.0 / n), np.full(rho_app.shape, 1.0 / n)
            return (np.full(rho_geo.shape, 1.0 / rho_geo.shape[-1]),
                    np.full(rho_app.shape, 1.0 / rho_app.shape[-1]))
        if cfg.temperature_placement == "double":
            rho_geo, rho_app = rho_geo / cfg.temperature, rho_app / cfg.temperature
        if cfg.softmax_scope == "joint":
            m = np.maximum(rho_geo.max(-1, keepdims=True), rho_app.max(-1, keepdims=True))
            eg, ea = np.exp(rho_geo - m), np.exp(rho_app - m)
            z = eg.sum(-1, keepdims=True) + ea.sum(-1, keepdims=True)
            return eg / z, ea / z
        eg = np.exp(rho_geo - rho_geo.max(-1, keepdims=True))
        ea = np.exp(rho_app - rho_app.max(-1, keepdims=True))
        return eg / eg.sum(-1, keepdims=True), ea / ea.sum(-1, keepdims=True)

    def correspondences(self, t: SimilarityTransform) -> CorrespondenceSet:
        sv = t.apply(self.src_v)
        s2r, r2s = euclidean_nn(sv, self.ref_v)
        geo_src = np.concatenate([np.arange(len(sv)), r2s])
        geo_ref = np.concatenate([s2r, np.arange(len(self.ref_v))])
        geo_d = np.linalg.norm(sv[geo_src] - self.ref_v[geo_ref], axis=1)
        app_d = np.linalg.norm(sv[self.app_src] - self.ref_v[self.app_ref], axis=1)
        rho_g = self.validity(geo_src, geo_ref)
        rho_a = self.validity(self.app_src, self.app_ref)
        w_g, w_a = self._weights(rho_g, rho_a)
        return CorrespondenceSet(
            source_index=np.concatenate([geo_src, self.app_src]),
            reference_index=np.concatenate([geo_ref, self.app_ref]),
            channel=np.concatenate([np.full(len(geo_src), GEOMETRIC), np.full(len(self.app_src), APPEARANCE)]),
            distance=np.concatenate([geo_d, app_d]),
            validity=np.concatenate([rho_g, rho_a]),
            weight=np.concatenate([w_g, w_a]),
        )

    def loss_terms(self, t: SimilarityTransform) -> tuple[float, float, float]:
        """(L, weighted geometric term, weighted appearance term)."""
        c = self.correspondences(t)
        geo = c.channel == GEOMETRIC
        d_geo = float((c.weight[geo] * c.distance[geo]).sum())
        d_app = float((c.weight[~geo] * c.distance[~geo]).sum())
        a = self.cfg.appearance_weight
        return (1 - a) * d_geo + a * d_app, d_geo, d_app

    def loss(self, t: SimilarityTransform) -> float:
        return self.loss_terms(t)[0]

    def batch_loss(self, scale, rot, trans) -> np.ndarray:
        """Loss for a batch of transforms (B,), (B,3,3), (B,3)."""
        sv = scale[:, None, None] * (self.src_v @ rot.transpose(0, 2, 1)) + trans[:, None, :]
        rv = self.ref_v
        d2 = (sv ** 2).sum(-1)[:, :, None] + (rv ** 2).sum(-1)[None, None, :] - 2.0 * (sv @ rv.T)
        s2r = d2.argmin(axis=2)
        r2s = d2.argmin(axis=1)
        b_idx = np.arange(len(scale))[:, None]
        n_idx = np.arange(len(self.src_v))[None, :]
        m_idx = np.arange(len(rv))[None, :]
        d_s = np.linalg.norm(sv - rv[s2r], axis=-1)
        d_r = np.linalg.norm(sv[b_idx, r2s] - rv[None], axis=-1)
        geo_d = np.concatenate([d_s, d_r], axis=1)
        rho_g = np.concatenate([self.validity(n_idx, s2r), self.validity(r2s, m_idx)], axis=1)
        app_d = np.linalg.norm(sv[:, self.app_src] - self.ref_v[self.app_ref][None], axis=-1)
        rho_a = np.broadcast_to(self.validity(self.app_src, self.app_ref), app_d.shape)
        w_g, w_a = self._weights(rho_g, rho_a)
        a = self.cfg.appearance_weight
        return (1 - a) * (w_g * geo_d).sum(1) + a * (w_a * app_d).sum(1)


def cyclical_distance(vertex_index: int, direction: str, source: NeuralMesh, reference: NeuralMesh,
                      cfg: AlignmentConfig = AlignmentConfig()) -> float:
    """Cycle distance of a source (``direction='source'``) or reference vertex."""
    ctx = MatchContext(source, reference, cfg)
    if direction == "source":
        if len(source.feature_banks[vertex_index]) == 0:
            raise AlignmentError("cycle distance of a vertex with an empty bank")
        return float(ctx.cycle_src[vertex_index])
    if direction == "reference":
        if len(reference.feature_banks[vertex_index]) == 0:
            raise AlignmentError("cycle distance of a vertex with an empty bank")
        return float(ctx.cycle_ref[vertex_index])
    raise ValueError("direction must be 'source' or 'reference'")


def correspondence_weights(source: NeuralMesh, reference: NeuralMesh, cfg: AlignmentConfig = AlignmentConfig(),
                           t: SimilarityTransform = SimilarityTransform()) -> CorrespondenceSet:
    return MatchContext(source, reference, cfg).correspondences(t)


def weighted_loss(source: NeuralMesh, reference: NeuralMesh, t: SimilarityTransform,
                  cfg: AlignmentConfig = AlignmentConfig()) -> float:
    return MatchContext(source, reference, cfg).loss(t)


# -- RANSAC and refinement ----------------------------------------------------------

def _trial_samples(ctx: MatchContext, trial: int, rng_seed: int, k: int = 4) -> np.ndarray:
    """Candidate 4-vertex samples for one trial, drawn from its own RNG stream."""
    rng = np.random.default_rng([rng_seed, trial])
    pool = ctx.src_featured
    keys = rng.random((ctx.cfg.max_resample, len(pool)))
    return pool[np.argpartition(keys, k - 1, axis=1)[:, :k]]


def ransac_align(source: NeuralMesh, reference: NeuralMesh, cfg: AlignmentConfig = AlignmentConfig(),
                 ctx: MatchContext | None = None) -> AlignmentResult:
    ctx = ctx or MatchContext(source, reference, cfg)
    if len(ctx.src_featured) < 4:
        raise AlignmentError("need at least 4 featured source vertices")
    ratio = ctx.diam_ref / ctx.diam_src if ctx.diam_src > 0 else 1.0
    lo, hi = cfg.scale_bounds[0] * ratio, cfg.scale_bounds[1] * ratio

    best = (np.inf, -1)
    best_params = None
    n_degenerate = 0
    n_scored = 0
    trials = np.arange(cfg.ransac_trials)
    for start in range(0, len(trials), cfg.batch_size):
        chunk = trials[start:start + cfg.batch_size]
        cand = np.stack([_trial_samples(ctx, int(t), cfg.seed) for t in chunk])  # (B, R, 4)
        b, r, k = cand.shape
        flat = cand.reshape(b * r, k)
        x = ctx.src_v[flat]
        y = ctx.ref_v[ctx.psi_src_full[flat]]
        scale, rot, trans, ok = _umeyama_batch(x, y)
        ok &= (scale >= lo) & (scale <= hi)
        ok = ok.reshape(b, r)
        # first acceptable candidate of each trial's own stream
        has = ok.any(axis=1)
        n_degenerate += int((~has).sum())
        pick = ok.argmax(axis=1)
        sel = (np.arange(b) * r + pick)[has]
        if len(sel) == 0:
            continue
        losses = ctx.batch_loss(scale[sel], rot[sel], trans[sel])
        n_scored += len(sel)
        j = int(np.argmin(losses))
        if losses[j] < best[0]:
            best = (float(losses[j]), int(chunk[has][j]))
            best_params = (scale[sel][j], rot[sel][j], trans[sel][j])
    if best_params is None:
        raise DegenerateSampleError("all RANSAC trials were degenerate")
    t = SimilarityTransform(float(best_params[0]), _clean_rotation(best_params[1]), best_params[2])
    loss = ctx.loss(t)
    return AlignmentResult(
        transform=t, loss=loss, ransac_loss=loss, loss_history=[loss],
        correspondences=ctx.correspondences(t),
        metadata={"best_trial": best[1], "degenerate_trials": n_degenerate, "scored_trials": n_scored,
                  "scale_bounds": [lo, hi]},
    )


def refine_align(source: NeuralMesh, reference: NeuralMesh, t0: SimilarityTransform,
                 cfg: AlignmentConfig = AlignmentConfig(), ctx: MatchContext | None = None) -> AlignmentResult:
    """Alternate correspondence updates with weighted Umeyama fits.

    Each step reweights pairs by ``weight / distance`` so the squared-error fit
    tracks the unsquared objective; a step is kept only if the loss drops.
    """
    ctx = ctx or MatchContext(source, reference, cfg)
    loss0 = ctx.loss(t0)
    history = [loss0]
    t, loss = t0, loss0
    if cfg.refine:
        a = cfg.appearance_weight
        eps = 1e-9 * max(ctx.diam_ref, 1e-12)
        for _ in range(cfg.refine_max_iters):
            c = ctx.correspondences(t)
            w = np.where(c.channel == GEOMETRIC, 1 - a, a) * c.weight / np.maximum(c.distance, eps)
            if w.sum() <= 0:
                break
            try:
                cand = umeyama(ctx.src_v[c.source_index], ctx.ref_v[c.reference_index], w)
            except DegenerateSampleError:
                break
            new_loss = ctx.loss(cand)
            if not new_loss < loss:
                break
            rel = (loss - new_loss) / max(abs(loss), 1e-300)
            t, loss = cand, new_loss
            history.append(loss)
            if rel < cfg.refine_rel_tol:
                break
    return AlignmentResult(transform=t, loss=loss, ransac_loss=loss0, loss_history=history,
                           correspondences=ctx.correspondences(t), metadata={"refine_steps": len(history) - 1})


def align_pair(source: NeuralMesh, reference: NeuralMesh, cfg: AlignmentConfig = AlignmentConfig()) -> AlignmentResult:
    """RANSAC followed by optional refinement."""
    ctx = MatchContext(source, reference, cfg)
    coarse = ransac_align(source, reference, cfg, ctx)
    fine = refine_align(source, reference, coarse.transform, cfg, ctx)
    fine.ransac_loss = coarse.loss
    fine.metadata = {**coarse.metadata, **fine.metadata}
    return fine


def align_category(meshes: Sequence[NeuralMesh], reference_index: int, cfg: AlignmentConfig = AlignmentConfig(),
                   video_ids: Sequence[str] | None = None, threads: int = 1) -> list[AlignmentResult]:
    """Align every mesh to ``meshes[reference_index]``; the reference gets the identity.

    Failures are recorded per video instead of aborting the category.
    """
    if len(meshes) < 2:
        raise AlignmentError("align_category needs at least two meshes")
    if not 0 <= reference_index < len(meshes):
        raise IndexError(f"reference_index {reference_index} out of range")
    ids = list(video_ids) if video_ids is not None else [str(i) for i in range(len(meshes))]
    ref = meshes[reference_index]

    def one(i: int) -> AlignmentResult:
        if i == reference_index:
            ident = SimilarityTransform()
            try:
                loss = MatchContext(ref, ref, cfg).loss(ident)
            except AlignmentError:
                loss = float("nan")
            return AlignmentResult(ident, loss, loss, [loss], video_id=ids[i], metadata={"reference": True})
        try:
            res = align_pair(meshes[i], ref, cfg)
        except (AlignmentError, ValueError, np.linalg.LinAlgError) as e:
            log.warning("alignment of %s failed: %s", ids[i], e)
            return AlignmentResult(None, video_id=ids[i], error=f"{type(e).__name__}: {e}")
        res.video_id = ids[i]
        return res

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(one, range(len(meshes))))
    return [one(i) for i in range(len(meshes))]


def with_overrides(cfg: AlignmentConfig, **kw) -> AlignmentConfig:
    return replace(cfg, **kw)
