"""Prototype neural meshes with vMF feature likelihoods, and pose estimation
by template matching plus render-and-compare refinement."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import ive, logsumexp

from .alignment import euclidean_nn
from .camera import Camera
from .mesh import (NeuralMesh, SimilarityTransform, axis_angle_to_matrix, normalize_rows, point_diameter,
                   rotation_about_axis)
from .raster import rasterize

UNIT_TOL = 1e-4
DEFAULT_KAPPA = 20.0


class PoseError(ValueError):
    pass


# -- vMF ---------------------------------------------------------------------

def log_vmf_normalizer(kappa: float, dim: int) -> float:
    """log c_p(kappa) for the unit-norm vMF on the (dim-1)-sphere."""
    nu = dim / 2.0 - 1.0
    # log I_nu(k) = log(ive(nu, k)) + k, stable for large k
    return float(nu * np.log(kappa) - (dim / 2.0) * np.log(2 * np.pi) - (np.log(ive(nu, kappa)) + kappa))


def _check_unit(x, what: str, tol: float = UNIT_TOL):
    n = np.linalg.norm(np.atleast_2d(x), axis=-1)
    if np.any(np.abs(n - 1.0) > tol):
        raise PoseError(f"{what} must be unit-norm (within {tol})")


def vmf_log_likelihood(f_i, f_r, kappa: float, strict: bool = True) -> np.ndarray | float:
    """kappa * f_i . f_r + log c_p(kappa); ``strict=False`` drops the constant.

    Broadcasts over leading axes.
    """
    f_i = np.asarray(f_i, dtype=float)
    f_r = np.asarray(f_r, dtype=float)
    if not kappa > 0:
        raise PoseError("kappa must be positive")
    _check_unit(f_i, "f_i")
    _check_unit(f_r, "f_r")
    out = kappa * (f_i * f_r).sum(-1)
    if strict:
        out = out + log_vmf_normalizer(kappa, f_i.shape[-1])
    return float(out) if np.ndim(out) == 0 else out


# -- prototype ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class PrototypeModel:
    mesh: NeuralMesh  # exactly one feature per vertex
    background: np.ndarray  # beta
    kappa: float = DEFAULT_KAPPA
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if np.any(self.mesh.bank_sizes != 1):
            raise PoseError("prototype mesh needs exactly one feature per vertex")
        b = np.asarray(self.background, dtype=float).reshape(-1)
        if len(b) != self.mesh.feature_dim:
            raise PoseError("background feature has the wrong dimension")
        if abs(np.linalg.norm(b) - 1) > 1e-6:
            raise PoseError("background feature must be unit-norm")
        if not self.kappa > 0:
            raise PoseError("kappa must be positive")
        b.setflags(write=False)
        object.__setattr__(self, "background", b)
        object.__setattr__(self, "kappa", float(self.kappa))

    @property
    def features(self) -> np.ndarray:
        return np.concatenate(self.mesh.feature_banks, axis=0)

    def with_features(self, features, background) -> "PrototypeModel":
        mesh = self.mesh.with_banks(tuple(f[None] for f in normalize_rows(features)))
        return PrototypeModel(mesh, normalize_rows(background), self.kappa, dict(self.metadata))

    def to_sidecar(self) -> dict:
        return {"beta": [float(x) for x in self.background], "kappa": self.kappa}


def default_background(prototypes: np.ndarray) -> np.ndarray:
    """Unit vector opposite the mean prototype (any fixed axis if that mean vanishes)."""
    m = -np.asarray(prototypes, dtype=float).mean(0)
    if np.linalg.norm(m) < 1e-9:
        m = np.zeros(prototypes.shape[1])
        m[0] = 1.0
    return m / np.linalg.norm(m)


def _logits(features, model_feats, beta, kappa):
    """(n, K+1) logits: vertex features then background."""
    return kappa * np.concatenate([features @ model_feats.T, (features @ beta)[:, None]], axis=1)


def training_loss(vertex_index, features, background_samples, model: PrototypeModel) -> float:
    """Summed cross-entropy of foreground pairs (target = their vertex) and
    background samples (target = background), each normalized over all vertex
    likelihoods plus the background likelihood. c_p cancels."""
    vi = np.asarray(vertex_index, dtype=np.int64).reshape(-1)
    f = np.asarray(features, dtype=float).reshape(len(vi), -1) if len(vi) else np.zeros((0, model.mesh.feature_dim))
    b = np.asarray(background_samples, dtype=float).reshape(-1, model.mesh.feature_dim)
    if len(vi) == 0:
        raise PoseError("training_loss needs at least one foreground pair")
    return _loss_and_grad(vi, f, b, model.features, model.background, model.kappa, want_grad=False)[0]


def _loss_and_grad(vi, f, b, feats, beta, kappa, want_grad=True):
    k = len(feats)
    total = 0.0
    g_feats = np.zeros_like(feats) if want_grad else None
    g_beta = np.zeros_like(beta) if want_grad else None
    for x, target in ((f, vi), (b, np.full(len(b), k, dtype=np.int64))):
        if len(x) == 0:
            continue
        z = _logits(x, feats, beta, kappa)
        lse = logsumexp(z, axis=1)
        total += float((lse - z[np.arange(len(x)), target]).sum())
        if want_grad:
            p = np.exp(z - lse[:, None])
            p[np.arange(len(x)), target] -= 1.0
            g = kappa * p.T @ x  # (K+1, D)
            g_feats += g[:k]
            g_beta += g[k]
    return total, g_feats, g_beta


def _tangent_step(x, g, eta):
    g_t = g - (g * x).sum(-1, keepdims=True) * x
    return normalize_rows(x - eta * g_t)


def refine_prototype(model: PrototypeModel, vertex_index, features, background_samples, epochs: int,
                     lr: float = 0.5) -> tuple[PrototypeModel, list[float]]:
    """Projected gradient descent on the training loss over the vertex features
    and the background feature; a step is kept only if the loss drops, so the
    returned history is non-increasing."""
    vi = np.asarray(vertex_index, dtype=np.int64)
    f = np.asarray(features, dtype=float)
    b = np.asarray(background_samples, dtype=float).reshape(-1, model.mesh.feature_dim)
    feats, beta = model.features.copy(), model.background.copy()
    loss, gf, gb = _loss_and_grad(vi, f, b, feats, beta, model.kappa)
    history = [loss]
    n = max(len(vi) + len(b), 1)
    eta = lr / (model.kappa * n) * len(feats)
    for _ in range(epochs):
        accepted = False
        for _try in range(12):
            nf = _tangent_step(feats, gf, eta)
            nb = _tangent_step(beta[None], gb[None], eta)[0]
            new_loss, ngf, ngb = _loss_and_grad(vi, f, b, nf, nb, model.kappa)
            if new_loss < loss:
                feats, beta, loss, gf, gb = nf, nb, new_loss, ngf, ngb
                accepted = True
                eta *= 1.5
                break
            eta *= 0.5
        history.append(loss)
        if not accepted:
            break
    return model.with_features(feats, beta), history


def distill_prototype(aligned: list[NeuralMesh], alignments: list[SimilarityTransform], reference_index: int = 0,
                      kappa: float = DEFAULT_KAPPA, refine_epochs: int = 0, background_samples=None,
                      lr: float = 0.5) -> PrototypeModel:
    """Category prototype on the reference mesh's geometry.

    Every stored feature of every video is assigned to the reference vertex
    nearest to its (aligned) vertex; each prototype is the renormalized mean
    of its assigned features. Vertices that receive nothing copy the prototype
    of the nearest vertex that did and are listed in ``metadata["inherited"]``.
    """
    if not aligned:
        raise PoseError("need at least one aligned mesh")
    if len(aligned) != len(alignments):
        raise PoseError("one alignment per mesh is required")
    ref = aligned[reference_index]
    ref_v = alignments[reference_index].apply(ref.vertices)
    d = ref.feature_dim
    sums = np.zeros((ref.n_vertices, d))
    counts = np.zeros(ref.n_vertices, dtype=np.int64)
    pair_idx, pair_feat = [], []
    for mesh, t in zip(aligned, alignments):
        if mesh.feature_dim != d:
            raise PoseError("feature dimension differs between meshes")
        sizes = mesh.bank_sizes
        if sizes.sum() == 0:
            continue
        pts = t.apply(mesh.vertices)
        nn = euclidean_nn(pts, ref_v)[0]
        owner = np.repeat(nn, sizes)
        feats = np.concatenate([b for b in mesh.feature_banks if len(b)], axis=0)
        np.add.at(sums, owner, feats)
        counts += np.bincount(owner, minlength=ref.n_vertices)
        pair_idx.append(owner)
        pair_feat.append(feats)
    have = np.flatnonzero(counts > 0)
    if len(have) == 0:
        raise PoseError("no features to distill")
    proto = np.zeros_like(sums)
    proto[have] = normalize_rows(sums[have])
    missing = np.flatnonzero(counts == 0)
    if len(missing):
        donor = have[euclidean_nn(ref_v[missing], ref_v[have])[0]]
        proto[missing] = proto[donor]
    # a mean of opposite features can vanish; fall back to the first assigned one
    degenerate = have[np.linalg.norm(sums[have], axis=1) < 1e-12]
    for i in degenerate:
        idx = np.concatenate(pair_idx)
        proto[i] = np.concatenate(pair_feat)[np.flatnonzero(idx == i)[0]]
    if background_samples is not None and len(background_samples):
        beta = normalize_rows(np.asarray(background_samples, dtype=float).mean(0, keepdims=True))[0]
    else:
        beta = default_background(proto)
    mesh = NeuralMesh(ref_v, ref.faces, tuple(p[None] for p in proto), d)
    model = PrototypeModel(mesh, beta, kappa, {"inherited": [int(i) for i in missing],
                                               "assigned_counts": counts.tolist()})
    if refine_epochs > 0:
        bg = np.zeros((0, d)) if background_samples is None else np.asarray(background_samples, dtype=float)
        model, history = refine_prototype(model, np.concatenate(pair_idx), np.concatenate(pair_feat), bg,
                                          refine_epochs, lr)
        model.metadata["loss_history"] = history
    return model


# -- rendering and likelihood ------------------------------------------------

@dataclass(frozen=True, eq=False)
class PoseHypothesis:
    """Object-to-camera transform x_cam = R x + t, with its score."""

    rotation: np.ndarray
    translation: np.ndarray
    score: float = float("-inf")

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=float).reshape(3, 3)
        if np.abs(r @ r.T - np.eye(3)).max() > 1e-9 or abs(np.linalg.det(r) - 1) > 1e-9:
            raise PoseError("pose rotation is not orthonormal")
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=float).reshape(3))
        object.__setattr__(self, "score", float(self.score))

    def with_score(self, score: float) -> "PoseHypothesis":
        return PoseHypothesis(self.rotation, self.translation, score)

    def to_dict(self) -> dict:
        return {"rotation": [float(x) for x in self.rotation.ravel()],
                "translation": [float(x) for x in self.translation], "score": self.score}


def _posed_camera(camera: Camera, pose: PoseHypothesis, resolution=None) -> Camera:
    k = camera.intrinsics
    w, h = camera.width, camera.height
    if resolution is not None:
        rh, rw = resolution
        sx, sy = rw / w, rh / h
        k = k.copy()
        k[0] *= sx
        k[1] *= sy
        k[0, 2] = (camera.intrinsics[0, 2] + 0.5) * sx - 0.5
        k[1, 2] = (camera.intrinsics[1, 2] + 0.5) * sy - 0.5
        w, h = rw, rh
    return Camera(k, pose.rotation, pose.translation, w, h)


def render_vertex_ids(mesh: NeuralMesh, pose: PoseHypothesis, camera: Camera, resolution=None) -> np.ndarray:
    """Per pixel, the vertex of the front-most face with the largest
    barycentric weight (-1 on background)."""
    cam = _posed_camera(camera, pose, resolution)
    ras = rasterize(mesh.vertices, mesh.faces, cam)
    ids = np.full(ras.face.shape, -1, dtype=np.int64)
    m = ras.mask
    corner = np.argmax(ras.bary[m], axis=1)
    ids[m] = mesh.faces[ras.face[m], corner]
    return ids


def render_feature_map(model: PrototypeModel, pose: PoseHypothesis, camera: Camera,
                       resolution=None, interpolate: bool = True) -> tuple[np.ndarray, np.ndarray]:
    """Rendered (H, W, D) feature grid (zeros off the object) and foreground mask.

    With ``interpolate`` each pixel gets the renormalized barycentric blend of
    its face's vertex features, which makes the score vary smoothly with pose;
    otherwise the nearest corner's feature is used.
    """
    cam = _posed_camera(camera, pose, resolution)
    ras = rasterize(model.mesh.vertices, model.mesh.faces, cam)
    mask = ras.mask
    grid = np.zeros(mask.shape + (model.mesh.feature_dim,))
    corners = model.mesh.faces[ras.face[mask]]
    feats = model.features
    if interpolate:
        blend = np.einsum("nk,nkd->nd", ras.bary[mask], feats[corners])
        norm = np.linalg.norm(blend, axis=1, keepdims=True)
        fallback = feats[corners[np.arange(len(corners)), np.argmax(ras.bary[mask], axis=1)]]
        grid[mask] = np.where(norm > 1e-12, blend / np.maximum(norm, 1e-300), fallback)
    else:
        grid[mask] = feats[corners[np.arange(len(corners)), np.argmax(ras.bary[mask], axis=1)]]
    return grid, mask


def joint_log_likelihood(observed, rendered, mask, model: PrototypeModel, strict: bool = False) -> float:
    """Sum over pixels: foreground pixels score the better of the rendered
    feature and the background feature, background pixels the background."""
    obs = np.asarray(observed, dtype=float)
    ren = np.asarray(rendered, dtype=float)
    mask = np.asarray(mask, dtype=bool)
    if obs.shape != ren.shape or obs.shape[:2] != mask.shape or obs.shape[2] != model.mesh.feature_dim:
        raise PoseError(f"shape mismatch: observed {obs.shape}, rendered {ren.shape}, mask {mask.shape}")
    k = model.kappa
    bg = k * (obs @ model.background)
    fg = np.maximum(k * (obs * ren).sum(-1), bg)
    total = float(np.where(mask, fg, bg).sum())
    if strict:
        total += obs.shape[0] * obs.shape[1] * log_vmf_normalizer(k, obs.shape[2])
    return total


def score_pose(model: PrototypeModel, camera: Camera, observed, pose: PoseHypothesis) -> float:
    grid, mask = render_feature_map(model, pose, camera, np.asarray(observed).shape[:2])
    return joint_log_likelihood(observed, grid, mask, model)


# -- templates and refinement ------------------------------------------------

TEMPLATE_AZIMUTHS = tuple(range(0, 360, 30))
TEMPLATE_ELEVATIONS = (-20.0, 5.0, 30.0, 55.0)
TEMPLATE_ROLLS = (-15.0, 0.0, 15.0)
TEMPLATE_DISTANCE = 2.5  # multiples of the mesh diameter


def look_at_pose(center, distance: float, azimuth_deg: float, elevation_deg: float, roll_deg: float = 0.0,
                 up=(0.0, 0.0, 1.0)) -> PoseHypothesis:
    """Object-to-camera pose for a camera on a sphere around ``center``,
    looking at it, rolled about its optical axis."""
    center = np.asarray(center, dtype=float)
    a, e = np.deg2rad(azimuth_deg), np.deg2rad(elevation_deg)
    eye = center + distance * np.array([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)])
    z = center - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, -np.asarray(up, dtype=float))
    if np.linalg.norm(x) < 1e-9:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    r = rotation_about_axis([0, 0, 1], np.deg2rad(roll_deg)) @ np.stack([x, y, z])
    return PoseHypothesis(r, -r @ eye)


def pose_templates(mesh: NeuralMesh, azimuths=TEMPLATE_AZIMUTHS, elevations=TEMPLATE_ELEVATIONS,
                   rolls=TEMPLATE_ROLLS, distance_factor: float = TEMPLATE_DISTANCE) -> list[PoseHypothesis]:
    """Canonical template order: elevation, then azimuth, then roll."""
    center = mesh.vertices.mean(0)
    dist = distance_factor * point_diameter(mesh.vertices)
    return [look_at_pose(center, dist, a, e, r) for e in elevations for a in azimuths for r in rolls]


def pose_init_templates(model: PrototypeModel, camera: Camera, observed,
                        template_set: list[PoseHypothesis] | None = None) -> PoseHypothesis:
    """Best-scoring template; ties go to the earliest in template order."""
    templates = template_set if template_set is not None else pose_templates(model.mesh)
    if not templates:
        raise PoseError("empty template set")
    best = None
    for t in templates:
        s = score_pose(model, camera, observed, t)
        if best is None or s > best.score:
            best = t.with_score(s)
    return best


@dataclass(frozen=True)
class RefineConfig:
    iters: int = 40
    rot_step_deg: float = 2.0
    trans_step_frac: float = 0.02
    step_schedule: tuple[float, ...] = (4.0, 2.0, 1.0, 0.5)  # multiples of the FD steps
    fd_scales: tuple[float, ...] = (2.0, 1.0, 0.5)  # coarse-to-fine multiples of both FD steps


def pose_refine(model: PrototypeModel, camera: Camera, observed, init: PoseHypothesis,
                cfg: RefineConfig = RefineConfig()) -> tuple[PoseHypothesis, list[float]]:
    """Finite-difference ascent of the joint log-likelihood.

    Central differences with h = ``rot_step_deg`` (rotation) and
    ``trans_step_frac`` x diameter (translation) give a gradient. The
    rotation and translation blocks are stepped separately (the score is far
    more sensitive to translation, so a joint direction would starve the
    rotation); for each block the longest improving step from the schedule is
    kept. This runs to convergence (or ``iters``) at each of ``fd_scales``
    in turn, so a broad likelihood peak is first approached with coarse
    differences and then resolved with fine ones.
    Rotations are applied about the object's centre so translation and
    rotation stay decoupled. Returns the best pose and the score history,
    which is non-decreasing.
    """
    diam = point_diameter(model.mesh.vertices)
    center = model.mesh.vertices.mean(0)
    h0 = np.array([np.deg2rad(cfg.rot_step_deg)] * 3 + [cfg.trans_step_frac * diam] * 3)

    def posed(base: PoseHypothesis, x):
        r_off = axis_angle_to_matrix(x[:3])
        c_cam = base.rotation @ center + base.translation
        rot = r_off @ base.rotation
        trans = c_cam + x[3:] - rot @ center
        return PoseHypothesis(rot, trans)

    def score(p):
        return score_pose(model, camera, observed, p)

    cur = init.with_score(score(init))
    history = [cur.score]
    for scale in cfg.fd_scales:
        h = scale * h0
        for _ in range(cfg.iters):
            g = np.zeros(6)
            for j in range(6):
                e = np.zeros(6)
                e[j] = h[j]
                g[j] = (score(posed(cur, e)) - score(posed(cur, -e))) / 2.0  # per unit step h
            improved = False
            for block in (slice(0, 3), slice(3, 6)):  # rotation, then translation
                gb = np.zeros(6)
                gb[block] = g[block]
                norm = np.linalg.norm(gb)
                if norm == 0:
                    continue
                for mult in cfg.step_schedule:  # largest improving step wins
                    cand = posed(cur, mult * (gb / norm) * h)
                    s = score(cand)
                    if s > cur.score:
                        cur = cand.with_score(s)
                        improved = True
                        break
            if not improved:
                break
            history.append(cur.score)
    return cur, history


def rotation_error(r_pred, r_gt) -> float:
    """Geodesic angle in degrees between two rotations.

    Uses atan2(sin, cos) of the relative rotation, which equals
    arccos((tr(R_pred^T R_gt) - 1) / 2) but keeps full precision near 0 and 180.
    """
    a = np.asarray(r_pred, dtype=float).reshape(3, 3)
    b = np.asarray(r_gt, dtype=float).reshape(3, 3)
    for m in (a, b):
        if np.abs(m @ m.T - np.eye(3)).max() > 1e-6:
            raise ValueError("rotation_error needs orthonormal matrices")
    rel = a.T @ b
    c = np.clip((np.trace(rel) - 1.0) / 2.0, -1.0, 1.0)
    skew = np.array([rel[2, 1] - rel[1, 2], rel[0, 2] - rel[2, 0], rel[1, 0] - rel[0, 1]])
    s = np.linalg.norm(skew) / 2.0
    return float(np.degrees(np.arctan2(s, c)))
