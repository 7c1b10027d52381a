"""End-to-end runs: data -> (filter, reconstruct) -> align -> evaluate ->
distill -> pose inference, with every artifact written to a run directory."""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .alignment import AlignmentConfig, align_category
from .camera import Camera
from .evaluate import EvalReport, evaluate_alignment
from .io import dump_json, load_json, load_neural_mesh, read_feature_grid, read_ply, save_neural_mesh
from .mesh import SimilarityTransform
from .pose import PrototypeModel, RefineConfig, distill_prototype, pose_init_templates, pose_refine, rotation_error
from .reconstruction import PointCloud, ReconstructionConfig, ReconstructionError, bake_features, reconstruct
from .synthetic import SyntheticCategorySpec, generate_synthetic_category, render_observation
from .video import FilterConfig, filter_video, load_capture_set

log = logging.getLogger(__name__)


class ConfigurationError(ValueError):
    """Bad or missing inputs for a run."""


@dataclass(frozen=True)
class PoseConfig:
    kappa: float = 20.0
    refine_epochs: int = 0
    held_out: int = 20
    image_size: int = 64
    focal: float = 100.0
    observation_noise: float = 0.1
    elevation_range: tuple[float, float] = (-15.0, 50.0)
    roll_range: tuple[float, float] = (-15.0, 15.0)
    refine: bool = True
    iters: int = 40
    seed: int = 0

    @classmethod
    def from_dict(cls, d: dict) -> "PoseConfig":
        d = dict(d)
        for k in ("elevation_range", "roll_range"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


@dataclass
class RunConfig:
    alignment: AlignmentConfig = field(default_factory=AlignmentConfig)
    reconstruction: ReconstructionConfig = field(default_factory=ReconstructionConfig)
    filter: FilterConfig = field(default_factory=FilterConfig)
    synthetic: SyntheticCategorySpec = field(default_factory=SyntheticCategorySpec)
    pose: PoseConfig = field(default_factory=PoseConfig)
    reference: int = 0

    @classmethod
    def from_dict(cls, d: dict | None, seed: int | None = None) -> "RunConfig":
        d = dict(d or {})
        known = {"alignment", "reconstruction", "filter", "synthetic", "pose", "reference"}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config sections: {sorted(unknown)}")
        try:
            cfg = cls(
                alignment=AlignmentConfig.from_dict(d.get("alignment", {})),
                reconstruction=ReconstructionConfig.from_dict(d.get("reconstruction", {})),
                filter=FilterConfig.from_dict(d.get("filter", {})),
                synthetic=SyntheticCategorySpec.from_dict(d.get("synthetic", {})),
                pose=PoseConfig.from_dict(d.get("pose", {})),
                reference=int(d.get("reference", 0)),
            )
        except TypeError as e:
            raise ConfigurationError(f"bad config: {e}") from e
        if seed is not None:
            cfg.alignment = replace(cfg.alignment, seed=seed)
            cfg.reconstruction = replace(cfg.reconstruction, seed=seed)
            cfg.synthetic = replace(cfg.synthetic, seed=seed)
            cfg.pose = replace(cfg.pose, seed=seed)
        return cfg

    def to_dict(self) -> dict:
        return {"alignment": asdict(self.alignment), "reconstruction": asdict(self.reconstruction),
                "filter": asdict(self.filter), "synthetic": asdict(self.synthetic), "pose": asdict(self.pose),
                "reference": self.reference}


# -- model and dataset files -------------------------------------------------

def save_model(model: PrototypeModel, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    save_neural_mesh(model.mesh, d / "mesh.ply", d / "features.nmfb")
    dump_json(d / "model.json", model.to_sidecar())


def load_model(directory) -> PrototypeModel:
    d = Path(directory)
    if not (d / "model.json").exists():
        raise ConfigurationError(f"{d} has no model.json")
    mesh = load_neural_mesh(d / "mesh.ply", d / "features.nmfb")
    side = load_json(d / "model.json")
    return PrototypeModel(mesh, np.asarray(side["beta"], dtype=float), float(side["kappa"]))


def list_mesh_pairs(directory) -> list[str]:
    """Video ids with both ``<id>.ply`` and ``<id>.nmfb`` present, sorted."""
    d = Path(directory)
    if not d.is_dir():
        raise ConfigurationError(f"{d} is not a directory")
    return sorted(p.stem for p in d.glob("*.ply") if (d / f"{p.stem}.nmfb").exists())


def load_mesh_dir(directory):
    ids = list_mesh_pairs(directory)
    d = Path(directory)
    return ids, [load_neural_mesh(d / f"{i}.ply", d / f"{i}.nmfb") for i in ids]


def write_synthetic(directory, cat, ids=None) -> list[str]:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    ids = ids or [f"video_{k:03d}" for k in range(len(cat.instances))]
    for vid, mesh in zip(ids, cat.instances):
        save_neural_mesh(mesh, d / f"{vid}.ply", d / f"{vid}.nmfb")
    dump_json(d / "ground_truth.json", {vid: gt.to_dict() for vid, gt in zip(ids, cat.ground_truth)})
    dump_json(d / "spec.json", cat.spec.to_dict())
    return ids


def alignments_to_json(results, reference_id: str) -> dict:
    return {
        "reference": reference_id,
        "alignments": [r.to_dict() for r in results if r.ok],
        "failures": [{"video_id": r.video_id, "error": r.error} for r in results if not r.ok],
    }


def transforms_from_json(data: dict) -> dict[str, SimilarityTransform]:
    return {a["video_id"]: SimilarityTransform.from_dict(a) for a in data["alignments"]}


# -- stages ------------------------------------------------------------------

def _prepare_run_dir(run_dir: Path, force: bool) -> None:
    if run_dir.exists() and any(run_dir.iterdir()):
        if not force:
            raise ConfigurationError(f"run directory {run_dir} is not empty; use --force to overwrite")
        for p in sorted(run_dir.rglob("*"), reverse=True):
            p.unlink() if p.is_file() else p.rmdir()
    run_dir.mkdir(parents=True, exist_ok=True)


def _ingest_videos(data_dir: Path, out_dir: Path, cfg: RunConfig, stages: dict) -> None:
    """Filter and reconstruct every ``<video>/manifest.json`` capture that also
    has ``cloud.ply``; features come from the frames' ``feature_path`` grids."""
    reports, built, failed = [], [], {}
    out_dir.mkdir(parents=True, exist_ok=True)
    for man in sorted(data_dir.glob("*/manifest.json")):
        vid = man.parent.name
        cap = load_capture_set(man, vid)
        rep = filter_video(cap, cfg.filter)
        reports.append(rep.to_dict())
        if not rep.accepted:
            continue
        cloud = man.parent / "cloud.ply"
        if not cloud.exists():
            continue
        pts, _ = read_ply(cloud)
        try:
            mesh, _stats = reconstruct(PointCloud(pts), cap, cfg.reconstruction)
        except ReconstructionError as e:
            log.warning("reconstruction of %s failed: %s", vid, e)
            failed[vid] = f"{type(e).__name__}: {e}"
            continue
        frames = load_json(man)["frames"]
        if all("feature_path" in f for f in frames):
            grids = [read_feature_grid(man.parent / f["feature_path"]) for f in frames]
            mesh = bake_features(mesh, cap, grids, depth_tolerance=cfg.reconstruction.depth_tolerance)
        save_neural_mesh(mesh, out_dir / f"{vid}.ply", out_dir / f"{vid}.nmfb")
        built.append(vid)
    dump_json(out_dir.parent / "filter_report.json", reports)
    stages["filter"] = {"status": "ok", "videos": len(reports),
                        "accepted": sum(r["accepted"] for r in reports)}
    stages["reconstruct"] = {"status": "partial" if failed else "ok", "meshes": built, "failed": failed}


def run_end_to_end(run_dir, cfg: RunConfig, data_dir=None, force: bool = False, threads: int = 1) -> dict:
    """Run every applicable stage; returns (and writes) the run manifest.

    Without ``data_dir`` a synthetic category is generated from
    ``cfg.synthetic`` plus ``cfg.pose.held_out`` extra instances for pose
    evaluation. A stage that fails is recorded and later stages that need its
    output are skipped with a reason.
    """
    run_dir = Path(run_dir)
    stages: dict[str, dict] = {}
    cat = None
    held_out: list[int] = []
    if data_dir is not None:
        data_dir = Path(data_dir)
        if not data_dir.is_dir() or not any(data_dir.iterdir()):
            raise ConfigurationError(f"input directory {data_dir} is missing or empty")
        has_videos = any(data_dir.glob("*/manifest.json"))
        if not has_videos and not list_mesh_pairs(data_dir):
            raise ConfigurationError(f"{data_dir} has neither capture manifests nor mesh/bank pairs")
    _prepare_run_dir(run_dir, force)
    dump_json(run_dir / "config.json", cfg.to_dict())

    mesh_dir = run_dir / "meshes"
    gts = None
    if data_dir is None:
        spec = replace(cfg.synthetic, instance_count=cfg.synthetic.instance_count + cfg.pose.held_out)
        cat = generate_synthetic_category(spec)
        n_train = cfg.synthetic.instance_count
        held_out = list(range(n_train, spec.instance_count))
        ids = [f"video_{k:03d}" for k in range(spec.instance_count)]
        write_synthetic(run_dir / "data", cat, ids)
        mesh_dir.mkdir(parents=True)
        for vid, mesh in zip(ids[:n_train], cat.instances[:n_train]):
            save_neural_mesh(mesh, mesh_dir / f"{vid}.ply", mesh_dir / f"{vid}.nmfb")
        gts = cat.ground_truth[:n_train]
        stages["data"] = {"status": "ok", "source": "synthetic", "train": n_train, "held_out": len(held_out)}
    else:
        if any(data_dir.glob("*/manifest.json")):
            _ingest_videos(data_dir, mesh_dir, cfg, stages)
        else:
            mesh_dir.mkdir(parents=True)
            for vid in list_mesh_pairs(data_dir):
                for ext in ("ply", "nmfb"):
                    (mesh_dir / f"{vid}.{ext}").write_bytes((data_dir / f"{vid}.{ext}").read_bytes())
        gt_path = data_dir / "ground_truth.json"
        stages["data"] = {"status": "ok", "source": str(data_dir)}
        ids_now = list_mesh_pairs(mesh_dir)
        if gt_path.exists():
            gt_all = load_json(gt_path)
            if all(i in gt_all for i in ids_now):
                gts = [SimilarityTransform.from_dict(gt_all[i]) for i in ids_now]

    ids, meshes = load_mesh_dir(mesh_dir)
    results = None
    if len(meshes) < 2:
        stages["align"] = {"status": "skipped", "reason": f"need at least 2 meshes, have {len(meshes)}"}
    elif not 0 <= cfg.reference < len(meshes):
        stages["align"] = {"status": "failed", "reason": f"reference index {cfg.reference} out of range"}
    else:
        results = align_category(meshes, cfg.reference, cfg.alignment, ids, threads)
        dump_json(run_dir / "alignments.json", alignments_to_json(results, ids[cfg.reference]))
        failed = [r.video_id for r in results if not r.ok]
        stages["align"] = {"status": "partial" if failed else "ok", "failed": failed}

    report: EvalReport | None = None
    if results is None:
        stages["evaluate"] = {"status": "skipped", "reason": "no alignments"}
    elif gts is None:
        stages["evaluate"] = {"status": "skipped", "reason": "no ground truth"}
    else:
        report = evaluate_alignment(results, gts, cfg.reference, ids)
        dump_json(run_dir / "report.json", report.to_dict())
        stages["evaluate"] = {"status": "ok", "acc30": report.acc30, "acc15": report.acc15, "acc10": report.acc10}

    model = None
    if results is None:
        stages["distill"] = {"status": "skipped", "reason": "no alignments"}
    else:
        ok = [(m, r.transform) for m, r in zip(meshes, results) if r.ok]
        ref_pos = sum(1 for r in results[:cfg.reference] if r.ok)
        model = distill_prototype([m for m, _ in ok], [t for _, t in ok], ref_pos, cfg.pose.kappa,
                                  cfg.pose.refine_epochs)
        save_model(model, run_dir / "model")
        stages["distill"] = {"status": "ok", "inherited_vertices": len(model.metadata["inherited"])}

    if model is None or cat is None or not held_out:
        stages["pose"] = {"status": "skipped",
                          "reason": "no model" if model is None else "no held-out synthetic instances"}
    else:
        stages["pose"] = _pose_stage(run_dir, cat, held_out, model, cfg)

    manifest = {"stages": stages, "artifacts": sorted(str(p.relative_to(run_dir)) for p in run_dir.rglob("*")
                                                      if p.is_file())}
    dump_json(run_dir / "manifest.json", manifest)
    return manifest


def evaluation_camera(pc: PoseConfig) -> Camera:
    s = pc.image_size
    k = np.array([[pc.focal, 0, (s - 1) / 2.0], [0, pc.focal, (s - 1) / 2.0], [0, 0, 1.0]])
    return Camera(k, np.eye(3), np.zeros(3), s, s)


def pose_benchmark(cat, held_out, model: PrototypeModel, reference: int, pc: PoseConfig):
    """Render each held-out instance at a random upright pose in the
    reference instance's frame (the frame the prototype lives in), estimate
    its pose against ``model`` and return per-instance records."""
    cam = evaluation_camera(pc)
    rng = np.random.default_rng([pc.seed, 77])
    rcfg = RefineConfig(iters=pc.iters)
    records = []
    for k in held_out:
        az = rng.uniform(0, 360)
        el = rng.uniform(*pc.elevation_range)
        roll = rng.uniform(*pc.roll_range)
        grid, pose = render_observation(cat, k, cam, az, el, roll, pc.observation_noise, rng,
                                        frame_index=reference)
        target = pose.rotation
        init = pose_init_templates(model, cam, grid)
        final, history = pose_refine(model, cam, grid, init, rcfg) if pc.refine else (init, [init.score])
        records.append({
            "instance": int(k),
            "init_error": rotation_error(init.rotation, target),
            "rotation_error": rotation_error(final.rotation, target),
            "scores": [float(s) for s in history],
            "pose": final.to_dict(),
        })
    return records


def _pose_stage(run_dir: Path, cat, held_out, model, cfg: RunConfig) -> dict:
    records = pose_benchmark(cat, held_out, model, cfg.reference, cfg.pose)
    errs = [r["rotation_error"] for r in records]
    rep = EvalReport(errs, [str(r["instance"]) for r in records], "pose")
    dump_json(run_dir / "poses.json", {"records": records, "report": rep.to_dict()})
    return {"status": "ok", "acc30": rep.acc30, "acc15": rep.acc15, "acc10": rep.acc10}
