"""meshalign command-line interface.

Exit codes: 0 success, 1 input error, 2 degenerate geometry, 3 partial failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import ablation
from .alignment import AlignmentError, DegenerateSampleError, align_category
from .camera import Camera
from .evaluate import evaluate_alignment
from .io import FormatError, dump_json, load_json, read_feature_grid, read_ply, save_neural_mesh
from .mesh import MeshError, SimilarityTransform
from .pipeline import (ConfigurationError, RunConfig, alignments_to_json, load_mesh_dir, load_model,
                       run_end_to_end, save_model, transforms_from_json, write_synthetic)
from .pose import PoseError, RefineConfig, distill_prototype, pose_init_templates, pose_refine
from .reconstruction import DegenerateInputError, PointCloud, ReconstructionError, bake_features, reconstruct
from .synthetic import STANDARD_REFERENCES, generate_synthetic_category
from .video import DegenerateGeometryError, filter_video, load_capture_set

EXIT_OK, EXIT_INPUT, EXIT_DEGENERATE, EXIT_PARTIAL = 0, 1, 2, 3

log = logging.getLogger("meshalign")


def _floats(s: str) -> list[float]:
    return [float(x) for x in s.split(",") if x.strip()]


def _ints(s: str) -> list[int]:
    return [int(x) for x in s.split(",") if x.strip()]


def _config(args) -> RunConfig:
    data = load_json(args.config) if args.config else None
    return RunConfig.from_dict(data, seed=args.seed)


# -- commands ----------------------------------------------------------------

def cmd_filter(args, cfg: RunConfig) -> int:
    reports = [filter_video(load_capture_set(m), cfg.filter).to_dict() for m in args.manifest]
    dump_json(args.report, reports if len(reports) > 1 else reports[0])
    return EXIT_OK


def cmd_reconstruct(args, cfg: RunConfig) -> int:
    cap = load_capture_set(args.manifest)
    pts, _ = read_ply(args.cloud)
    mesh, stats = reconstruct(PointCloud(pts), cap, cfg.reconstruction)
    if args.features:
        fdir = Path(args.features)
        frames = load_json(args.manifest)["frames"]
        if all("feature_path" in f for f in frames):
            paths = [Path(args.manifest).parent / f["feature_path"] for f in frames]
        else:
            paths = sorted(fdir.glob("*.nmfg"))
        if len(paths) != len(cap.frames):
            raise ConfigurationError(f"{len(paths)} feature grids for {len(cap.frames)} frames")
        mesh = bake_features(mesh, cap, [read_feature_grid(p) for p in paths],
                             depth_tolerance=cfg.reconstruction.depth_tolerance)
    save_neural_mesh(mesh, args.out, args.banks)
    if args.stats:
        dump_json(args.stats, stats)
    return EXIT_OK if stats["decimation_complete"] else EXIT_PARTIAL


def _reference_index(spec: str, ids: list[str]) -> int:
    if spec.startswith("random:"):
        return int(np.random.default_rng(int(spec.split(":", 1)[1])).integers(len(ids)))
    if spec in ids:
        return ids.index(spec)
    try:
        i = int(spec)
    except ValueError:
        raise ConfigurationError(f"unknown reference {spec!r}") from None
    if not 0 <= i < len(ids):
        raise ConfigurationError(f"reference index {i} out of range")
    return i


def cmd_align(args, cfg: RunConfig) -> int:
    ids, meshes = load_mesh_dir(args.inputs)
    if len(meshes) < 2:
        raise ConfigurationError(f"{args.inputs} holds {len(meshes)} mesh/bank pairs; need at least 2")
    ref = _reference_index(args.reference, ids)
    results = align_category(meshes, ref, cfg.alignment, ids, args.threads)
    dump_json(args.out, alignments_to_json(results, ids[ref]))
    return EXIT_PARTIAL if any(not r.ok for r in results) else EXIT_OK


def cmd_distill(args, cfg: RunConfig) -> int:
    ids, meshes = load_mesh_dir(args.aligned)
    data = load_json(args.alignments)
    transforms = transforms_from_json(data)
    use = [i for i in ids if i in transforms]
    if not use:
        raise ConfigurationError("no mesh in the aligned directory has an alignment")
    ref_id = data["reference"]
    if ref_id not in use:
        raise ConfigurationError(f"reference {ref_id} has no mesh")
    model = distill_prototype([meshes[ids.index(i)] for i in use], [transforms[i] for i in use],
                              use.index(ref_id), cfg.pose.kappa, cfg.pose.refine_epochs)
    save_model(model, args.out)
    return EXIT_OK


def cmd_infer(args, cfg: RunConfig) -> int:
    model = load_model(args.model)
    grid = read_feature_grid(args.feature_map)
    cam = Camera.from_dict(load_json(args.camera))
    if (cam.height, cam.width) != grid.shape[:2]:
        raise ConfigurationError("camera size does not match the feature map")
    init = pose_init_templates(model, cam, grid)
    if cfg.pose.refine:
        final, history = pose_refine(model, cam, grid, init, RefineConfig(iters=cfg.pose.iters))
    else:
        final, history = init, [init.score]
    out = final.to_dict()
    out["init"] = init.to_dict()
    out["score_history"] = [float(s) for s in history]
    dump_json(args.out, out)
    return EXIT_OK


def cmd_evaluate(args, cfg: RunConfig) -> int:
    data = load_json(args.alignments)
    gt_all = load_json(args.ground_truth)
    ids = sorted(set(gt_all))
    ref_id = data["reference"]
    if ref_id not in gt_all:
        raise ConfigurationError(f"no ground truth for reference {ref_id}")
    transforms = transforms_from_json(data)

    class _R:  # minimal result record
        def __init__(self, t):
            self.transform, self.ok = t, t is not None

    results = [_R(transforms.get(i)) for i in ids]
    gts = [SimilarityTransform.from_dict(gt_all[i]) for i in ids]
    report = evaluate_alignment(results, gts, ids.index(ref_id), ids)
    dump_json(args.out, report.to_dict())
    return EXIT_OK


def cmd_synth(args, cfg: RunConfig) -> int:
    spec = cfg.synthetic
    if args.instances is not None:
        spec = replace(spec, instance_count=args.instances)
    cat = generate_synthetic_category(spec)
    write_synthetic(args.out, cat)
    return EXIT_OK


def cmd_ablate(args, cfg: RunConfig) -> int:
    base = cfg.alignment
    if args.trials is not None:
        base = replace(base, ransac_trials=args.trials)
    if args.inputs:
        ids, meshes = load_mesh_dir(args.inputs)
        gt_all = load_json(Path(args.inputs) / "ground_truth.json")
        gts = [SimilarityTransform.from_dict(gt_all[i]) for i in ids]
    else:
        cat = generate_synthetic_category(cfg.synthetic)
        meshes, gts = cat.instances, cat.ground_truth
    refine = {"on": [True], "off": [False], "both": [True, False]}[args.refine]
    modes = [(m, r) for m in args.modes.split(",") for r in refine]
    rows = ablation.run_ablation_grid(meshes, gts, _floats(args.alphas), _floats(args.taus), modes,
                                      _ints(args.references), base, args.threads)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ablation.write_csv(out / "grid.csv", rows)
    if not args.no_svg:
        ablation.write_heatmaps(out, rows)
    try:
        dump_json(out / "best.json", ablation.best_cell(rows))
    except ValueError:
        pass
    return EXIT_PARTIAL if any(r["error"] for r in rows) else EXIT_OK


def cmd_e2e(args, cfg: RunConfig) -> int:
    manifest = run_end_to_end(args.run_dir, cfg, args.data, args.force, args.threads)
    bad = [k for k, s in manifest["stages"].items() if s["status"] in ("failed", "partial")]
    return EXIT_PARTIAL if bad else EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    def common_flags(suppress: bool) -> argparse.ArgumentParser:
        # subcommands repeat the global flags without defaults so that a flag
        # given before the subcommand is not reset by the subparser
        c = argparse.ArgumentParser(add_help=False)
        dflt = (lambda v: argparse.SUPPRESS) if suppress else (lambda v: v)
        c.add_argument("--seed", type=int, default=dflt(None), help="override every configured seed")
        c.add_argument("--threads", type=int, default=dflt(1))
        c.add_argument("--config", default=dflt(None),
                       help="JSON with optional sections alignment/reconstruction/filter/synthetic/pose")
        c.add_argument("-v", "--verbose", action="store_true", default=dflt(False))
        return c

    top, common = common_flags(False), common_flags(True)
    p = argparse.ArgumentParser(prog="meshalign", description=__doc__.splitlines()[0], parents=[top])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("filter", parents=[common], help="video-quality filters")
    s.add_argument("--manifest", required=True, action="append")
    s.add_argument("--report", required=True)
    s.set_defaults(fn=cmd_filter)

    s = sub.add_parser("reconstruct", parents=[common], help="coarse mesh from a point cloud")
    s.add_argument("--manifest", required=True)
    s.add_argument("--cloud", required=True)
    s.add_argument("--features")
    s.add_argument("--out", required=True)
    s.add_argument("--banks", required=True)
    s.add_argument("--stats")
    s.set_defaults(fn=cmd_reconstruct)

    s = sub.add_parser("align", parents=[common], help="align neural meshes to a reference")
    s.add_argument("--inputs", required=True)
    s.add_argument("--reference", default="0", help="video id, index, or random:SEED")
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_align)

    s = sub.add_parser("distill", parents=[common], help="prototype from aligned meshes")
    s.add_argument("--aligned", required=True)
    s.add_argument("--alignments", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_distill)

    s = sub.add_parser("infer", parents=[common], help="pose of a feature map")
    s.add_argument("--model", required=True)
    s.add_argument("--feature-map", required=True)
    s.add_argument("--camera", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_infer)

    s = sub.add_parser("evaluate", parents=[common], help="rotation accuracy against ground truth")
    s.add_argument("--alignments", required=True)
    s.add_argument("--ground-truth", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(fn=cmd_evaluate)

    s = sub.add_parser("synth", parents=[common], help="write a synthetic category")
    s.add_argument("--out", required=True)
    s.add_argument("--instances", type=int)
    s.set_defaults(fn=cmd_synth)

    s = sub.add_parser("ablate", parents=[common], help="alpha x tau x mode grid")
    s.add_argument("--out", required=True)
    s.add_argument("--inputs", help="mesh/bank directory with ground_truth.json (default: synthetic)")
    s.add_argument("--alphas", default="0,0.2,0.5,0.8,1")
    s.add_argument("--taus", default="1,10,100")
    s.add_argument("--modes", default="mean-min", help="comma list of mean-min, min-min, averaged")
    s.add_argument("--refine", choices=["on", "off", "both"], default="on")
    s.add_argument("--references", default=",".join(map(str, STANDARD_REFERENCES)))
    s.add_argument("--trials", type=int)
    s.add_argument("--no-svg", action="store_true")
    s.set_defaults(fn=cmd_ablate)

    s = sub.add_parser("e2e", parents=[common], help="full pipeline into a run directory")
    s.add_argument("--run-dir", required=True)
    s.add_argument("--data", help="data directory (default: synthetic category from config)")
    s.add_argument("--force", action="store_true")
    s.set_defaults(fn=cmd_e2e)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = _config(args)
        return args.fn(args, cfg)
    except (DegenerateGeometryError, DegenerateSampleError, DegenerateInputError) as e:
        log.error("degenerate geometry: %s", e)
        return EXIT_DEGENERATE
    except (ConfigurationError, FormatError, MeshError, PoseError, ReconstructionError, AlignmentError,
            FileNotFoundError, NotADirectoryError, KeyError, ValueError) as e:
        log.error("%s: %s", type(e).__name__, e)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
