"""Coarse mesh from a noisy sphere cloud with background outliers and orbit masks.

    python scripts/reconstruct_sphere.py --out sphere.ply
"""
import argparse
from dataclasses import dataclass

import numpy as np

from meshalign.io import write_ply
from meshalign.mesh import is_closed_manifold
from meshalign.reconstruction import ReconstructionConfig, reconstruct
from meshalign.scenes import noisy_sphere_cloud, sphere_capture


@dataclass
class SphereConfig:
    points: int = 5000
    outlier_fraction: float = 0.05
    noise: float = 0.01
    frames: int = 36
    seed: int = 0


def run(cfg: SphereConfig, rc: ReconstructionConfig = ReconstructionConfig()):
    cap = sphere_capture(cfg.frames)
    pc = noisy_sphere_cloud(cfg.points, noise=cfg.noise, outlier_fraction=cfg.outlier_fraction, seed=cfg.seed)
    return reconstruct(pc, cap, rc)


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--out", default="sphere.ply")
    p.add_argument("--points", type=int, default=5000)
    p.add_argument("--outliers", type=float, default=0.05)
    p.add_argument("--max-faces", type=int, default=500)
    p.add_argument("--seed", type=int, default=0)
    a = p.parse_args()
    mesh, stats = run(SphereConfig(a.points, a.outliers, seed=a.seed),
                      ReconstructionConfig(max_faces=a.max_faces, seed=a.seed))
    write_ply(a.out, mesh.vertices, mesh.faces)
    r = np.linalg.norm(mesh.vertices, axis=1)
    print(f"{stats['cleaned_points']}/{stats['input_points']} points kept, {stats['alpha_faces']} alpha faces -> "
          f"{len(mesh.faces)} faces, closed={is_closed_manifold(mesh.faces)}, vertex radius {r.min():.3f}..{r.max():.3f}")


if __name__ == "__main__":
    main()
