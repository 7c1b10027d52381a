"""Cartesian sweeps over alignment settings with CSV and SVG output."""
from __future__ import annotations

import csv
import io
import itertools
import logging
from dataclasses import replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .alignment import AlignmentConfig, align_category
from .evaluate import MultiReferenceReport, evaluate_alignment

log = logging.getLogger(__name__)

CSV_COLUMNS = ("alpha", "tau", "mode", "refine", "acc30", "acc15", "acc10", "mean_err", "error")


def run_cell(instances, ground_truth, references: Sequence[int], cfg: AlignmentConfig,
             threads: int = 1) -> MultiReferenceReport:
    reports = []
    for ref in references:
        results = align_category(instances, ref, cfg, threads=threads)
        reports.append(evaluate_alignment(results, ground_truth, ref))
    return MultiReferenceReport(reports)


def run_ablation_grid(instances, ground_truth, alphas: Sequence[float], taus: Sequence[float],
                      modes: Sequence[tuple[str, bool]] = (("mean-min", True),),
                      references: Sequence[int] = (0,), base: AlignmentConfig = AlignmentConfig(),
                      threads: int = 1) -> list[dict]:
    """One row per (alpha, tau, mode, refine) cell in that nesting order.

    ``mode`` is a vertex-distance mode or ``"averaged"`` (mean-min on averaged
    features). A failing cell is recorded with NaN metrics and its error text.
    """
    rows = []
    for (mode, refine), alpha, tau in itertools.product(modes, alphas, taus):
        kw = dict(appearance_weight=float(alpha), temperature=float(tau), refine=bool(refine))
        if mode == "averaged":
            kw.update(vertex_distance="mean-min", average_features=True)
        else:
            kw.update(vertex_distance=mode, average_features=False)
        row = {"alpha": float(alpha), "tau": float(tau), "mode": mode, "refine": bool(refine)}
        try:
            rep = run_cell(instances, ground_truth, references, replace(base, **kw), threads)
            row.update(acc30=rep.stat("acc30")[0], acc15=rep.stat("acc15")[0], acc10=rep.stat("acc10")[0],
                       mean_err=rep.stat("mean_error")[0], error="")
        except Exception as e:  # recorded, the grid goes on
            log.warning("ablation cell %s failed: %s", row, e)
            row.update(acc30=float("nan"), acc15=float("nan"), acc10=float("nan"), mean_err=float("nan"),
                       error=f"{type(e).__name__}: {e}")
        rows.append(row)
    return rows


def best_cell(rows: list[dict]) -> dict:
    """Highest acc30, then acc15, then acc10, then lowest mean error; earlier rows win exact ties."""
    valid = [r for r in rows if not r["error"]]
    if not valid:
        raise ValueError("no successful cells")
    return max(valid, key=lambda r: (r["acc30"], r["acc15"], r["acc10"], -r["mean_err"]))


def _fmt(x) -> str:
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, float):
        return repr(x)
    return str(x)


def rows_to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([_fmt(r[c]) for c in CSV_COLUMNS])
    return buf.getvalue()


def write_csv(path, rows: list[dict]) -> None:
    Path(path).write_text(rows_to_csv(rows))


def heatmap_svg(rows: list[dict], mode: str, refine: bool, metric: str = "acc30") -> str:
    """Alpha along x, tau along y, cells shaded by ``metric`` in [0, 1]."""
    sel = [r for r in rows if r["mode"] == mode and r["refine"] == refine]
    alphas = sorted({r["alpha"] for r in sel})
    taus = sorted({r["tau"] for r in sel})
    cw, ch, left, top = 64, 32, 70, 40
    width = left + cw * len(alphas) + 10
    height = top + ch * len(taus) + 40
    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
           f'<text x="{left}" y="16">{metric} ({mode}, refine={_fmt(refine)})</text>']
    lookup = {(r["alpha"], r["tau"]): r for r in sel}
    for j, tau in enumerate(reversed(taus)):
        y = top + j * ch
        out.append(f'<text x="{left - 6}" y="{y + ch / 2 + 4:.0f}" text-anchor="end">tau={tau:g}</text>')
        for i, a in enumerate(alphas):
            x = left + i * cw
            r = lookup.get((a, tau))
            v = r[metric] if r is not None else float("nan")
            if np.isfinite(v):
                shade = int(round(255 * (1 - min(max(v, 0.0), 1.0))))
                fill = f"rgb({shade},{shade},255)"
                label = f"{v:.3f}"
            else:
                fill, label = "rgb(200,200,200)", "n/a"
            out.append(f'<rect x="{x}" y="{y}" width="{cw}" height="{ch}" fill="{fill}" stroke="white"/>')
            out.append(f'<text x="{x + cw / 2}" y="{y + ch / 2 + 4:.0f}" text-anchor="middle">{label}</text>')
    y = top + ch * len(taus) + 16
    for i, a in enumerate(alphas):
        out.append(f'<text x="{left + i * cw + cw / 2}" y="{y}" text-anchor="middle">alpha={a:g}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_heatmaps(directory, rows: list[dict], metric: str = "acc30") -> list[Path]:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    paths = []
    for mode, refine in sorted({(r["mode"], r["refine"]) for r in rows}):
        p = directory / f"heatmap_{mode}_{'refine' if refine else 'norefine'}.svg"
        p.write_text(heatmap_svg(rows, mode, refine, metric))
        paths.append(p)
    return paths
