"""Rotation-accuracy reports for alignments and pose estimates."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import SimilarityTransform
from .pose import rotation_error

THRESHOLDS = (30.0, 15.0, 10.0)
FAILED_ERROR = 180.0  # charged to instances whose alignment raised


def accuracy(errors, threshold_deg: float) -> float:
    e = np.asarray(errors, dtype=float)
    return float((e < threshold_deg).mean()) if len(e) else 0.0


def random_rotation_accuracy(threshold_deg: float) -> float:
    """Fraction of Haar-random rotations within ``threshold_deg`` of a fixed one.

    The rotation angle of a uniform rotation has density (1 - cos t) / pi on
    [0, pi], so the CDF is (t - sin t) / pi.
    """
    t = np.deg2rad(threshold_deg)
    return float((t - np.sin(t)) / np.pi)


@dataclass
class EvalReport:
    errors: list[float]
    labels: list[str]
    reference: str = ""
    runtimes: list[float] = field(default_factory=list)  # seconds per instance, not serialized by default

    def __post_init__(self):
        if len(self.errors) != len(self.labels):
            raise ValueError("one label per error is required")

    @property
    def acc30(self) -> float:
        return accuracy(self.errors, 30.0)

    @property
    def acc15(self) -> float:
        return accuracy(self.errors, 15.0)

    @property
    def acc10(self) -> float:
        return accuracy(self.errors, 10.0)

    @property
    def mean_error(self) -> float:
        return float(np.mean(self.errors)) if self.errors else float("nan")

    @property
    def median_error(self) -> float:
        return float(np.median(self.errors)) if self.errors else float("nan")

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {
            "reference": self.reference,
            "acc30": self.acc30, "acc15": self.acc15, "acc10": self.acc10,
            "mean_error": self.mean_error, "median_error": self.median_error,
            "instances": [{"id": lab, "rotation_error": float(e)} for lab, e in zip(self.labels, self.errors)],
        }
        if include_timing:
            out["runtime_per_instance"] = list(self.runtimes)
        return out


def evaluate_alignment(results, ground_truth: list[SimilarityTransform], reference_index: int,
                       labels: list[str] | None = None) -> EvalReport:
    """Errors of every non-reference alignment against the ground-truth
    relative rotation to the reference instance.

    ``ground_truth[i]`` maps the canonical frame to instance ``i``; the target
    for instance ``i`` is therefore R_ref R_i^T. Failed alignments count as 180.
    """
    if len(results) != len(ground_truth):
        raise ValueError(f"{len(results)} results for {len(ground_truth)} ground-truth transforms")
    if not 0 <= reference_index < len(results):
        raise IndexError("reference_index out of range")
    labels = labels or [str(i) for i in range(len(results))]
    r_ref = ground_truth[reference_index].rotation
    errs, labs, times = [], [], []
    for i, res in enumerate(results):
        if i == reference_index:
            continue
        target = r_ref @ ground_truth[i].rotation.T
        if res is None or not getattr(res, "ok", True) or getattr(res, "transform", None) is None:
            errs.append(FAILED_ERROR)
        else:
            errs.append(rotation_error(res.transform.rotation, target))
        labs.append(labels[i])
        times.append(float(getattr(res, "metadata", {}).get("runtime", 0.0)) if res is not None else 0.0)
    return EvalReport(errs, labs, labels[reference_index], times)


@dataclass
class MultiReferenceReport:
    reports: list[EvalReport]

    def stat(self, name: str) -> tuple[float, float]:
        vals = np.array([getattr(r, name) for r in self.reports])
        return float(vals.mean()), float(vals.std())

    def to_dict(self, include_timing: bool = False) -> dict:
        out = {}
        for name in ("acc30", "acc15", "acc10", "mean_error"):
            m, s = self.stat(name)
            out[name] = {"mean": m, "std": s}
        out["per_reference"] = [r.to_dict(include_timing) for r in self.reports]
        return out


def check_monotone(report) -> bool:
    """acc30 >= acc15 >= acc10 for a single or multi-reference report."""
    reps = report.reports if isinstance(report, MultiReferenceReport) else [report]
    return all(r.acc30 >= r.acc15 >= r.acc10 for r in reps)
