"""Reprojection-error validation of detected posterior modes.

For every held-out case the posterior is sampled, modes are detected and a
DRR is re-rendered at each mode mean and at the single-Gaussian mean.  The
L1 distance to the ground-truth projection is the accuracy proxy.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .cinn import CINN, sample_posterior
from .drr import CameraConfig, Image2D, l1_image_distance, render_drr
from .errors import ParameterError
from .geometry import Pose, pose_vector
from .modes import DEFAULT_THRESHOLD, ModeReport, detect_modes
from .phantom import Volume

SUMMARY_COLUMNS = ["subset", "n", "mean_L1_modes", "mean_L1_closer", "mean_L1_second", "mean_L1_single"]


@dataclass(frozen=True)
class EvalConfig:
    n_samples: int = 4096
    threshold: float = DEFAULT_THRESHOLD
    seed: int = 0


def reprojection_error(volume: Volume, gt_image: Image2D, p: Pose, cam: CameraConfig) -> float:
    return l1_image_distance(render_drr(volume, p, cam), gt_image)


@dataclass
class CaseResult:
    case_id: str
    true_pose: Pose
    report: ModeReport
    mode_l1: list
    single_l1: float
    closer_index: int
    phantom: str = "symmetric"

    def __post_init__(self):
        if len(self.mode_l1) != len(self.report.mode_poses):
            raise ParameterError("one reprojection error per mode is required")

    @property
    def multimodal(self) -> bool:
        return self.report.multimodal

    @property
    def closer_l1(self) -> float:
        return self.mode_l1[self.closer_index]

    @property
    def second_l1(self) -> float | None:
        if len(self.mode_l1) < 2:
            return None
        return self.mode_l1[1 - self.closer_index]

    def to_dict(self) -> dict:
        return {
            "case_id": self.case_id,
            "phantom": self.phantom,
            "true_pose": self.true_pose.to_dict(),
            "report": self.report.to_dict(),
            "mode_l1": list(self.mode_l1),
            "single_l1": self.single_l1,
            "closer_index": self.closer_index,
            "closer_l1": self.closer_l1,
            "second_l1": self.second_l1,
        }


def closer_mode(report: ModeReport, true_pose: Pose) -> int:
    """Index of the mode mean nearest to the truth in pose-vector space."""
    truth = pose_vector(true_pose)
    dists = [float(np.linalg.norm(np.asarray(v) - truth)) for v in report.mode_vectors]
    return int(np.argmin(dists))


def case_from_report(case_id, volume, gt_image, true_pose, report, cam, phantom="symmetric") -> CaseResult:
    mode_l1 = [reprojection_error(volume, gt_image, p, cam) for p in report.mode_poses]
    single_l1 = reprojection_error(volume, gt_image, report.single_pose, cam)
    return CaseResult(
        case_id=str(case_id),
        true_pose=true_pose,
        report=report,
        mode_l1=mode_l1,
        single_l1=single_l1,
        closer_index=closer_mode(report, true_pose),
        phantom=phantom,
    )


def evaluate_case(model: CINN, volume: Volume, gt_image: Image2D, true_pose: Pose,
                  cam: CameraConfig, cfg: EvalConfig = EvalConfig(), case_id="0",
                  phantom="symmetric", seed=None) -> CaseResult:
    seed = cfg.seed if seed is None else seed
    samples = sample_posterior(model, volume, gt_image, cfg.n_samples, seed)
    report = detect_modes(samples, cfg.threshold, seed)
    return case_from_report(case_id, volume, gt_image, true_pose, report, cam, phantom)


def _mean(values):
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _subset_row(name, cases) -> dict:
    multi = [c for c in cases if c.multimodal]
    return {
        "subset": name,
        "n": len(multi),
        "mean_L1_modes": _mean([float(np.mean(c.mode_l1)) for c in multi]),
        "mean_L1_closer": _mean([c.closer_l1 for c in multi]),
        "mean_L1_second": _mean([c.second_l1 for c in multi]),
        "mean_L1_single": _mean([c.single_l1 for c in multi]),
    }


@dataclass
class EvalSummary:
    n_total: int
    n_multimodal: int
    rows: list = field(default_factory=list)
    by_phantom: dict = field(default_factory=dict)

    def row(self, subset="all") -> dict:
        for r in self.rows:
            if r["subset"] == subset:
                return r
        raise KeyError(subset)

    def to_dict(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_multimodal": self.n_multimodal,
            "rows": self.rows,
            "by_phantom": self.by_phantom,
        }


def summarize(cases) -> EvalSummary:
    """Means over multimodal cases, overall and per phantom kind."""
    cases = list(cases)
    if not cases:
        raise ParameterError("cannot summarize an empty case list")
    rows = [_subset_row("all", cases)]
    by_phantom = {}
    for kind in ("symmetric", "marked"):
        sub = [c for c in cases if c.phantom == kind]
        rows.append(_subset_row(kind, sub))
        by_phantom[kind] = {
            "n_total": len(sub),
            "n_multimodal": sum(c.multimodal for c in sub),
        }
    return EvalSummary(len(cases), sum(c.multimodal for c in cases), rows, by_phantom)


def evaluate_testset(model: CINN, cases, cam: CameraConfig, cfg: EvalConfig = EvalConfig()):
    """Evaluate ``cases``, an iterable of (case_id, volume, image, pose, phantom).

    Case i uses seed ``cfg.seed + i`` for posterior sampling and EM, so the
    result does not depend on how cases are scheduled.
    Returns ``(summary, results)``.
    """
    results = []
    for i, (case_id, volume, image, pose, phantom) in enumerate(cases):
        results.append(evaluate_case(model, volume, image, pose, cam, cfg, case_id, phantom,
                                     seed=cfg.seed + i))
    if not results:
        raise ParameterError("empty test set")
    return summarize(results), results


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    raise TypeError(f"not JSON serializable: {type(o)}")


def write_cases_jsonl(results, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for r in results:
            fh.write(json.dumps(r.to_dict(), sort_keys=True, default=_json_default) + "\n")


def write_summary(summary: EvalSummary, json_path, csv_path) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary.to_dict(), fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for row in summary.rows:
            w.writerow({k: ("" if row[k] is None else row[k]) for k in SUMMARY_COLUMNS})


def summary_from_jsonl(path) -> dict:
    """Recompute the 'all' row from a per-case JSONL file."""
    multi = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            rec = json.loads(line)
            if rec["report"]["label"] == "multi-modal":
                multi.append(rec)
    return {
        "subset": "all",
        "n": len(multi),
        "mean_L1_modes": _mean([float(np.mean(r["mode_l1"])) for r in multi]),
        "mean_L1_closer": _mean([r["closer_l1"] for r in multi]),
        "mean_L1_second": _mean([r["second_l1"] for r in multi]),
        "mean_L1_single": _mean([r["single_l1"] for r in multi]),
    }


def lao_histogram(samples, lo=-90, hi=270, width=1.0):
    """Counts of the lao component in bins (lo + i*w, lo + (i+1)*w].

    ``samples`` are canonicalized pose vectors or raw lao angles (1-d).
    """
    x = np.asarray(samples, dtype=np.float64)
    lao = x[:, 3] * 110.0 + 90.0 if x.ndim == 2 else x
    n_bins = int(round((hi - lo) / width))
    idx = np.ceil((lao - lo) / width).astype(np.int64) - 1
    idx = np.clip(idx, 0, n_bins - 1)
    counts = np.bincount(idx, minlength=n_bins)
    edges = lo + width * np.arange(n_bins + 1)
    return edges, counts


def write_histogram_csv(edges, counts, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["bin_low", "bin_high", "count"])
        for lo, hi, c in zip(edges[:-1], edges[1:], counts):
            w.writerow([f"{lo:g}", f"{hi:g}", int(c)])


def histogram_svg(edges, counts, truth=None, width=720, height=200) -> str:
    top = max(int(np.max(counts)), 1)
    span = edges[-1] - edges[0]
    bw = width / len(counts)
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height + 20}">',
        f'<rect width="{width}" height="{height + 20}" fill="white"/>',
    ]
    for i, c in enumerate(counts):
        if c:
            h = height * c / top
            parts.append(f'<rect x="{i * bw:.2f}" y="{height - h:.2f}" width="{bw:.2f}" '
                         f'height="{h:.2f}" fill="steelblue"/>')
    if truth is not None:
        for t in (truth, truth + 180.0):
            t = (t + 90.0) % 360.0 - 90.0
            x = width * (t - edges[0]) / span
            parts.append(f'<line x1="{x:.2f}" y1="0" x2="{x:.2f}" y2="{height}" stroke="red"/>')
    for tick in range(int(math.ceil(edges[0] / 90.0)) * 90, int(edges[-1]) + 1, 90):
        x = width * (tick - edges[0]) / span
        parts.append(f'<text x="{x:.1f}" y="{height + 15}" font-size="10">{tick}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
