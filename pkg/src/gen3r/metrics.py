"""Appearance, geometry and pose metrics plus the per-scene report."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .geometry import (
    CameraPose,
    PointCloud,
    align_clouds,
    auc_at_threshold,
    chamfer_metrics,
    farthest_point_sample,
    relative_pose_errors,
)
from .io import write_json

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SCHEMA_VERSION = 1
DESK_SAMPLE_K = 2000
PAPER_SAMPLE_K = 20000
AUC_THRESHOLD_DEG = 30.0


def _check_pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return pred, gt


def psnr(pred, gt) -> float:
    """PSNR in dB with peak 1; identical inputs report PSNR_CAP."""
    pred, gt = _check_pair(pred, gt)
    mse = float(np.mean((pred - gt) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def ssim(pred, gt, data_range: float = 1.0) -> float:
    """Gaussian-window SSIM (11x11, sigma 1.5, K1=0.01, K2=0.03) averaged over channels."""
    pred, gt = _check_pair(pred, gt)
    if pred.ndim == 2:
        pred, gt = pred[..., None], gt[..., None]
    C1, C2 = (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    trunc = SSIM_RADIUS / SSIM_SIGMA

    def blur(x):
        return gaussian_filter(x, SSIM_SIGMA, truncate=trunc, mode="reflect")

    vals = []
    for ch in range(pred.shape[-1]):
        x, y = pred[..., ch], gt[..., ch]
        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        s = ((2 * mx * my + C1) * (2 * sxy + C2)) / ((mx * mx + my * my + C1) * (sxx + syy + C2))
        r = SSIM_RADIUS
        vals.append(s[r:-r, r:-r].mean() if min(s.shape) > 2 * r else s.mean())
    return float(np.mean(vals))


def sequence_psnr(pred_frames, gt_frames) -> float:
    return float(np.mean([psnr(p, g) for p, g in zip(pred_frames, gt_frames)]))


def sequence_ssim(pred_frames, gt_frames) -> float:
    return float(np.mean([ssim(p, g) for p, g in zip(pred_frames, gt_frames)]))


def evaluate_geometry(pred: PointCloud, gt: PointCloud, sample_k: int = DESK_SAMPLE_K):
    """Align pred to gt, FPS both to sample_k, then chamfer. Returns (accuracy, completeness, cd)."""
    pred_pts = np.asarray(pred.points if isinstance(pred, PointCloud) else pred, dtype=np.float64)
    gt_pts = np.asarray(gt.points if isinstance(gt, PointCloud) else gt, dtype=np.float64)
    k = min(sample_k, len(pred_pts), len(gt_pts))
    aligned = align_clouds(pred_pts, gt_pts).apply(pred_pts)
    a = aligned[farthest_point_sample(aligned, k)]
    b = gt_pts[farthest_point_sample(gt_pts, k)]
    return chamfer_metrics(a, b)


def evaluate_poses(pred_cameras, gt_cameras, threshold_deg: float = AUC_THRESHOLD_DEG) -> float:
    to_pose = lambda c: c if isinstance(c, CameraPose) else CameraPose.from_vector(c)  # noqa: E731
    pred = [to_pose(c) for c in pred_cameras]
    gt = [to_pose(c) for c in gt_cameras]
    errs = relative_pose_errors(pred, gt)
    return auc_at_threshold(errs.combined(), threshold_deg)


METRIC_FIELDS = ("psnr", "ssim", "accuracy", "completeness", "cd", "auc30")


@dataclass
class MetricReport:
    rows: list[dict]
    config_hash: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def aggregate(self) -> dict:
        out = {}
        for k in METRIC_FIELDS:
            vals = [r[k] for r in self.rows if r.get(k) is not None]
            out[k] = math.fsum(vals) / len(vals) if vals else None
        return out

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "config_hash": self.config_hash,
            "rows": self.rows,
            "aggregate": self.aggregate,
            **({"extra": self.extra} if self.extra else {}),
        }

    def write(self, out_dir):
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_json(out_dir / "report.json", self.to_dict())
        with open(out_dir / "report.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["scene", "result_dir", *METRIC_FIELDS])
            for r in self.rows:
                w.writerow([r["scene"], r.get("result_dir", ""), *[_fmt(r.get(k)) for k in METRIC_FIELDS]])
            agg = self.aggregate
            w.writerow(["mean", "", *[_fmt(agg[k]) for k in METRIC_FIELDS]])
        return out_dir / "report.json"


def _fmt(v):
    return "" if v is None else repr(float(v))
