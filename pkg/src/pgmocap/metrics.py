"""Pose accuracy and physical-plausibility metrics.

Positional errors are reported in millimeters; velocity magnitudes in
mm/frame at the motions' native frame rate.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, asdict
from pathlib import Path

import numpy as np

from .motion import Motion, Skeleton, forward_kinematics

METRICS_FORMAT_VERSION = "pgm-metrics/1"

M_TO_MM = 1000.0


class AlignmentError(ValueError):
    """Procrustes alignment is undefined (degenerate point set)."""


def procrustes_align(pred: np.ndarray, gt: np.ndarray):
    """Least-squares similarity alignment of pred (N, 3) onto gt (N, 3).

    Returns (aligned pred (N, 3), scale, R (3, 3), t (3,)) minimizing
    sum ||s R p + t - g||^2 with det(R) = +1 enforced by flipping the sign
    of the smallest singular vector when needed.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise ValueError(f"procrustes: need matching (N, 3), got {pred.shape} vs {gt.shape}")
    if pred.shape[0] < 3:
        raise AlignmentError("procrustes: need at least 3 points")
    mu_p = pred.mean(axis=0)
    mu_g = gt.mean(axis=0)
    p0 = pred - mu_p
    g0 = gt - mu_g
    var_p = np.sum(p0 ** 2)
    if var_p < 1e-16:
        raise AlignmentError("procrustes: predicted points are coincident")
    K = g0.T @ p0                      # (3, 3) cross-covariance
    U, S, Vt = np.linalg.svd(K)
    D = np.eye(3)
    if np.linalg.det(U @ Vt) < 0:      # avoid reflections
        D[2, 2] = -1.0
    R = U @ D @ Vt
    scale = np.trace(np.diag(S) @ D) / var_p
    t = mu_g - scale * R @ mu_p
    aligned = scale * pred @ R.T + t
    return aligned, float(scale), R, t


@dataclass
class MetricReport:
    """Evaluation summary.

    mpjpe / pa_mpjpe: mean per-joint position error, raw and after per-frame
    similarity alignment (mm).  pck: fraction of joints within the threshold.
    vel_err: mean |speed difference| per joint per frame (mm/frame), with
    vel_err_std its standard deviation over frames.  foot_z_err: mean |foot
    height error| on ground-truth contact frames (mm).  success_rate is
    filled by tracking evaluations, None otherwise.
    """

    mpjpe: float
    pa_mpjpe: float
    pck: float
    vel_err: float
    vel_err_std: float
    foot_z_err: float
    success_rate: float | None = None
    num_frames: int = 0
    num_joints: int = 0

    def __post_init__(self):
        if not self.pa_mpjpe <= self.mpjpe + 1e-9:
            raise ValueError(
                f"metric report: pa_mpjpe {self.pa_mpjpe} exceeds mpjpe {self.mpjpe}")
        for name in ("mpjpe", "pa_mpjpe", "vel_err", "vel_err_std", "foot_z_err"):
            if getattr(self, name) < 0:
                raise ValueError(f"metric report: {name} must be nonnegative")
        if not 0.0 <= self.pck <= 1.0:
            raise ValueError("metric report: pck must be in [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["version"] = METRICS_FORMAT_VERSION
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def compute_metrics(pred: Motion, gt: Motion, skeleton: Skeleton,
                    pck_threshold_mm: float = 150.0,
                    contact_height_m: float = 0.03) -> MetricReport:
    """Compare a predicted motion against ground truth on the same skeleton.

    Joint positions come from FK with the skeleton's beta.  Velocity error
    compares per-joint speed magnitudes (finite difference between
    consecutive frames).  Foot-height error is measured on frames where the
    ground-truth foot is below contact_height_m; it is 0 when no such frame
    exists (or the skeleton has no feet).
    """
    if pred.num_frames != gt.num_frames or pred.num_joints != gt.num_joints:
        raise ValueError(
            f"metrics: shape mismatch (pred {pred.num_frames}x{pred.num_joints}, "
            f"gt {gt.num_frames}x{gt.num_joints})")
    if abs(pred.fps - gt.fps) > 1e-9:
        raise ValueError("metrics: frame rates differ")
    p = forward_kinematics(skeleton, pred)   # (H, J, 3)
    g = forward_kinematics(skeleton, gt)
    err = np.linalg.norm(p - g, axis=2)      # (H, J) meters
    mpjpe = float(err.mean() * M_TO_MM)

    pa_err = np.empty_like(err)
    for h in range(p.shape[0]):
        aligned, _, _, _ = procrustes_align(p[h], g[h])
        pa_err[h] = np.linalg.norm(aligned - g[h], axis=1)
    pa_mpjpe = float(pa_err.mean() * M_TO_MM)

    pck = float(np.mean(err * M_TO_MM < pck_threshold_mm))

    if pred.num_frames >= 2:
        vp = np.linalg.norm(np.diff(p, axis=0), axis=2) * M_TO_MM   # (H-1, J)
        vg = np.linalg.norm(np.diff(g, axis=0), axis=2) * M_TO_MM
        per_frame = np.abs(vp - vg).mean(axis=1)                    # (H-1,)
        vel_err = float(per_frame.mean())
        vel_err_std = float(per_frame.std())
    else:
        vel_err = vel_err_std = 0.0

    feet = list(skeleton.foot_joints)
    if feet:
        contact = g[:, feet, 2] < contact_height_m                  # (H, F)
        if np.any(contact):
            dz = np.abs(p[:, feet, 2] - g[:, feet, 2]) * M_TO_MM
            foot_z_err = float(dz[contact].mean())
        else:
            foot_z_err = 0.0
    else:
        foot_z_err = 0.0

    return MetricReport(mpjpe=mpjpe, pa_mpjpe=pa_mpjpe, pck=pck,
                        vel_err=vel_err, vel_err_std=vel_err_std,
                        foot_z_err=foot_z_err,
                        num_frames=pred.num_frames, num_joints=pred.num_joints)
