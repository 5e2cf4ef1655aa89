"""Sequence-level evaluation: per-axis velocity RMSE against ground truth,
finite-difference velocities from pose trajectories, error CDFs, and TUM
trajectory I/O.

Velocities are expressed in the camera (body) frame; the zero-velocity
baseline's per-axis RMSE equals the ground truth's per-axis RMS by
construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .geometry import (
    Pose,
    quaternion_to_rotation,
    rotation_to_axis_angle,
    rotation_to_quaternion,
)

__all__ = [
    "VelocitySeries",
    "EvalReport",
    "rmse_per_axis",
    "finite_difference_velocity",
    "cdf_rows",
    "export_cdf",
    "write_cdf_csv",
    "report_json_dict",
    "load_tum",
    "save_tum",
]


@dataclass(frozen=True)
class VelocitySeries:
    """Timestamped angular (rad/s) and linear (m/s) velocity records."""

    times: np.ndarray
    angular: np.ndarray
    linear: np.ndarray

    def __post_init__(self):
        times = np.array(self.times, dtype=np.float64)
        angular = np.array(self.angular, dtype=np.float64)
        linear = np.array(self.linear, dtype=np.float64)
        n = times.shape[0] if times.ndim == 1 else -1
        if times.ndim != 1 or angular.shape != (n, 3) or linear.shape != (n, 3):
            raise ValueError("expected times (N,), angular (N,3), linear (N,3)")
        if n > 1 and not np.all(np.diff(times) > 0.0):
            raise ValueError("timestamps must be strictly increasing")
        for arr in (times, angular, linear):
            arr.setflags(write=False)
        object.__setattr__(self, "times", times)
        object.__setattr__(self, "angular", angular)
        object.__setattr__(self, "linear", linear)

    def __len__(self) -> int:
        return self.times.shape[0]


@dataclass(frozen=True)
class EvalReport:
    """Per-axis RMSE plus the per-frame absolute errors behind the CDFs."""

    rmse_angular: np.ndarray
    rmse_linear: np.ndarray
    errors_angular: np.ndarray
    errors_linear: np.ndarray
    matched: int
    unmatched_pred: int
    unmatched_gt: int


def rmse_per_axis(pred: VelocitySeries, gt: VelocitySeries, tolerance_s: float = 1e-3) -> EvalReport:
    """Per-axis RMSE over prediction/ground-truth pairs aligned by nearest
    timestamp within ``tolerance_s``. Unmatched frames are counted, never
    silently dropped."""
    if len(pred) == 0 or len(gt) == 0:
        raise ValueError("empty velocity series")
    right = np.searchsorted(gt.times, pred.times)
    left = np.clip(right - 1, 0, len(gt) - 1)
    right = np.clip(right, 0, len(gt) - 1)
    pick_right = np.abs(gt.times[right] - pred.times) < np.abs(gt.times[left] - pred.times)
    nearest = np.where(pick_right, right, left)
    matched_mask = np.abs(gt.times[nearest] - pred.times) <= tolerance_s
    matched = int(matched_mask.sum())
    if matched == 0:
        raise ValueError(f"no prediction matched ground truth within {tolerance_s} s")
    gt_idx = nearest[matched_mask]
    err_angular = pred.angular[matched_mask] - gt.angular[gt_idx]
    err_linear = pred.linear[matched_mask] - gt.linear[gt_idx]
    return EvalReport(
        rmse_angular=np.sqrt(np.mean(err_angular**2, axis=0)),
        rmse_linear=np.sqrt(np.mean(err_linear**2, axis=0)),
        errors_angular=np.abs(err_angular),
        errors_linear=np.abs(err_linear),
        matched=matched,
        unmatched_pred=len(pred) - matched,
        unmatched_gt=int(len(gt) - np.unique(gt_idx).size),
    )


def finite_difference_velocity(times, poses) -> VelocitySeries:
    """Velocities from a camera-to-world pose trajectory by centered finite
    differences (one-sided at the endpoints), expressed in the camera frame.

    The angular rate at frame i is the axis-angle of R_{i-1}^T R_{i+1}
    divided by the time span; the linear rate rotates the world-frame
    translation difference into frame i.
    """
    times = np.asarray(times, dtype=np.float64)
    poses = list(poses)
    if len(poses) < 3:
        raise ValueError(f"need at least 3 poses, got {len(poses)}")
    if times.shape != (len(poses),) or not np.all(np.diff(times) > 0.0):
        raise ValueError("times must be strictly increasing and match the poses")
    n = len(poses)
    angular = np.zeros((n, 3))
    linear = np.zeros((n, 3))
    for i in range(n):
        lo = max(i - 1, 0)
        hi = min(i + 1, n - 1)
        dt = times[hi] - times[lo]
        rel = poses[lo].rotation.T @ poses[hi].rotation
        angular[i] = rotation_to_axis_angle(rel) / dt
        world_dv = (poses[hi].translation - poses[lo].translation) / dt
        linear[i] = poses[i].rotation.T @ world_dv
    return VelocitySeries(times, angular, linear)


def cdf_rows(errors) -> list[tuple[float, float]]:
    """Sorted (error, cumulative fraction) rows; fraction k/N at the k-th
    smallest error."""
    errors = np.asarray(errors, dtype=np.float64).reshape(-1)
    if errors.size == 0:
        raise ValueError("empty error list")
    ordered = np.sort(errors)
    n = ordered.size
    return [(float(e), (k + 1) / n) for k, e in enumerate(ordered)]


def export_cdf(report: EvalReport) -> dict[str, list[tuple[float, float]]]:
    """Error CDFs per quantity: Euclidean error norms of omega and v."""
    return {
        "omega": cdf_rows(np.linalg.norm(report.errors_angular, axis=1)),
        "v": cdf_rows(np.linalg.norm(report.errors_linear, axis=1)),
    }


def write_cdf_csv(path, rows) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("error,cum_fraction\n")
        for error, fraction in rows:
            fh.write(f"{error:.17g},{fraction:.17g}\n")


def report_json_dict(report: EvalReport) -> dict:
    return {
        "rmse_omega": report.rmse_angular.tolist(),
        "rmse_v": report.rmse_linear.tolist(),
        "matched": report.matched,
        "unmatched_pred": report.unmatched_pred,
        "unmatched_gt": report.unmatched_gt,
    }


def write_eval_report(path, report: EvalReport) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report_json_dict(report), fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_tum(path) -> tuple[np.ndarray, list[Pose]]:
    """Parse ``timestamp tx ty tz qx qy qz qw`` trajectory lines; ``#``
    comments and blank lines are skipped."""
    times = []
    poses = []
    with open(path, "r", encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split()
            if len(fields) != 8:
                raise ValueError(f"{path}:{lineno}: expected 8 fields, got {len(fields)}")
            values = [float(v) for v in fields]
            times.append(values[0])
            rotation = quaternion_to_rotation(*values[4:8])
            poses.append(Pose(rotation, np.array(values[1:4])))
    return np.asarray(times), poses


def save_tum(path, times, poses) -> None:
    with open(path, "w", encoding="ascii") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, pose in zip(times, poses):
            qx, qy, qz, qw = rotation_to_quaternion(pose.rotation)
            tx, ty, tz = pose.translation
            fh.write(
                f"{t:.9f} {tx:.9f} {ty:.9f} {tz:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n"
            )
