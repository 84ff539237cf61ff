"""Whole-trajectory correction with a trained model.

A trajectory longer than one window is processed in windows that overlap by
a single pose. The first window starts from the first estimated pose; every
later window is re-anchored on the corrected pose where it starts, so
corrections chain along the trajectory without needing ground truth.
"""

from __future__ import annotations

import csv

import numpy as np

from . import lie
from .seqmodel import ErrorModel, SensorWindow
from .synth import Trajectory


def correct_trajectory(model: ErrorModel, est: Trajectory, image_cues=None, imu_chunks=None,
                       odom_cov=None) -> tuple[Trajectory, np.ndarray]:
    """Return the corrected trajectory and the per-pose uncertainty ``u``."""
    n = len(est)
    t_len = min(model.config.seq_len, n)
    corrected = est.poses.copy()
    u = np.zeros(n)
    done = 0  # poses [0, done] are final
    start = 0
    while done < n - 1:
        start = min(start, n - t_len)
        sl = slice(start, start + t_len)
        anchor = corrected[start] @ lie.inverse(est.poses[start])
        window = SensorWindow(
            timestamps=est.timestamps[sl],
            odom_poses=anchor @ est.poses[sl],
            image_cues=None if image_cues is None else image_cues[sl],
            imu_chunks=None if imu_chunks is None else imu_chunks[sl],
            odom_cov=None if odom_cov is None else odom_cov[sl],
            start_index=start,
        )
        mu, sigma = model.predict(window)
        fixed = lie.correct_pose(mu, window.odom_poses)
        new = slice(done + 1 - start, t_len)
        corrected[done + 1 : start + t_len] = fixed[new]
        u[done + 1 : start + t_len] = np.sqrt(np.trace(sigma[new], axis1=-2, axis2=-1))
        done = start + t_len - 1
        start = done
    return Trajectory(est.timestamps.copy(), corrected), u


def write_overlay_csv(path, est: Trajectory, corrected: Trajectory, u, gt: Trajectory | None = None) -> None:
    """Plot-ready positions: ``t, gt_x..z, est_x..z, corr_x..z, u`` (gt blank if unknown)."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t", "gt_x", "gt_y", "gt_z", "est_x", "est_y", "est_z", "corr_x", "corr_y", "corr_z", "u"])
        for i, t in enumerate(est.timestamps):
            g = ["", "", ""] if gt is None else [repr(float(v)) for v in gt.poses[i, :3, 3]]
            row = [repr(float(t)), *g, *(repr(float(v)) for v in est.poses[i, :3, 3]),
                   *(repr(float(v)) for v in corrected.poses[i, :3, 3]), repr(float(u[i]))]
            w.writerow(row)
