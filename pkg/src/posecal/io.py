"""File formats: TUM trajectories, cue CSV streams and dataset manifests.

A dataset directory written by :func:`save_dataset` holds, per trajectory
``<name>``::

    <name>.gt.tum      ground truth poses
    <name>.est.tum     estimated (drifting) poses
    <name>.cues.csv    timestamp, img_cue_0..7, imu_<k>_<axis> (K x 6), odom_cov_0..20 (optional)
    <name>.noise.csv   timestamp, sigma_0..5, xi_0..5 (injected std and draw)

plus ``manifest.json`` listing the files, schedules and seeds.
"""

from __future__ import annotations

import csv
import json
import logging
import warnings
from pathlib import Path

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import DataError, ParseError, ShapeError, ValidationError
from .synth import IMAGE_CHANNELS, NoiseSchedule, SimulatedDataset, Trajectory

log = logging.getLogger(__name__)

MANIFEST_VERSION = 1
QUAT_TOLERANCE = 1e-3
IMU_AXES = ("ax", "ay", "az", "gx", "gy", "gz")


def read_trajectory_tum(path) -> Trajectory:
    """Parse ``timestamp tx ty tz qx qy qz qw`` lines; ``#`` starts a comment."""
    stamps, rows = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            text = line.split("#", 1)[0].strip()
            if not text:
                continue
            fields = text.split()
            if len(fields) != 8:
                raise ParseError(f"{path}: expected 8 fields, found {len(fields)}", lineno)
            try:
                vals = [float(f) for f in fields]
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", lineno) from None
            if not np.all(np.isfinite(vals)):
                raise ParseError(f"{path}: non-finite value", lineno)
            stamps.append(vals[0])
            rows.append(vals[1:])
    if not rows:
        raise DataError(f"{path}: no poses")
    stamps = np.array(stamps)
    if np.any(np.diff(stamps) <= 0):
        bad = int(np.flatnonzero(np.diff(stamps) <= 0)[0]) + 1
        raise ValidationError(f"{path}: timestamps not strictly increasing at pose {bad}")
    data = np.array(rows)
    quat = data[:, 3:]
    norms = np.linalg.norm(quat, axis=1)
    if np.any(norms == 0):
        raise ParseError(f"{path}: zero quaternion", int(np.flatnonzero(norms == 0)[0]) + 1)
    if np.any(np.abs(norms - 1.0) > QUAT_TOLERANCE):
        warnings.warn(f"{path}: quaternions with |q| off by more than {QUAT_TOLERANCE} were normalised", stacklevel=2)
    poses = np.tile(np.eye(4), (len(data), 1, 1))
    poses[:, :3, :3] = Rotation.from_quat(quat / norms[:, None]).as_matrix()
    poses[:, :3, 3] = data[:, :3]
    return Trajectory(stamps, poses)


def write_trajectory_tum(traj: Trajectory, path) -> None:
    quat = Rotation.from_matrix(traj.poses[:, :3, :3]).as_quat()
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p, q in zip(traj.timestamps, traj.poses, quat):
            vals = [t, *p[:3, 3], *q]
            fh.write(" ".join(repr(float(v)) for v in vals) + "\n")


def cue_header(imu_samples: int, with_cov: bool) -> list[str]:
    cols = ["timestamp"] + [f"img_cue_{i}" for i in range(IMAGE_CHANNELS)]
    cols += [f"imu_{k}_{a}" for k in range(imu_samples) for a in IMU_AXES]
    if with_cov:
        cols += [f"odom_cov_{i}" for i in range(21)]
    return cols


def write_cues(path, timestamps, image_cues, imu_chunks, odom_cov=None) -> None:
    n, k, _ = imu_chunks.shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cue_header(k, odom_cov is not None))
        for i in range(n):
            row = [timestamps[i], *image_cues[i], *imu_chunks[i].reshape(-1)]
            if odom_cov is not None:
                row += list(odom_cov[i])
            w.writerow([repr(float(v)) for v in row])


def read_cues(path):
    """Return ``(timestamps, image_cues [N,8], imu_chunks [N,K,6], odom_cov or None)``."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise DataError(f"{path}: empty cue file") from None
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(header):
                raise ParseError(f"{path}: expected {len(header)} columns, found {len(row)}", lineno)
            try:
                rows.append([float(v) for v in row])
            except ValueError as exc:
                raise ParseError(f"{path}: {exc}", lineno) from None
    n_cov = sum(c.startswith("odom_cov_") for c in header)
    n_imu = sum(c.startswith("imu_") for c in header)
    if header[0] != "timestamp" or n_imu % 6 or n_cov not in (0, 21):
        raise ParseError(f"{path}: unexpected header", 1)
    if header != cue_header(n_imu // 6, n_cov == 21):
        raise ParseError(f"{path}: columns out of order", 1)
    data = np.array(rows, dtype=np.float64).reshape(len(rows), len(header))
    stamps = data[:, 0]
    image = data[:, 1 : 1 + IMAGE_CHANNELS]
    imu = data[:, 1 + IMAGE_CHANNELS : 1 + IMAGE_CHANNELS + n_imu].reshape(len(rows), n_imu // 6, 6)
    cov = data[:, 1 + IMAGE_CHANNELS + n_imu :] if n_cov else None
    return stamps, image, imu, cov


def _write_noise(path, timestamps, sigma, xi) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["timestamp"] + [f"sigma_{i}" for i in range(6)] + [f"xi_{i}" for i in range(6)])
        for row in np.column_stack([timestamps, sigma, xi]):
            w.writerow([repr(float(v)) for v in row])


def _read_noise(path):
    data = np.loadtxt(path, delimiter=",", skiprows=1, ndmin=2)
    if data.shape[1] != 13:
        raise ParseError(f"{path}: expected 13 columns", 1)
    return data[:, 1:7], data[:, 7:]


def save_dataset(datasets, out_dir, extra: dict | None = None) -> Path:
    """Write datasets plus ``manifest.json``; returns the manifest path."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, ds in enumerate(datasets):
        name = f"traj{i:03d}"
        write_trajectory_tum(ds.ground_truth, out / f"{name}.gt.tum")
        write_trajectory_tum(ds.estimated, out / f"{name}.est.tum")
        write_cues(out / f"{name}.cues.csv", ds.ground_truth.timestamps, ds.image_cues, ds.imu_chunks, ds.odom_cov)
        _write_noise(out / f"{name}.noise.csv", ds.ground_truth.timestamps, ds.true_noise, ds.injected)
        entries.append({
            "name": name,
            "ground_truth": f"{name}.gt.tum",
            "estimate": f"{name}.est.tum",
            "cues": f"{name}.cues.csv",
            "noise": f"{name}.noise.csv",
            "schedule": ds.schedule.to_dict(),
            "seed": ds.seed,
        })
    manifest = {"version": MANIFEST_VERSION, "trajectories": entries}
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def load_manifest(path) -> dict:
    path = Path(path)
    if path.is_dir():
        path = path / "manifest.json"
    try:
        manifest = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"{path}: no such manifest") from None
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc.msg}", exc.lineno) from None
    if manifest.get("version") != MANIFEST_VERSION:
        raise ValidationError(f"{path}: unsupported manifest version {manifest.get('version')!r}")
    manifest["_root"] = str(path.parent)
    return manifest


def load_dataset(path) -> list[SimulatedDataset]:
    """Read every trajectory listed in a manifest (or a directory holding one)."""
    manifest = load_manifest(path)
    root = Path(manifest["_root"])
    out = []
    for e in manifest["trajectories"]:
        gt = read_trajectory_tum(root / e["ground_truth"])
        est = read_trajectory_tum(root / e["estimate"])
        stamps, image, imu, cov = read_cues(root / e["cues"])
        if len(stamps) != len(gt) or not np.allclose(stamps, gt.timestamps, rtol=0, atol=1e-9):
            raise ValidationError(f"{e['cues']}: cue timestamps do not match the trajectory")
        if "noise" in e and (root / e["noise"]).exists():
            sigma, xi = _read_noise(root / e["noise"])
        else:
            sigma = xi = np.full((len(gt), 6), np.nan)
        try:
            out.append(SimulatedDataset(gt, est, image, imu, sigma, xi,
                                        NoiseSchedule.from_dict(e.get("schedule", {})), e.get("seed", 0), cov))
        except ShapeError as exc:
            raise ValidationError(f"{e['name']}: {exc}") from None
    return out
