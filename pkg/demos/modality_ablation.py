"""Which inputs matter: all modalities against image cues only.

    python3 demos/modality_ablation.py [--seeds 0,1,2]

Each seed trains two models on the ``bias`` scenario, one reading image
cues, IMU chunks and odometry, one reading image cues alone. Without the
odometry stream the model cannot see the motion that drives the drift.
"""

import argparse
import dataclasses

import numpy as np

from posecal import scenarios


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--seeds", default="0,1,2")
    args = ap.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    camera = dataclasses.replace(scenarios.TINY_MODEL, modalities=("image",))

    rows = []
    for seed in seeds:
        full = scenarios.run("bias", seed).report
        cam = scenarios.run("bias", seed, model_config=camera).report
        rows.append((seed, full.raw_rmse_m, full.rmse_m, cam.rmse_m))
        print(f"seed {seed}: raw {full.raw_rmse_m:.4f} m, all inputs {full.rmse_m:.4f} m, image only {cam.rmse_m:.4f} m")
    arr = np.array(rows)
    print(f"median: raw {np.median(arr[:, 1]):.4f}  all {np.median(arr[:, 2]):.4f}  image only {np.median(arr[:, 3]):.4f}")


if __name__ == "__main__":
    main()
