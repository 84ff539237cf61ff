"""Uncertainty that follows cue-correlated noise events.

    python3 demos/calibration.py [--seed 0]

The ``calibration`` scenario inflates the odometry noise during events that
also leave a fingerprint in the IMU or image cues. A zero-mean model learns a
per-step covariance; it is compared with one constant covariance fitted to
the training residuals, on held-out trajectories.
"""

import argparse

import numpy as np

from posecal import metrics, scenarios


def reliability(report, title):
    print(title)
    print(f"  {'bin':>3} {'count':>6} {'RMV':>9} {'RMSE':>9}")
    for b in report.bins:
        print(f"  {b.bin:>3} {b.count:>6} {b.rmv:>9.4f} {b.rmse:>9.4f}")


def main():
    ap = argparse.ArgumentParser(description=__doc__.split("\n\n")[0])
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    print("training a zero-mean model on the calibration scenario (about a minute)...")
    model = scenarios.run("calibration", args.seed)
    const = scenarios.constant_baseline("calibration", args.seed)
    print(metrics.comparison_table({"learned": model.report, "constant": const}))
    print()
    reliability(model.report, "learned model, reliability bins")
    reliability(const, "constant baseline, reliability bins")

    # how the predicted spread follows the simulator's hidden noise level
    ds = scenarios.datasets("calibration", args.seed, held_out=True)
    pairs, _ = metrics.chunk_dataset(ds, 100, 100)
    sigma = model.model.predict_covariance([w for w, _ in pairs])
    u = np.sqrt(np.trace(sigma, axis1=-2, axis2=-1))[:, 1:].reshape(-1)
    truth = np.concatenate([np.linalg.norm(d.true_noise[w.start_index + 1 : w.start_index + 100], axis=1)
                            for d in ds for w, _ in metrics.chunk_dataset([d], 100, 100)[0]])
    print(f"\ncorrelation of predicted u with the injected noise level: {np.corrcoef(u, truth)[0, 1]:.2f}")


if __name__ == "__main__":
    main()
