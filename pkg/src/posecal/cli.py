"""Command line interface.

    posecal simulate --config sim.toml --seed 0 --out data/
    posecal train data/ --config train.toml --seed 0 --out run/
    posecal eval data/ --checkpoint run/model.ckpt --mode non-zero-mean --out eval/
    posecal correct run/model.ckpt est.tum cues.csv --out corrected/
    posecal report eval/report.json other/report.json --out cmp/
    posecal bench --windows 20

Exit codes: 0 success, 1 usage, 2 data or validation problem, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np

from . import checkpoint, io, metrics, pipeline, synth, train
from .errors import DataError, NumericalError
from .seqmodel import ErrorModel, ModelConfig

log = logging.getLogger("posecal")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
BENCH_LIMIT_MS = 50.0


class UsageError(Exception):
    pass


def _mode(text: str) -> str:
    mode = text.replace("-", "_")
    if mode not in metrics.MODES:
        raise argparse.ArgumentTypeError(f"mode must be zero-mean or non-zero-mean, got {text!r}")
    return mode


def _read_config(path) -> dict:
    if path is None:
        return {}
    try:
        return train.load_toml(path)
    except FileNotFoundError:
        raise DataError(f"{path}: no such config file") from None
    except train.tomllib.TOMLDecodeError as exc:
        raise DataError(f"{path}: {exc}") from None


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_simulate(args) -> int:
    cfg = _read_config(args.config)
    sim = synth.SimConfig.from_dict(cfg.get("sim", {}))
    datasets = synth.simulate(sim, args.seed)
    path = io.save_dataset(datasets, _out_dir(args), {"sim_config": sim.to_dict(), "seed": args.seed})
    print(f"wrote {len(datasets)} trajectories to {path.parent}")
    return EXIT_OK


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig.from_dict(cfg.get("model", {}))


def cmd_train(args) -> int:
    cfg = _read_config(args.config)
    tdict = dict(cfg.get("train", {}))
    if args.seed is not None:
        tdict["seed"] = args.seed
    tcfg = train.TrainConfig.from_dict(tdict)
    mcfg = _model_config(cfg)
    stride = args.stride or cfg.get("data", {}).get("stride", 10)
    pairs = synth.windows_from(io.load_dataset(args.dataset), mcfg.seq_len, stride)
    val = synth.windows_from(io.load_dataset(args.val), mcfg.seq_len, stride) if args.val else None
    if not pairs:
        raise DataError("dataset yields no training windows")
    model = ErrorModel(mcfg, seed=tcfg.seed)
    result = train.fit(pairs, model, tcfg, validation=val)
    out = _out_dir(args)
    checkpoint.save(model, out / "model.ckpt")
    result.write_csv(out / "metrics.csv")
    (out / "train_config.toml").write_text(tcfg.to_toml())
    print(f"trained on {len(pairs)} windows; checkpoint at {out / 'model.ckpt'}")
    return EXIT_OK


def _predictor(args, seq_len: int, stride: int, mode: str):
    if args.checkpoint:
        return checkpoint.load(args.checkpoint)
    if not args.fit_data:
        raise UsageError("--baseline needs --fit-data")
    pairs = synth.windows_from(io.load_dataset(args.fit_data), seq_len, stride)
    targets = np.stack([t for _, t in pairs])
    if args.baseline == "empirical":
        return metrics.EmpiricalBaseline.fit(targets)
    return metrics.ConstantBaseline.fit(targets[:, 1:])


def cmd_eval(args) -> int:
    if bool(args.checkpoint) == bool(args.baseline):
        raise UsageError("give exactly one of --checkpoint or --baseline")
    stride = args.stride or 10
    seq_len = args.seq_len
    predictor = _predictor(args, seq_len, stride, args.mode)
    if isinstance(predictor, ErrorModel):
        seq_len = predictor.config.seq_len
    datasets = io.load_dataset(args.dataset)
    report = metrics.evaluate(predictor, datasets, args.mode, seq_len, stride, args.bins)
    out = _out_dir(args)
    (out / "report.json").write_text(report.to_json() + "\n")
    report.write_bins_csv(out / "bins.csv")
    if isinstance(predictor, ErrorModel):
        ds = datasets[0]
        corrected, u = pipeline.correct_trajectory(predictor, ds.estimated, ds.image_cues, ds.imu_chunks, ds.odom_cov)
        pipeline.write_overlay_csv(out / "overlay.csv", ds.estimated, corrected, u, ds.ground_truth)
    print(metrics.comparison_table({Path(args.dataset).name: report}))
    return EXIT_OK


def cmd_correct(args) -> int:
    model = checkpoint.load(args.checkpoint)
    est = io.read_trajectory_tum(args.trajectory)
    image = imu = cov = None
    if args.cues:
        stamps, image, imu, cov = io.read_cues(args.cues)
        if len(stamps) != len(est) or np.max(np.abs(stamps - est.timestamps)) > metrics.ASSOC_TOLERANCE:
            raise DataError("cue timestamps do not match the trajectory")
    gt = io.read_trajectory_tum(args.gt) if args.gt else None
    if gt is not None and len(gt) != len(est):
        raise DataError("ground truth and estimate differ in length")
    corrected, u = pipeline.correct_trajectory(model, est, image, imu, cov)
    out = _out_dir(args)
    io.write_trajectory_tum(corrected, out / "corrected.tum")
    pipeline.write_overlay_csv(out / "overlay.csv", est, corrected, u, gt)
    print(f"corrected {len(est)} poses -> {out / 'corrected.tum'}")
    return EXIT_OK


def cmd_report(args) -> int:
    reports = {}
    for p in args.reports:
        try:
            reports[str(p)] = metrics.CalibrationReport.from_json(Path(p).read_text())
        except FileNotFoundError:
            raise DataError(f"{p}: no such report") from None
        except (json.JSONDecodeError, TypeError) as exc:
            raise DataError(f"{p}: not a calibration report ({exc})") from None
    table = metrics.comparison_table(reports)
    print(table)
    if args.out:
        out = _out_dir(args)
        (out / "comparison.txt").write_text(table + "\n")
        with open(out / "reliability.csv", "w") as fh:
            fh.write("report,bin,count,rmv,rmse\n")
            for name, r in reports.items():
                for b in r.bins:
                    fh.write(f"{name},{b.bin},{b.count},{b.rmv!r},{b.rmse!r}\n")
    return EXIT_OK


def bench(config: ModelConfig, n_windows: int = 20, seed: int = 0, repeats: int = 3) -> dict:
    """Mean single-window forward latency (best of ``repeats`` passes)."""
    sim = synth.SimConfig(n_trajectories=1, duration=max(30.0, (config.seq_len + n_windows) / 15.0 + 1))
    windows = [w for w, _ in synth.windows_from(synth.simulate(sim, seed), config.seq_len, 1)][:n_windows]
    model = ErrorModel(config, seed)
    model.predict(windows[0])  # compile kernels
    best = float("inf")
    for _ in range(repeats):
        t0 = time.perf_counter()
        for w in windows:
            model.predict(w)
        best = min(best, (time.perf_counter() - t0) / len(windows))
    return {"mean_ms": best * 1e3, "windows": len(windows), "seq_len": config.seq_len,
            "limit_ms": BENCH_LIMIT_MS, "config": json.loads(config.to_json())}


def cmd_bench(args) -> int:
    cfg = _model_config(_read_config(args.config))
    result = bench(cfg, args.windows, args.seed or 0)
    result["pass"] = result["mean_ms"] < BENCH_LIMIT_MS
    print(f"forward latency: {result['mean_ms']:.2f} ms per window of T={cfg.seq_len} "
          f"({'below' if result['pass'] else 'above'} {BENCH_LIMIT_MS:.0f} ms)")
    if args.out:
        (_out_dir(args) / "bench.json").write_text(json.dumps(result, indent=2, sort_keys=True) + "\n")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="posecal", description=__doc__.split("\n\n")[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a synthetic dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("train", help="train a model on a dataset")
    s.add_argument("dataset")
    s.add_argument("--config")
    s.add_argument("--seed", type=int)
    s.add_argument("--stride", type=int)
    s.add_argument("--val")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("eval", help="score a model or baseline on a dataset")
    s.add_argument("dataset")
    s.add_argument("--checkpoint")
    s.add_argument("--baseline", choices=("empirical", "constant"))
    s.add_argument("--fit-data")
    s.add_argument("--mode", type=_mode, default="non_zero_mean")
    s.add_argument("--bins", type=int, default=10)
    s.add_argument("--stride", type=int)
    s.add_argument("--seq-len", type=int, default=100)
    s.add_argument("--seed", type=int)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_eval)

    s = sub.add_parser("correct", help="correct a TUM trajectory")
    s.add_argument("checkpoint")
    s.add_argument("trajectory")
    s.add_argument("cues", nargs="?")
    s.add_argument("--gt")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_correct)

    s = sub.add_parser("report", help="compare evaluation reports")
    s.add_argument("reports", nargs="+")
    s.add_argument("--out")
    s.set_defaults(func=cmd_report)

    s = sub.add_parser("bench", help="measure forward latency")
    s.add_argument("--config")
    s.add_argument("--windows", type=int, default=20)
    s.add_argument("--seed", type=int)
    s.add_argument("--out")
    s.set_defaults(func=cmd_bench)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"invalid input: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
