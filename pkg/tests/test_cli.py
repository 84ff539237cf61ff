import json

import pytest

from posecal import cli, train
from posecal.errors import DivergenceError

CONFIG = """
[sim]
n_trajectories = 2
duration = 4.0
bias_twist = [0.002, 0.0, 0.0, 0.0, 0.0, 0.001]
ar_coeff = 1.0

[model]
d_model = 16
n_blocks = 1
seq_len = 20
d_image = 16
d_imu = 16
d_odom = 16
head_hidden = 16
ssm_state_dim = 4

[train]
lr_mean = 1e-3
lr_cov = 1e-3
batch_size = 8
micro_batch = 8
epochs = 2

[data]
stride = 5
"""


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "cfg.toml").write_text(CONFIG)
    return root


def run(*args):
    return cli.main([str(a) for a in args])


@pytest.fixture(scope="module")
def trained(workdir):
    cfg = workdir / "cfg.toml"
    assert run("simulate", "--config", cfg, "--seed", 1, "--out", workdir / "data") == 0
    assert run("simulate", "--config", cfg, "--seed", 2, "--out", workdir / "val") == 0
    assert run("train", workdir / "data", "--config", cfg, "--val", workdir / "val",
               "--out", workdir / "run") == 0
    return workdir


def test_simulate_writes_manifest(trained):
    manifest = json.loads((trained / "data" / "manifest.json").read_text())
    assert manifest["seed"] == 1 and len(manifest["trajectories"]) == 2
    assert manifest["sim_config"]["bias_twist"][0] == 0.002


def test_train_outputs(trained):
    run_dir = trained / "run"
    assert (run_dir / "model.ckpt").stat().st_size > 0
    lines = (run_dir / "metrics.csv").read_text().splitlines()
    assert len(lines) == 3 and lines[0].startswith("epoch,")
    assert train.TrainConfig.from_dict(train.tomllib.loads((run_dir / "train_config.toml").read_text())).epochs == 2


@pytest.mark.parametrize("mode", ["zero-mean", "non-zero-mean"])
def test_eval(trained, mode, capsys):
    out = trained / f"eval-{mode}"
    assert run("eval", trained / "val", "--checkpoint", trained / "run" / "model.ckpt", "--mode", mode,
               "--bins", 4, "--stride", 5, "--out", out) == 0
    report = json.loads((out / "report.json").read_text())
    assert report["mode"] == mode.replace("-", "_") and len(report["bins"]) == 4
    assert (out / "bins.csv").read_text().startswith("bin,count,rmv,rmse")
    assert (out / "overlay.csv").exists()
    assert "RMSE" in capsys.readouterr().out


@pytest.mark.parametrize("kind", ["empirical", "constant"])
def test_eval_baselines(trained, kind):
    out = trained / f"eval-{kind}"
    assert run("eval", trained / "val", "--baseline", kind, "--fit-data", trained / "data", "--seq-len", 20,
               "--mode", "zero-mean", "--out", out) == 0
    assert json.loads((out / "report.json").read_text())["n_chunks"] > 0


def test_correct(trained):
    data = trained / "data"
    out = trained / "corr"
    assert run("correct", trained / "run" / "model.ckpt", data / "traj000.est.tum", data / "traj000.cues.csv",
               "--gt", data / "traj000.gt.tum", "--out", out) == 0
    lines = [l for l in (out / "corrected.tum").read_text().splitlines() if not l.startswith("#")]
    assert len(lines) == 60
    assert run("correct", trained / "run" / "model.ckpt", data / "traj000.est.tum", "--out", trained / "corr2") == 0


def test_report(trained):
    a = trained / "eval-zero-mean" / "report.json"
    b = trained / "eval-constant" / "report.json"
    assert run("report", a, b, "--out", trained / "cmp") == 0
    assert (trained / "cmp" / "comparison.txt").read_text().count("zero_mean") == 2
    rows = (trained / "cmp" / "reliability.csv").read_text().splitlines()
    assert rows[0] == "report,bin,count,rmv,rmse" and len(rows) == 1 + 4 + 10


def test_bench(workdir):
    assert run("bench", "--config", workdir / "cfg.toml", "--windows", 3, "--out", workdir / "bench") == 0
    result = json.loads((workdir / "bench" / "bench.json").read_text())
    assert result["windows"] == 3 and result["seq_len"] == 20 and result["mean_ms"] > 0


def test_usage_errors(trained, capsys):
    assert run() == 1
    assert run("frobnicate") == 1
    assert run("eval", trained / "val", "--out", trained / "x") == 1
    assert run("eval", trained / "val", "--baseline", "constant", "--out", trained / "x") == 1
    assert run("eval", trained / "val", "--checkpoint", "a", "--mode", "sideways", "--out", trained / "x") == 1
    assert run("--help") == 0
    capsys.readouterr()


def test_data_errors(trained, tmp_path):
    assert run("train", tmp_path / "nowhere", "--out", tmp_path / "r") == 2
    assert run("simulate", "--config", tmp_path / "missing.toml", "--out", tmp_path / "s") == 2
    (tmp_path / "bad.toml").write_text("[sim\n")
    assert run("simulate", "--config", tmp_path / "bad.toml", "--out", tmp_path / "s") == 2
    (tmp_path / "keys.toml").write_text("[sim]\nn_trajectorys = 1\n")
    assert run("simulate", "--config", tmp_path / "keys.toml", "--out", tmp_path / "s") == 2
    (tmp_path / "junk.ckpt").write_bytes(b"junk")
    assert run("eval", trained / "val", "--checkpoint", tmp_path / "junk.ckpt", "--out", tmp_path / "e") == 2
    (tmp_path / "short.tum").write_text("0 0 0 0 0 0 1\n")
    assert run("correct", trained / "run" / "model.ckpt", tmp_path / "short.tum", "--out", tmp_path / "c") == 2
    assert run("report", tmp_path / "none.json") == 2


def test_numerical_failure_exit_code(trained, monkeypatch, tmp_path):
    def diverge(*args, **kwargs):
        raise DivergenceError("loss is not finite")

    monkeypatch.setattr(train, "fit", diverge)
    assert run("train", trained / "data", "--config", trained / "cfg.toml", "--out", tmp_path / "r") == 3


def _snapshot(root):
    return {p.relative_to(root).as_posix(): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}


def test_pipeline_is_bit_identical(workdir):
    snaps = []
    for k in range(2):
        root = workdir / f"det{k}"
        cfg = workdir / "cfg.toml"
        assert run("simulate", "--config", cfg, "--seed", 5, "--out", root / "data") == 0
        assert run("train", root / "data", "--config", cfg, "--seed", 3, "--out", root / "run") == 0
        assert run("eval", root / "data", "--checkpoint", root / "run" / "model.ckpt", "--out", root / "eval") == 0
        snaps.append(_snapshot(root))
    assert snaps[0].keys() == snaps[1].keys() and len(snaps[0]) > 10
    for name in snaps[0]:
        assert snaps[0][name] == snaps[1][name], name
