import json
import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from posecal import io, lie, synth
from posecal.errors import DataError, ParseError, ValidationError

from conftest import random_poses


def write(tmp_path, text, name="t.tum"):
    p = tmp_path / name
    p.write_text(text)
    return p


def test_identity_line(tmp_path):
    traj = io.read_trajectory_tum(write(tmp_path, "0.0 0 0 0 0 0 0 1\n"))
    assert len(traj) == 1 and traj.timestamps[0] == 0.0
    assert np.array_equal(traj.poses[0], np.eye(4))


def test_comments_and_blank_lines(tmp_path):
    text = "# header\n\n0.0 1 2 3 0 0 0 1  # first\n   \n0.5 4 5 6 0 0 1 0\n"
    traj = io.read_trajectory_tum(write(tmp_path, text))
    assert len(traj) == 2
    np.testing.assert_array_equal(traj.positions, [[1, 2, 3], [4, 5, 6]])
    # 180 degrees about z
    np.testing.assert_allclose(traj.poses[1, :3, :3], np.diag([-1.0, -1.0, 1.0]), atol=1e-15)


def test_quaternion_convention(tmp_path):
    # (x, y, z, w) order: 90 degrees about x
    h = np.sqrt(0.5)
    traj = io.read_trajectory_tum(write(tmp_path, f"1.0 0 0 0 {h} 0 0 {h}\n"))
    np.testing.assert_allclose(traj.poses[0, :3, :3], [[1, 0, 0], [0, 0, -1], [0, 1, 0]], atol=1e-15)


def test_round_trip(tmp_path, rng):
    poses = random_poses(rng, 200, max_angle=3.0)
    traj = synth.Trajectory(np.cumsum(rng.uniform(0.01, 0.1, 200)) + 1e6, poses)
    io.write_trajectory_tum(traj, tmp_path / "r.tum")
    back = io.read_trajectory_tum(tmp_path / "r.tum")
    assert np.array_equal(back.timestamps, traj.timestamps)
    assert np.max(np.abs(back.poses - traj.poses)) < 1e-9


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31))
def test_round_trip_property(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(1, 20))
    traj = synth.Trajectory(np.sort(rng.choice(10**6, n, replace=False)) * 1e-3, random_poses(rng, n, 3.1))
    path = tmp_path_factory.mktemp("rt") / "r.tum"
    io.write_trajectory_tum(traj, path)
    assert np.max(np.abs(io.read_trajectory_tum(path).poses - traj.poses)) < 1e-9


def test_seven_fields_names_the_line(tmp_path):
    path = write(tmp_path, "# c\n0 0 0 0 0 0 0 1\n1 0 0 0 0 0 1\n")
    with pytest.raises(ParseError, match="line 3") as info:
        io.read_trajectory_tum(path)
    assert info.value.line == 3


@pytest.mark.parametrize("bad", ["0 0 0 x 0 0 0 1", "0 0 0 nan 0 0 0 1", "0 0 0 0 0 0 0 0"])
def test_malformed_values(tmp_path, bad):
    with pytest.raises(ParseError) as info:
        io.read_trajectory_tum(write(tmp_path, bad + "\n"))
    assert info.value.line == 1


@pytest.mark.parametrize("stamps", [(0.0, 1.0, 1.0), (0.0, 2.0, 1.0)])
def test_non_monotone_timestamps(tmp_path, stamps):
    text = "".join(f"{t} 0 0 0 0 0 0 1\n" for t in stamps)
    with pytest.raises(ValidationError, match="pose 2"):
        io.read_trajectory_tum(write(tmp_path, text))


def test_empty_file(tmp_path):
    with pytest.raises(DataError):
        io.read_trajectory_tum(write(tmp_path, "# nothing\n"))


def test_unnormalised_quaternion_warns(tmp_path):
    with pytest.warns(UserWarning, match="normalised"):
        traj = io.read_trajectory_tum(write(tmp_path, "0 0 0 0 0 0 0 2\n"))
    assert np.array_equal(traj.poses[0], np.eye(4))
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        io.read_trajectory_tum(write(tmp_path, "0 0 0 0 0 0 0 1.0005\n"))


def test_cue_round_trip(tmp_path, rng):
    n, k = 12, 5
    stamps = np.arange(n) * 0.1
    image = rng.normal(size=(n, 8))
    imu = rng.normal(size=(n, k, 6))
    cov = rng.normal(size=(n, 21))
    io.write_cues(tmp_path / "c.csv", stamps, image, imu, cov)
    s, i, m, c = io.read_cues(tmp_path / "c.csv")
    assert np.array_equal(s, stamps) and np.array_equal(i, image)
    assert np.array_equal(m, imu) and np.array_equal(c, cov)
    io.write_cues(tmp_path / "d.csv", stamps, image, imu)
    assert io.read_cues(tmp_path / "d.csv")[3] is None


def test_cue_header_layout():
    cols = io.cue_header(2, True)
    assert cols[:3] == ["timestamp", "img_cue_0", "img_cue_1"]
    assert cols[9:11] == ["imu_0_ax", "imu_0_ay"]
    assert cols[9 + 12 - 1] == "imu_1_gz"
    assert cols[-1] == "odom_cov_20" and len(cols) == 1 + 8 + 12 + 21


def test_cue_errors(tmp_path):
    good = ",".join(io.cue_header(1, False))
    with pytest.raises(ParseError) as info:
        io.read_cues(write(tmp_path, good + "\n" + ",".join(["0"] * 15) + "\n" + "1,2\n", "c.csv"))
    assert info.value.line == 3
    with pytest.raises(ParseError):
        io.read_cues(write(tmp_path, "time,a,b\n1,2,3\n", "c.csv"))
    with pytest.raises(DataError):
        io.read_cues(write(tmp_path, "", "c.csv"))


def test_dataset_round_trip(tmp_path):
    cfg = synth.SimConfig(n_trajectories=2, duration=4.0, bias_twist=(0.01, 0, 0, 0, 0, 0.001))
    data = synth.simulate(cfg, 3)
    io.save_dataset(data, tmp_path, {"seed": 3})
    manifest = json.loads((tmp_path / "manifest.json").read_text())
    assert manifest["seed"] == 3 and len(manifest["trajectories"]) == 2
    back = io.load_dataset(tmp_path)
    for a, b in zip(data, back):
        assert np.max(np.abs(a.estimated.poses - b.estimated.poses)) < 1e-9
        assert np.max(np.abs(a.ground_truth.poses - b.ground_truth.poses)) < 1e-9
        assert np.array_equal(a.image_cues, b.image_cues) and np.array_equal(a.imu_chunks, b.imu_chunks)
        assert np.array_equal(a.true_noise, b.true_noise) and np.array_equal(a.injected, b.injected)
        assert a.schedule.to_dict() == b.schedule.to_dict() and a.seed == b.seed
        # the reloaded estimate still decodes to the injected draw
        xi = lie.log_se3(lie.pose_error(b.ground_truth.poses, b.estimated.poses))
        np.testing.assert_allclose(xi, a.injected, atol=1e-9)


def test_manifest_errors(tmp_path):
    with pytest.raises(DataError):
        io.load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text("{not json")
    with pytest.raises(ParseError):
        io.load_manifest(tmp_path)
    (tmp_path / "manifest.json").write_text('{"version": 99, "trajectories": []}')
    with pytest.raises(ValidationError):
        io.load_manifest(tmp_path)


def test_misaligned_cues_are_rejected(tmp_path):
    data = synth.simulate(synth.SimConfig(n_trajectories=1, duration=2.0), 0)
    io.save_dataset(data, tmp_path)
    stamps, image, imu, cov = io.read_cues(tmp_path / "traj000.cues.csv")
    io.write_cues(tmp_path / "traj000.cues.csv", stamps + 0.01, image, imu, cov)
    with pytest.raises(ValidationError):
        io.load_dataset(tmp_path)
