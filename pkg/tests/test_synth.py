import csv

import numpy as np
import pytest

from gazecal.errors import ConfigError, SchemaError
from gazecal.metrics import euclidean_error
from gazecal.session import save_session
from gazecal.synth import build_config, generate_session, ingest_rgbdgaze_csv, oracle_gaze


def test_deterministic_bytes(tmp_path):
    cfg = build_config(seed=5, d=16, segment_seconds=3)
    a = save_session(generate_session(cfg), tmp_path / "a.jsonl")
    b = save_session(generate_session(build_config(seed=5, d=16, segment_seconds=3)), tmp_path / "b.jsonl")
    assert a.read_bytes() == b.read_bytes()


def test_zero_bias_zero_noise_base_is_exact():
    cfg = build_config(seed=0, d=4, segment_seconds=2,
                       profiles={lab: {"base_bias": [0, 0], "base_noise_std": 0} for lab in
                                 ("lying", "sitting", "standing", "walking")})
    s = generate_session(cfg)
    assert euclidean_error(s.base_pred, s.gaze)[0] == 0.0


def test_base_error_matches_monte_carlo():
    cfg = build_config(seed=1, d=2, labels=["sitting"], segment_seconds=400,
                       profiles={"sitting": {"base_bias": [1.2, 0.0], "base_noise_std": 0.5}})
    s = generate_session(cfg)
    assert len(s) >= 10_000
    eps = np.random.default_rng(99).standard_normal((400_000, 2)) * 0.5
    mc = np.hypot(1.2 + eps[:, 0], eps[:, 1]).mean()
    assert abs(euclidean_error(s.base_pred, s.gaze)[0] - mc) / mc < 0.02


def test_default_base_error_in_realistic_range():
    s = generate_session(build_config(seed=0, d=4))
    assert 1.8 <= euclidean_error(s.base_pred, s.gaze)[0] <= 2.8


def test_noiseless_oracle_inverse():
    cfg = build_config(seed=2, d=12, segment_seconds=2, feature_noise_std=0.0)
    s = generate_session(cfg)
    for g in s.meta.segments:
        y = oracle_gaze(cfg, g.label, s.feature[g.start:g.end])
        assert np.max(np.abs(y - s.gaze[g.start:g.end])) < 1e-9


def test_gaze_inside_screen():
    cfg = build_config(seed=3, d=4)
    s = generate_session(cfg)
    assert np.all(np.abs(s.gaze - 3.5 - np.array([0, 4])) <= np.array([3.5, 7.5]))


def test_motion_mismatch_penalty():
    """Least-squares linear map fit on one motion does worse on another."""
    worse = 0
    for seed in range(10):
        s = generate_session(build_config(seed=seed, d=64, segment_seconds=20))
        segs = s.meta.segments
        A = np.c_[s.feature[segs[0].start:segs[0].end], np.ones(len(segs[0]))]
        W, *_ = np.linalg.lstsq(A, s.gaze[segs[0].start:segs[0].end], rcond=None)

        def err(g):
            X = np.c_[s.feature[g.start:g.end], np.ones(len(g))]
            return euclidean_error(X @ W, s.gaze[g.start:g.end])[0]

        worse += all(err(g) > err(segs[0]) for g in segs[1:])
    assert worse == 10


def test_bad_config():
    with pytest.raises(ConfigError):
        build_config(d=1)
    with pytest.raises(ConfigError):
        build_config(segments=[["sitting", -3]])


def _write(path, header, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def test_ingest_minimal(tmp_path):
    header = ["t", "ax", "ay", "az", "f0", "f1", "gx", "gy", "posture"]
    _write(tmp_path / "p01.csv", header, [[0, 0, 0, 1, .1, .2, 1, 2, "sitting"], [0.02, 0, 0, 1, .3, .4, 1, 2, "sitting"]])
    (s,) = ingest_rgbdgaze_csv(tmp_path)
    assert len(s) == 2 and s.feature_dim == 2 and s.meta.segments[0].label == "sitting"


def test_ingest_missing_gaze(tmp_path):
    _write(tmp_path / "p01.csv", ["t", "ax", "ay", "az", "f0", "posture"], [[0, 0, 0, 1, .1, "sitting"]])
    with pytest.raises(SchemaError, match="gx, gy"):
        ingest_rgbdgaze_csv(tmp_path)


def test_ingest_resamples_imu(tmp_path):
    t_frames = np.arange(10) / 50.0
    _write(tmp_path / "p01.csv", ["t", "f0", "gx", "gy", "posture"],
           [[t, 0.0, 1, 1, "walking"] for t in t_frames])
    t_imu = np.arange(25) / 100.0 + 0.003
    acc = np.c_[np.sin(7 * t_imu), np.cos(3 * t_imu), t_imu ** 2]
    _write(tmp_path / "p01_imu.csv", ["t", "ax", "ay", "az"], np.c_[t_imu, acc].tolist())
    (s,) = ingest_rgbdgaze_csv(tmp_path)
    for c in range(3):
        assert np.allclose(s.acc[:, c], np.interp(t_frames, t_imu, acc[:, c]), atol=1e-12)
