"""Synthetic multi-motion gaze sessions with a known feature->gaze map.

Each motion state owns an IMU distribution (gravity orientation, sensor
noise, optional gait oscillation) and an affine distortion of the visual
feature space.  Gaze follows a smooth-pursuit path over the screen, features
are ``A_m @ embed(y) + b_m + noise`` and the uncalibrated base model predicts
``y + bias_m + noise``.  Because every piece is known, tests can invert the
features exactly (:func:`oracle_gaze`).

Also hosts :func:`ingest_rgbdgaze_csv`, an adapter for per-participant CSV
exports of pre-extracted features.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError, SchemaError
from .session import SessionMeta, SessionStream, Segment, resample_imu

DEFAULT_LABELS = ("lying", "sitting", "standing", "walking")

# label -> (gravity direction in g, per-axis noise std, oscillation amplitude, frequency Hz)
_IMU_PRESETS = {
    "lying": ((0.00, 0.12, 0.99), (0.015, 0.015, 0.010), (0.0, 0.0, 0.0), 0.0),
    "sitting": ((0.05, 0.62, 0.78), (0.020, 0.020, 0.020), (0.0, 0.0, 0.0), 0.0),
    "standing": ((-0.30, 0.90, 0.32), (0.025, 0.025, 0.025), (0.0, 0.0, 0.0), 0.0),
    "walking": ((0.40, 0.82, 0.40), (0.050, 0.050, 0.050), (0.10, 0.15, 0.12), 2.0),
    "walking_maze": ((0.55, 0.45, 0.70), (0.060, 0.060, 0.060), (0.14, 0.10, 0.14), 1.6),
}
# label -> base-model bias in cm
_BIAS_PRESETS = {
    "lying": (1.5, -0.9),
    "sitting": (-1.2, 1.3),
    "standing": (1.1, 1.5),
    "walking": (-1.6, -1.1),
    "walking_maze": (1.7, -1.3),
}


@dataclass(frozen=True, eq=False)
class MotionProfile:
    label: str
    imu_mean: np.ndarray
    imu_cov: np.ndarray
    osc_amp: np.ndarray
    osc_freq: float
    A: np.ndarray          # (d, d) feature distortion
    b: np.ndarray          # (d,)
    base_bias: np.ndarray  # (2,) cm
    base_noise_std: float

    def __post_init__(self):
        cov = np.asarray(self.imu_cov, dtype=np.float64)
        if cov.shape != (3, 3) or not np.allclose(cov, cov.T):
            raise ConfigError(f"imu_cov for {self.label!r} must be a symmetric 3x3 matrix")
        if np.linalg.eigvalsh(cov).min() < -1e-12:
            raise ConfigError(f"imu_cov for {self.label!r} is not PSD")
        if self.osc_freq < 0 or self.base_noise_std < 0:
            raise ConfigError(f"negative frequency or noise in profile {self.label!r}")


@dataclass(frozen=True, eq=False)
class SynthConfig:
    seed: int
    profiles: tuple
    segments: tuple            # ((label, duration_s), ...)
    hz: float = 50.0
    d: int = 256
    screen_cm: tuple = (7.0, 15.0)
    embed_W: np.ndarray = None  # (d, 2), maps gaze cm -> feature
    embed_c: np.ndarray = None  # (d,)
    feature_noise_std: float = 0.5
    participant: str = "synthetic"
    recipe: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.d < 2:
            raise ConfigError("feature dimension d must be >= 2")
        if not self.hz > 0:
            raise ConfigError("hz must be > 0")
        labels = {p.label for p in self.profiles}
        for label, dur in self.segments:
            if label not in labels:
                raise ConfigError(f"segment label {label!r} has no motion profile")
            if not dur > 0:
                raise ConfigError(f"segment duration must be > 0, got {dur}")
        for p in self.profiles:
            if p.A.shape != (self.d, self.d) or p.b.shape != (self.d,):
                raise ConfigError(f"distortion of {p.label!r} does not match d={self.d}")
        if self.embed_W.shape != (self.d, 2) or self.embed_c.shape != (self.d,):
            raise ConfigError("embed map does not match d")

    def profile(self, label) -> MotionProfile:
        for p in self.profiles:
            if p.label == label:
                return p
        raise KeyError(label)

    def embed(self, y):
        return np.asarray(y) @ self.embed_W.T + self.embed_c

    def to_dict(self):
        return dict(self.recipe)


def _profile_rng(seed, label):
    tag = int.from_bytes(label.encode()[:8].ljust(8, b"\0"), "little")
    return np.random.default_rng([int(seed), tag])


def build_config(recipe: dict | None = None, **overrides) -> SynthConfig:
    """Materialise a :class:`SynthConfig` from a JSON-able recipe.

    Recipe keys (all optional): ``seed``, ``hz``, ``d``, ``screen_cm``,
    ``feature_noise_std``, ``labels`` or ``segments`` (list of
    ``[label, seconds]``), ``segment_seconds``, ``distortion_scale``,
    ``offset_scale``, ``base_noise_std``, ``embed_seed``, ``shared_distortion``
    and ``profiles`` (per-label overrides of ``imu_mean``, ``imu_std``,
    ``osc_amp``, ``osc_freq``, ``base_bias``, ``base_noise_std``).
    Distortions are drawn from ``seed`` so one seed is one "participant".
    """
    r = dict(recipe or {})
    r.update(overrides)
    seed = int(r.get("seed", 0))
    d = int(r.get("d", 256))
    hz = float(r.get("hz", 50.0))
    screen = tuple(float(v) for v in r.get("screen_cm", (7.0, 15.0)))
    if "segments" in r:
        segments = tuple((str(a), float(b)) for a, b in r["segments"])
    else:
        secs = float(r.get("segment_seconds", 40.0))
        segments = tuple((lab, secs) for lab in r.get("labels", DEFAULT_LABELS))
    dscale = float(r.get("distortion_scale", 0.7))
    oscale = float(r.get("offset_scale", 0.4))
    shared = bool(r.get("shared_distortion", False))
    noise_default = float(r.get("base_noise_std", 1.2))

    rng_e = np.random.default_rng(int(r.get("embed_seed", 12345)))
    half = np.asarray(screen) / 2.0
    embed_W = rng_e.standard_normal((d, 2)) / half
    embed_c = -embed_W @ half + 0.3 * rng_e.standard_normal(d)

    overrides_by_label = r.get("profiles", {})
    labels = []
    for lab, _ in segments:
        if lab not in labels:
            labels.append(lab)
    for lab in overrides_by_label:
        if lab not in labels:
            labels.append(lab)

    profiles = []
    for lab in labels:
        preset = _IMU_PRESETS.get(lab, ((0.0, 0.0, 1.0), (0.02, 0.02, 0.02), (0.0, 0.0, 0.0), 0.0))
        ov = overrides_by_label.get(lab, {})
        mean = np.asarray(ov.get("imu_mean", preset[0]), dtype=np.float64)
        if "imu_cov" in ov:
            cov = np.asarray(ov["imu_cov"], dtype=np.float64)
        else:
            cov = np.diag(np.square(np.asarray(ov.get("imu_std", preset[1]), dtype=np.float64)))
        rng_p = _profile_rng(0 if shared else seed, "" if shared else lab)
        A = np.eye(d) + dscale * rng_p.standard_normal((d, d)) / np.sqrt(d)
        b = oscale * rng_p.standard_normal(d)
        profiles.append(
            MotionProfile(
                label=lab,
                imu_mean=mean,
                imu_cov=cov,
                osc_amp=np.asarray(ov.get("osc_amp", preset[2]), dtype=np.float64),
                osc_freq=float(ov.get("osc_freq", preset[3])),
                A=A,
                b=b,
                base_bias=np.asarray(ov.get("base_bias", _BIAS_PRESETS.get(lab, (0.0, 0.0))), dtype=np.float64),
                base_noise_std=float(ov.get("base_noise_std", noise_default)),
            )
        )
    r_out = dict(r, seed=seed, d=d, hz=hz, screen_cm=list(screen), segments=[list(s) for s in segments])
    return SynthConfig(
        seed=seed,
        profiles=tuple(profiles),
        segments=segments,
        hz=hz,
        d=d,
        screen_cm=screen,
        embed_W=embed_W,
        embed_c=embed_c,
        feature_noise_std=float(r.get("feature_noise_std", 0.5)),
        participant=str(r.get("participant", f"synthetic-{seed}")),
        recipe=r_out,
    )


def load_config(path) -> dict:
    """Read a JSON or TOML recipe file."""
    path = Path(path)
    text = path.read_text()
    if path.suffix.lower() == ".toml":
        try:
            import tomllib
        except ImportError:  # Python < 3.11
            import tomli as tomllib
        return tomllib.loads(text)
    return json.loads(text)


def pursuit_path(t, screen_cm, rng):
    """Smooth-pursuit gaze trajectory (cm) covering most of the screen."""
    half = np.asarray(screen_cm) / 2.0
    f = np.array([0.11, 0.07]) * (1.0 + 0.1 * rng.uniform(-1, 1, 2))
    ph = rng.uniform(0, 2 * np.pi, 2)
    u = 0.9 * np.sin(2 * np.pi * f[None, :] * t[:, None] + ph[None, :])
    return half + u * half


def generate_session(cfg: SynthConfig) -> SessionStream:
    rng = np.random.default_rng([cfg.seed, 7])
    counts = [int(round(dur * cfg.hz)) for _, dur in cfg.segments]
    n = sum(counts)
    t = np.arange(n) / cfg.hz
    gaze = pursuit_path(t, cfg.screen_cm, rng)
    acc = np.empty((n, 3))
    feat = np.empty((n, cfg.d))
    base = np.empty((n, 2))
    motion = []
    segs = []
    start = 0
    axis_phase = np.array([0.0, np.pi / 2, np.pi / 3])
    for (label, _), cnt in zip(cfg.segments, counts):
        p = cfg.profile(label)
        sl = slice(start, start + cnt)
        ts = t[sl]
        osc = p.osc_amp[None, :] * np.sin(2 * np.pi * p.osc_freq * ts[:, None] + axis_phase + rng.uniform(0, 2 * np.pi))
        acc[sl] = p.imu_mean + osc + rng.multivariate_normal(np.zeros(3), p.imu_cov, size=cnt, method="cholesky")
        clean = cfg.embed(gaze[sl]) @ p.A.T + p.b
        feat[sl] = clean + cfg.feature_noise_std * rng.standard_normal((cnt, cfg.d))
        base[sl] = gaze[sl] + p.base_bias + p.base_noise_std * rng.standard_normal((cnt, 2))
        motion.extend([label] * cnt)
        segs.append(Segment(label, start, start + cnt))
        start += cnt
    meta = SessionMeta(cfg.participant, cfg.hz, cfg.screen_cm, tuple(segs))
    return SessionStream(t, acc, feat, gaze, motion, base, meta)


def oracle_gaze(cfg: SynthConfig, label, feature):
    """Exact inverse of the noiseless feature map for motion ``label``."""
    p = cfg.profile(label)
    M = p.A @ cfg.embed_W
    rhs = np.atleast_2d(feature) - (p.A @ cfg.embed_c + p.b)
    y, *_ = np.linalg.lstsq(M, rhs.T, rcond=None)
    return y.T


# ---------------------------------------------------------------------------
# CSV adapter
# ---------------------------------------------------------------------------

DEFAULT_MAPPING = {
    "t": "t",
    "ax": "ax",
    "ay": "ay",
    "az": "az",
    "gx": "gx",
    "gy": "gy",
    "label": "posture",
    "features": "f",  # prefix, or explicit list of column names
    "bx": "bx",
    "by": "by",
}


def _read_table(path):
    import csv

    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SchemaError("empty CSV", line=1)
    return rows[0], rows[1:]


def _feature_columns(header, spec):
    if isinstance(spec, (list, tuple)):
        return list(spec)
    cols = [c for c in header if c.startswith(spec) and c[len(spec):].isdigit()]
    return sorted(cols, key=lambda c: int(c[len(spec):]))


def _runs(labels):
    segs, start = [], 0
    for i in range(1, len(labels) + 1):
        if i == len(labels) or labels[i] != labels[start]:
            segs.append(Segment(labels[start], start, i))
            start = i
    return segs


def ingest_rgbdgaze_csv(directory, mapping=None, hz=None, screen_cm=(7.0, 15.0)) -> list:
    """One session per ``<participant>.csv`` in ``directory``.

    IMU columns may live in the same file or in ``<participant>_imu.csv``
    (columns t, ax, ay, az at any rate); the latter is linearly resampled to
    the frame timestamps.  Posture labels become motion segments.
    """
    m = dict(DEFAULT_MAPPING)
    m.update(mapping or {})
    directory = Path(directory)
    sessions = []
    for path in sorted(directory.glob("*.csv")):
        if path.stem.endswith("_imu"):
            continue
        header, rows = _read_table(path)
        imu_path = path.with_name(path.stem + "_imu.csv")
        fcols = _feature_columns(header, m["features"])
        required = [m["t"], m["gx"], m["gy"], m["label"]]
        if not imu_path.exists():
            required += [m["ax"], m["ay"], m["az"]]
        missing = [c for c in required if c not in header]
        if not fcols:
            missing.append(f"{m['features']}*" if isinstance(m["features"], str) else "features")
        else:
            missing += [c for c in fcols if c not in header]
        if missing:
            raise SchemaError(f"{path.name}: missing required columns: {', '.join(missing)}")
        idx = {c: i for i, c in enumerate(header)}

        def col(name, nullable=False):
            out = []
            for r, row in enumerate(rows, start=2):
                s = row[idx[name]].strip() if name in idx else ""
                if s == "":
                    if not nullable:
                        raise SchemaError(f"{path.name}: missing value", line=r, field=name)
                    out.append(np.nan)
                else:
                    out.append(float(s))
            return np.array(out)

        t = col(m["t"])
        feat = np.stack([col(c) for c in fcols], axis=1)
        gaze = np.stack([col(m["gx"], True), col(m["gy"], True)], axis=1)
        base = np.stack([col(m["bx"], True), col(m["by"], True)], axis=1)
        labels = [row[idx[m["label"]]].strip() for row in rows]
        if imu_path.exists():
            ih, irows = _read_table(imu_path)
            miss = [c for c in ("t", "ax", "ay", "az") if c not in ih]
            if miss:
                raise SchemaError(f"{imu_path.name}: missing required columns: {', '.join(miss)}")
            arr = np.array([[float(r[ih.index(c)]) for c in ("t", "ax", "ay", "az")] for r in irows])
            acc = resample_imu(arr[:, 0], arr[:, 1:], t)
        else:
            acc = np.stack([col(m["ax"]), col(m["ay"]), col(m["az"])], axis=1)
        rate = hz if hz is not None else (1.0 / float(np.median(np.diff(t))) if len(t) > 1 else 50.0)
        meta = SessionMeta(path.stem, rate, tuple(screen_cm), tuple(_runs(labels)))
        sessions.append(SessionStream(t, acc, feat, gaze, [lab or None for lab in labels], base, meta))
    return sessions
