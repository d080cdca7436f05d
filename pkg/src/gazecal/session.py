"""Time-aligned gaze sessions, IMU windowing and channel normalisation.

A session is stored column-wise (one numpy array per field) because every
consumer works on whole streams; :meth:`SessionStream.frame` gives the
per-frame view when one is needed.  Missing gaze / base predictions are NaN,
missing motion labels are ``None``.

On-disk formats
---------------
JSONL
    Optional header object on line 1 with keys ``participant``, ``hz``,
    ``screen_cm`` and ``segments`` (list of ``{"label", "start", "end"}``,
    frame indices, end exclusive).  Every following line is one frame:
    ``{"t", "acc": [3], "feature": [d], "gaze": [2]|null,
    "motion": str|null, "base_pred": [2]|null}``.
CSV
    Columns ``t,ax,ay,az,f0..f{d-1},gx,gy,motion,bx,by`` (empty cell =
    missing) plus a sidecar ``<stem>.meta.json`` holding the header object.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IntegrityError, SchemaError

DEFAULT_HZ = 50.0
DEFAULT_SCREEN_CM = (7.0, 15.0)


@dataclass(frozen=True)
class Segment:
    label: str
    start: int
    end: int

    def __len__(self):
        return self.end - self.start


@dataclass(frozen=True)
class SessionMeta:
    participant: str = "anonymous"
    hz: float = DEFAULT_HZ
    screen_cm: tuple = DEFAULT_SCREEN_CM
    segments: tuple = ()

    def __post_init__(self):
        if not self.hz > 0:
            raise IntegrityError(f"sampling rate must be > 0, got {self.hz}")
        prev_end = 0
        for seg in self.segments:
            if seg.end <= seg.start or seg.start < prev_end:
                raise IntegrityError(f"segments must be non-empty, ordered and non-overlapping: {seg}")
            prev_end = seg.end

    def to_json(self):
        return {
            "participant": self.participant,
            "hz": self.hz,
            "screen_cm": [float(v) for v in self.screen_cm],
            "segments": [{"label": s.label, "start": s.start, "end": s.end} for s in self.segments],
        }

    @classmethod
    def from_json(cls, obj, line=None):
        try:
            segs = tuple(Segment(str(s["label"]), int(s["start"]), int(s["end"])) for s in obj.get("segments", []))
            screen = tuple(float(v) for v in obj.get("screen_cm", DEFAULT_SCREEN_CM))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"bad header: {exc}", line=line) from None
        if len(screen) != 2:
            raise SchemaError("screen_cm must have 2 entries", line=line, field="screen_cm")
        return cls(
            participant=str(obj.get("participant", "anonymous")),
            hz=float(obj.get("hz", DEFAULT_HZ)),
            screen_cm=screen,
            segments=segs,
        )


@dataclass(frozen=True)
class ImuSample:
    t: float
    acc: np.ndarray


@dataclass(frozen=True)
class Frame:
    t: float
    imu: ImuSample
    feature: np.ndarray
    gaze: Optional[np.ndarray] = None
    motion_label: Optional[str] = None
    base_prediction: Optional[np.ndarray] = None


@dataclass(frozen=True)
class ImuWindow:
    samples: np.ndarray  # (T, 3)
    start_index: int

    @property
    def length(self):
        return self.samples.shape[0]


def _readonly(a, dtype=np.float64):
    a = np.array(a, dtype=dtype, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SessionStream:
    t: np.ndarray          # (N,)
    acc: np.ndarray        # (N, 3)
    feature: np.ndarray    # (N, d)
    gaze: np.ndarray       # (N, 2), NaN where missing
    motion: tuple          # N labels (str or None)
    base_pred: np.ndarray  # (N, 2), NaN where missing
    meta: SessionMeta = field(default_factory=SessionMeta)

    def __post_init__(self):
        object.__setattr__(self, "t", _readonly(self.t))
        object.__setattr__(self, "acc", _readonly(self.acc))
        object.__setattr__(self, "feature", _readonly(self.feature))
        object.__setattr__(self, "gaze", _readonly(self.gaze))
        object.__setattr__(self, "base_pred", _readonly(self.base_pred))
        object.__setattr__(self, "motion", tuple(self.motion))
        n = self.t.shape[0]
        if self.acc.shape != (n, 3):
            raise SchemaError(f"acc must be (N, 3), got {self.acc.shape}", field="acc")
        if self.feature.ndim != 2 or self.feature.shape[0] != n:
            raise SchemaError(f"feature must be (N, d), got {self.feature.shape}", field="feature")
        for name in ("gaze", "base_pred"):
            if getattr(self, name).shape != (n, 2):
                raise SchemaError(f"{name} must be (N, 2)", field=name)
        if len(self.motion) != n:
            raise SchemaError("motion must have one entry per frame", field="motion")
        if not (np.all(np.isfinite(self.acc)) and np.all(np.isfinite(self.t))):
            raise IntegrityError("non-finite timestamp or acceleration")
        bad = np.flatnonzero(np.diff(self.t) <= 0)
        if bad.size:
            raise IntegrityError(f"timestamps not strictly increasing at frame {bad[0] + 1}")
        if self.meta.segments and self.meta.segments[-1].end > n:
            raise IntegrityError("segment extends past the end of the stream")

    def __len__(self):
        return self.t.shape[0]

    def __eq__(self, other):
        if not isinstance(other, SessionStream):
            return NotImplemented
        return (
            self.meta == other.meta
            and self.motion == other.motion
            and all(
                np.array_equal(getattr(self, k), getattr(other, k), equal_nan=True)
                for k in ("t", "acc", "feature", "gaze", "base_pred")
            )
        )

    @property
    def feature_dim(self):
        return self.feature.shape[1]

    @property
    def hz(self):
        return self.meta.hz

    def frame(self, i) -> Frame:
        gaze = None if np.isnan(self.gaze[i]).any() else self.gaze[i]
        base = None if np.isnan(self.base_pred[i]).any() else self.base_pred[i]
        return Frame(
            t=float(self.t[i]),
            imu=ImuSample(float(self.t[i]), self.acc[i]),
            feature=self.feature[i],
            gaze=gaze,
            motion_label=self.motion[i],
            base_prediction=base,
        )

    def segment_of(self, index):
        """Segment containing frame ``index`` (None if unannotated)."""
        for seg in self.meta.segments:
            if seg.start <= index < seg.end:
                return seg
        return None

    def labels(self):
        """Distinct segment labels in order of first appearance."""
        seen = []
        for seg in self.meta.segments:
            if seg.label not in seen:
                seen.append(seg.label)
        return seen


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def _vec(obj, key, n, line, nullable=False):
    v = obj.get(key)
    if v is None:
        if nullable:
            return [math.nan] * n
        raise SchemaError("missing required value", line=line, field=key)
    if not isinstance(v, list) or (n is not None and len(v) != n):
        raise SchemaError(f"expected list of length {n}", line=line, field=key)
    try:
        return [float(x) for x in v]
    except (TypeError, ValueError):
        raise SchemaError("non-numeric entry", line=line, field=key) from None


def _check_monotone(ts, first_line):
    for i in range(1, len(ts)):
        if not ts[i] > ts[i - 1]:
            raise IntegrityError(f"timestamp {ts[i]} does not increase over {ts[i - 1]}", line=first_line + i)


def _load_jsonl(path):
    meta = SessionMeta()
    ts, acc, feat, gaze, motion, base = [], [], [], [], [], []
    d = None
    first_frame_line = None
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            if not raw.strip():
                continue
            try:
                obj = json.loads(raw)
            except json.JSONDecodeError as exc:
                raise SchemaError(f"invalid JSON: {exc.msg}", line=lineno) from None
            if not isinstance(obj, dict):
                raise SchemaError("expected a JSON object", line=lineno)
            if lineno == 1 and "t" not in obj:
                meta = SessionMeta.from_json(obj, line=lineno)
                continue
            if "t" not in obj:
                raise SchemaError("missing required value", line=lineno, field="t")
            if first_frame_line is None:
                first_frame_line = lineno
            try:
                ts.append(float(obj["t"]))
            except (TypeError, ValueError):
                raise SchemaError("non-numeric timestamp", line=lineno, field="t") from None
            acc.append(_vec(obj, "acc", 3, lineno))
            f = _vec(obj, "feature", d, lineno)
            if d is None:
                d = len(f)
                if d == 0:
                    raise SchemaError("empty feature vector", line=lineno, field="feature")
            feat.append(f)
            gaze.append(_vec(obj, "gaze", 2, lineno, nullable=True))
            m = obj.get("motion")
            motion.append(None if m is None else str(m))
            base.append(_vec(obj, "base_pred", 2, lineno, nullable=True))
    if not ts:
        raise SchemaError("session has no frames")
    _check_monotone(ts, first_frame_line)
    return SessionStream(np.array(ts), np.array(acc), np.array(feat), np.array(gaze), motion, np.array(base), meta)


def _meta_path(path):
    path = Path(path)
    return path.with_name(path.stem + ".meta.json")


def _load_csv(path):
    mp = _meta_path(path)
    meta = SessionMeta.from_json(json.loads(mp.read_text())) if mp.exists() else SessionMeta()
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError("empty CSV", line=1) from None
        fcols = sorted((c for c in header if c.startswith("f") and c[1:].isdigit()), key=lambda c: int(c[1:]))
        required = ["t", "ax", "ay", "az", "gx", "gy", "motion", "bx", "by"]
        missing = [c for c in required if c not in header]
        if not fcols:
            missing.append("f0")
        if missing:
            raise SchemaError(f"missing columns: {', '.join(missing)}", line=1)
        idx = {c: header.index(c) for c in header}

        def num(row, col, lineno, nullable=False):
            s = row[idx[col]].strip()
            if s == "":
                if nullable:
                    return math.nan
                raise SchemaError("missing required value", line=lineno, field=col)
            try:
                return float(s)
            except ValueError:
                raise SchemaError("non-numeric value", line=lineno, field=col) from None

        ts, acc, feat, gaze, motion, base = [], [], [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise SchemaError(f"expected {len(header)} cells, got {len(row)}", line=lineno)
            ts.append(num(row, "t", lineno))
            acc.append([num(row, c, lineno) for c in ("ax", "ay", "az")])
            feat.append([num(row, c, lineno) for c in fcols])
            gaze.append([num(row, c, lineno, True) for c in ("gx", "gy")])
            m = row[idx["motion"]].strip()
            motion.append(m or None)
            base.append([num(row, c, lineno, True) for c in ("bx", "by")])
    if not ts:
        raise SchemaError("session has no frames")
    _check_monotone(ts, 2)
    return SessionStream(np.array(ts), np.array(acc), np.array(feat), np.array(gaze), motion, np.array(base), meta)


def load_session(path, format=None) -> SessionStream:
    """Load a session from JSONL or CSV; format defaults to the file suffix."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "jsonl":
        return _load_jsonl(path)
    if fmt == "csv":
        return _load_csv(path)
    raise SchemaError(f"unknown session format {fmt!r}")


def _f(x):
    return None if math.isnan(x) else float(x)


def _pair(v):
    return None if np.isnan(v).any() else [float(x) for x in v]


def save_session(s: SessionStream, path, format=None):
    path = Path(path)
    fmt = (format or path.suffix.lstrip(".")).lower()
    if fmt == "jsonl":
        with open(path, "w", encoding="utf-8") as fh:
            fh.write(json.dumps(s.meta.to_json()) + "\n")
            for i in range(len(s)):
                rec = {
                    "t": float(s.t[i]),
                    "acc": [float(x) for x in s.acc[i]],
                    "feature": [float(x) for x in s.feature[i]],
                    "gaze": _pair(s.gaze[i]),
                    "motion": s.motion[i],
                    "base_pred": _pair(s.base_pred[i]),
                }
                fh.write(json.dumps(rec) + "\n")
    elif fmt == "csv":
        d = s.feature_dim
        header = ["t", "ax", "ay", "az"] + [f"f{j}" for j in range(d)] + ["gx", "gy", "motion", "bx", "by"]

        def cell(x):
            return "" if math.isnan(x) else repr(float(x))

        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(header)
            for i in range(len(s)):
                w.writerow(
                    [repr(float(s.t[i]))]
                    + [repr(float(x)) for x in s.acc[i]]
                    + [repr(float(x)) for x in s.feature[i]]
                    + [cell(x) for x in s.gaze[i]]
                    + [s.motion[i] or ""]
                    + [cell(x) for x in s.base_pred[i]]
                )
        _meta_path(path).write_text(json.dumps(s.meta.to_json(), indent=1) + "\n")
    else:
        raise SchemaError(f"unknown session format {fmt!r}")
    return path


# ---------------------------------------------------------------------------
# windowing and normalisation
# ---------------------------------------------------------------------------

def window_stride(T, overlap):
    if not 0.0 <= overlap < 1.0:
        raise ValueError(f"overlap must be in [0, 1), got {overlap}")
    # round half up; Python's round() is banker's rounding
    return max(1, int(math.floor(T * (1.0 - overlap) + 0.5)))


def window_starts(n, T, stride):
    if T <= 0 or T > n:
        raise ValueError(f"window length {T} invalid for {n} frames")
    return np.arange(0, n - T + 1, stride)


def window_stream(s: SessionStream, T: int, overlap: float = 0.0) -> list:
    stride = window_stride(T, overlap)
    starts = window_starts(len(s), T, stride)
    return [ImuWindow(s.acc[i:i + T], int(i)) for i in starts]


def stack_windows(acc, starts, T):
    """(n_windows, T, 3) array of windows beginning at ``starts``."""
    idx = np.asarray(starts)[:, None] + np.arange(T)[None, :]
    return np.asarray(acc)[idx]


@dataclass(frozen=True)
class ChannelStats:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, samples):
        x = np.asarray(samples, dtype=np.float64).reshape(-1, np.shape(samples)[-1])
        return cls(x.mean(axis=0), x.std(axis=0))

    @classmethod
    def identity(cls, channels=3):
        return cls(np.zeros(channels), np.ones(channels))


def _check_stats(stats):
    std = np.asarray(stats.std, dtype=np.float64)
    if np.any(~(std > 0)):
        raise ValueError("zero or negative std in channel stats; add an epsilon or use pooled stats")
    return np.asarray(stats.mean, dtype=np.float64), std


def normalize_array(x, stats):
    mean, std = _check_stats(stats)
    return (np.asarray(x, dtype=np.float64) - mean) / std


def denormalize_array(z, stats):
    mean, std = _check_stats(stats)
    return np.asarray(z, dtype=np.float64) * std + mean


def z_normalize(w: ImuWindow, stats: ChannelStats) -> ImuWindow:
    return ImuWindow(normalize_array(w.samples, stats), w.start_index)


def denormalize(w: ImuWindow, stats: ChannelStats) -> ImuWindow:
    return ImuWindow(denormalize_array(w.samples, stats), w.start_index)


def resample_imu(t_imu, acc, t_frames):
    """Linear interpolation of each accelerometer channel onto frame times."""
    t_imu = np.asarray(t_imu, dtype=np.float64)
    acc = np.asarray(acc, dtype=np.float64)
    return np.stack([np.interp(t_frames, t_imu, acc[:, c]) for c in range(acc.shape[1])], axis=1)


def concat_sessions(sessions: Sequence[SessionStream]) -> SessionStream:
    """Join sessions end to end, shifting time and segment indices."""
    ts, segs, offset_t, offset_i = [], [], 0.0, 0
    for s in sessions:
        dt = 1.0 / s.hz
        ts.append(s.t - s.t[0] + offset_t)
        segs.extend(Segment(g.label, g.start + offset_i, g.end + offset_i) for g in s.meta.segments)
        offset_t = ts[-1][-1] + dt
        offset_i += len(s)
    first = sessions[0].meta
    meta = SessionMeta(first.participant, first.hz, first.screen_cm, tuple(segs))
    return SessionStream(
        np.concatenate(ts),
        np.concatenate([s.acc for s in sessions]),
        np.concatenate([s.feature for s in sessions]),
        np.concatenate([s.gaze for s in sessions]),
        sum((s.motion for s in sessions), ()),
        np.concatenate([s.base_pred for s in sessions]),
        meta,
    )
