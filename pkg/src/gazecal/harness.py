"""Experiment protocols: baselines, continual calibration runs, ablations,
replay sweeps and the one-off train x test matrix.

A *run* is one (method, session, seed).  Every run splits each segment into
a fixed calibration subset (``calib_fraction`` of its frames) and test
frames; methods only ever train on calibration frames and are scored on
test frames.  Runs are independent, so they can be farmed out to worker
processes; results are merged in a fixed order so reports do not depend on
scheduling.
"""
from __future__ import annotations

import csv
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import _accel
from .calibrator import (
    REPLAY_MODES,
    CalibrationSet,
    CalibratorModel,
    ReplayBuffer,
    predict_gaze,
    recalibrate,
    update_buffer,
)
from .errors import ConfigError, IntegrityError
from .metrics import macro_f1
from .motionnet import HarConfig, HarModel, HarTrainConfig, predict_labels, train_har
from .session import ChannelStats, SessionStream, stack_windows
from .synth import DEFAULT_LABELS, build_config, generate_session
from .trigger import CLASSIFIER_ONLY, HYBRID, TIME_BASED, TriggerConfig, absorb_task, new_state, observe

METHOD_KINDS = (
    "no_calibration",
    "one_off",
    "oracle_motion_aware",
    "macgaze_classifier",
    "macgaze_hybrid",
    "time_based",
)
_TRIGGER_MODE = {"macgaze_hybrid": HYBRID, "macgaze_classifier": CLASSIFIER_ONLY, "time_based": TIME_BASED}

# Published numbers kept for side-by-side reading; never asserted.
REFERENCE_VALUES = {
    "mean_error_cm": {"rgbdgaze_macgaze": 1.41, "motiongaze_macgaze": 1.92},
    "improvement_over_one_off": {"rgbdgaze": 0.199, "motiongaze": 0.317},
    "oneoff_mismatch_increase": 0.171,
    "replay_ratio_sweep": {"best_ratio": 0.7, "best_average_cm": 1.59},
    "trigger_mean_count": {"rgbdgaze_4_conditions": 5.61, "motiongaze_5_conditions": 19.60},
    "har_macro_f1": {"hhar": 0.93, "rgbdgaze": 0.80},
}


@dataclass(frozen=True)
class MethodSpec:
    kind: str
    replay_ratio: float = 0.7
    alpha: float = 1.0
    tau: float = 0.75
    tau_i: float = 0.95
    rho: float = 0.75
    interval: Optional[float] = None
    max_fires: Optional[int] = None
    continuous_novelty: bool = False
    replay_mode: str = "batch"
    name: Optional[str] = None

    def __post_init__(self):
        if self.kind not in METHOD_KINDS:
            raise ConfigError(f"unknown method kind {self.kind!r}; expected one of {', '.join(METHOD_KINDS)}")
        if self.kind == "time_based" and not (self.interval and self.interval > 0):
            raise ConfigError("time_based needs a positive interval")
        if not 0.0 <= self.replay_ratio < 1.0:
            raise ConfigError(f"replay_ratio must be in [0, 1), got {self.replay_ratio}")
        if self.replay_mode not in REPLAY_MODES:
            raise ConfigError(f"replay_mode must be one of {', '.join(REPLAY_MODES)}")
        if self.alpha < 0:
            raise ConfigError("alpha must be >= 0")
        for k in ("tau", "tau_i", "rho"):
            if not 0 < getattr(self, k) <= 1:
                raise ConfigError(f"{k} must be in (0, 1]")

    @property
    def label(self):
        return self.name or self.kind

    @property
    def uses_har(self):
        return self.kind in ("macgaze_classifier", "macgaze_hybrid")

    @property
    def continual(self):
        return self.kind in _TRIGGER_MODE


@dataclass
class ProtocolConfig:
    synth: dict = field(default_factory=dict)   # recipe for synthetic sessions
    sessions: Optional[list] = None             # real sessions; overrides synth
    seeds: tuple = (0,)
    permutations: object = "all"                # "all", an int, or explicit label orders
    calib_fraction: float = 0.10
    consensus_seconds: float = 4.0
    vote_stride_seconds: float = 0.5
    k_max: int = 10
    raw_buffer_cap: int = 2000
    buffer_capacity: int = 2000
    hidden: int = 128
    lr: float = 1e-3
    batch_size: int = 64
    max_epochs: int = 200
    patience: int = 10
    trajectory_seconds: float = 5.0
    har: dict = field(default_factory=dict)     # HarConfig.desk overrides
    har_train: dict = field(default_factory=dict)
    har_train_seeds: tuple = (1000, 1001, 1002, 1003)
    har_overlap: float = 0.75
    threads: int = 1
    write_frames: bool = False

    def __post_init__(self):
        if not 0.0 < self.calib_fraction < 1.0:
            raise ConfigError(f"calib_fraction must be in (0, 1), got {self.calib_fraction}")
        if not self.seeds:
            raise ConfigError("at least one seed is required")
        self.seeds = tuple(int(s) for s in self.seeds)
        self.har_train_seeds = tuple(int(s) for s in self.har_train_seeds)
        if self.consensus_seconds <= 0 or self.vote_stride_seconds <= 0:
            raise ConfigError("consensus window and vote stride must be positive")
        if self.threads < 1:
            raise ConfigError("threads must be >= 1")

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        known = {f for f in cls.__dataclass_fields__}
        extra = sorted(set(d) - known - {"methods"})
        if extra:
            raise ConfigError(f"unknown protocol keys: {', '.join(extra)}")
        d.pop("methods", None)
        for k in ("seeds", "har_train_seeds"):
            if k in d:
                d[k] = tuple(d[k])
        try:
            return cls(**d)
        except TypeError as e:
            raise ConfigError(str(e)) from None

    def to_json(self):
        d = asdict(self)
        d["sessions"] = None if self.sessions is None else [s.meta.participant for s in self.sessions]
        return d

    def labels(self):
        if self.sessions is not None:
            return tuple(dict.fromkeys(lab for s in self.sessions for lab in s.labels()))
        r = self.synth
        if "segments" in r:
            return tuple(dict.fromkeys(lab for lab, _ in r["segments"]))
        return tuple(r.get("labels", DEFAULT_LABELS))

    def orders(self):
        """Label orders to run; rotations so each motion leads once."""
        labels = self.labels()
        p = self.permutations
        if p == "all":
            return [labels[i:] + labels[:i] for i in range(len(labels))]
        if isinstance(p, int):
            return [labels[i:] + labels[:i] for i in range(min(p, len(labels)))]
        orders = [tuple(o) for o in p]
        for o in orders:
            if sorted(o) != sorted(labels):
                raise ConfigError(f"permutation {o} is not an ordering of {labels}")
        return orders

    def trigger_config(self, method: MethodSpec, **kw):
        return TriggerConfig(
            mode=_TRIGGER_MODE[method.kind],
            consensus_seconds=self.consensus_seconds,
            vote_stride_seconds=self.vote_stride_seconds,
            tau=method.tau,
            tau_i=method.tau_i,
            rho=method.rho,
            interval=method.interval or 30.0,
            max_fires=method.max_fires,
            k_max=self.k_max,
            raw_buffer_cap=self.raw_buffer_cap,
            continuous_novelty=method.continuous_novelty,
            **kw,
        )


# ---------------------------------------------------------------------------
# sessions and splits
# ---------------------------------------------------------------------------

def synth_session(cfg: ProtocolConfig, seed, order=None) -> SessionStream:
    recipe = dict(cfg.synth)
    recipe["seed"] = seed
    if order is not None:
        if "segments" in recipe:
            dur = dict(recipe["segments"])
            recipe["segments"] = [[lab, dur[lab]] for lab in order]
        else:
            recipe["labels"] = list(order)
    return generate_session(build_config(recipe))


def iter_sessions(cfg: ProtocolConfig):
    """Yield ``(seed, order_tag, session)`` in a fixed order."""
    if cfg.sessions is not None:
        for seed in cfg.seeds:
            for i, s in enumerate(cfg.sessions):
                yield seed, f"{s.meta.participant}#{i}", s
        return
    for seed in cfg.seeds:
        for order in cfg.orders():
            yield seed, "-".join(order), synth_session(cfg, seed, order)


@dataclass
class Split:
    calib: dict    # segment index -> frame indices
    test: np.ndarray

    def audit(self):
        cal = np.concatenate(list(self.calib.values())) if self.calib else np.zeros(0, int)
        return int(np.intersect1d(cal, self.test).size)


def split_session(s: SessionStream, fraction, seed) -> Split:
    rng = np.random.default_rng([int(seed), 11])
    has_gaze = ~np.isnan(s.gaze).any(axis=1)
    calib, test = {}, []
    for i, g in enumerate(s.meta.segments):
        idx = np.arange(g.start, g.end)
        idx = idx[has_gaze[idx]]
        k = max(1, int(round(fraction * len(idx)))) if len(idx) else 0
        pick = np.sort(rng.choice(idx, size=k, replace=False)) if k else np.zeros(0, int)
        calib[i] = pick
        test.append(np.setdiff1d(idx, pick))
    return Split(calib, np.concatenate(test) if test else np.zeros(0, int))


def calib_set(s: SessionStream, split: Split, seg_index) -> CalibrationSet:
    idx = split.calib[seg_index]
    return CalibrationSet(s.feature[idx], s.gaze[idx], s.meta.segments[seg_index].label, idx, s.acc[idx])


# ---------------------------------------------------------------------------
# HAR model
# ---------------------------------------------------------------------------

def har_dataset(sessions, T, overlap):
    """Windows fully inside one segment, labelled by that segment."""
    step = max(1, int(math.floor(T * (1.0 - overlap) + 0.5)))
    W, L = [], []
    for s in sessions:
        for g in s.meta.segments:
            if g.end - g.start < T:
                continue
            st = np.arange(g.start, g.end - T + 1, step)
            W.append(stack_windows(s.acc, st, T))
            L += [g.label] * len(st)
    if not W:
        raise ConfigError("no segment is long enough for a HAR window")
    return np.concatenate(W), L


def har_training_sessions(cfg: ProtocolConfig):
    if cfg.sessions is not None:
        return list(cfg.sessions)
    return [synth_session(cfg, s) for s in cfg.har_train_seeds]


def train_har_model(cfg: ProtocolConfig, seed=0, log=None):
    """Train the desk-scale activity model on the training seeds' sessions."""
    labels = tuple(sorted(cfg.labels()))
    hc = HarConfig(**{**asdict(HarConfig.desk(classes=len(labels))), **cfg.har})
    X, y = har_dataset(har_training_sessions(cfg), hc.window, cfg.har_overlap)
    stats = ChannelStats.fit(X)
    m = HarModel(hc, labels, stats, seed=seed)
    hyper = HarTrainConfig.desk(**{"seed": seed, **cfg.har_train})
    m, hist = train_har(m, m.normalize(X), y, hyper, log=log)
    return m, hist


def har_f1(m: HarModel, sessions, overlap=0.0):
    X, y = har_dataset(sessions, m.config.window, overlap)
    return macro_f1(y, predict_labels(m, m.normalize(X)))


# ---------------------------------------------------------------------------
# one run
# ---------------------------------------------------------------------------

@dataclass
class RunResult:
    method: str
    seed: int
    order: str
    frame_index: np.ndarray       # test frames
    frame_label: list
    errors: np.ndarray            # final per-frame Euclidean error
    snapshots: list               # [(t, {label: mean error})] after each calibration
    fires: list                   # decisions that fired
    decisions: list               # every tick decision (JSON dicts)
    trajectory: list              # [(t0, t1, label, mse, n)]
    n_recal: int = 0
    audit_overlap: int = 0
    labels_order: tuple = ()

    @property
    def n_fires(self):
        return len(self.fires)

    def motion_errors(self):
        lab = np.asarray(self.frame_label)
        return {k: float(self.errors[lab == k].mean()) for k in dict.fromkeys(self.frame_label)}


def _per_label(err, labels):
    lab = np.asarray(labels)
    return {k: float(err[lab == k].mean()) for k in dict.fromkeys(labels)}


def _errors(pred, truth):
    return np.hypot(pred[:, 0] - truth[:, 0], pred[:, 1] - truth[:, 1])


def tick_frames(s: SessionStream, T, stride_seconds):
    """Frame indices of trigger ticks: every stride, once a full window exists."""
    stride = max(1, int(round(stride_seconds * s.hz)))
    first = int(math.ceil((T - 1) / stride)) * stride
    return np.arange(first, len(s), stride)


def run_session(method: MethodSpec, s: SessionStream, cfg: ProtocolConfig, seed, har: HarModel = None,
                order_tag="", trigger_overrides=None) -> RunResult:
    if method.uses_har and har is None:
        raise ConfigError(f"{method.kind} needs a trained HAR model")
    if method.kind == "oracle_motion_aware" and any(m is None or m == "" for m in s.motion):
        raise ConfigError("oracle_motion_aware needs ground-truth motion labels")
    split = split_session(s, cfg.calib_fraction, seed)
    overlap = split.audit()
    if overlap:
        raise IntegrityError(f"{overlap} frames are both calibration and test frames")
    test = split.test
    labels = [s.motion[i] for i in test]
    Xt, Yt = s.feature[test], s.gaze[test]
    segs = s.meta.segments
    kw = dict(lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs, patience=cfg.patience)
    m0 = CalibratorModel.init(s.feature_dim, cfg.hidden, seed=seed, out_offset=np.asarray(s.meta.screen_cm) / 2.0)
    snapshots, fires, decisions = [], [], []
    # the calibrator active from each time onward, for the streaming trajectory
    timeline = []

    if method.kind == "no_calibration":
        err = _errors(s.base_pred[test], Yt)
        timeline.append((s.t[0], err))
        snapshots.append((float(s.t[0]), _per_label(err, labels)))
    elif method.kind == "oracle_motion_aware":
        err = np.empty(len(test))
        models = {}
        for i, g in enumerate(segs):
            if g.label not in models:
                models[g.label] = recalibrate(m0, calib_set(s, split, i), None, seed=seed * 1000 + i, **kw)
        lab = np.asarray(labels)
        for k, m in models.items():
            sel = lab == k
            err[sel] = _errors(predict_gaze(m, Xt[sel]), Yt[sel])
        timeline.append((s.t[0], err))
        snapshots.append((float(s.t[0]), _per_label(err, labels)))
    else:
        m = recalibrate(m0, calib_set(s, split, 0), None, seed=seed * 1000, **kw)
        err = _errors(predict_gaze(m, Xt), Yt)
        timeline.append((s.t[0], err))
        snapshots.append((float(s.t[0]), _per_label(err, labels)))
        if method.continual:
            buf = update_buffer(ReplayBuffer(cfg.buffer_capacity), calib_set(s, split, 0))
            tcfg = cfg.trigger_config(method, **(trigger_overrides or {}))
            state = new_state(tcfg, hz=s.hz, t_start=float(s.t[0]))
            if method.kind == "macgaze_hybrid":
                absorb_task(state, s.acc[split.calib[0]], t=float(s.t[0]), task_id=0)
            ticks = tick_frames(s, har.config.window if har is not None else 1, cfg.vote_stride_seconds)
            preds = [None] * len(ticks)
            if method.uses_har and len(ticks):
                T = har.config.window
                preds = predict_labels(har, har.normalize(stack_windows(s.acc, ticks - T + 1, T)))
            n_ctx = max(1, int(round(cfg.consensus_seconds * s.hz)))
            n_cal = 1
            for i, label in zip(ticks, preds):
                t = float(s.t[i])
                d = observe(state, t, label, s.acc[max(0, i - n_ctx + 1): i + 1])
                decisions.append(d.to_json())
                if not d.fire:
                    continue
                fires.append(d.to_json())
                k = int(np.searchsorted([g.end for g in segs], i, side="right"))
                m = recalibrate(m, calib_set(s, split, k), buf, alpha=method.alpha,
                                replay_ratio=method.replay_ratio, replay_mode=method.replay_mode,
                                seed=seed * 1000 + n_cal, **kw)
                n_cal += 1
                buf = update_buffer(buf, calib_set(s, split, k))
                if method.kind == "macgaze_hybrid":
                    absorb_task(state, s.acc[split.calib[k]], t=t, task_id=k)
                err = _errors(predict_gaze(m, Xt), Yt)
                timeline.append((t, err))
                snapshots.append((t, _per_label(err, labels)))
    final = timeline[-1][1]
    traj = _trajectory(s, test, labels, timeline, cfg.trajectory_seconds)
    return RunResult(method.label, int(seed), order_tag, test, labels, final, snapshots, fires, decisions, traj,
                     n_recal=len(timeline) - 1, audit_overlap=overlap, labels_order=tuple(g.label for g in segs))


def _trajectory(s, test, labels, timeline, chunk):
    """Streaming MSE per chunk: each test frame is scored by the calibrator
    that was active at its timestamp."""
    times = np.array([t for t, _ in timeline])
    t_test = s.t[test]
    which = np.searchsorted(times, t_test, side="right") - 1
    which = np.maximum(which, 0)
    err = np.array([timeline[w][1][j] for j, w in enumerate(which)])
    edges = np.arange(s.t[0], s.t[-1] + chunk, chunk)
    rows = []
    lab = np.asarray(labels)
    for a, b in zip(edges[:-1], edges[1:]):
        sel = (t_test >= a) & (t_test < b)
        if not np.any(sel):
            continue
        vals, counts = np.unique(lab[sel], return_counts=True)
        rows.append((float(a), float(b), str(vals[np.argmax(counts)]), float(np.mean(err[sel] ** 2)), int(sel.sum())))
    return rows


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------

def trigger_stats(counts):
    """Min / max / mean / median of per-session fire counts.

    ``counts`` may be integers or decision logs (lists of decisions).
    """
    c = [v if isinstance(v, (int, np.integer)) else sum(1 for d in v if _fired(d)) for v in counts]
    if not c:
        raise ValueError("need at least one session")
    a = np.asarray(c, dtype=float)
    return {"min": float(a.min()), "max": float(a.max()), "mean": float(a.mean()), "median": float(np.median(a))}


def _fired(d):
    if isinstance(d, dict):
        return d.get("reason", "none") != "none"
    return bool(d.fire)


def _fmt(x):
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    return str(x)


@dataclass
class Report:
    runs: list = field(default_factory=list)
    tables: dict = field(default_factory=dict)    # name -> (header, rows)
    meta: dict = field(default_factory=dict)

    def methods(self):
        return list(dict.fromkeys(r.method for r in self.runs))

    def motions(self):
        return list(dict.fromkeys(lab for r in self.runs for lab in r.frame_label))

    def runs_of(self, method):
        return [r for r in self.runs if r.method == method]

    def cell(self, method, motion):
        """Pooled per-frame (mean, std, n) over every run of ``method``; None if absent."""
        errs = [r.errors[np.asarray(r.frame_label) == motion] for r in self.runs_of(method)]
        errs = [e for e in errs if len(e)]
        if not errs:
            return None
        e = np.concatenate(errs)
        return float(e.mean()), float(e.std()), int(len(e))

    def cells(self):
        rows = []
        for m in self.methods():
            per = []
            for k in self.motions():
                c = self.cell(m, k)
                if c is None:
                    rows.append((m, k, "absent", "absent", 0))
                else:
                    rows.append((m, k) + c)
                    per.append(c[0])
            if per:
                rows.append((m, "average", float(np.mean(per)), float(np.std(per)), len(per)))
        return rows

    def mean_error(self, method, seed=None):
        """Average of per-motion means, optionally for one seed."""
        runs = [r for r in self.runs_of(method) if seed is None or r.seed == seed]
        sub = Report(runs)
        per = [sub.cell(method, k) for k in sub.motions()]
        return float(np.mean([c[0] for c in per if c is not None]))

    def trigger_table(self):
        rows = []
        for m in self.methods():
            st = trigger_stats([r.n_fires for r in self.runs_of(m)])
            rows.append((m, st["min"], st["max"], st["mean"], st["median"], len(self.runs_of(m))))
        return rows

    def merge(self, other: "Report"):
        runs = sorted(self.runs + other.runs, key=lambda r: (r.method, r.seed, r.order))
        return Report(runs, {**self.tables, **other.tables}, {**self.meta, **other.meta})

    def write(self, out, frames=False, decisions=True):
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "cells.csv", ("method", "motion", "mean_cm", "std_cm", "n_frames"), self.cells())
        _write_csv(out / "triggers.csv", ("method", "min", "max", "mean", "median", "n_sessions"), self.trigger_table())
        _write_csv(out / "runs.csv", ("method", "seed", "order", "n_fires", "n_recal", "mean_cm", "overlap"),
                   [(r.method, r.seed, r.order, r.n_fires, r.n_recal, float(np.mean(list(r.motion_errors().values()))),
                     r.audit_overlap) for r in self.runs])
        _write_csv(out / "trajectory.csv", ("method", "seed", "order", "t0", "t1", "motion", "mse", "n_frames"),
                   [(r.method, r.seed, r.order) + row for r in self.runs for row in r.trajectory])
        _write_csv(out / "snapshots.csv", ("method", "seed", "order", "t", "motion", "mean_cm"),
                   [(r.method, r.seed, r.order, t, k, v) for r in self.runs for t, per in r.snapshots
                    for k, v in per.items()])
        for name, (header, rows) in self.tables.items():
            _write_csv(out / f"{name}.csv", header, rows)
        if frames:
            _write_csv(out / "frames.csv", ("method", "seed", "order", "frame", "motion", "error_cm"),
                       [(r.method, r.seed, r.order, int(i), lab, e) for r in self.runs
                        for i, lab, e in zip(r.frame_index, r.frame_label, r.errors)])
        if decisions:
            ddir = out / "decisions"
            for r in self.runs:
                if r.decisions:
                    ddir.mkdir(exist_ok=True)
                    with open(ddir / f"{r.method}_{r.seed}_{r.order}.jsonl", "w", encoding="utf-8") as fh:
                        for d in r.decisions:
                            fh.write(json.dumps(d) + "\n")
        meta = dict(self.meta)
        meta.setdefault("references", REFERENCE_VALUES)
        meta["audit"] = {"calibration_test_overlap": int(sum(r.audit_overlap for r in self.runs))}
        meta["backend"] = _accel.BACKEND
        with open(out / "report.json", "w", encoding="utf-8") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True, default=_json_default)
            fh.write("\n")
        return out


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.integer, np.floating)):
        return o.item()
    if isinstance(o, (set, tuple)):
        return list(o)
    return str(o)


def _write_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_fmt(v) for v in row])


def verify_cells(out):
    """Recompute cells.csv from frames.csv; raise IntegrityError on mismatch."""
    out = Path(out)
    if not (out / "frames.csv").exists():
        raise IntegrityError(f"{out / 'frames.csv'} missing; rerun with write_frames enabled")
    pooled = {}
    with open(out / "frames.csv", newline="", encoding="utf-8") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            try:
                pooled.setdefault((row["method"], row["motion"]), []).append(float(row["error_cm"]))
            except (KeyError, ValueError):
                raise IntegrityError("malformed frames.csv row", line=line) from None
    checked = 0
    with open(out / "cells.csv", newline="", encoding="utf-8") as fh:
        for line, row in enumerate(csv.DictReader(fh), start=2):
            if row["motion"] == "average" or row["mean_cm"] == "absent":
                continue
            e = np.asarray(pooled.get((row["method"], row["motion"]), []))
            if not len(e):
                raise IntegrityError(f"cell {row['method']}/{row['motion']} has no frames", line=line)
            if abs(e.mean() - float(row["mean_cm"])) > 1e-9 or abs(e.std() - float(row["std_cm"])) > 1e-9:
                raise IntegrityError(f"cell {row['method']}/{row['motion']} does not match its frames", line=line)
            checked += 1
    return checked


# ---------------------------------------------------------------------------
# protocols
# ---------------------------------------------------------------------------

def _run_job(args):
    method, s, cfg, seed, har, tag, overrides = args
    return run_session(method, s, cfg, seed, har, tag, overrides)


def _map(jobs, threads):
    if threads <= 1 or len(jobs) <= 1:
        return [_run_job(j) for j in jobs]
    with ProcessPoolExecutor(max_workers=min(threads, len(jobs), os.cpu_count() or 1)) as ex:
        return list(ex.map(_run_job, jobs))


def _need_har(methods):
    return any(m.uses_har for m in methods)


def run_protocol(method, cfg: ProtocolConfig, har: HarModel = None) -> Report:
    """Run one method (or a list of methods) over every seed and label order."""
    methods = list(method) if isinstance(method, (list, tuple)) else [method]
    if _need_har(methods) and har is None:
        har, _ = train_har_model(cfg)
    sessions = list(iter_sessions(cfg))
    jobs = [(m, s, cfg, seed, har, tag, None) for m in methods for seed, tag, s in sessions]
    rep = Report(_map(jobs, cfg.threads))
    rep.meta = {"protocol": cfg.to_json(), "methods": [asdict(m) for m in methods]}
    return rep


def default_methods(interval=30.0):
    return [
        MethodSpec("no_calibration"),
        MethodSpec("one_off"),
        MethodSpec("oracle_motion_aware"),
        MethodSpec("macgaze_classifier"),
        MethodSpec("macgaze_hybrid"),
        MethodSpec("time_based", interval=interval),
    ]


def run_oneoff_matrix(cfg: ProtocolConfig) -> Report:
    """Calibrate once per motion and score on every motion's test frames."""
    labels = cfg.labels()
    per_seed = []
    kw = dict(lr=cfg.lr, batch_size=cfg.batch_size, max_epochs=cfg.max_epochs, patience=cfg.patience)
    sessions = ([(seed, s) for seed in cfg.seeds for s in cfg.sessions] if cfg.sessions is not None
                else [(seed, synth_session(cfg, seed)) for seed in cfg.seeds])
    for seed, s in sessions:
        if any(m is None or m == "" for m in s.motion):
            raise ConfigError("the one-off matrix needs motion labels")
        split = split_session(s, cfg.calib_fraction, seed)
        if split.audit():
            raise IntegrityError("calibration and test frames overlap")
        test = split.test
        tl = np.asarray([s.motion[i] for i in test])
        m0 = CalibratorModel.init(s.feature_dim, cfg.hidden, seed=seed, out_offset=np.asarray(s.meta.screen_cm) / 2.0)
        mat = np.full((len(labels), len(labels)), np.nan)
        for i, g in enumerate(s.meta.segments):
            a = labels.index(g.label)
            m = recalibrate(m0, calib_set(s, split, i), None, seed=seed * 1000 + i, **kw)
            for b, lab in enumerate(labels):
                sel = test[tl == lab]
                if len(sel):
                    mat[a, b] = _errors(predict_gaze(m, s.feature[sel]), s.gaze[sel]).mean()
        per_seed.append((seed, mat))
    stack = np.array([m for _, m in per_seed])
    mean = np.nanmean(stack, axis=0)
    rows = [(tr, te, float(mean[a, b])) for a, tr in enumerate(labels) for b, te in enumerate(labels)]
    diag = np.eye(len(labels), dtype=bool)
    seed_rows = [(seed, float(np.nanmean(m[diag])), float(np.nanmean(m[~diag]))) for seed, m in per_seed]
    rep = Report()
    rep.tables["oneoff_matrix"] = (("train_motion", "test_motion", "mean_cm"), rows)
    rep.tables["oneoff_by_seed"] = (("seed", "diagonal_mean_cm", "offdiagonal_mean_cm"), seed_rows)
    rep.meta = {"protocol": cfg.to_json(), "labels": list(labels),
                "matrix": mean, "diagonal_mean": float(np.nanmean(mean[diag])),
                "offdiagonal_mean": float(np.nanmean(mean[~diag]))}
    return rep


ABLATION_NAMES = {
    "full": "macgaze_hybrid",
    "no_hybrid": "without_hybrid_trigger",
    "no_replay": "without_replay",
    "no_motion": "without_motion_trigger",
}


def run_ablations(cfg: ProtocolConfig, har: HarModel = None, base: MethodSpec | None = None) -> Report:
    """Full system, classifier-only trigger, no replay, and a time-based
    trigger with as many calibrations as the full system made."""
    base = base or MethodSpec("macgaze_hybrid")
    if har is None:
        har, _ = train_har_model(cfg)
    variants = [
        replace(base, name=ABLATION_NAMES["full"]),
        replace(base, kind="macgaze_classifier", name=ABLATION_NAMES["no_hybrid"]),
        replace(base, replay_ratio=0.0, name=ABLATION_NAMES["no_replay"]),
    ]
    sessions = list(iter_sessions(cfg))
    jobs = [(m, s, cfg, seed, har, tag, None) for m in variants for seed, tag, s in sessions]
    runs = _map(jobs, cfg.threads)
    full = {(r.seed, r.order): r.n_fires for r in runs if r.method == ABLATION_NAMES["full"]}
    tjobs = []
    for seed, tag, s in sessions:
        n = full[(seed, tag)]
        duration = float(s.t[-1] - s.t[0]) + 1.0 / s.hz
        spec = replace(base, kind="time_based", interval=duration / (n + 1), max_fires=n,
                       name=ABLATION_NAMES["no_motion"])
        tjobs.append((spec, s, cfg, seed, har, tag, None))
    runs += _map(tjobs, cfg.threads)
    rep = Report(runs)
    rep.meta = {"protocol": cfg.to_json(), "variants": ABLATION_NAMES}
    return rep


def sweep_replay(cfg: ProtocolConfig, ratios: Sequence[float] | None = None, har: HarModel = None,
                 base: MethodSpec | None = None) -> Report:
    """Hybrid runs per replay ratio and starting motion."""
    ratios = [round(0.1 * i, 10) for i in range(1, 10)] if ratios is None else [float(r) for r in ratios]
    base = base or MethodSpec("macgaze_hybrid")
    if har is None:
        har, _ = train_har_model(cfg)
    sessions = list(iter_sessions(cfg))
    specs = [replace(base, replay_ratio=r, name=f"replay_{r:g}") for r in ratios]
    runs = _map([(m, s, cfg, seed, har, tag, None) for m in specs for seed, tag, s in sessions], cfg.threads)
    orders = list(dict.fromkeys(r.order for r in runs))
    grid, retention = [], []
    for spec, ratio in zip(specs, ratios):
        for o in orders:
            vals = [float(np.mean(list(r.motion_errors().values()))) for r in runs if r.method == spec.label and r.order == o]
            grid.append((ratio, o, float(np.mean(vals)), float(np.std(vals)), len(vals)))
        for r in runs:
            if r.method == spec.label:
                first = r.labels_order[0]
                retention.append((ratio, r.seed, r.order, r.snapshots[0][1][first], r.snapshots[-1][1][first]))
    col = []
    for ratio in ratios:
        vals = [g[2] for g in grid if g[0] == ratio]
        col.append((ratio, float(np.mean(vals)), float(np.std(vals))))
    rep = Report(runs)
    rep.tables["replay_grid"] = (("replay_ratio", "order", "mean_cm", "std_cm", "n_runs"), grid)
    rep.tables["replay_summary"] = (("replay_ratio", "mean_cm", "std_cm"), col)
    rep.tables["replay_retention"] = (("replay_ratio", "seed", "order", "first_task_initial_cm", "first_task_final_cm"),
                                      retention)
    rep.meta = {"protocol": cfg.to_json(), "ratios": ratios, "orders": orders}
    return rep
