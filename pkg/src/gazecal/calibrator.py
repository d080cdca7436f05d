"""Personal gaze calibrator: a small MLP over visual features, retrained on
demand with fresh calibration pairs mixed with replayed past samples."""
from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TrainingError

FORMAT_VERSION = 1


@dataclass
class CalibratorModel:
    """``d -> hidden -> 2`` ReLU MLP.  ``out_offset`` is a fixed shift added
    to the output (the screen centre in the harness) so training starts from
    a sensible prediction; it is not trained."""

    W1: np.ndarray
    b1: np.ndarray
    W2: np.ndarray
    b2: np.ndarray
    out_offset: np.ndarray = field(default_factory=lambda: np.zeros(2))

    @classmethod
    def init(cls, d=256, hidden=128, seed=0, zero=False, out_offset=(0.0, 0.0)):
        if zero:
            return cls(np.zeros((hidden, d)), np.zeros(hidden), np.zeros((2, hidden)), np.zeros(2),
                       np.asarray(out_offset, dtype=np.float64))
        rng = np.random.default_rng(seed)
        W1 = rng.standard_normal((hidden, d)) * np.sqrt(2.0 / d)
        W2 = rng.standard_normal((2, hidden)) * np.sqrt(1.0 / hidden)
        return cls(W1, np.zeros(hidden), W2, np.zeros(2), np.asarray(out_offset, dtype=np.float64))

    @property
    def d(self):
        return self.W1.shape[1]

    def params(self):
        return {"W1": self.W1, "b1": self.b1, "W2": self.W2, "b2": self.b2}

    def copy(self):
        return copy.deepcopy(self)

    def forward(self, X):
        h_pre = X @ self.W1.T + self.b1
        h = np.maximum(h_pre, 0.0)
        return h @ self.W2.T + self.b2 + self.out_offset, (X, h_pre, h)

    def backward(self, cache, dy):
        X, h_pre, h = cache
        grads = {"W2": dy.T @ h, "b2": dy.sum(axis=0)}
        dh = (dy @ self.W2) * (h_pre > 0)
        grads["W1"] = dh.T @ X
        grads["b1"] = dh.sum(axis=0)
        return grads

    def save(self, path):
        np.savez(Path(path), version=FORMAT_VERSION, out_offset=self.out_offset, **self.params())

    @classmethod
    def load(cls, path):
        z = np.load(Path(path))
        if int(z["version"]) != FORMAT_VERSION:
            raise ValueError(f"unsupported calibrator checkpoint version {int(z['version'])}")
        return cls(z["W1"], z["b1"], z["W2"], z["b2"], z["out_offset"])


def _check_dim(m, X):
    X = np.asarray(X, dtype=np.float64)
    if X.shape[-1] != m.d:
        raise ValueError(f"feature dimension {X.shape[-1]} does not match calibrator input {m.d}")
    return X


def predict_gaze(m: CalibratorModel, feature):
    X = _check_dim(m, feature)
    single = X.ndim == 1
    y, _ = m.forward(np.atleast_2d(X))
    return y[0] if single else y


@dataclass(frozen=True, eq=False)
class CalibrationSet:
    features: np.ndarray  # (J, d)
    gaze: np.ndarray      # (J, 2)
    task_id: str = "task"
    frame_index: np.ndarray = None  # source frames, for disjointness audits
    imu: np.ndarray = None          # (J, 3) raw IMU at those frames

    def __len__(self):
        return self.features.shape[0]


@dataclass
class ReplayBuffer:
    capacity: int = 2000
    features: np.ndarray = None
    imu: np.ndarray = None
    gaze: np.ndarray = None
    task: np.ndarray = None  # object array of task ids

    def __len__(self):
        return 0 if self.features is None else self.features.shape[0]

    def tasks(self):
        if not len(self):
            return []
        out = []
        for t in self.task:
            if t not in out:
                out.append(t)
        return out

    def counts(self):
        return {t: int(np.sum(self.task == t)) for t in self.tasks()}

    def copy(self):
        return copy.deepcopy(self)

    def save(self, path):
        np.savez(
            Path(path), version=FORMAT_VERSION, capacity=self.capacity,
            features=self.features if len(self) else np.zeros((0, 0)),
            imu=self.imu if len(self) else np.zeros((0, 3)),
            gaze=self.gaze if len(self) else np.zeros((0, 2)),
            task=np.array([str(t) for t in self.task]) if len(self) else np.array([], dtype=str),
        )

    @classmethod
    def load(cls, path):
        z = np.load(Path(path))
        if int(z["version"]) != FORMAT_VERSION:
            raise ValueError("unsupported buffer snapshot version")
        if z["features"].shape[0] == 0:
            return cls(int(z["capacity"]))
        return cls(int(z["capacity"]), z["features"], z["imu"], z["gaze"], np.array(list(z["task"]), dtype=object))


def _balanced_quota(counts, capacity):
    """Per-task quotas summing to min(total, capacity), as even as the
    available counts allow (water-filling; leftover units go to earlier
    tasks)."""
    tasks = list(counts)
    quota = {t: 0 for t in tasks}
    remaining = min(capacity, sum(counts.values()))
    open_tasks = [t for t in tasks if counts[t] > 0]
    # tasks smaller than the fair share keep everything
    while open_tasks:
        share = remaining // len(open_tasks)
        small = [t for t in open_tasks if counts[t] <= share]
        if not small:
            break
        for t in small:
            quota[t] = counts[t]
            remaining -= counts[t]
        open_tasks = [t for t in open_tasks if t not in small]
    if open_tasks:
        share, extra = divmod(remaining, len(open_tasks))
        for i, t in enumerate(open_tasks):
            quota[t] = share + (1 if i < extra else 0)
    return quota


def _uniform_pick(n, k):
    """k evenly spaced indices out of n (deterministic uniform downsample)."""
    if k >= n:
        return np.arange(n)
    if k <= 0:
        return np.zeros(0, dtype=int)
    return np.floor(np.arange(k) * (n / k)).astype(int)


def update_buffer(buffer: ReplayBuffer, calib: CalibrationSet, raw_imu=None) -> ReplayBuffer:
    """Insert a task's (feature, imu, gaze) triples and rebalance.

    Returns a new buffer; ``buffer`` is left untouched.  Every task keeps an
    equal share (within one sample) of the capacity, trimmed by uniform
    downsampling within the task.
    """
    imu = calib.imu if raw_imu is None else np.asarray(raw_imu, dtype=np.float64)
    if imu is None:
        imu = np.full((len(calib), 3), np.nan)
    if len(calib) == 0:
        return buffer.copy()
    new_task = np.array([calib.task_id] * len(calib), dtype=object)
    if len(buffer):
        # a repeated task id replaces that task's old entries
        keep = buffer.task != calib.task_id
        F = np.concatenate([buffer.features[keep], calib.features])
        I = np.concatenate([buffer.imu[keep], imu])
        G = np.concatenate([buffer.gaze[keep], calib.gaze])
        T = np.concatenate([buffer.task[keep], new_task])
    else:
        F, I, G, T = calib.features, imu, calib.gaze, new_task
    order = []
    for t in T:
        if t not in order:
            order.append(t)
    counts = {t: int(np.sum(T == t)) for t in order}
    quota = _balanced_quota(counts, buffer.capacity)
    keep_idx = []
    for t in order:
        idx = np.flatnonzero(T == t)
        keep_idx.append(idx[_uniform_pick(len(idx), quota[t])])
    keep_idx = np.concatenate(keep_idx)
    return ReplayBuffer(buffer.capacity, F[keep_idx].copy(), I[keep_idx].copy(), G[keep_idx].copy(), T[keep_idx].copy())


def _euclid_loss(pred, y):
    """Mean Euclidean distance and its gradient wrt ``pred``."""
    e = pred - y
    r = np.sqrt(np.sum(e * e, axis=1))
    safe = np.where(r > 0, r, 1.0)
    g = np.where(r[:, None] > 0, e / safe[:, None], 0.0) / max(len(y), 1)
    return float(r.mean()) if len(y) else 0.0, g


def combined_loss(m: CalibratorModel, calib: CalibrationSet, buffer: ReplayBuffer, alpha=1.0):
    """mean calibration error + alpha * mean replay error (both Euclidean)."""
    pc, _ = m.forward(_check_dim(m, calib.features))
    lc, _ = _euclid_loss(pc, calib.gaze)
    if alpha == 0 or buffer is None or not len(buffer):
        return lc
    pb, _ = m.forward(buffer.features)
    lb, _ = _euclid_loss(pb, buffer.gaze)
    return lc + alpha * lb


def loss_and_grad(m, Xc, yc, Xb=None, yb=None, alpha=1.0):
    """Batch objective used in training and its gradient wrt all parameters."""
    pc, cache = m.forward(Xc)
    lc, gc = _euclid_loss(pc, yc)
    grads = m.backward(cache, gc)
    loss = lc
    if Xb is not None and len(Xb) and alpha != 0:
        pb, cache_b = m.forward(Xb)
        lb, gb = _euclid_loss(pb, yb)
        gb_all = m.backward(cache_b, alpha * gb)
        for k in grads:
            grads[k] = grads[k] + gb_all[k]
        loss += alpha * lb
    return loss, grads


class Adam:
    def __init__(self, params, lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8):
        self.lr, self.b1, self.b2, self.eps = lr, beta1, beta2, eps
        self.m = {k: np.zeros_like(v) for k, v in params.items()}
        self.v = {k: np.zeros_like(v) for k, v in params.items()}
        self.t = 0

    def step(self, params, grads):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for k, p in params.items():
            g = grads[k]
            self.m[k] = self.b1 * self.m[k] + (1 - self.b1) * g
            self.v[k] = self.b2 * self.v[k] + (1 - self.b2) * g * g
            p -= self.lr * (self.m[k] / c1) / (np.sqrt(self.v[k] / c2) + self.eps)


@dataclass
class RecalibrationResult:
    model: CalibratorModel
    epochs: int
    best_epoch: int
    val_history: list


REPLAY_MODES = ("batch", "size", "loss")


def recalibrate(
    m: CalibratorModel,
    calib: CalibrationSet,
    buffer: ReplayBuffer | None = None,
    alpha=1.0,
    replay_ratio=0.7,
    lr=1e-3,
    batch_size=64,
    max_epochs=200,
    patience=10,
    val_fraction=0.1,
    seed=0,
    return_info=False,
    lr_decay=0.5,
    decay_patience=4,
    replay_mode="batch",
):
    """Train a copy of ``m`` on ``calib`` plus replayed buffer samples.

    ``replay_mode`` fixes what ``replay_ratio`` (r) controls:

    - ``"batch"``: each batch holds a fraction r of buffer samples.
    - ``"size"``: a fixed pool of r/(1-r) times the calibration samples is
      drawn from the buffer once; batches come from the shuffled union.
    - ``"loss"``: equal-size calibration and buffer batches, the buffer
      term weighted by r/(1-r) on top of ``alpha``.

    A held-out ``val_fraction`` of ``calib`` drives early stopping
    and the best checkpoint is returned.  The learning rate is multiplied by
    ``lr_decay`` after ``decay_patience`` epochs without improvement (set
    ``lr_decay=1`` to disable).  Neither ``m`` nor ``buffer`` is modified.
    """
    if len(calib) == 0:
        raise ValueError("calibration set is empty")
    rng = np.random.default_rng(seed)
    X = _check_dim(m, calib.features)
    Y = np.asarray(calib.gaze, dtype=np.float64)
    n = len(Y)
    perm = rng.permutation(n)
    n_val = int(round(val_fraction * n)) if n >= 10 else 0
    val_idx, tr_idx = perm[:n_val], perm[n_val:]
    if n_val == 0:
        val_idx = tr_idx
    Xv, Yv = X[val_idx], Y[val_idx]

    if replay_mode not in REPLAY_MODES:
        raise ValueError(f"replay_mode must be one of {REPLAY_MODES}, got {replay_mode!r}")
    if not 0.0 <= replay_ratio < 1.0:
        raise ValueError(f"replay_ratio must be in [0, 1), got {replay_ratio}")
    use_replay = buffer is not None and len(buffer) > 0 and replay_ratio > 0
    n_rep, n_cal, w_rep = 0, batch_size, alpha
    pool = None
    if use_replay and replay_mode == "batch":
        n_rep = int(round(batch_size * replay_ratio))
        n_rep = min(max(n_rep, 1), batch_size - 1)
        n_cal = batch_size - n_rep
    elif use_replay and replay_mode == "loss":
        n_rep = batch_size
        w_rep = alpha * replay_ratio / (1.0 - replay_ratio)
    elif use_replay:
        k = min(len(buffer), max(1, int(round(len(tr_idx) * replay_ratio / (1.0 - replay_ratio)))))
        pool = np.sort(rng.choice(len(buffer), size=k, replace=False))

    model = m.copy()
    params = model.params()
    opt = Adam(params, lr=lr)
    best = model.copy()
    best_val, _ = _euclid_loss(model.forward(Xv)[0], Yv)
    best_epoch, wait = 0, 0
    history = [best_val]
    epoch = 0
    for epoch in range(1, max_epochs + 1):
        if pool is not None:
            # calibration rows are >= 0, pool rows are encoded as -1 - i
            union = np.concatenate([tr_idx, -1 - pool])
            order = union[rng.permutation(len(union))]
        else:
            order = tr_idx[rng.permutation(len(tr_idx))]
        n_batches = max(1, math.ceil(len(order) / n_cal))
        for bi in range(n_batches):
            idx = order[bi * n_cal:(bi + 1) * n_cal]
            if pool is not None:
                ridx, idx = -1 - idx[idx < 0], idx[idx >= 0]
                if not len(idx):  # batch of replayed rows only
                    loss, grads = loss_and_grad(model, buffer.features[ridx], buffer.gaze[ridx])
                    loss, grads = alpha * loss, {k: alpha * g for k, g in grads.items()}
                else:
                    loss, grads = loss_and_grad(model, X[idx], Y[idx], buffer.features[ridx], buffer.gaze[ridx],
                                                alpha)
            elif use_replay:
                ridx = rng.integers(0, len(buffer), size=n_rep)
                loss, grads = loss_and_grad(model, X[idx], Y[idx], buffer.features[ridx], buffer.gaze[ridx], w_rep)
            else:
                loss, grads = loss_and_grad(model, X[idx], Y[idx])
            if not math.isfinite(loss):
                raise TrainingError("calibrator loss is not finite", epoch=epoch)
            opt.step(params, grads)
        val, _ = _euclid_loss(model.forward(Xv)[0], Yv)
        history.append(val)
        if val < best_val:
            best_val, best, best_epoch, wait = val, model.copy(), epoch, 0
        else:
            wait += 1
            if wait >= patience:
                break
            if wait % decay_patience == 0:
                opt.lr *= lr_decay
    if return_info:
        return RecalibrationResult(best, epoch, best_epoch, history)
    return best

