"""Supervised IMU autoencoder for activity recognition.

Encoder: conv(k) -> dilated residual blocks with squeeze-excitation ->
temporal self-attention -> global average pool -> linear latent.  Two heads
read the latent: a classifier (latent -> hidden -> classes) and a decoder of
stride-2 transposed convolutions that rebuilds the ``T x M`` window.  The
training objective is ``r * MSE(reconstruction) + (1 - r) * CE``.

Windows are passed as ``(T, M)`` or ``(B, T, M)`` arrays of z-normalised
accelerometer samples.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import nn
from .calibrator import Adam
from .errors import TrainingError
from .session import ChannelStats, ImuWindow

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class HarConfig:
    window: int = 200
    in_channels: int = 3
    base_channels: tuple = (64, 128, 256)
    dilations: tuple = (1, 2, 4)
    conv_kernel: int = 7
    latent_dim: int = 256
    head_hidden: int = 512
    classes: int = 4
    dropout: float = 0.1
    r: float = 0.3
    se_ratio: int = 8

    def __post_init__(self):
        object.__setattr__(self, "base_channels", tuple(int(c) for c in self.base_channels))
        object.__setattr__(self, "dilations", tuple(int(d) for d in self.dilations))
        if len(self.base_channels) != len(self.dilations):
            raise ValueError("base_channels and dilations must have equal length")
        if not 0.0 <= self.r <= 1.0:
            raise ValueError(f"loss weight r must be in [0, 1], got {self.r}")
        if self.conv_kernel % 2 == 0:
            raise ValueError("conv_kernel must be odd")
        if self.classes < 1 or self.window < 1:
            raise ValueError("classes and window must be positive")

    @classmethod
    def full_scale(cls, classes=4):
        return cls(classes=classes)

    @classmethod
    def desk(cls, classes=4):
        return cls(window=64, base_channels=(8, 16, 32), latent_dim=32, head_hidden=64, classes=classes)

    @property
    def seed_length(self):
        return math.ceil(self.window / 2 ** len(self.base_channels))


class HarModel:
    def __init__(self, config: HarConfig, labels=None, stats: ChannelStats | None = None, seed=0):
        self.config = cfg = config
        self.labels = tuple(labels) if labels is not None else tuple(str(i) for i in range(cfg.classes))
        if len(self.labels) != cfg.classes:
            raise ValueError("number of labels must equal config.classes")
        self.stats = stats or ChannelStats.identity(cfg.in_channels)
        rng = np.random.default_rng(seed)
        ch = cfg.base_channels
        k = cfg.conv_kernel
        blocks = []
        prev = ch[0]
        for c, d in zip(ch, cfg.dilations):
            blocks.append(nn.ResidualBlock(prev, c, k, d, rng, cfg.dropout, cfg.se_ratio))
            prev = c
        self.encoder = nn.Sequential(
            nn.Conv1d(cfg.in_channels, ch[0], k, rng),
            *blocks,
            nn.ReLU(),
            nn.SelfAttention(ch[-1], rng),
            nn.GlobalAvgPool(),
            nn.Linear(ch[-1], cfg.latent_dim, rng),
        )
        self.classifier = nn.Sequential(
            nn.Linear(cfg.latent_dim, cfg.head_hidden, rng),
            nn.ReLU(),
            nn.Dropout(cfg.dropout),
            nn.Linear(cfg.head_hidden, cfg.classes, rng),
        )
        dec = [nn.Linear(cfg.latent_dim, ch[-1] * cfg.seed_length, rng),
               nn.Reshape((ch[-1], cfg.seed_length)), nn.ReLU()]
        outs = [ch[0]] + list(ch[:-1])
        for i in reversed(range(len(ch))):
            dec += [nn.ConvTranspose1d(ch[i], outs[i], k, rng, stride=2, dilation=cfg.dilations[i]), nn.ReLU()]
        dec += [nn.ConvTranspose1d(ch[0], cfg.in_channels, k, rng, stride=1), nn.Crop(cfg.window)]
        self.decoder = nn.Sequential(*dec)
        self.parts = {"encoder": self.encoder, "classifier": self.classifier, "decoder": self.decoder}

    # -- parameters ---------------------------------------------------------

    def named_parameters(self):
        out = {}
        for name, part in self.parts.items():
            out.update(part.named_parameters(name + "."))
        return out

    def named_grads(self):
        out = {}
        for name, part in self.parts.items():
            out.update(part.named_grads(name + "."))
        return out

    def set_parameters(self, values):
        params = self.named_parameters()
        for k, v in values.items():
            params[k][...] = v

    def state_dict(self):
        return {k: v.copy() for k, v in self.named_parameters().items()}

    def zero_(self):
        for v in self.named_parameters().values():
            v[...] = 0.0
        return self

    # -- forward ------------------------------------------------------------

    def _prep(self, windows):
        x = np.asarray(windows.samples if isinstance(windows, ImuWindow) else windows, dtype=np.float64)
        if x.ndim == 2:
            x = x[None]
        T, M = self.config.window, self.config.in_channels
        if x.ndim != 3 or x.shape[1:] != (T, M):
            raise ValueError(f"expected window(s) of shape ({T}, {M}), got {x.shape[-2:]}")
        return x.transpose(0, 2, 1)

    def forward(self, windows, train=False, rng=None):
        """Return (latent, logits, reconstruction as (B, M, T))."""
        x = self._prep(windows)
        z = self.encoder.forward(x, train, rng)
        logits = self.classifier.forward(z, train, rng)
        recon = self.decoder.forward(z, train, rng)
        return x, z, logits, recon

    def backward(self, dlogits, drecon):
        dz = self.classifier.backward(dlogits) + self.decoder.backward(drecon)
        self.encoder.backward(dz)

    def label_index(self, labels):
        idx = {lab: i for i, lab in enumerate(self.labels)}
        out = []
        for y in np.atleast_1d(labels):
            if isinstance(y, (int, np.integer)):
                if not 0 <= y < self.config.classes:
                    raise ValueError(f"label index {y} out of range")
                out.append(int(y))
            elif y in idx:
                out.append(idx[y])
            else:
                raise ValueError(f"unknown activity label {y!r}")
        return np.array(out, dtype=int)

    def normalize(self, raw_windows):
        """Apply the model's channel statistics to raw-g windows."""
        return (np.asarray(raw_windows, dtype=np.float64) - self.stats.mean) / self.stats.std

    def save(self, path):
        path = Path(path)
        arrays = {f"param/{k}": v for k, v in self.named_parameters().items()}
        meta = {
            "version": CHECKPOINT_VERSION,
            "config": asdict(self.config),
            "labels": list(self.labels),
            "stats_mean": list(map(float, self.stats.mean)),
            "stats_std": list(map(float, self.stats.std)),
        }
        np.savez(path, __meta__=np.array(json.dumps(meta)), **arrays)
        return path

    @classmethod
    def load(cls, path):
        z = np.load(Path(path))
        meta = json.loads(str(z["__meta__"]))
        if meta["version"] != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported HAR checkpoint version {meta['version']}")
        m = cls(HarConfig(**meta["config"]), meta["labels"],
                ChannelStats(np.array(meta["stats_mean"]), np.array(meta["stats_std"])))
        m.set_parameters({k[len("param/"):]: z[k] for k in z.files if k.startswith("param/")})
        return m


def encode(m: HarModel, w):
    """Latent vector(s); batched input gives a (B, latent_dim) array."""
    x = np.asarray(w.samples if isinstance(w, ImuWindow) else w)
    z = m.encoder.forward(m._prep(x))
    return z[0] if x.ndim == 2 else z


def classify(m: HarModel, w):
    x = np.asarray(w.samples if isinstance(w, ImuWindow) else w)
    _, _, logits, _ = m.forward(x)
    p = nn.softmax(logits)
    return p[0] if x.ndim == 2 else p


def decode(m: HarModel, z):
    """Reconstruction(s) as (T, M) / (B, T, M)."""
    z = np.asarray(z, dtype=np.float64)
    out = m.decoder.forward(np.atleast_2d(z)).transpose(0, 2, 1)
    return out[0] if z.ndim == 1 else out


def predict_labels(m: HarModel, windows, batch_size=512):
    """Argmax label for each window of a (B, T, M) normalised stack."""
    windows = np.asarray(windows)
    out = []
    for i in range(0, len(windows), batch_size):
        out.append(np.argmax(classify(m, windows[i:i + batch_size]), axis=1))
    idx = np.concatenate(out) if out else np.zeros(0, dtype=int)
    return [m.labels[i] for i in idx]


def _loss_terms(m, windows, labels, train=False, rng=None):
    x, z, logits, recon = m.forward(windows, train, rng)
    y = m.label_index(labels)
    B = x.shape[0]
    r = m.config.r
    diff = recon - x
    mse = np.mean(diff * diff, axis=(1, 2))
    logp = logits - logits.max(axis=1, keepdims=True)
    logp = logp - np.log(np.exp(logp).sum(axis=1, keepdims=True))
    ce = -logp[np.arange(B), y]
    loss = float(np.mean(r * mse + (1 - r) * ce))
    return loss, (x, diff, logp, y, B, r)


def har_loss(m: HarModel, windows, labels):
    """Batch mean of ``r * MSE(x, decode(encode(x))) + (1 - r) * CE``
    (dropout off)."""
    return _loss_terms(m, windows, labels)[0]


def har_loss_and_grads(m: HarModel, windows, labels, train=False, rng=None):
    loss, (x, diff, logp, y, B, r) = _loss_terms(m, windows, labels, train, rng)
    drecon = r * 2.0 * diff / (B * diff.shape[1] * diff.shape[2])
    dlogits = np.exp(logp)
    dlogits[np.arange(B), y] -= 1.0
    dlogits *= (1 - r) / B
    m.backward(dlogits, drecon)
    return loss, m.named_grads()


@dataclass
class HarTrainConfig:
    lr: float = 1e-4
    batch_size: int = 256
    epochs: int = 200
    plateau_patience: int = 10
    plateau_factor: float = 0.1
    early_stop_patience: int = 10
    min_delta: float = 1e-3
    val_fraction: float = 0.2
    seed: int = 0

    @classmethod
    def desk(cls, **kw):
        base = dict(lr=2e-3, batch_size=64, epochs=20, early_stop_patience=15)
        base.update(kw)
        return cls(**base)


@dataclass
class HarHistory:
    train_loss: list = field(default_factory=list)
    val_loss: list = field(default_factory=list)
    lr: list = field(default_factory=list)
    best_epoch: int = 0


def _stratified_split(y, frac, rng):
    val = []
    for c in np.unique(y):
        idx = np.flatnonzero(y == c)
        idx = idx[rng.permutation(len(idx))]
        val.extend(idx[: int(round(frac * len(idx)))])
    val = np.array(sorted(val), dtype=int)
    train = np.setdiff1d(np.arange(len(y)), val)
    return train, val


def train_har(m: HarModel, windows, labels, hyper: HarTrainConfig | None = None, val=None, log=None):
    """Adam training with plateau LR decay and early stopping.

    ``windows`` are normalised ``(N, T, M)``.  ``val`` is an optional
    ``(windows, labels)`` pair; otherwise a stratified split of the input is
    held out.  The model is updated in place to the best-validation
    checkpoint and returned together with the per-epoch history.
    """
    hyper = hyper or HarTrainConfig()
    history = HarHistory()
    if hyper.epochs <= 0:
        return m, history
    windows = np.asarray(windows, dtype=np.float64)
    y = m.label_index(labels)
    missing = [m.labels[c] for c in range(m.config.classes) if not np.any(y == c)]
    if missing:
        raise ValueError(f"no training examples for classes {missing}")
    rng = np.random.default_rng(hyper.seed)
    if val is None:
        tr, va = _stratified_split(y, hyper.val_fraction, rng)
        Xv, yv = windows[va], y[va]
        Xt, yt = windows[tr], y[tr]
    else:
        Xt, yt = windows, y
        Xv, yv = np.asarray(val[0], dtype=np.float64), m.label_index(val[1])

    def val_loss():
        total = 0.0
        for i in range(0, len(Xv), 512):
            total += har_loss(m, Xv[i:i + 512], yv[i:i + 512]) * len(yv[i:i + 512])
        return total / len(yv)

    params = m.named_parameters()
    opt = Adam(params, lr=hyper.lr)
    best_val = val_loss()
    best_state = m.state_dict()
    plateau_ref, plateau_wait, stop_wait = best_val, 0, 0
    for epoch in range(1, hyper.epochs + 1):
        order = rng.permutation(len(yt))
        total = 0.0
        for i in range(0, len(order), hyper.batch_size):
            idx = order[i:i + hyper.batch_size]
            loss, grads = har_loss_and_grads(m, Xt[idx], yt[idx], train=True, rng=rng)
            if not math.isfinite(loss):
                raise TrainingError("HAR loss diverged", epoch=epoch)
            opt.step(params, grads)
            total += loss * len(idx)
        v = val_loss()
        if not math.isfinite(v):
            raise TrainingError("HAR validation loss diverged", epoch=epoch)
        history.train_loss.append(total / len(yt))
        history.val_loss.append(v)
        history.lr.append(opt.lr)
        if log is not None:
            log(f"epoch {epoch}: train {history.train_loss[-1]:.4f} val {v:.4f} lr {opt.lr:.1e}")
        if v < best_val:
            best_val, best_state, history.best_epoch = v, m.state_dict(), epoch
        # plateau scheduler and early stopping share the min_delta criterion
        if v < plateau_ref - hyper.min_delta:
            plateau_ref, plateau_wait, stop_wait = v, 0, 0
        else:
            plateau_wait += 1
            stop_wait += 1
            if plateau_wait >= hyper.plateau_patience:
                opt.lr *= hyper.plateau_factor
                plateau_wait = 0
            if stop_wait >= hyper.early_stop_patience:
                break
    m.set_parameters(best_state)
    return m, history
