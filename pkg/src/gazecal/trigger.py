"""When-to-recalibrate logic.

Activity predictions are smoothed by a consensus vote over the last ``c``
seconds.  When the stable activity changes, the raw accelerometer samples
of the consensus window are scored against a Gaussian mixture fitted on
previously absorbed samples; if more than ``rho`` of them fall below the
likelihood cutoff the pattern counts as novel and recalibration fires.

The likelihood cutoff is a confidence level rather than a raw density: with
``tau_i = 0.95`` the cutoff is the 5% quantile of the mixture's own
per-sample max-component likelihoods on its training buffer.
"""
from __future__ import annotations

import json
from collections import Counter, deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.special import logsumexp

from . import _accel
from .errors import StateError
from .session import ImuWindow

HYBRID = "hybrid"
CLASSIFIER_ONLY = "classifier_only"
TIME_BASED = "time_based"
MODES = (HYBRID, CLASSIFIER_ONLY, TIME_BASED)


def majority_vote(preds, tau):
    """Mode of ``preds`` if its share is at least ``tau``, else None.

    Ties between equally frequent labels go to the one seen first.
    """
    preds = list(preds)
    if not preds:
        raise ValueError("majority_vote needs at least one prediction")
    if not 0 < tau <= 1:
        raise ValueError(f"tau must be in (0, 1], got {tau}")
    counts = Counter(preds)
    best = max(counts.values())
    mode = next(p for p in preds if counts[p] == best)
    return mode if best / len(preds) >= tau else None


# ---------------------------------------------------------------------------
# Gaussian mixture
# ---------------------------------------------------------------------------

@dataclass(eq=False)
class GmmModel:
    weights: np.ndarray      # (K,)
    means: np.ndarray        # (K, D)
    covariances: np.ndarray  # (K, D, D)
    ridge: float = 1e-6
    likelihood_table: np.ndarray = None  # sorted max-component likelihoods of training samples
    ll_trace: list = field(default_factory=list)  # EM log-likelihoods of the selected K
    bic: dict = field(default_factory=dict)       # K -> BIC
    converged: bool = True

    def __post_init__(self):
        self._refresh()

    def _refresh(self):
        K, D = self.means.shape
        self.prec_chol = np.empty((K, D, D))
        self.log_det_chol = np.empty(K)
        for k in range(K):
            L = np.linalg.cholesky(self.covariances[k])
            P = np.linalg.solve(L, np.eye(D)).T
            self.prec_chol[k] = P
            self.log_det_chol[k] = np.sum(np.log(np.diag(P)))
        with np.errstate(divide="ignore"):
            self.log_weights = np.log(self.weights)

    @property
    def n_components(self):
        return self.means.shape[0]

    def weighted_log_densities(self, X):
        X = np.atleast_2d(np.asarray(X, dtype=np.float64))
        return _accel.weighted_log_density(X, self.log_weights, self.means, self.prec_chol, self.log_det_chol)

    def log_max_component_likelihood(self, X):
        return self.weighted_log_densities(X).max(axis=1)

    def score_samples(self, X):
        """Per-sample mixture log-likelihood."""
        return logsumexp(self.weighted_log_densities(X), axis=1)

    def predict(self, X):
        return np.argmax(self.weighted_log_densities(X), axis=1)

    def sample(self, n, rng):
        comp = rng.choice(self.n_components, size=n, p=self.weights)
        out = np.empty((n, self.means.shape[1]))
        for k in range(self.n_components):
            idx = np.flatnonzero(comp == k)
            if idx.size:
                out[idx] = rng.multivariate_normal(self.means[k], self.covariances[k], size=idx.size, method="cholesky")
        return out

    def cutoff(self, tau_i):
        """Likelihood level below which a sample counts as an outlier."""
        if self.likelihood_table is None or not len(self.likelihood_table):
            raise StateError("GMM has no likelihood table; fit it first")
        return float(np.quantile(self.likelihood_table, 1.0 - tau_i))

    def to_json(self):
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
            "ridge": self.ridge,
            "likelihood_table": None if self.likelihood_table is None else self.likelihood_table.tolist(),
        }


def _floor_cov(S, ridge):
    S = 0.5 * (S + S.T)
    w, V = np.linalg.eigh(S)
    if w.min() >= ridge:
        return S
    return (V * np.maximum(w, ridge)) @ V.T


def _kmeans_pp(X, K, rng, n_iter=10):
    n = len(X)
    centers = [X[rng.integers(n)]]
    d2 = np.sum((X - centers[0]) ** 2, axis=1)
    for _ in range(1, K):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(X[idx])
        d2 = np.minimum(d2, np.sum((X - X[idx]) ** 2, axis=1))
    C = np.array(centers)
    for _ in range(n_iter):
        lab = np.argmin(((X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)
        for k in range(K):
            if np.any(lab == k):
                C[k] = X[lab == k].mean(axis=0)
    return np.argmin(((X[:, None, :] - C[None]) ** 2).sum(-1), axis=1)


def _m_step(X, resp, ridge):
    n, D = X.shape
    nk = resp.sum(axis=0) + 10 * np.finfo(float).eps
    means = (resp.T @ X) / nk[:, None]
    covs = np.empty((len(nk), D, D))
    for k in range(len(nk)):
        diff = X - means[k]
        covs[k] = _floor_cov((resp[:, k, None] * diff).T @ diff / nk[k], ridge)
    return nk / n, means, covs


def _lse(a):
    m = a.max(axis=1)
    return m + np.log(np.exp(a - m[:, None]).sum(axis=1))


def em(X, K, rng, ridge=1e-6, max_iter=200, tol=1e-5):
    """EM for a full-covariance mixture from a k-means++ start.

    Stops when the mean per-sample log-likelihood gains less than ``tol``.

    Returns (GmmModel, total log-likelihood, trace of log-likelihoods).
    """
    lab = _kmeans_pp(X, K, rng)
    resp = np.zeros((len(X), K))
    resp[np.arange(len(X)), lab] = 1.0
    g = GmmModel(*_m_step(X, resp, ridge), ridge=ridge)
    trace = []
    converged = False
    for _ in range(max_iter):
        logp = g.weighted_log_densities(X)
        log_norm = _lse(logp)
        ll = float(log_norm.sum())
        trace.append(ll)
        if len(trace) > 1 and trace[-1] - trace[-2] <= tol * len(X):
            converged = True
            break
        resp = np.exp(logp - log_norm[:, None])
        g = GmmModel(*_m_step(X, resp, ridge), ridge=ridge)
    g.ll_trace = trace
    g.converged = converged
    return g, trace[-1], trace


def n_free_parameters(K, D):
    return (K - 1) + K * D + K * D * (D + 1) // 2


def fit_gmm(samples, k_max=10, seed=0, ridge=1e-6, max_iter=200) -> GmmModel:
    """Fit K = 1..k_max mixtures and keep the lowest-BIC one.

    ``k_max`` is capped at ``len(samples) // 10`` so every component has at
    least ten samples on average.  Identical samples give a single component
    with a ridge covariance.
    """
    X = np.asarray(samples, dtype=np.float64)
    if X.ndim != 2 or len(X) < 10:
        raise ValueError(f"need at least 10 samples to fit a GMM, got {len(X)}")
    n, D = X.shape
    k_max = max(1, min(int(k_max), n // 10))
    spread = X.max(axis=0) - X.min(axis=0)
    if np.all(spread == 0):
        g = GmmModel(np.ones(1), X[:1].copy(), ridge * np.eye(D)[None], ridge=ridge)
        g.bic = {1: float("nan")}
        g.likelihood_table = np.sort(np.exp(g.log_max_component_likelihood(X)))
        return g
    best, best_bic, bics = None, np.inf, {}
    for K in range(1, k_max + 1):
        rng = np.random.default_rng([seed, K])
        g, ll, _ = em(X, K, rng, ridge, max_iter)
        bic = -2.0 * ll + n_free_parameters(K, D) * np.log(n)
        bics[K] = float(bic)
        if bic < best_bic:
            best, best_bic = g, bic
    best.bic = bics
    best.likelihood_table = np.sort(np.exp(best.log_max_component_likelihood(X)))
    return best


def max_component_likelihood(g: GmmModel, x):
    """``max_k pi_k N(x | mu_k, Sigma_k)``; vectorised over rows of ``x``."""
    x = np.asarray(x, dtype=np.float64)
    p = np.exp(g.log_max_component_likelihood(np.atleast_2d(x)))
    return float(p[0]) if x.ndim == 1 else p


def outlier_ratio(g: GmmModel, X, tau_i=0.95):
    """Fraction of rows of ``X`` whose max-component likelihood is below the
    ``tau_i`` confidence cutoff."""
    if g is None:
        raise StateError("outlier_ratio needs a fitted GMM")
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    if len(X) == 0:
        raise ValueError("outlier_ratio needs at least one sample")
    cut = g.cutoff(tau_i)
    p = np.exp(g.log_max_component_likelihood(X))
    return float(np.mean(p < cut))


# ---------------------------------------------------------------------------
# state machine
# ---------------------------------------------------------------------------

@dataclass
class TriggerConfig:
    mode: str = HYBRID
    consensus_seconds: float = 4.0
    vote_stride_seconds: float = 0.5
    tau: float = 0.75
    tau_i: float = 0.95
    rho: float = 0.75
    interval: float = 30.0        # time_based only
    max_fires: Optional[int] = None  # time_based only
    k_max: int = 10
    ridge: float = 1e-6
    raw_buffer_cap: int = 2000
    absorb_samples: int = 400     # per absorbed task, after downsampling
    continuous_novelty: bool = False
    feature_space: str = "raw"    # "latent" only for the clustering comparison
    gmm_seed: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown trigger mode {self.mode!r}")
        if self.feature_space not in ("raw", "latent"):
            raise ValueError("feature_space must be 'raw' or 'latent'")
        for name in ("tau", "tau_i", "rho"):
            v = getattr(self, name)
            if not 0 <= v <= 1:
                raise ValueError(f"{name} must be in [0, 1], got {v}")


@dataclass
class TriggerDecision:
    t: float
    fire: bool
    reason: str = "none"  # activity_change | novel_pattern | timer | none
    stable_label: Optional[str] = None
    r_t: Optional[float] = None

    def __post_init__(self):
        if self.fire and self.reason == "none":
            raise ValueError("a firing decision needs a reason")

    def to_json(self):
        return {"t": self.t, "reason": self.reason, "stable_label": self.stable_label, "r_t": self.r_t}


@dataclass
class TriggerState:
    config: TriggerConfig
    hz: float = 50.0
    t_start: float = 0.0
    votes: deque = field(default_factory=deque)    # (t, label)
    recent: deque = field(default_factory=deque)   # (frame index, raw sample)
    current_stable_label: Optional[str] = None
    raw_buffer: Optional[np.ndarray] = None
    raw_task: list = field(default_factory=list)   # task id per buffer row
    gmm: Optional[GmmModel] = None
    first_tick: Optional[float] = None
    last_fire: Optional[float] = None
    n_fired: int = 0
    n_tasks: int = 0
    last_absorb: Optional[float] = None
    log: list = field(default_factory=list)

    @property
    def window_samples(self):
        return max(1, int(round(self.config.consensus_seconds * self.hz)))

    def consensus_samples(self):
        return np.array([s for _, s in self.recent]) if self.recent else np.zeros((0, 3))

    def write_log(self, path):
        with open(path, "w", encoding="utf-8") as fh:
            for d in self.log:
                fh.write(json.dumps(d.to_json()) + "\n")


def new_state(config: TriggerConfig | None = None, hz=50.0, t_start=0.0) -> TriggerState:
    return TriggerState(config or TriggerConfig(), hz=hz, t_start=t_start)


def _push_samples(state, window: ImuWindow):
    last = state.recent[-1][0] if state.recent else -1
    for i, row in enumerate(np.asarray(window.samples)):
        idx = window.start_index + i
        if idx > last:
            state.recent.append((idx, np.array(row, dtype=np.float64)))
    keep_from = state.recent[-1][0] - state.window_samples + 1 if state.recent else 0
    while state.recent and state.recent[0][0] < keep_from:
        state.recent.popleft()


def observe(state: TriggerState, t, label, samples=None) -> TriggerDecision:
    """Advance the state machine by one tick given an activity prediction.

    ``samples`` overrides the consensus-window samples used for the novelty
    test (rows of raw IMU, or latent vectors in latent mode).
    """
    cfg = state.config
    if state.first_tick is None:
        state.first_tick = t
    if cfg.mode == TIME_BASED:
        due = state.t_start + (state.n_fired + 1) * cfg.interval
        capped = cfg.max_fires is not None and state.n_fired >= cfg.max_fires
        if not capped and t + 1e-9 >= due:
            d = TriggerDecision(t, True, "timer")
            state.n_fired += 1
            state.last_fire = t
        else:
            d = TriggerDecision(t, False)
        state.log.append(d)
        return d

    state.votes.append((t, label))
    while state.votes and state.votes[0][0] <= t - cfg.consensus_seconds + 1e-9:
        state.votes.popleft()
    if t - state.first_tick + 1e-9 < cfg.consensus_seconds:
        d = TriggerDecision(t, False, stable_label=state.current_stable_label)
        state.log.append(d)
        return d
    stable = majority_vote([lab for _, lab in state.votes], cfg.tau)
    fire, reason, r_t = False, "none", None
    X = state.consensus_samples() if samples is None else np.atleast_2d(samples)
    if stable is not None and stable != state.current_stable_label:
        if cfg.mode == CLASSIFIER_ONLY:
            if state.current_stable_label is not None:
                fire, reason = True, "activity_change"
        else:
            if state.gmm is None:
                raise StateError("hybrid trigger needs a fitted GMM; call absorb_task after the first calibration")
            r_t = outlier_ratio(state.gmm, X, cfg.tau_i)
            if r_t > cfg.rho:
                fire, reason = True, "novel_pattern"
        state.current_stable_label = stable
    elif cfg.continuous_novelty and cfg.mode == HYBRID and stable is not None and state.gmm is not None:
        r_t = outlier_ratio(state.gmm, X, cfg.tau_i)
        if r_t > cfg.rho:
            fire, reason = True, "novel_pattern"
    if fire:
        state.n_fired += 1
        state.last_fire = t
    d = TriggerDecision(t, fire, reason, stable, r_t)
    state.log.append(d)
    return d


def step(state: TriggerState, t, window: ImuWindow, har=None) -> TriggerDecision:
    """Classify ``window`` (raw g units) with ``har`` and advance the state."""
    cfg = state.config
    if cfg.mode == TIME_BASED:
        return observe(state, t, None)
    from .motionnet import classify, encode

    T, M = har.config.window, har.config.in_channels
    samples = np.asarray(window.samples)
    if samples.shape != (T, M):
        raise ValueError(f"window shape {samples.shape} does not match HAR input ({T}, {M})")
    _push_samples(state, window)
    x = har.normalize(samples)
    label = har.labels[int(np.argmax(classify(har, x)))]
    latent = None
    if cfg.feature_space == "latent":
        state.__dict__.setdefault("latents", deque())
        state.latents.append((t, encode(har, x)))
        while state.latents[0][0] <= t - cfg.consensus_seconds + 1e-9:
            state.latents.popleft()
        latent = np.array([z for _, z in state.latents])
    return observe(state, t, label, latent)


def absorb_task(state: TriggerState, X_t, t=None, task_id=None) -> TriggerState:
    """Merge a downsampled copy of ``X_t`` into the raw buffer and refit.

    When the buffer exceeds its cap, rows of the oldest task are evicted
    uniformly until it fits.
    """
    cfg = state.config
    X = np.asarray(X_t, dtype=np.float64).reshape(-1, np.shape(X_t)[-1] if np.ndim(X_t) > 1 else 3)
    if t is not None:
        state.last_absorb = t
    if len(X) == 0:
        return state
    if len(X) > cfg.absorb_samples:
        X = X[np.floor(np.arange(cfg.absorb_samples) * (len(X) / cfg.absorb_samples)).astype(int)]
    task = task_id if task_id is not None else state.n_tasks
    state.n_tasks += 1
    if state.raw_buffer is None:
        buf, tasks = X.copy(), [task] * len(X)
    else:
        buf = np.concatenate([state.raw_buffer, X])
        tasks = state.raw_task + [task] * len(X)
    while len(buf) > cfg.raw_buffer_cap:
        oldest = tasks[0]
        idx = [i for i, tk in enumerate(tasks) if tk == oldest]
        excess = len(buf) - cfg.raw_buffer_cap
        if excess >= len(idx):
            drop = set(idx)
        else:
            drop = {idx[j] for j in np.floor(np.arange(excess) * (len(idx) / excess)).astype(int)}
        keep = [i for i in range(len(buf)) if i not in drop]
        buf = buf[keep]
        tasks = [tasks[i] for i in keep]
    state.raw_buffer = buf
    state.raw_task = tasks
    state.gmm = fit_gmm(buf, cfg.k_max, seed=cfg.gmm_seed, ridge=cfg.ridge)
    return state
