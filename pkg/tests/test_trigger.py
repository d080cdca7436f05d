import itertools
import json
from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gazecal.errors import StateError
from gazecal.metrics import nmi
from gazecal.session import ImuWindow
from gazecal.trigger import (
    GmmModel,
    TriggerConfig,
    absorb_task,
    em,
    fit_gmm,
    majority_vote,
    max_component_likelihood,
    new_state,
    observe,
    outlier_ratio,
    step,
)


def test_majority_examples():
    assert majority_vote(list("AAAB"), 0.75) == "A"
    assert majority_vote(list("AABB"), 0.75) is None
    with pytest.raises(ValueError):
        majority_vote([], 0.5)


def _brute_vote(preds, tau):
    counts = Counter(preds)
    best = max(counts.values())
    for p in preds:
        if counts[p] == best:
            return p if best / len(preds) >= tau else None


def test_majority_exhaustive():
    for n in range(1, 7):
        for seq in itertools.product("ABC", repeat=n):
            for tau in (0.5, 0.75, 1.0):
                assert majority_vote(seq, tau) == _brute_vote(seq, tau)


def _blobs(rng, centers, n, sigma=1.0):
    X = np.concatenate([rng.normal(c, sigma, (n, 3)) for c in centers])
    return X, np.repeat(np.arange(len(centers)), n)


def test_single_gaussian_selects_one():
    hits = sum(fit_gmm(np.random.default_rng(s).normal(0, 1, (300, 3)), 5, seed=s).n_components == 1
               for s in range(10))
    assert hits >= 9


def test_three_separated_gaussians():
    rng = np.random.default_rng(0)
    X, y = _blobs(rng, [(0, 0, 0), (10, 0, 0), (0, 10, 10)], 150)
    g = fit_gmm(X, 10)
    assert g.n_components == 3
    assert nmi(y, g.predict(X)) >= 0.95


def test_em_monotone_on_random_data():
    for s in range(100):
        rng = np.random.default_rng(s)
        k = int(rng.integers(1, 4))
        X, _ = _blobs(rng, rng.normal(0, 3, (k, 3)), int(rng.integers(20, 60)), sigma=rng.uniform(0.2, 2))
        _, _, trace = em(X, int(rng.integers(1, 5)), np.random.default_rng(s))
        assert np.all(np.diff(trace) >= -1e-8)


def test_degenerate_data():
    g = fit_gmm(np.tile([0.1, 0.2, 1.0], (50, 1)), 3, ridge=1e-6)
    assert g.n_components == 1
    assert np.allclose(g.covariances[0], 1e-6 * np.eye(3))


def test_too_few_samples():
    with pytest.raises(ValueError):
        fit_gmm(np.zeros((5, 3)))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_gmm_invariants(seed):
    rng = np.random.default_rng(seed)
    X, _ = _blobs(rng, rng.normal(0, 2, (3, 3)), 40, sigma=0.3)
    X[:, 2] = X[:, 2] * 1e-4  # nearly flat direction exercises the ridge
    g = fit_gmm(X, 4, seed=seed)
    assert abs(g.weights.sum() - 1) < 1e-9
    for S in g.covariances:
        assert np.linalg.eigvalsh(S).min() >= g.ridge * (1 - 1e-6)


def _unit():
    return GmmModel(np.ones(1), np.zeros((1, 3)), np.eye(3)[None])


def test_likelihood_closed_form():
    assert max_component_likelihood(_unit(), np.zeros(3)) == pytest.approx((2 * np.pi) ** -1.5, rel=1e-12)
    ray = np.outer(np.linspace(0, 5, 50), [1.0, 2.0, -1.0])
    assert np.all(np.diff(max_component_likelihood(_unit(), ray)) < 0)


def test_likelihood_against_explicit_formula():
    rng = np.random.default_rng(1)
    X, _ = _blobs(rng, [(0, 0, 0), (4, 4, 0), (0, 5, 5)], 100)
    g = fit_gmm(X, 4)
    pts = rng.normal(2, 3, (1000, 3))
    got = max_component_likelihood(g, pts)
    for x, v in zip(pts, got):
        dens = []
        for w, mu, S in zip(g.weights, g.means, g.covariances):
            d = x - mu
            dens.append(w * np.exp(-0.5 * d @ np.linalg.inv(S) @ d) / np.sqrt((2 * np.pi) ** 3 * np.linalg.det(S)))
        assert abs(v - max(dens)) <= 1e-12 * max(dens)


def test_outlier_ratio_semantics():
    rng = np.random.default_rng(2)
    X, _ = _blobs(rng, [(0, 0, 1), (1, 0, 0)], 500, sigma=0.05)
    g = fit_gmm(X, 5)
    fresh = g.sample(500, np.random.default_rng(3))
    assert abs(outlier_ratio(g, fresh, 0.95) - 0.05) <= 0.03
    sigma = np.sqrt(np.max(np.linalg.eigvalsh(g.covariances)))
    assert outlier_ratio(g, X + 20 * sigma * 10, 0.95) == 1.0
    assert outlier_ratio(g, X, 0.95) <= 0.05 + 1e-9


def test_outlier_ratio_needs_fit():
    with pytest.raises(StateError):
        outlier_ratio(None, np.zeros((2, 3)))
    with pytest.raises(StateError):
        outlier_ratio(_unit(), np.zeros((2, 3)))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 1000), st.floats(0.5, 0.99), st.floats(0.5, 0.99))
def test_outlier_ratio_bounded_and_monotone(seed, a, b):
    rng = np.random.default_rng(seed)
    g = fit_gmm(rng.normal(0, 1, (100, 3)), 2, seed=seed)
    Y = rng.normal(0.5, 1.5, (60, 3))
    lo, hi = sorted((a, b))
    r_lo, r_hi = outlier_ratio(g, Y, lo), outlier_ratio(g, Y, hi)
    assert 0 <= r_hi <= r_lo <= 1  # a higher confidence level lowers the cutoff


# -- state machine -----------------------------------------------------------

SIT = np.array([0.05, 0.62, 0.78])
WALK = np.array([0.40, 0.82, 0.40])


def _imu(mean, n, rng, std=0.02):
    return mean + std * rng.standard_normal((n, 3))


def _stream(labels_per_tick, means, rng, hz=50, stride=0.5):
    """Ticks every ``stride`` s with a label and that tick's new raw samples."""
    per = int(stride * hz)
    return [(i * stride, lab, _imu(means[lab], per, rng)) for i, lab in enumerate(labels_per_tick)]


def _run(cfg, ticks, first_samples):
    state = new_state(cfg)
    absorb_task(state, first_samples, t=0.0)
    recent = np.zeros((0, 3))
    out = []
    for t, lab, samples in ticks:
        recent = np.concatenate([recent, samples])[-int(cfg.consensus_seconds * 50):]
        out.append(observe(state, t, lab, recent))
    return state, out


def test_hybrid_fires_once_at_transition():
    rng = np.random.default_rng(0)
    labels = ["sitting"] * 60 + ["walking"] * 60
    means = {"sitting": SIT, "walking": WALK}
    _, out = _run(TriggerConfig(), _stream(labels, means, rng), _imu(SIT, 400, rng))
    fires = [d for d in out if d.fire]
    assert len(fires) == 1 and fires[0].reason == "novel_pattern"
    assert 30.0 <= fires[0].t <= 34.0
    assert 0.0 <= fires[0].r_t <= 1.0


def test_spurious_flip_suppressed():
    rng = np.random.default_rng(1)
    labels = ["sitting"] * 40 + ["walking"] * 2 + ["sitting"] * 40  # a 1 s flip
    means = {"sitting": SIT, "walking": WALK}
    _, out = _run(TriggerConfig(), _stream(labels, means, rng), _imu(SIT, 400, rng))
    assert not any(d.fire for d in out)


def test_time_based_schedule():
    state = new_state(TriggerConfig(mode="time_based", interval=30.0))
    fired = [t for t in np.arange(0, 95.5, 0.5) if observe(state, float(t), None).fire]
    assert fired == [30.0, 60.0, 90.0]


def test_time_based_cap():
    state = new_state(TriggerConfig(mode="time_based", interval=10.0, max_fires=2))
    assert sum(observe(state, float(t), None).fire for t in np.arange(0, 60, 0.5)) == 2


def test_no_fire_before_consensus_window():
    state = new_state(TriggerConfig(mode="classifier_only"))
    for i, lab in enumerate(["a"] * 4 + ["b"] * 20):
        d = observe(state, i * 0.5, lab, np.zeros((1, 3)))
        if i * 0.5 < 4.0:
            assert not d.fire and d.stable_label is None


def test_classifier_fires_subset_of_hybrid_changes():
    rng = np.random.default_rng(4)
    labs = rng.choice(["sitting", "walking"], size=30)
    labels = [lab for lab in labs for _ in range(int(rng.integers(2, 20)))]
    means = {"sitting": SIT, "walking": WALK}
    ticks = _stream(labels, means, rng)
    _, hyb = _run(TriggerConfig(), ticks, _imu(SIT, 400, rng))
    _, cls = _run(TriggerConfig(mode="classifier_only"), ticks, _imu(SIT, 400, rng))
    changes = {d.t for d in hyb if d.r_t is not None}
    assert {d.t for d in cls if d.fire} <= changes
    assert {d.t for d in hyb if d.fire} <= changes


def test_continuous_novelty_flag():
    rng = np.random.default_rng(5)
    labels = ["sitting"] * 60
    means = {"sitting": SIT}
    ticks = _stream(labels, means, rng)
    # the IMU drifts to a new pattern while the classifier keeps saying "sitting"
    ticks = ticks[:30] + [(t, lab, _imu(WALK, len(s), rng)) for t, lab, s in ticks[30:]]
    _, off = _run(TriggerConfig(), ticks, _imu(SIT, 400, rng))
    _, on = _run(TriggerConfig(continuous_novelty=True), ticks, _imu(SIT, 400, rng))
    assert not any(d.fire for d in off)
    assert any(d.fire for d in on)


def test_deterministic_decisions():
    def once():
        rng = np.random.default_rng(6)
        labels = ["sitting"] * 30 + ["walking"] * 30
        _, out = _run(TriggerConfig(), _stream(labels, {"sitting": SIT, "walking": WALK}, rng), _imu(SIT, 300, rng))
        return [d.to_json() for d in out]

    assert once() == once()


def test_absorb_raises_k():
    hits = 0
    for s in range(10):
        rng = np.random.default_rng(s)
        state = absorb_task(new_state(TriggerConfig()), _imu(SIT, 400, rng, 0.03))
        k1 = state.gmm.n_components
        absorb_task(state, _imu(WALK, 400, rng, 0.03))
        hits += state.gmm.n_components > k1
    assert hits >= 8


def test_absorb_empty_only_touches_timestamp():
    rng = np.random.default_rng(0)
    state = absorb_task(new_state(TriggerConfig()), _imu(SIT, 100, rng), t=1.0)
    g, buf = state.gmm, state.raw_buffer.copy()
    absorb_task(state, np.zeros((0, 3)), t=7.0)
    assert state.gmm is g and np.array_equal(state.raw_buffer, buf) and state.last_absorb == 7.0


def test_absorbed_pattern_no_longer_novel():
    rng = np.random.default_rng(1)
    cfg = TriggerConfig()
    state = absorb_task(new_state(cfg), _imu(SIT, 400, rng))
    walk = _imu(WALK, 200, rng)
    assert outlier_ratio(state.gmm, walk, cfg.tau_i) > cfg.rho
    absorb_task(state, walk)
    assert outlier_ratio(state.gmm, walk, cfg.tau_i) <= cfg.rho


def test_raw_buffer_cap_evicts_oldest():
    rng = np.random.default_rng(2)
    state = new_state(TriggerConfig(raw_buffer_cap=500, absorb_samples=300))
    for mean in (SIT, WALK, SIT + 0.2):
        absorb_task(state, _imu(mean, 300, rng))
    assert len(state.raw_buffer) == 500
    assert Counter(state.raw_task) == {1: 200, 2: 300}


def test_hybrid_without_gmm_is_state_error():
    state = new_state(TriggerConfig())
    with pytest.raises(StateError):
        for i in range(20):
            observe(state, i * 0.5, "a" if i < 10 else "b", np.zeros((5, 3)))


def test_step_with_model(har_model):
    cfg = TriggerConfig(mode="classifier_only")
    state = new_state(cfg)
    T = har_model.config.window
    with pytest.raises(ValueError):
        step(state, 0.0, ImuWindow(np.zeros((T + 1, 3)), 0), har_model)
    rng = np.random.default_rng(0)
    d = step(state, 0.0, ImuWindow(_imu(SIT, T, rng), 0), har_model)
    assert d.stable_label is None and not d.fire
    assert len(state.votes) == 1 and state.votes[0][1] in har_model.labels


def test_decision_log_jsonl(tmp_path):
    state = new_state(TriggerConfig(mode="time_based", interval=1.0))
    for t in (0.0, 0.5, 1.0):
        observe(state, t, None)
    state.write_log(tmp_path / "log.jsonl")
    rows = [json.loads(line) for line in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert [set(r) for r in rows] == [{"t", "reason", "stable_label", "r_t"}] * 3
    assert rows[-1]["reason"] == "timer"
