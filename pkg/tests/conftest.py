import time

import numpy as np
import pytest

from gazecal.harness import MethodSpec, ProtocolConfig, run_protocol, train_har_model


def numeric_grad(f, arr, h=1e-6):
    g = np.zeros_like(arr)
    for i in range(arr.size):
        old = arr.flat[i]
        arr.flat[i] = old + h
        fp = f()
        arr.flat[i] = old - h
        fm = f()
        arr.flat[i] = old
        g.flat[i] = (fp - fm) / (2 * h)
    return g


ABS_NOISE = 1e-8  # central differences at h=1e-6 resolve no better than this


def rel_error(a, b, floor=1e-12):
    """Norm-wise relative error.  Gradients that agree to within the finite
    difference noise count as exact: some are identically zero (a key bias
    under softmax) and their numeric estimate is pure rounding."""
    if np.max(np.abs(a - b), initial=0.0) < ABS_NOISE:
        return 0.0
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a) + np.linalg.norm(b), floor))


def check_layer(layer, x, rng, train=False):
    """Worst relative error over the input gradient and every parameter."""
    for k, p in layer.named_parameters():
        if k.split(".")[-1].startswith("b"):
            p[...] = 0.1 * rng.standard_normal(p.shape)
    seed = int(rng.integers(1 << 30))
    y = layer.forward(x, train, np.random.default_rng(seed))
    R = rng.standard_normal(y.shape)

    def f():
        return float(np.sum(layer.forward(x, train, np.random.default_rng(seed)) * R))

    layer.forward(x, train, np.random.default_rng(seed))
    dx = layer.backward(R)
    analytic = {k: g.copy() for k, g in layer.named_grads()}
    worst = rel_error(dx, numeric_grad(f, x))
    for k, p in layer.named_parameters():
        worst = max(worst, rel_error(analytic[k], numeric_grad(f, p)))
    return worst


@pytest.fixture(scope="session")
def desk_cfg():
    return ProtocolConfig(seeds=(0,), permutations=1)


@pytest.fixture(scope="session")
def har_model(desk_cfg):
    t0 = time.perf_counter()
    har, _ = train_har_model(desk_cfg)
    har.train_seconds = time.perf_counter() - t0
    return har


PROTOCOL_SEEDS = tuple(range(10))


@pytest.fixture(scope="session")
def desk_protocol(har_model):
    """Default four-motion protocol over ten seeds and every starting motion."""
    cfg = ProtocolConfig(seeds=PROTOCOL_SEEDS, permutations="all")
    methods = [
        MethodSpec("no_calibration"),
        MethodSpec("one_off"),
        MethodSpec("macgaze_hybrid"),
        MethodSpec("macgaze_classifier"),
        MethodSpec("macgaze_hybrid", replay_ratio=0.0, name="without_replay"),
        MethodSpec("macgaze_hybrid", replay_ratio=0.1, name="replay_0.1"),
    ]
    t0 = time.perf_counter()
    rep = run_protocol(methods, cfg, har_model)
    return cfg, rep, time.perf_counter() - t0


def first_task_errors(rep, method, seed):
    """Error on each run's first motion right after its first calibration and at the end,
    averaged over starting motions."""
    runs = [r for r in rep.runs_of(method) if r.seed == seed]
    first = [r.snapshots[0][1][r.labels_order[0]] for r in runs]
    final = [r.snapshots[-1][1][r.labels_order[0]] for r in runs]
    return float(np.mean(first)), float(np.mean(final))
