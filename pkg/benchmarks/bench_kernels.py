"""Time the numpy and numba kernels side by side.

    python benchmarks/bench_kernels.py [--repeat 20]

A HAR training epoch is timed in fresh subprocesses so that each backend is
selected the normal way, through GAZECAL_DISABLE_NUMBA.
"""
import argparse
import json
import os
import subprocess
import sys
import timeit

import numpy as np

from gazecal import _accel

EPOCH_SNIPPET = """
import time, numpy as np
from gazecal import BACKEND
from gazecal.motionnet import HarConfig, HarModel, HarTrainConfig, train_har
rng = np.random.default_rng(0)
X = rng.standard_normal((512, 64, 3)); y = [("a", "b", "c", "d")[i % 4] for i in range(512)]
m = HarModel(HarConfig.desk(classes=4), ("a", "b", "c", "d"), seed=0)
hyper = HarTrainConfig.desk(epochs=1, seed=0)
train_har(m, X[:64], y[:64], hyper)  # warm up / compile
t = time.perf_counter(); train_har(m, X, y, hyper); print(BACKEND, time.perf_counter() - t)
"""


def best(fn, repeat):
    return min(timeit.repeat(fn, number=1, repeat=repeat))


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--repeat", type=int, default=20)
    ap.add_argument("--no-epoch", action="store_true", help="skip the HAR epoch timing")
    args = ap.parse_args()
    rng = np.random.default_rng(0)
    rows = []

    x = rng.standard_normal((64, 16, 68))
    w = rng.standard_normal((32, 16, 5))
    dout = rng.standard_normal((64, 32, 64))
    for name, fn in (("numpy", _accel.conv1d_forward_numpy), ("numba", _accel.conv1d_forward_numba)):
        fn(x, w, 1)
        rows.append(("conv1d_forward", name, best(lambda: fn(x, w, 1), args.repeat)))
    for name, fn in (("numpy", _accel.conv1d_backward_numpy), ("numba", _accel.conv1d_backward_numba)):
        fn(x, w, dout, 1)
        rows.append(("conv1d_backward", name, best(lambda: fn(x, w, dout, 1), args.repeat)))

    X = rng.standard_normal((2000, 3))
    K = 6
    means = rng.standard_normal((K, 3))
    prec = np.tile(np.eye(3), (K, 1, 1))
    lw, ld = np.log(np.full(K, 1.0 / K)), np.zeros(K)
    for name, fn in (("numpy", _accel.weighted_log_density_numpy), ("numba", _accel.weighted_log_density_numba)):
        fn(X, lw, means, prec, ld)
        rows.append(("gmm_log_density", name, best(lambda: fn(X, lw, means, prec, ld), args.repeat)))

    if not args.no_epoch:
        for flag in ("1", "0"):
            env = dict(os.environ, GAZECAL_DISABLE_NUMBA=flag)
            out = subprocess.run([sys.executable, "-c", EPOCH_SNIPPET], env=env, capture_output=True,
                                 text=True, check=True).stdout.split()
            rows.append(("har_epoch_512", out[0], float(out[1])))

    print(f"{'kernel':<18}{'backend':<8}{'seconds':>12}")
    for k, b, t in rows:
        print(f"{k:<18}{b:<8}{t:>12.6f}")
    print(json.dumps({"active_backend": _accel.BACKEND}))


if __name__ == "__main__":
    main()
