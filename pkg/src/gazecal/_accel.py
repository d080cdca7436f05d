"""Hot numeric kernels with a numba path and a pure-numpy fallback.

The backend is picked once at import time.  Set ``GAZECAL_DISABLE_NUMBA=1``
to force the numpy path (handy for debugging or when numba is missing).
Both implementations are always importable as ``*_numpy`` / ``*_numba`` so
tests and the benchmark can compare them directly.
"""
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a hard dependency in CI
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        if len(args) == 1 and callable(args[0]):
            return args[0]
        return lambda f: f


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_NUMBA = HAVE_NUMBA and not _flag("GAZECAL_DISABLE_NUMBA")
BACKEND = "numba" if USE_NUMBA else "numpy"


# ---------------------------------------------------------------------------
# 1-D convolution (cross-correlation) over an already padded input.
#   xpad: (B, Cin, Lp)   w: (Cout, Cin, K)   out: (B, Cout, Lp - dil*(K-1))
# ---------------------------------------------------------------------------

def conv1d_forward_numpy(xpad, w, dilation):
    B, cin, lp = xpad.shape
    cout, _, k = w.shape
    lout = lp - dilation * (k - 1)
    out = np.zeros((B, cout, lout), dtype=np.result_type(xpad, w))
    for j in range(k):
        s = j * dilation
        # (B, Cin, Lout) x (Cout, Cin) -> (B, Cout, Lout)
        out += np.einsum("bcl,oc->bol", xpad[:, :, s:s + lout], w[:, :, j], optimize=True)
    return out


def conv1d_backward_numpy(xpad, w, dout, dilation):
    """Return (d xpad, d w) for ``conv1d_forward``."""
    k = w.shape[2]
    lout = dout.shape[2]
    dx = np.zeros_like(xpad)
    dw = np.empty_like(w)
    for j in range(k):
        s = j * dilation
        dx[:, :, s:s + lout] += np.einsum("bol,oc->bcl", dout, w[:, :, j], optimize=True)
        dw[:, :, j] = np.einsum("bol,bcl->oc", dout, xpad[:, :, s:s + lout], optimize=True)
    return dx, dw


@njit(cache=True)
def _im2col(xb, k, dilation, lout, cols):
    cin = xb.shape[0]
    for c in range(cin):
        for j in range(k):
            s = j * dilation
            r = c * k + j
            for t in range(lout):
                cols[r, t] = xb[c, s + t]


@njit(cache=True)
def _conv1d_forward_nb(xpad, w, dilation):
    B, cin, lp = xpad.shape
    cout, _, k = w.shape
    lout = lp - dilation * (k - 1)
    w2 = np.ascontiguousarray(w.reshape(cout, cin * k))
    out = np.empty((B, cout, lout), dtype=xpad.dtype)
    cols = np.empty((cin * k, lout), dtype=xpad.dtype)
    for b in range(B):
        _im2col(xpad[b], k, dilation, lout, cols)
        out[b] = np.dot(w2, cols)
    return out


@njit(cache=True)
def _conv1d_backward_nb(xpad, w, dout, dilation):
    B, cin, lp = xpad.shape
    cout, _, k = w.shape
    lout = dout.shape[2]
    w2t = np.ascontiguousarray(w.reshape(cout, cin * k).T)
    dx = np.zeros_like(xpad)
    dw2 = np.zeros((cout, cin * k), dtype=xpad.dtype)
    cols = np.empty((cin * k, lout), dtype=xpad.dtype)
    for b in range(B):
        _im2col(xpad[b], k, dilation, lout, cols)
        db = np.ascontiguousarray(dout[b])
        dw2 += np.dot(db, cols.T)
        dcols = np.dot(w2t, db)
        for c in range(cin):
            for j in range(k):
                s = j * dilation
                r = c * k + j
                for t in range(lout):
                    dx[b, c, s + t] += dcols[r, t]
    return dx, dw2.reshape(cout, cin, k)


def conv1d_forward_numba(xpad, w, dilation):
    xpad = np.ascontiguousarray(xpad)
    w = np.ascontiguousarray(w, dtype=xpad.dtype)
    return _conv1d_forward_nb(xpad, w, int(dilation))


def conv1d_backward_numba(xpad, w, dout, dilation):
    xpad = np.ascontiguousarray(xpad)
    w = np.ascontiguousarray(w, dtype=xpad.dtype)
    dout = np.ascontiguousarray(dout, dtype=xpad.dtype)
    return _conv1d_backward_nb(xpad, w, dout, int(dilation))


# ---------------------------------------------------------------------------
# Weighted Gaussian log-densities:  log(pi_k) + log N(x | mu_k, Sigma_k)
#   X: (N, D)  means: (K, D)  prec_chol: (K, D, D) with P_k = L_k L_k^T,
#   log_det_chol: (K,) = sum(log diag L_k)
# ---------------------------------------------------------------------------

_LOG_2PI = float(np.log(2.0 * np.pi))


def weighted_log_density_numpy(X, log_weights, means, prec_chol, log_det_chol):
    n, d = X.shape
    K = means.shape[0]
    out = np.empty((n, K))
    for k in range(K):
        y = (X - means[k]) @ prec_chol[k]
        out[:, k] = -0.5 * (d * _LOG_2PI + np.sum(y * y, axis=1)) + log_det_chol[k] + log_weights[k]
    return out


@njit(cache=True, fastmath=False)
def _weighted_log_density_nb(X, log_weights, means, prec_chol, log_det_chol, log2pi):
    n, d = X.shape
    K = means.shape[0]
    out = np.empty((n, K))
    diff = np.empty(d)
    for i in range(n):
        for k in range(K):
            for a in range(d):
                diff[a] = X[i, a] - means[k, a]
            maha = 0.0
            for b in range(d):
                y = 0.0
                for a in range(d):
                    y += diff[a] * prec_chol[k, a, b]
                maha += y * y
            out[i, k] = -0.5 * (d * log2pi + maha) + log_det_chol[k] + log_weights[k]
    return out


def weighted_log_density_numba(X, log_weights, means, prec_chol, log_det_chol):
    return _weighted_log_density_nb(
        np.ascontiguousarray(X, dtype=np.float64),
        np.ascontiguousarray(log_weights, dtype=np.float64),
        np.ascontiguousarray(means, dtype=np.float64),
        np.ascontiguousarray(prec_chol, dtype=np.float64),
        np.ascontiguousarray(log_det_chol, dtype=np.float64),
        _LOG_2PI,
    )


if USE_NUMBA:
    conv1d_forward = conv1d_forward_numba
    conv1d_backward = conv1d_backward_numba
    weighted_log_density = weighted_log_density_numba
else:
    conv1d_forward = conv1d_forward_numpy
    conv1d_backward = conv1d_backward_numpy
    weighted_log_density = weighted_log_density_numpy
