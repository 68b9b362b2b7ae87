"""Hot numeric kernels with twin numba and pure-numpy implementations.

Backend selection happens once at import time via the DWTLAB_BACKEND
environment variable ("numba" or "numpy"). The default is numba when it
is importable, numpy otherwise. Both implementations of a kernel are
always importable (`<name>_np` / `<name>_nb`) so they can be compared;
`dwtlab bench` times them side by side.

Numba kernels deliberately avoid prange: reductions must run in a fixed
order so repeated runs are bitwise identical. Matrix products are left
to numpy/BLAS on both backends.
"""

import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - mirror environments without numba
    HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if len(args) == 1 and callable(args[0]):
            return args[0]
        return wrap


_requested = os.environ.get("DWTLAB_BACKEND", "").strip().lower()
if _requested not in ("", "numba", "numpy"):
    raise RuntimeError(f"DWTLAB_BACKEND must be 'numba' or 'numpy', got {_requested!r}")
if _requested == "":
    BACKEND = "numba" if HAVE_NUMBA else "numpy"
elif _requested == "numba" and not HAVE_NUMBA:
    import warnings

    warnings.warn("DWTLAB_BACKEND=numba but numba is not installed; using numpy")
    BACKEND = "numpy"
else:
    BACKEND = _requested

USE_NUMBA = BACKEND == "numba"


# ---------------------------------------------------------------------------
# softmax over rows, with temperature
# ---------------------------------------------------------------------------

def softmax_rows_np(x, tau):
    t = x.dtype.type(tau)
    m = x.max(axis=1, keepdims=True)
    e = np.exp((x - m) / t)
    s = e.sum(axis=1, keepdims=True, dtype=np.float64)
    return (e / s).astype(x.dtype)


@njit(cache=True)
def _softmax_rows_nb(x, tau, out):
    n, c = x.shape
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            e = np.exp((x[i, j] - m) / tau)
            out[i, j] = e
            s += e
        inv = 1.0 / s
        for j in range(c):
            out[i, j] = out[i, j] * inv


def softmax_rows_nb(x, tau):
    out = np.empty_like(x)
    _softmax_rows_nb(x, float(tau), out)
    return out


def softmax_bwd_rows_np(y, dy, tau):
    t = y.dtype.type(tau)
    dot = (dy * y).sum(axis=1, keepdims=True, dtype=np.float64).astype(y.dtype)
    return (dy - dot) * y / t


@njit(cache=True)
def _softmax_bwd_rows_nb(y, dy, tau, out):
    n, c = y.shape
    for i in range(n):
        dot = 0.0
        for j in range(c):
            dot += dy[i, j] * y[i, j]
        for j in range(c):
            out[i, j] = (dy[i, j] - dot) * y[i, j] / tau


def softmax_bwd_rows_nb(y, dy, tau):
    out = np.empty_like(y)
    _softmax_bwd_rows_nb(y, dy, float(tau), out)
    return out


def log_softmax_rows_np(x, tau):
    t = x.dtype.type(tau)
    z = (x - x.max(axis=1, keepdims=True)) / t
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True, dtype=np.float64)).astype(x.dtype)
    return z - lse


@njit(cache=True)
def _log_softmax_rows_nb(x, tau, out):
    n, c = x.shape
    for i in range(n):
        m = x[i, 0]
        for j in range(1, c):
            if x[i, j] > m:
                m = x[i, j]
        s = 0.0
        for j in range(c):
            z = (x[i, j] - m) / tau
            out[i, j] = z
            s += np.exp(z)
        lse = np.log(s)
        for j in range(c):
            out[i, j] = out[i, j] - lse


def log_softmax_rows_nb(x, tau):
    out = np.empty_like(x)
    _log_softmax_rows_nb(x, float(tau), out)
    return out


def log_softmax_bwd_rows_np(out, dy, tau):
    t = out.dtype.type(tau)
    y = np.exp(out)
    tot = dy.sum(axis=1, keepdims=True, dtype=np.float64).astype(out.dtype)
    return (dy - y * tot) / t


@njit(cache=True)
def _log_softmax_bwd_rows_nb(out, dy, tau, dx):
    n, c = out.shape
    for i in range(n):
        tot = 0.0
        for j in range(c):
            tot += dy[i, j]
        for j in range(c):
            dx[i, j] = (dy[i, j] - np.exp(out[i, j]) * tot) / tau


def log_softmax_bwd_rows_nb(out, dy, tau):
    dx = np.empty_like(out)
    _log_softmax_bwd_rows_nb(out, dy, float(tau), dx)
    return dx


# ---------------------------------------------------------------------------
# layer norm over rows
# ---------------------------------------------------------------------------

def layer_norm_rows_np(x, gain, bias, eps):
    mean = x.mean(axis=1, keepdims=True, dtype=np.float64)
    var = np.square(x - mean).mean(axis=1, keepdims=True, dtype=np.float64)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * rstd
    out = (xhat * gain + bias).astype(x.dtype)
    return out, mean.ravel().astype(x.dtype), rstd.ravel().astype(x.dtype)


@njit(cache=True)
def _layer_norm_rows_nb(x, gain, bias, eps, out, mean, rstd):
    n, d = x.shape
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        v = 0.0
        for j in range(d):
            diff = x[i, j] - mu
            v += diff * diff
        r = 1.0 / np.sqrt(v / d + eps)
        mean[i] = mu
        rstd[i] = r
        for j in range(d):
            out[i, j] = (x[i, j] - mu) * r * gain[j] + bias[j]


def layer_norm_rows_nb(x, gain, bias, eps):
    out = np.empty_like(x)
    mean = np.empty(x.shape[0], dtype=x.dtype)
    rstd = np.empty(x.shape[0], dtype=x.dtype)
    _layer_norm_rows_nb(x, gain, bias, float(eps), out, mean, rstd)
    return out, mean, rstd


def layer_norm_bwd_rows_np(x, gain, mean, rstd, dy):
    xhat = (x - mean[:, None]) * rstd[:, None]
    dg = (dy * xhat).sum(axis=0, dtype=np.float64).astype(x.dtype)
    db = dy.sum(axis=0, dtype=np.float64).astype(x.dtype)
    dxhat = dy * gain
    m1 = dxhat.mean(axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
    m2 = (dxhat * xhat).mean(axis=1, keepdims=True, dtype=np.float64).astype(x.dtype)
    dx = (dxhat - m1 - xhat * m2) * rstd[:, None]
    return dx, dg, db


@njit(cache=True)
def _layer_norm_bwd_rows_nb(x, gain, mean, rstd, dy, dx, dg, db):
    n, d = x.shape
    for j in range(d):
        dg[j] = 0.0
        db[j] = 0.0
    for i in range(n):
        mu = mean[i]
        r = rstd[i]
        m1 = 0.0
        m2 = 0.0
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dxh = dy[i, j] * gain[j]
            dg[j] += dy[i, j] * xh
            db[j] += dy[i, j]
            m1 += dxh
            m2 += dxh * xh
        m1 /= d
        m2 /= d
        for j in range(d):
            xh = (x[i, j] - mu) * r
            dx[i, j] = (dy[i, j] * gain[j] - m1 - xh * m2) * r


def layer_norm_bwd_rows_nb(x, gain, mean, rstd, dy):
    dx = np.empty_like(x)
    dg = np.empty_like(gain)
    db = np.empty_like(gain)
    _layer_norm_bwd_rows_nb(x, gain, mean, rstd, dy, dx, dg, db)
    return dx, dg, db


# ---------------------------------------------------------------------------
# gelu (tanh approximation)
# ---------------------------------------------------------------------------

_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_K = 0.044715


def gelu_np(x):
    t = x.dtype.type
    u = t(_GELU_C) * (x + t(_GELU_K) * x * x * x)
    return t(0.5) * x * (1.0 + np.tanh(u))


@njit(cache=True)
def _gelu_nb(x, out):
    for i in range(x.shape[0]):
        v = x[i]
        u = _GELU_C * (v + _GELU_K * v * v * v)
        out[i] = 0.5 * v * (1.0 + np.tanh(u))


def gelu_nb(x):
    flat = x.ravel()
    out = np.empty_like(flat)
    _gelu_nb(flat, out)
    return out.reshape(x.shape)


def gelu_bwd_np(x, dy):
    t = x.dtype.type
    u = t(_GELU_C) * (x + t(_GELU_K) * x * x * x)
    th = np.tanh(u)
    du = t(_GELU_C) * (1.0 + 3.0 * t(_GELU_K) * x * x)
    return dy * (t(0.5) * (1.0 + th) + t(0.5) * x * (1.0 - th * th) * du)


@njit(cache=True)
def _gelu_bwd_nb(x, dy, out):
    for i in range(x.shape[0]):
        v = x[i]
        u = _GELU_C * (v + _GELU_K * v * v * v)
        th = np.tanh(u)
        du = _GELU_C * (1.0 + 3.0 * _GELU_K * v * v)
        out[i] = dy[i] * (0.5 * (1.0 + th) + 0.5 * v * (1.0 - th * th) * du)


def gelu_bwd_nb(x, dy):
    flat = x.ravel()
    out = np.empty_like(flat)
    _gelu_bwd_nb(flat, dy.ravel(), out)
    return out.reshape(x.shape)


# ---------------------------------------------------------------------------
# row gather backward (embedding-style scatter add)
# ---------------------------------------------------------------------------

def scatter_add_rows_np(table, ids, vals):
    np.add.at(table, ids, vals)


@njit(cache=True)
def _scatter_add_rows_nb(table, ids, vals):
    m, d = vals.shape
    for i in range(m):
        r = ids[i]
        for j in range(d):
            table[r, j] += vals[i, j]


def scatter_add_rows_nb(table, ids, vals):
    _scatter_add_rows_nb(table, ids, vals)


# ---------------------------------------------------------------------------
# fused Adam update (in place)
# ---------------------------------------------------------------------------

def adam_update_np(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    t = p.dtype.type
    lr, beta1, beta2, eps, bc1, bc2 = (t(lr), t(beta1), t(beta2), t(eps), t(bc1), t(bc2))
    m *= beta1
    m += (t(1.0) - beta1) * g
    v *= beta2
    v += (t(1.0) - beta2) * g * g
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


@njit(cache=True)
def _adam_update_nb(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(p.shape[0]):
        m[i] = beta1 * m[i] + (1.0 - beta1) * g[i]
        v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i]
        p[i] -= lr * (m[i] / bc1) / (np.sqrt(v[i] / bc2) + eps)


def adam_update_nb(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    t = p.dtype.type
    _adam_update_nb(p, g, m, v, t(lr), t(beta1), t(beta2), t(eps), t(bc1), t(bc2))


# ---------------------------------------------------------------------------
# order-k Markov chain sampling
# ---------------------------------------------------------------------------
# Both implementations consume a shared array of uniform draws and pick
# the first column whose cumulative mass exceeds the draw, so their
# outputs are identical integer streams.

def markov_sample_np(cum, u, alphabet, order, mod_base):
    n = u.shape[0]
    out = np.empty(n, dtype=np.int64)
    state = 0
    for t in range(order):
        tok = min(int(u[t] * alphabet), alphabet - 1)
        out[t] = tok
        state = (state % mod_base) * alphabet + tok
    for t in range(order, n):
        row = cum[state]
        nxt = int(np.searchsorted(row, u[t], side="right"))
        if nxt >= alphabet:
            nxt = alphabet - 1
        out[t] = nxt
        state = (state % mod_base) * alphabet + nxt
    return out


@njit(cache=True)
def _markov_sample_nb(cum, u, alphabet, order, mod_base, out):
    n = u.shape[0]
    state = 0
    for t in range(order):
        tok = int(u[t] * alphabet)
        if tok > alphabet - 1:
            tok = alphabet - 1
        out[t] = tok
        state = (state % mod_base) * alphabet + tok
    for t in range(order, n):
        lo = 0
        hi = alphabet
        ut = u[t]
        while lo < hi:
            mid = (lo + hi) // 2
            if cum[state, mid] > ut:
                hi = mid
            else:
                lo = mid + 1
        nxt = lo
        if nxt >= alphabet:
            nxt = alphabet - 1
        out[t] = nxt
        state = (state % mod_base) * alphabet + nxt


def markov_sample_nb(cum, u, alphabet, order, mod_base):
    out = np.empty(u.shape[0], dtype=np.int64)
    _markov_sample_nb(cum, u, int(alphabet), int(order), int(mod_base), out)
    return out


# ---------------------------------------------------------------------------
# dispatch table
# ---------------------------------------------------------------------------

if USE_NUMBA:
    softmax_rows = softmax_rows_nb
    softmax_bwd_rows = softmax_bwd_rows_nb
    log_softmax_rows = log_softmax_rows_nb
    log_softmax_bwd_rows = log_softmax_bwd_rows_nb
    layer_norm_rows = layer_norm_rows_nb
    layer_norm_bwd_rows = layer_norm_bwd_rows_nb
    gelu = gelu_nb
    gelu_bwd = gelu_bwd_nb
    scatter_add_rows = scatter_add_rows_nb
    adam_update = adam_update_nb
    markov_sample = markov_sample_nb
else:
    softmax_rows = softmax_rows_np
    softmax_bwd_rows = softmax_bwd_rows_np
    log_softmax_rows = log_softmax_rows_np
    log_softmax_bwd_rows = log_softmax_bwd_rows_np
    layer_norm_rows = layer_norm_rows_np
    layer_norm_bwd_rows = layer_norm_bwd_rows_np
    gelu = gelu_np
    gelu_bwd = gelu_bwd_np
    scatter_add_rows = scatter_add_rows_np
    adam_update = adam_update_np
    markov_sample = markov_sample_np
