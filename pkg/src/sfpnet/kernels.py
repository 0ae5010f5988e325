"""Hot numeric kernels with two interchangeable backends.

Every kernel has a pure-numpy implementation and a numba ``@njit`` twin.
The active backend is chosen at import time from the ``SFPNET_NUMBA`` env
var ("0"/"off"/"false" selects pure numpy; anything else, or the var being
unset, selects numba when it is importable) and can be swapped at runtime
with :func:`use_numba`, which `benchmarks/bench_kernels.py` uses to compare
the two. Both backends produce identical results up to summation order;
each is individually deterministic.
"""

import os

import numpy as np

try:
    from numba import njit

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - exercised only without numba
    _HAVE_NUMBA = False

    def njit(*args, **kwargs):
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


# ---------------------------------------------------------------------------
# numpy implementations


def _scatter_add_rows_np(table, ids, rows):
    keep = ids != 0
    np.add.at(table, ids[keep], rows[keep])


def _dap_pool_fwd_np(beh, lens):
    # rows at index >= lens[b] are exactly zero, so plain sums suffice;
    # moments accumulate in f64 (as the numba twin does) to tame the
    # m2 - mean^2 cancellation in f32 mode
    cnt = np.maximum(lens, 1)[:, None].astype(np.float64)
    b64 = beh.astype(np.float64, copy=False)
    mean = b64.sum(axis=1) / cnt
    m2 = (b64 * b64).sum(axis=1) / cnt
    var = np.maximum(m2 - mean * mean, 0.0)
    return mean.astype(beh.dtype), np.sqrt(var).astype(beh.dtype)


def _dap_pool_bwd_np(dmean, dstd, beh, lens, mean, std):
    n_b = beh.shape[1]
    cnt = np.maximum(lens, 1).astype(beh.dtype)[:, None]
    a = dmean / cnt
    with np.errstate(divide="ignore", invalid="ignore"):
        b = np.where(std > 0, dstd / (cnt * std), 0.0)
    mask = (np.arange(n_b)[None, :] < lens[:, None]).astype(beh.dtype)
    dbeh = (a[:, None, :] + b[:, None, :] * (beh - mean[:, None, :])) * mask[:, :, None]
    return dbeh


def _masked_weighted_sum_np(w, beh, lens):
    n_b = beh.shape[1]
    mask = (np.arange(n_b)[None, :] < lens[:, None]).astype(beh.dtype)
    return np.einsum("bn,bnd->bd", w * mask, beh)


def _masked_weighted_sum_bwd_np(g, w, beh, lens):
    n_b = beh.shape[1]
    mask = (np.arange(n_b)[None, :] < lens[:, None]).astype(beh.dtype)
    dw = np.einsum("bd,bnd->bn", g, beh) * mask
    dbeh = (w * mask)[:, :, None] * g[:, None, :]
    return dw, dbeh


def _adam_update_np(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    m *= beta1
    m += (1.0 - beta1) * g
    v *= beta2
    v += (1.0 - beta2) * (g * g)
    p -= lr * (m / bc1) / (np.sqrt(v / bc2) + eps)


# ---------------------------------------------------------------------------
# numba twins


@njit(cache=True)
def _scatter_add_rows_nb(table, ids, rows):
    for i in range(ids.shape[0]):
        j = ids[i]
        if j != 0:
            for k in range(rows.shape[1]):
                table[j, k] += rows[i, k]


@njit(cache=True)
def _dap_pool_fwd_nb(beh, lens):
    b_sz, _, d = beh.shape
    mean = np.zeros((b_sz, d), dtype=beh.dtype)
    std = np.zeros((b_sz, d), dtype=beh.dtype)
    for b in range(b_sz):
        n = lens[b]
        if n <= 0:
            continue
        inv = 1.0 / n
        for k in range(d):
            s1 = 0.0
            s2 = 0.0
            for i in range(n):
                x = np.float64(beh[b, i, k])
                s1 += x
                s2 += x * x
            mu = s1 * inv
            var = s2 * inv - mu * mu
            if var < 0.0:
                var = 0.0
            mean[b, k] = mu
            std[b, k] = np.sqrt(var)
    return mean, std


@njit(cache=True)
def _dap_pool_bwd_nb(dmean, dstd, beh, lens, mean, std):
    b_sz, n_b, d = beh.shape
    dbeh = np.zeros((b_sz, n_b, d), dtype=beh.dtype)
    for b in range(b_sz):
        n = lens[b]
        if n <= 0:
            continue
        inv = 1.0 / n
        for k in range(d):
            a = dmean[b, k] * inv
            s = std[b, k]
            c = dstd[b, k] * inv / s if s > 0 else 0.0
            for i in range(n):
                dbeh[b, i, k] = a + c * (beh[b, i, k] - mean[b, k])
    return dbeh


@njit(cache=True)
def _masked_weighted_sum_nb(w, beh, lens):
    b_sz, _, d = beh.shape
    out = np.zeros((b_sz, d), dtype=beh.dtype)
    for b in range(b_sz):
        for i in range(lens[b]):
            wi = w[b, i]
            for k in range(d):
                out[b, k] += wi * beh[b, i, k]
    return out


@njit(cache=True)
def _masked_weighted_sum_bwd_nb(g, w, beh, lens):
    b_sz, n_b, d = beh.shape
    dw = np.zeros((b_sz, n_b), dtype=beh.dtype)
    dbeh = np.zeros((b_sz, n_b, d), dtype=beh.dtype)
    for b in range(b_sz):
        for i in range(lens[b]):
            acc = 0.0
            wi = w[b, i]
            for k in range(d):
                acc += g[b, k] * beh[b, i, k]
                dbeh[b, i, k] = wi * g[b, k]
            dw[b, i] = acc
    return dw, dbeh


@njit(cache=True)
def _adam_update_nb(p, g, m, v, lr, beta1, beta2, eps, bc1, bc2):
    for i in range(p.shape[0]):
        gi = g[i]
        mi = beta1 * m[i] + (1.0 - beta1) * gi
        vi = beta2 * v[i] + (1.0 - beta2) * gi * gi
        m[i] = mi
        v[i] = vi
        p[i] -= lr * (mi / bc1) / (np.sqrt(vi / bc2) + eps)


# ---------------------------------------------------------------------------
# backend selection

_PAIRS = {
    "scatter_add_rows": (_scatter_add_rows_np, _scatter_add_rows_nb),
    "dap_pool_fwd": (_dap_pool_fwd_np, _dap_pool_fwd_nb),
    "dap_pool_bwd": (_dap_pool_bwd_np, _dap_pool_bwd_nb),
    "masked_weighted_sum": (_masked_weighted_sum_np, _masked_weighted_sum_nb),
    "masked_weighted_sum_bwd": (_masked_weighted_sum_bwd_np, _masked_weighted_sum_bwd_nb),
    "adam_update": (_adam_update_np, _adam_update_nb),
}

_active_numba = False


def use_numba(flag):
    """Bind the public kernel names to the numba or numpy backend."""
    global _active_numba
    if flag and not _HAVE_NUMBA:
        raise RuntimeError("numba backend requested but numba is not installed")
    idx = 1 if flag else 0
    for name, pair in _PAIRS.items():
        globals()[name] = pair[idx]
    _active_numba = bool(flag)


def numba_enabled():
    return _active_numba


def _env_wants_numba():
    val = os.environ.get("SFPNET_NUMBA", "").strip().lower()
    if val in ("0", "off", "false", "no"):
        return False
    return _HAVE_NUMBA


use_numba(_env_wants_numba())
