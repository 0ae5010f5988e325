"""Dense numerical substrate: parameter store, layer math, Adam, checks.

All model math elsewhere in the package is expressed against the functions
here. Forward functions that participate in backprop come in pairs: a
``*_fwd`` returning ``(out, cache)`` and a ``*_bwd`` consuming the upstream
gradient plus that cache. Backward passes are hand-derived per operation
(the network is a fixed DAG, no tape needed) and are all verifiable with
:func:`grad_check`.
"""

import struct
import zlib

import numpy as np

from . import kernels
from .errors import CheckpointError, ShapeError, SfpnetError

LN_EPS = 1e-5

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8


class ParamStore:
    """Named parameter map with per-parameter Adam moment buffers.

    Names are unique; lookup of an unregistered name raises. The step
    counter ``t`` advances once per :func:`adam_step` call.
    """

    def __init__(self, dtype=np.float64):
        self.dtype = np.dtype(dtype)
        self._params = {}
        self._m = {}
        self._v = {}
        self.t = 0

    def register(self, name, value):
        if name in self._params:
            raise SfpnetError(f"parameter {name!r} registered twice")
        arr = np.ascontiguousarray(value, dtype=self.dtype)
        self._params[name] = arr
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)
        return arr

    def __getitem__(self, name):
        try:
            return self._params[name]
        except KeyError:
            raise SfpnetError(f"unknown parameter {name!r}") from None

    def __contains__(self, name):
        return name in self._params

    def names(self):
        return list(self._params)

    def items(self):
        return self._params.items()

    def moments(self, name):
        return self._m[name], self._v[name]

    def param_count(self):
        return sum(a.size for a in self._params.values())

    def clone(self):
        """Deep copy of parameters and optimizer state."""
        out = ParamStore(self.dtype)
        for name, arr in self._params.items():
            out.register(name, arr.copy())
            out._m[name][...] = self._m[name]
            out._v[name][...] = self._v[name]
        out.t = self.t
        return out

    # -- checkpoint format -------------------------------------------------
    #
    # Binary, little-endian, bit-exact round trip:
    #   magic   4 bytes  b"SFPN"
    #   version u32      currently 1
    #   count   u64      number of records
    # then per record:
    #   name_len u32, name utf-8 bytes
    #   rows i64, cols i64   (rows == 0 marks a 1-D array of length cols)
    #   dtype u8             0 = float64, 1 = float32
    #   data                 rows*cols (or cols) raw values
    # Optimizer moments and the step counter are not checkpointed; a loaded
    # store starts with fresh Adam state.

    _MAGIC = b"SFPN"
    _VERSION = 1

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(self._MAGIC)
            fh.write(struct.pack("<IQ", self._VERSION, len(self._params)))
            for name, arr in self._params.items():
                raw = name.encode("utf-8")
                fh.write(struct.pack("<I", len(raw)))
                fh.write(raw)
                if arr.ndim == 1:
                    rows, cols = 0, arr.shape[0]
                elif arr.ndim == 2:
                    rows, cols = arr.shape
                else:
                    raise CheckpointError(f"parameter {name!r} has ndim {arr.ndim}")
                code = 0 if arr.dtype == np.float64 else 1
                fh.write(struct.pack("<qqB", rows, cols, code))
                fh.write(np.ascontiguousarray(arr, dtype="<f8" if code == 0 else "<f4").tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != cls._MAGIC:
                raise CheckpointError(f"{path}: not a parameter checkpoint")
            version, count = struct.unpack("<IQ", fh.read(12))
            if version != cls._VERSION:
                raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
            store = None
            for _ in range(count):
                (name_len,) = struct.unpack("<I", fh.read(4))
                name = fh.read(name_len).decode("utf-8")
                rows, cols, code = struct.unpack("<qqB", fh.read(17))
                dt = np.dtype("<f8") if code == 0 else np.dtype("<f4")
                n = cols if rows == 0 else rows * cols
                arr = np.frombuffer(fh.read(n * dt.itemsize), dtype=dt).copy()
                if rows != 0:
                    arr = arr.reshape(rows, cols)
                if store is None:
                    store = cls(dtype=dt)
                store.register(name, arr)
            if store is None:
                raise CheckpointError(f"{path}: checkpoint holds no parameters")
            return store


def _shape_err(op, a_name, a, b_name, b):
    return ShapeError(f"{op}: {a_name} has shape {np.shape(a)}, {b_name} has shape {np.shape(b)}")


# ---------------------------------------------------------------------------
# layers and activations


def linear(x, w, b):
    """w @ x + b for a single vector or a batch of row vectors."""
    x = np.asarray(x)
    if w.ndim != 2 or x.shape[-1] != w.shape[1]:
        raise _shape_err("linear", "x", x, "W", w)
    if b.shape != (w.shape[0],):
        raise _shape_err("linear", "W", w, "b", b)
    return x @ w.T + b


def linear_bwd(g, x, w):
    """Gradients of ``linear``: returns (dx, dW, db)."""
    g2 = g.reshape(-1, g.shape[-1])
    x2 = x.reshape(-1, x.shape[-1])
    dw = g2.T @ x2
    db = g2.sum(axis=0)
    dx = g @ w
    return dx, dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_bwd(g, x):
    return g * (x > 0)


def sigmoid(x):
    """Numerically stable sigmoid, output strictly inside (0, 1)."""
    x = np.asarray(x)
    z = np.exp(-np.abs(x))
    out = np.where(x >= 0, 1.0, z) / (1.0 + z)
    fi = np.finfo(out.dtype)
    return np.clip(out, fi.tiny, 1.0 - fi.epsneg, out=out)


def sigmoid_bwd(g, s):
    return g * s * (1.0 - s)


def layer_norm_fwd(x, gain, bias, eps=LN_EPS):
    """Normalize the last axis to zero mean / unit population variance."""
    x = np.asarray(x)
    k = x.shape[-1]
    if k < 2:
        raise ShapeError(f"layer_norm: last axis has length {k}, need >= 2")
    if gain.shape != (k,) or bias.shape != (k,):
        raise _shape_err("layer_norm", "x", x, "gain/bias", gain)
    mean = x.mean(axis=-1, keepdims=True)
    var = x.var(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mean) * inv_std
    return xhat * gain + bias, (xhat, inv_std, gain)


def layer_norm(x, gain, bias, eps=LN_EPS):
    return layer_norm_fwd(x, gain, bias, eps)[0]


def layer_norm_bwd(g, cache):
    """Gradients of ``layer_norm_fwd``: returns (dx, dgain, dbias)."""
    xhat, inv_std, gain = cache
    g2 = g.reshape(-1, g.shape[-1])
    x2 = xhat.reshape(-1, xhat.shape[-1])
    dgain = (g2 * x2).sum(axis=0)
    dbias = g2.sum(axis=0)
    dxhat = g * gain
    m1 = dxhat.mean(axis=-1, keepdims=True)
    m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
    dx = inv_std * (dxhat - m1 - xhat * m2)
    return dx, dgain, dbias


# ---------------------------------------------------------------------------
# optimization


def adam_step(params, grads, lr, beta1=ADAM_BETA1, beta2=ADAM_BETA2, eps=ADAM_EPS):
    """One Adam update with bias correction over every registered parameter.

    A parameter missing from ``grads`` is treated as having zero gradient
    (its moments still decay). Mismatched gradient shapes raise.
    """
    if lr <= 0:
        raise ValueError(f"adam_step: lr must be positive, got {lr}")
    params.t += 1
    bc1 = 1.0 - beta1**params.t
    bc2 = 1.0 - beta2**params.t
    zero = None
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            if zero is None or zero.size < p.size:
                zero = np.zeros(p.size, dtype=params.dtype)
            g = zero[: p.size]
        elif g.shape != p.shape:
            raise _shape_err(f"adam_step[{name}]", "param", p, "grad", g)
        m, v = params.moments(name)
        kernels.adam_update(
            p.reshape(-1),
            np.ascontiguousarray(g, dtype=params.dtype).reshape(-1),
            m.reshape(-1),
            v.reshape(-1),
            lr,
            beta1,
            beta2,
            eps,
            bc1,
            bc2,
        )
    return params


def named_seed(seed, name):
    """Seed derived from (seed, name); stable across runs and platforms.

    Keying init on the parameter name rather than creation order keeps
    shared parameters (e.g. embeddings) bit-identical across model variants
    built from the same seed.
    """
    return np.random.SeedSequence([int(seed), zlib.crc32(name.encode("utf-8"))])


def xavier_init(rows, cols, seed, dtype=np.float64):
    """Uniform Xavier/Glorot matrix; same seed gives bit-identical output."""
    if rows < 1 or cols < 1:
        raise ValueError(f"xavier_init: need rows, cols >= 1, got ({rows}, {cols})")
    bound = np.sqrt(6.0 / (rows + cols))
    rng = np.random.default_rng(seed)
    return rng.uniform(-bound, bound, size=(rows, cols)).astype(dtype)


# ---------------------------------------------------------------------------
# verification


def grad_check(f, params, h=1e-5):
    """Compare analytic gradients of ``f`` to central differences.

    ``f(params)`` must return ``(loss, grads)`` where ``grads`` maps
    parameter names to arrays. Every entry of every parameter is perturbed
    by ±h; the relative error uses max(|analytic|, |numeric|, 1e-8) as
    denominator. Returns a dict of per-parameter max relative error.
    """
    if not (1e-7 <= h <= 1e-3):
        raise ValueError(f"grad_check: h must be in [1e-7, 1e-3], got {h}")
    loss0, grads = f(params)
    if not np.isfinite(loss0):
        raise SfpnetError("grad_check: loss is non-finite at the unperturbed point")
    errs = {}
    for name, p in params.items():
        analytic = grads.get(name)
        if analytic is None:
            analytic = np.zeros_like(p)
        flat = p.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            lp, _ = f(params)
            flat[i] = orig - h
            lm, _ = f(params)
            flat[i] = orig
            if not (np.isfinite(lp) and np.isfinite(lm)):
                raise SfpnetError(
                    f"grad_check: non-finite loss when perturbing {name}[{i}]"
                )
            numeric = (lp - lm) / (2.0 * h)
            a = float(analytic.reshape(-1)[i])
            denom = max(abs(a), abs(numeric), 1e-8)
            err = abs(a - numeric) / denom
            if err > worst:
                worst = err
        errs[name] = worst
    return errs
