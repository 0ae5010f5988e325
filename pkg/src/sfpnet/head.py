"""Prediction layer: target attention, scenario-gated DNN tower, loss.

The attention scorer follows the DIN convention: a small MLP over the
4-way interaction [v, t, v-t, v*t] produces one unnormalized weight per
behavior and the pooled vector is the weighted sum over real positions
(softmax normalization is available behind a flag). The tower gates each
hidden layer elementwise with a scenario-conditioned sigmoid before the
layer's linear+relu.
"""

from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ShapeError
from .numerics import (
    layer_norm_bwd,
    layer_norm_fwd,
    linear,
    linear_bwd,
    named_seed,
    relu,
    relu_bwd,
    sigmoid,
    sigmoid_bwd,
    xavier_init,
)


class AttentionParams(NamedTuple):
    w1: np.ndarray  # (hidden, 4*d)
    b1: np.ndarray
    w2: np.ndarray  # (1, hidden)
    b2: np.ndarray


class SdnnLayerParams(NamedTuple):
    w6: np.ndarray
    b6: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w7: np.ndarray
    b7: np.ndarray
    w8: np.ndarray
    b8: np.ndarray


# ---------------------------------------------------------------------------
# target attention


def attention_pool(scores, behaviors, seq_len):
    """Weighted sum of behavior rows over the first seq_len positions."""
    behaviors = np.asarray(behaviors)
    single = behaviors.ndim == 2
    beh = behaviors[None] if single else behaviors
    w = np.asarray(scores, dtype=beh.dtype)
    w = w[None] if single else w
    lens = np.atleast_1d(np.asarray(seq_len, dtype=np.int64))
    out = kernels.masked_weighted_sum(np.ascontiguousarray(w), np.ascontiguousarray(beh), lens)
    return out[0] if single else out


def _interaction(beh, tgt):
    t = np.broadcast_to(tgt[..., None, :], beh.shape)
    return np.concatenate([beh, t, beh - t, beh * t], axis=-1)


def din_scores_fwd(beh, tgt, ap):
    z = _interaction(beh, tgt)
    h = linear(z, ap.w1, ap.b1)
    r = relu(h)
    s = linear(r, ap.w2, ap.b2)[..., 0]
    return s, (z, h, r)


def din_attention(behaviors, seq_len, target, ap, softmax=False):
    """DIN-style pooled vector; seq_len 0 gives the zero vector."""
    behaviors = np.asarray(behaviors)
    single = behaviors.ndim == 2
    beh = behaviors[None] if single else behaviors
    tgt = np.asarray(target)
    tgt = tgt[None] if single else tgt
    lens = np.atleast_1d(np.asarray(seq_len, dtype=np.int64))
    s, _ = din_scores_fwd(beh, tgt, ap)
    if softmax:
        s = masked_softmax(s, lens)
    out = kernels.masked_weighted_sum(
        np.ascontiguousarray(s), np.ascontiguousarray(beh), lens
    )
    return out[0] if single else out


def masked_softmax(s, lens):
    n_b = s.shape[-1]
    mask = np.arange(n_b)[None, :] < lens[:, None]
    neg = np.where(mask, s, -np.inf)
    mx = np.max(neg, axis=-1, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    e = np.exp(neg - mx)
    e = np.where(mask, e, 0.0)
    denom = e.sum(axis=-1, keepdims=True)
    return e / np.maximum(denom, 1e-300)


# ---------------------------------------------------------------------------
# scenario-gated tower


def sdnn_layer_fwd(h_prev, scenario, lp):
    gi = np.concatenate([h_prev, scenario], axis=-1)
    g0 = linear(gi, lp.w6, lp.b6)
    r0 = relu(g0)
    ln, ln_cache = layer_norm_fwd(r0, lp.ln_gain, lp.ln_bias)
    z = linear(ln, lp.w7, lp.b7)
    ap = sigmoid(z)
    hg = h_prev * ap
    pre = linear(hg, lp.w8, lp.b8)
    h = relu(pre)
    cache = (gi, g0, ln_cache, ln, ap, h_prev, hg, pre)
    return h, cache


def sdnn_layer(h_prev, scenario, lp):
    """One scenario-gated tower layer: relu(W8 (h ⊗ gate(h, s)) + b8)."""
    return sdnn_layer_fwd(h_prev, scenario, lp)[0]


def sdnn_layer_bwd(dh, cache, lp):
    gi, g0, ln_cache, ln, ap, h_prev, hg, pre = cache
    dpre = relu_bwd(dh, pre)
    dhg, dw8, db8 = linear_bwd(dpre, hg, lp.w8)
    dh_prev = dhg * ap
    dap = dhg * h_prev
    dz = sigmoid_bwd(dap, ap)
    dln, dw7, db7 = linear_bwd(dz, ln, lp.w7)
    dr0, dg, dbeta = layer_norm_bwd(dln, ln_cache)
    dg0 = relu_bwd(dr0, g0)
    dgi, dw6, db6 = linear_bwd(dg0, gi, lp.w6)
    k = h_prev.shape[-1]
    dh_prev = dh_prev + dgi[..., :k]
    dscen = dgi[..., k:]
    return dh_prev, dscen, SdnnLayerParams(dw6, db6, dg, dbeta, dw7, db7, dw8, db8)


# ---------------------------------------------------------------------------
# loss


def bce_loss(preds, labels):
    """Mean binary cross entropy with predictions clamped to [1e-12, 1-1e-12]."""
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.size == 0:
        raise ValueError("bce_loss: empty batch")
    if preds.shape != labels.shape:
        raise ShapeError(f"bce_loss: preds {preds.shape} vs labels {labels.shape}")
    p = np.clip(preds, 1e-12, 1.0 - 1e-12)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log1p(-p)))


# ---------------------------------------------------------------------------
# assembled head


class Head:
    """Attention pooling + scenario-gated tower + final logit."""

    def __init__(self, params, n_fields, d_feat, d_target, d_scen, sdnn_sizes,
                 seed, attn_hidden=16, no_sdnn=False, softmax_attn=False):
        self.params = params
        self.n = n_fields
        self.d_feat = d_feat
        self.d_target = d_target
        self.d_scen = d_scen
        self.sizes = list(sdnn_sizes)
        self.no_sdnn = no_sdnn
        self.softmax_attn = softmax_attn
        self.project_target = d_target != d_feat

        def reg(name, rows, cols=None):
            pname = f"head.{name}"
            if cols is None:
                arr = np.zeros(rows, dtype=params.dtype)
            else:
                arr = xavier_init(rows, cols, named_seed(seed, pname), dtype=params.dtype)
            return params.register(pname, arr)

        if self.project_target:
            reg("attn.proj.W", d_feat, d_target)
            reg("attn.proj.b", d_feat)
        reg("attn.l1.W", attn_hidden, 4 * d_feat)
        reg("attn.l1.b", attn_hidden)
        reg("attn.l2.W", 1, attn_hidden)
        reg("attn.l2.b", 1)
        h_prev = n_fields * d_feat + d_feat
        for j, h in enumerate(self.sizes):
            if not no_sdnn:
                reg(f"sdnn{j}.gate.W6", h_prev, h_prev + d_scen)
                reg(f"sdnn{j}.gate.b6", h_prev)
                params.register(f"head.sdnn{j}.gate.ln_gain", np.ones(h_prev, dtype=params.dtype))
                reg(f"sdnn{j}.gate.ln_bias", h_prev)
                reg(f"sdnn{j}.gate.W7", h_prev, h_prev)
                reg(f"sdnn{j}.gate.b7", h_prev)
            reg(f"sdnn{j}.main.W8", h, h_prev)
            reg(f"sdnn{j}.main.b8", h)
            h_prev = h
        reg("out.W", 1, h_prev)
        reg("out.b", 1)

    def _p(self, name):
        return self.params[f"head.{name}"]

    def attn_params(self):
        return AttentionParams(
            self._p("attn.l1.W"), self._p("attn.l1.b"),
            self._p("attn.l2.W"), self._p("attn.l2.b"),
        )

    def layer_params(self, j):
        if self.no_sdnn:
            return SdnnLayerParams(
                None, None, None, None, None, None,
                self._p(f"sdnn{j}.main.W8"), self._p(f"sdnn{j}.main.b8"),
            )
        return SdnnLayerParams(
            self._p(f"sdnn{j}.gate.W6"), self._p(f"sdnn{j}.gate.b6"),
            self._p(f"sdnn{j}.gate.ln_gain"), self._p(f"sdnn{j}.gate.ln_bias"),
            self._p(f"sdnn{j}.gate.W7"), self._p(f"sdnn{j}.gate.b7"),
            self._p(f"sdnn{j}.main.W8"), self._p(f"sdnn{j}.main.b8"),
        )

    def forward(self, feats, beh, lens, target, scenario):
        """Returns (yhat (B,), cache)."""
        b_sz = feats.shape[0]
        caches = {}
        if self.project_target:
            tgt = linear(target, self._p("attn.proj.W"), self._p("attn.proj.b"))
            caches["proj_in"] = target
        else:
            tgt = target
        ap = self.attn_params()
        s, caches["scores"] = din_scores_fwd(beh, tgt, ap)
        if self.softmax_attn:
            w = masked_softmax(s, lens)
            caches["softmax"] = (s, w)
        else:
            w = s
        v = kernels.masked_weighted_sum(
            np.ascontiguousarray(w), np.ascontiguousarray(beh), lens
        )
        caches["pool"] = (w, np.ascontiguousarray(beh), lens, tgt)
        h = np.concatenate([feats.reshape(b_sz, -1), v], axis=-1)
        caches["h0"] = h
        hs = []
        for j in range(len(self.sizes)):
            lp = self.layer_params(j)
            if self.no_sdnn:
                pre = linear(h, lp.w8, lp.b8)
                out = relu(pre)
                hs.append((h, pre))
            else:
                out, c = sdnn_layer_fwd(h, scenario, lp)
                hs.append(c)
            h = out
        caches["layers"] = hs
        caches["h_last"] = h
        logit = linear(h, self._p("out.W"), self._p("out.b"))[..., 0]
        yhat = sigmoid(logit)
        caches["yhat"] = yhat
        return yhat, caches

    def backward(self, dlogit, caches, grads):
        """From dLoss/dlogit back to (dfeats, dbeh, dtarget, dscenario)."""

        def acc(name, val):
            pname = f"head.{name}"
            if pname in grads:
                grads[pname] += val
            else:
                grads[pname] = val

        h_last = caches["h_last"]
        dh, dw, db = linear_bwd(dlogit[..., None], h_last, self._p("out.W"))
        acc("out.W", dw)
        acc("out.b", db)
        dscen_total = None
        for j in reversed(range(len(self.sizes))):
            lp = self.layer_params(j)
            c = caches["layers"][j]
            if self.no_sdnn:
                h_in, pre = c
                dpre = relu_bwd(dh, pre)
                dh, dw8, db8 = linear_bwd(dpre, h_in, lp.w8)
                acc(f"sdnn{j}.main.W8", dw8)
                acc(f"sdnn{j}.main.b8", db8)
            else:
                dh, dscen, dlp = sdnn_layer_bwd(dh, c, lp)
                acc(f"sdnn{j}.gate.W6", dlp.w6)
                acc(f"sdnn{j}.gate.b6", dlp.b6)
                acc(f"sdnn{j}.gate.ln_gain", dlp.ln_gain)
                acc(f"sdnn{j}.gate.ln_bias", dlp.ln_bias)
                acc(f"sdnn{j}.gate.W7", dlp.w7)
                acc(f"sdnn{j}.gate.b7", dlp.b7)
                acc(f"sdnn{j}.main.W8", dlp.w8)
                acc(f"sdnn{j}.main.b8", dlp.b8)
                dscen_total = dscen if dscen_total is None else dscen_total + dscen
        b_sz = h_last.shape[0]
        n_flat = self.n * self.d_feat
        dfeats = dh[:, :n_flat].reshape(b_sz, self.n, self.d_feat)
        dv = dh[:, n_flat:]
        w, beh, lens, tgt = caches["pool"]
        dw_scores, dbeh = kernels.masked_weighted_sum_bwd(
            np.ascontiguousarray(dv), w, beh, lens
        )
        if self.softmax_attn:
            s, soft = caches["softmax"]
            inner = (dw_scores * soft).sum(axis=-1, keepdims=True)
            ds = soft * (dw_scores - inner)
        else:
            ds = dw_scores
        z, h_mlp, r = caches["scores"]
        ap = self.attn_params()
        dr, dw2, db2 = linear_bwd(ds[..., None], r, ap.w2)
        acc("attn.l2.W", dw2)
        acc("attn.l2.b", db2)
        dhm = relu_bwd(dr, h_mlp)
        dz, dw1, db1 = linear_bwd(dhm, z, ap.w1)
        acc("attn.l1.W", dw1)
        acc("attn.l1.b", db1)
        d = self.d_feat
        t_b = np.broadcast_to(tgt[:, None, :], beh.shape)
        dbeh = dbeh + dz[..., :d] + dz[..., 2 * d : 3 * d] + dz[..., 3 * d :] * t_b
        dtgt = (dz[..., d : 2 * d] - dz[..., 2 * d : 3 * d] + dz[..., 3 * d :] * beh).sum(axis=1)
        if self.project_target:
            dtgt, dwp, dbp = linear_bwd(dtgt, caches["proj_in"], self._p("attn.proj.W"))
            acc("attn.proj.W", dwp)
            acc("attn.proj.b", dbp)
        if dscen_total is None:
            dscen_total = np.zeros((b_sz, self.d_scen), dtype=h_last.dtype)
        return dfeats, dbeh, dtgt, dscen_total
