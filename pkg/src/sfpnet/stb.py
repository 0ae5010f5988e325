"""Scenario-tailoring block: scenario-adaptive gating plus residual tailoring.

One block (a) pools the behavior sequence into a mean/std summary, (b) gates
the concatenated feature representations with a scenario-conditioned sigmoid
gate, (c) aggregates the gated vector into a global context, and (d) rewrites
every non-sequence feature and every individual behavior through a gated
residual connection against its slice of that context. Blocks stack; the
scenario vector is injected unchanged into every block's gate.

All ops accept a single sample (vectors / one matrix) or a leading batch
axis; backward passes live on the Block/BlockStack classes and are verified
by grad_check.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ConfigError, ShapeError
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


class GateParams(NamedTuple):
    w0: np.ndarray
    b0: np.ndarray
    ln_gain: np.ndarray
    ln_bias: np.ndarray
    w1: np.ndarray
    b1: np.ndarray


class AggParams(NamedTuple):
    w2: np.ndarray
    b2: np.ndarray
    w3: np.ndarray
    b3: np.ndarray


class TailorParams(NamedTuple):
    w_main: np.ndarray
    b_main: np.ndarray
    w_gate: np.ndarray
    b_gate: np.ndarray


class SeqParams(NamedTuple):
    tailor: TailorParams
    proj: np.ndarray  # (d_out, 2*d_out), maps the sequence context slice down
    proj_b: np.ndarray


# ---------------------------------------------------------------------------
# spec operations (forward)


def dap_pool(behaviors, seq_len, with_std=True):
    """Mean and population std over the first seq_len rows, concatenated.

    Rows at index >= seq_len must be zero. seq_len 0 yields a zero vector.
    With ``with_std=False`` (plain-average ablation) the std half is zero.
    """
    behaviors = np.asarray(behaviors)
    single = behaviors.ndim == 2
    beh = behaviors[None] if single else behaviors
    lens = np.atleast_1d(np.asarray(seq_len, dtype=np.int64))
    mean, std = kernels.dap_pool_fwd(np.ascontiguousarray(beh), lens)
    if not with_std:
        std = np.zeros_like(mean)
    out = np.concatenate([mean, std], axis=-1)
    return out[0] if single else out


def _gate_input(features, bpool, scenario):
    flat = np.asarray(features).reshape(*np.shape(features)[:-2], -1)
    return np.concatenate([flat, bpool, scenario], axis=-1)


def sam_gate_fwd(features, bpool, scenario, gp):
    x = _gate_input(features, bpool, scenario)
    h = linear(x, gp.w0, gp.b0)
    r = relu(h)
    ln, ln_cache = layer_norm_fwd(r, gp.ln_gain, gp.ln_bias)
    z = linear(ln, gp.w1, gp.b1)
    a = sigmoid(z)
    return a, (x, h, r, ln_cache, ln, a)


def sam_gate(features, bpool, scenario, gp):
    """Scenario-conditioned gate in (0,1) over concat(features, pooled seq)."""
    return sam_gate_fwd(features, bpool, scenario, gp)[0]


def sam_gate_bwd(da, cache, gp):
    x, h, r, ln_cache, ln, a = cache
    dz = sigmoid_bwd(da, a)
    dln, dw1, db1 = linear_bwd(dz, ln, gp.w1)
    dr, dg, dbeta = layer_norm_bwd(dln, ln_cache)
    dh = relu_bwd(dr, h)
    dx, dw0, db0 = linear_bwd(dh, x, gp.w0)
    return dx, GateParams(dw0, db0, dg, dbeta, dw1, db1)


def sam_rescale(features, bpool, gate_weights):
    """Elementwise product of concat(flat features, pooled seq) with the gate."""
    flat = np.asarray(features).reshape(*np.shape(features)[:-2], -1)
    fb = np.concatenate([flat, bpool], axis=-1)
    if fb.shape != np.shape(gate_weights):
        raise ShapeError(
            f"sam_rescale: input has shape {fb.shape}, gate has shape {np.shape(gate_weights)}"
        )
    return fb * gate_weights


def rtm_aggregate_fwd(xhat, ap):
    h = linear(xhat, ap.w2, ap.b2)
    r = relu(h)
    c = linear(r, ap.w3, ap.b3)
    return c, (xhat, h, r)


def rtm_aggregate(xhat, ap):
    """Two-layer interaction net producing the global context vector."""
    return rtm_aggregate_fwd(xhat, ap)[0]


def rtm_aggregate_bwd(dc, cache, ap):
    xhat, h, r = cache
    dr, dw3, db3 = linear_bwd(dc, r, ap.w3)
    dh = relu_bwd(dr, h)
    dx, dw2, db2 = linear_bwd(dh, xhat, ap.w2)
    return dx, AggParams(dw2, db2, dw3, db3)


def rtm_tailor_fwd(x, ctx, tp):
    p_pre = linear(x, tp.w_main, tp.b_main)
    p = relu(p_pre)
    q_pre = linear(x, tp.w_gate, tp.b_gate)
    q = sigmoid(q_pre)
    return p + q * ctx, (x, p_pre, q, ctx)


def rtm_tailor_feature(x, ctx, tp):
    """Gated residual rewrite: relu branch plus sigmoid-gated context slice."""
    return rtm_tailor_fwd(x, ctx, tp)[0]


def rtm_tailor_bwd(g, cache, tp):
    """Returns (dx, dctx_elementwise, dparams); caller reduces dctx if broadcast."""
    x, p_pre, q, ctx = cache
    dp = relu_bwd(g, p_pre)
    dq_pre = sigmoid_bwd(g * ctx, q)
    dctx = g * q
    dx1, dw1, db1 = linear_bwd(dp, x, tp.w_main)
    dx2, dw2, db2 = linear_bwd(dq_pre, x, tp.w_gate)
    return dx1 + dx2, dctx, TailorParams(dw1, db1, dw2, db2)


def rtm_tailor_behavior(v, c_b, sp):
    """Per-behavior rewrite; the sequence context slice (2*d_out) is first
    projected down to d_out, then shared across all behavior positions."""
    ctx = linear(c_b, sp.proj, sp.proj_b)
    return rtm_tailor_fwd(v, ctx, sp.tailor)[0]


# ---------------------------------------------------------------------------
# one block


@dataclass
class BlockState:
    """Intermediates of one block forward pass (kept for backward)."""

    feats_in: np.ndarray
    beh_in: np.ndarray
    seq_len: np.ndarray
    bpool: np.ndarray  # (B, 2*d_in)
    gate: np.ndarray  # A, (B, (n+2)*d_in); all-ones when SAM is off
    xhat: np.ndarray  # (B, (n+2)*d_in)
    context: np.ndarray  # (B, (n+2)*d_out); None when RTM is off
    feats_out: np.ndarray
    beh_out: np.ndarray
    _caches: dict = None


class Block:
    """Parameters and forward/backward of one scenario-tailoring block."""

    def __init__(
        self,
        params,
        index,
        n_fields,
        d_in,
        d_out,
        d_scen,
        seed,
        hidden_gate=None,
        hidden_agg=None,
        no_dap=False,
        no_sam=False,
        no_rtm=False,
    ):
        self.prefix = f"stb{index}"
        self.n = n_fields
        self.d_in = d_in
        self.d_out = d_out
        self.d_scen = d_scen
        self.no_dap = no_dap
        self.no_sam = no_sam
        self.no_rtm = no_rtm
        self.params = params
        width = (n_fields + 2) * d_in
        self.hidden_gate = hidden_gate or width
        self.hidden_agg = hidden_agg or width

        def reg(name, rows, cols=None):
            pname = f"{self.prefix}.{name}"
            if cols is None:
                arr = np.zeros(rows, dtype=params.dtype)
            else:
                arr = xavier_init(rows, cols, named_seed(seed, pname), dtype=params.dtype)
            return params.register(pname, arr)

        if not no_sam:
            reg("gate.W0", self.hidden_gate, width + d_scen)
            reg("gate.b0", self.hidden_gate)
            params.register(f"{self.prefix}.gate.ln_gain", np.ones(self.hidden_gate, dtype=params.dtype))
            reg("gate.ln_bias", self.hidden_gate)
            reg("gate.W1", width, self.hidden_gate)
            reg("gate.b1", width)
        if not no_rtm:
            reg("agg.W2", self.hidden_agg, width)
            reg("agg.b2", self.hidden_agg)
            reg("agg.W3", (n_fields + 2) * d_out, self.hidden_agg)
            reg("agg.b3", (n_fields + 2) * d_out)
        for i in range(n_fields):
            reg(f"feat{i}.W1", d_out, d_in)
            reg(f"feat{i}.b1", d_out)
            if not no_rtm:
                reg(f"feat{i}.W2", d_out, d_in)
                reg(f"feat{i}.b2", d_out)
        reg("seq.W4", d_out, d_in)
        reg("seq.b4", d_out)
        if not no_rtm:
            reg("seq.W5", d_out, d_in)
            reg("seq.b5", d_out)
            reg("seq.P", d_out, 2 * d_out)
            reg("seq.bP", d_out)

    def _p(self, name):
        return self.params[f"{self.prefix}.{name}"]

    def gate_params(self):
        return GateParams(
            self._p("gate.W0"), self._p("gate.b0"),
            self._p("gate.ln_gain"), self._p("gate.ln_bias"),
            self._p("gate.W1"), self._p("gate.b1"),
        )

    def agg_params(self):
        return AggParams(self._p("agg.W2"), self._p("agg.b2"), self._p("agg.W3"), self._p("agg.b3"))

    def feat_params(self, i):
        if self.no_rtm:
            return TailorParams(self._p(f"feat{i}.W1"), self._p(f"feat{i}.b1"), None, None)
        return TailorParams(
            self._p(f"feat{i}.W1"), self._p(f"feat{i}.b1"),
            self._p(f"feat{i}.W2"), self._p(f"feat{i}.b2"),
        )

    def seq_params(self):
        tailor = TailorParams(
            self._p("seq.W4"), self._p("seq.b4"),
            None if self.no_rtm else self._p("seq.W5"),
            None if self.no_rtm else self._p("seq.b5"),
        )
        if self.no_rtm:
            return SeqParams(tailor, None, None)
        return SeqParams(tailor, self._p("seq.P"), self._p("seq.bP"))

    def forward(self, feats, beh, seq_len, scenario):
        """feats (B,n,d_in), beh (B,N_b,d_in), seq_len (B,), scenario (B,d_scen)."""
        b_sz, n, d_in = feats.shape
        if n != self.n or d_in != self.d_in:
            raise ShapeError(
                f"{self.prefix}: features have shape {feats.shape}, block expects (*, {self.n}, {self.d_in})"
            )
        caches = {}
        bpool = dap_pool(beh, seq_len, with_std=not self.no_dap)
        flat = feats.reshape(b_sz, -1)
        fb = np.concatenate([flat, bpool], axis=-1)
        if self.no_sam:
            a = np.ones_like(fb)
            xhat = fb
        else:
            a, caches["gate"] = sam_gate_fwd(feats, bpool, scenario, self.gate_params())
            xhat = fb * a

        mask = (np.arange(beh.shape[1])[None, :] < seq_len[:, None]).astype(feats.dtype)[:, :, None]
        feats_out = np.empty((b_sz, n, self.d_out), dtype=feats.dtype)
        if self.no_rtm:
            context = None
            for i in range(n):
                xi = xhat[:, i * d_in : (i + 1) * d_in]
                pre = linear(xi, self._p(f"feat{i}.W1"), self._p(f"feat{i}.b1"))
                feats_out[:, i, :] = relu(pre)
                caches[f"feat{i}"] = (xi, pre)
            pre_b = linear(beh, self._p("seq.W4"), self._p("seq.b4"))
            beh_out = relu(pre_b) * mask
            caches["seq"] = (pre_b,)
        else:
            context, caches["agg"] = rtm_aggregate_fwd(xhat, self.agg_params())
            d_out = self.d_out
            for i in range(n):
                xi = xhat[:, i * d_in : (i + 1) * d_in]
                ci = context[:, i * d_out : (i + 1) * d_out]
                feats_out[:, i, :], caches[f"feat{i}"] = rtm_tailor_fwd(xi, ci, self.feat_params(i))
            sp = self.seq_params()
            c_b = context[:, n * d_out :]
            ctx = linear(c_b, sp.proj, sp.proj_b)
            out, tcache = rtm_tailor_fwd(beh, ctx[:, None, :], sp.tailor)
            beh_out = out * mask
            caches["seq"] = (c_b, ctx, tcache)
        state = BlockState(
            feats_in=feats, beh_in=beh, seq_len=seq_len, bpool=bpool, gate=a,
            xhat=xhat, context=context, feats_out=feats_out, beh_out=beh_out,
            _caches=caches,
        )
        state._caches["mask"] = mask
        return state

    def backward(self, dfeats_out, dbeh_out, state, grads):
        """Returns (dfeats_in, dbeh_in, dscenario); accumulates into grads."""
        b_sz, n, d_in = state.feats_in.shape
        d_out = self.d_out
        caches = state._caches
        mask = caches["mask"]
        dbeh_out = dbeh_out * mask
        width = (n + 2) * d_in

        def acc(name, val):
            pname = f"{self.prefix}.{name}"
            if pname in grads:
                grads[pname] += val
            else:
                grads[pname] = val

        dxhat = np.zeros((b_sz, width), dtype=state.xhat.dtype)
        dbeh_in = np.zeros_like(state.beh_in)

        if self.no_rtm:
            for i in range(n):
                xi, pre = caches[f"feat{i}"]
                dpre = relu_bwd(dfeats_out[:, i, :], pre)
                dxi, dw, db = linear_bwd(dpre, xi, self._p(f"feat{i}.W1"))
                acc(f"feat{i}.W1", dw)
                acc(f"feat{i}.b1", db)
                dxhat[:, i * d_in : (i + 1) * d_in] = dxi
            (pre_b,) = caches["seq"]
            dpre_b = relu_bwd(dbeh_out, pre_b)
            dbi, dw4, db4 = linear_bwd(dpre_b, state.beh_in, self._p("seq.W4"))
            acc("seq.W4", dw4)
            acc("seq.b4", db4)
            dbeh_in += dbi
        else:
            dcontext = np.zeros_like(state.context)
            sp = self.seq_params()
            c_b, ctx, tcache = caches["seq"]
            dbi, dctx_el, dtp = rtm_tailor_bwd(dbeh_out, tcache, sp.tailor)
            dbeh_in += dbi
            dctx = dctx_el.sum(axis=1)
            acc("seq.W4", dtp.w_main)
            acc("seq.b4", dtp.b_main)
            acc("seq.W5", dtp.w_gate)
            acc("seq.b5", dtp.b_gate)
            dc_b, dp_mat, dp_b = linear_bwd(dctx, c_b, sp.proj)
            acc("seq.P", dp_mat)
            acc("seq.bP", dp_b)
            dcontext[:, n * d_out :] = dc_b
            for i in range(n):
                dxi, dci, dtp = rtm_tailor_bwd(dfeats_out[:, i, :], caches[f"feat{i}"], self.feat_params(i))
                dxhat[:, i * d_in : (i + 1) * d_in] = dxi
                dcontext[:, i * d_out : (i + 1) * d_out] = dci
                acc(f"feat{i}.W1", dtp.w_main)
                acc(f"feat{i}.b1", dtp.b_main)
                acc(f"feat{i}.W2", dtp.w_gate)
                acc(f"feat{i}.b2", dtp.b_gate)
            dxh_agg, dap = rtm_aggregate_bwd(dcontext, caches["agg"], self.agg_params())
            dxhat += dxh_agg
            acc("agg.W2", dap.w2)
            acc("agg.b2", dap.b2)
            acc("agg.W3", dap.w3)
            acc("agg.b3", dap.b3)

        if self.no_sam:
            dfb = dxhat
            dscen = np.zeros((b_sz, self.d_scen), dtype=state.xhat.dtype)
        else:
            flat = state.feats_in.reshape(b_sz, -1)
            fb = np.concatenate([flat, state.bpool], axis=-1)
            da = dxhat * fb
            dfb = dxhat * state.gate
            dx_gate, dgp = sam_gate_bwd(da, caches["gate"], self.gate_params())
            acc("gate.W0", dgp.w0)
            acc("gate.b0", dgp.b0)
            acc("gate.ln_gain", dgp.ln_gain)
            acc("gate.ln_bias", dgp.ln_bias)
            acc("gate.W1", dgp.w1)
            acc("gate.b1", dgp.b1)
            dfb = dfb + dx_gate[:, :width]
            dscen = dx_gate[:, width:]

        dfeats_in = dfb[:, : n * d_in].reshape(b_sz, n, d_in)
        dbpool = dfb[:, n * d_in :]
        dmean = dbpool[:, :d_in]
        dstd = dbpool[:, d_in:]
        if self.no_dap:
            dstd = np.zeros_like(dstd)
        beh = np.ascontiguousarray(state.beh_in)
        lens = state.seq_len
        mean, std = kernels.dap_pool_fwd(beh, lens)
        dbeh_in += kernels.dap_pool_bwd(
            np.ascontiguousarray(dmean), np.ascontiguousarray(dstd), beh, lens, mean, std
        )
        return dfeats_in, dbeh_in, dscen


class BlockStack:
    """L stacked blocks; L = 0 is the identity (the no-STB ablation)."""

    def __init__(self, params, n_fields, dims, d_scen, seed, hidden_gate=None,
                 hidden_agg=None, no_dap=False, no_sam=False, no_rtm=False):
        if any(d < 1 for d in dims):
            raise ConfigError(f"block dims must be positive, got {dims}")
        self.dims = list(dims)
        self.blocks = [
            Block(
                params, l, n_fields, dims[l], dims[l + 1], d_scen, seed,
                hidden_gate=hidden_gate, hidden_agg=hidden_agg,
                no_dap=no_dap, no_sam=no_sam, no_rtm=no_rtm,
            )
            for l in range(len(dims) - 1)
        ]

    def forward(self, feats, beh, seq_len, scenario):
        states = []
        for blk in self.blocks:
            state = blk.forward(feats, beh, seq_len, scenario)
            feats, beh = state.feats_out, state.beh_out
            states.append(state)
        return feats, beh, states

    def backward(self, dfeats, dbeh, states, grads):
        dscen_total = None
        for blk, state in zip(reversed(self.blocks), reversed(states)):
            dfeats, dbeh, dscen = blk.backward(dfeats, dbeh, state, grads)
            dscen_total = dscen if dscen_total is None else dscen_total + dscen
        if dscen_total is None:
            dscen_total = 0.0
        return dfeats, dbeh, dscen_total


def stack_forward(encoded, blocks):
    """Single-instance stack application (reference path for tests).

    ``blocks`` is a BlockStack; returns (features n x d_L, behaviors N_b x d_L).
    """
    feats = encoded.features[None]
    beh = encoded.behaviors[None]
    lens = np.asarray([encoded.seq_len], dtype=np.int64)
    scen = encoded.scenario[None]
    f, b, _ = blocks.forward(feats, beh, lens, scen)
    return f[0], b[0]
