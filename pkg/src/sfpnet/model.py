"""Model assembly: configuration, the full ranking model, and the baseline.

``build_model`` wires embeddings, the block stack and the prediction head
into one trainable unit with a shared ParamStore. Initialization is fully
determined by (seed, parameter name), so two builds from the same seed are
bit-identical and variants that share a parameter share its init.
"""

from dataclasses import dataclass, replace

import numpy as np

from . import kernels
from .encoding import Encoder
from .errors import ConfigError
from .head import Head, bce_loss
from .numerics import (
    ParamStore,
    linear,
    linear_bwd,
    named_seed,
    relu,
    relu_bwd,
    sigmoid,
    xavier_init,
)
from .stb import BlockStack

ABLATION_FLAGS = ("no_dap", "no_sam", "no_rtm", "no_sdnn", "no_stb")


@dataclass(frozen=True)
class ModelConfig:
    kind: str = "sfpnet"  # sfpnet | basednn
    l_blocks: int = 3
    d: int = 40
    block_dims: tuple = None  # per-block output dim; defaults to d everywhere
    hidden_gate: int = None  # gate hidden width; default (n+2)*d_in
    hidden_agg: int = None
    sdnn_sizes: tuple = (256, 128, 64)
    attn_hidden: int = 16
    attn_softmax: bool = False
    no_dap: bool = False
    no_sam: bool = False
    no_rtm: bool = False
    no_sdnn: bool = False
    no_stb: bool = False

    def validate(self):
        if self.kind not in ("sfpnet", "basednn"):
            raise ConfigError(f"unknown model kind {self.kind!r}")
        if self.l_blocks < 0:
            raise ConfigError(f"l_blocks must be >= 0, got {self.l_blocks}")
        if self.d < 1:
            raise ConfigError(f"embedding dim must be >= 1, got {self.d}")
        if self.block_dims is not None and len(self.block_dims) != self.l_blocks:
            raise ConfigError(
                f"block_dims has {len(self.block_dims)} entries for {self.l_blocks} blocks"
            )
        if any(h < 1 for h in self.sdnn_sizes):
            raise ConfigError(f"sdnn_sizes must be positive, got {self.sdnn_sizes}")

    def with_flag(self, flag):
        if flag == "full":
            return self
        if flag not in ABLATION_FLAGS:
            raise ConfigError(f"unknown ablation flag {flag!r}")
        return replace(self, **{flag: True})


class SFPNetModel:
    """Embeddings -> L tailoring blocks -> attention + gated tower -> p(click)."""

    kind = "sfpnet"

    def __init__(self, cfg, schema, seed, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.schema = schema
        self.seed = seed
        self.params = ParamStore(dtype)
        self.encoder = Encoder(schema, self.params, seed, cfg.d)
        eff_l = 0 if cfg.no_stb else cfg.l_blocks
        dims = [cfg.d] + list(cfg.block_dims if cfg.block_dims else (cfg.d,) * eff_l)[:eff_l]
        if len(dims) != eff_l + 1:
            raise ConfigError(f"block dim chain {dims} does not cover {eff_l} blocks")
        self.stack = BlockStack(
            self.params, schema.n_fields, dims, cfg.d, seed,
            hidden_gate=cfg.hidden_gate, hidden_agg=cfg.hidden_agg,
            no_dap=cfg.no_dap, no_sam=cfg.no_sam, no_rtm=cfg.no_rtm,
        )
        self.head = Head(
            self.params, schema.n_fields, dims[-1], cfg.d, cfg.d, cfg.sdnn_sizes,
            seed, attn_hidden=cfg.attn_hidden, no_sdnn=cfg.no_sdnn,
            softmax_attn=cfg.attn_softmax,
        )

    def forward(self, idb):
        feats, beh, target, scenario, enc_cache = self.encoder.forward(idb)
        f_out, b_out, states = self.stack.forward(feats, beh, idb.seq_len, scenario)
        yhat, head_cache = self.head.forward(f_out, b_out, idb.seq_len, target, scenario)
        return yhat, (enc_cache, states, head_cache, idb)

    def backward(self, yhat, labels, cache):
        """Mean-BCE gradient through the whole model; returns the grads dict."""
        enc_cache, states, head_cache, idb = cache
        grads = {}
        dlogit = (yhat - labels) / labels.shape[0]
        dfeats, dbeh, dtgt, dscen = self.head.backward(dlogit, head_cache, grads)
        dfeats, dbeh, dscen_stack = self.stack.backward(dfeats, dbeh, states, grads)
        dscen = dscen + dscen_stack
        self.encoder.backward(dfeats, dbeh, dtgt, dscen, enc_cache, grads)
        return grads

    def loss_and_grads(self, idb):
        yhat, cache = self.forward(idb)
        loss = bce_loss(yhat, idb.label)
        return loss, self.backward(yhat, idb.label, cache)

    def score(self, idb, batch_size=4096):
        """Pure inference over an IdBatch, in slices to bound memory."""
        out = np.empty(idb.size, dtype=np.float64)
        for lo in range(0, idb.size, batch_size):
            sl = idb.take(slice(lo, lo + batch_size))
            out[lo : lo + sl.size] = self.forward(sl)[0]
        return out


class BaseDnnModel:
    """Shared embeddings + plain MLP over [features, mean-pooled seq, target, scenario]."""

    kind = "basednn"

    def __init__(self, cfg, schema, seed, dtype=np.float64):
        cfg.validate()
        self.cfg = cfg
        self.schema = schema
        self.seed = seed
        self.params = ParamStore(dtype)
        self.encoder = Encoder(schema, self.params, seed, cfg.d)
        self.sizes = list(cfg.sdnn_sizes)
        h_prev = (schema.n_fields + 3) * cfg.d
        for j, h in enumerate(self.sizes):
            self.params.register(
                f"mlp{j}.W", xavier_init(h, h_prev, named_seed(seed, f"mlp{j}.W"), dtype=dtype)
            )
            self.params.register(f"mlp{j}.b", np.zeros(h, dtype=dtype))
            h_prev = h
        self.params.register(
            "out.W", xavier_init(1, h_prev, named_seed(seed, "out.W"), dtype=dtype)
        )
        self.params.register("out.b", np.zeros(1, dtype=dtype))

    def forward(self, idb):
        feats, beh, target, scenario, enc_cache = self.encoder.forward(idb)
        b_sz = feats.shape[0]
        mean, _ = kernels.dap_pool_fwd(np.ascontiguousarray(beh), idb.seq_len)
        h = np.concatenate([feats.reshape(b_sz, -1), mean, target, scenario], axis=-1)
        hs = []
        x = h
        for j in range(len(self.sizes)):
            pre = linear(x, self.params[f"mlp{j}.W"], self.params[f"mlp{j}.b"])
            hs.append((x, pre))
            x = relu(pre)
        logit = linear(x, self.params["out.W"], self.params["out.b"])[..., 0]
        yhat = sigmoid(logit)
        return yhat, (enc_cache, beh, hs, x, idb)

    def backward(self, yhat, labels, cache):
        enc_cache, beh, hs, h_last, idb = cache
        grads = {}
        dlogit = (yhat - labels) / labels.shape[0]
        dh, dw, db = linear_bwd(dlogit[..., None], h_last, self.params["out.W"])
        grads["out.W"] = dw
        grads["out.b"] = db
        for j in reversed(range(len(self.sizes))):
            x, pre = hs[j]
            dpre = relu_bwd(dh, pre)
            dh, dw, db = linear_bwd(dpre, x, self.params[f"mlp{j}.W"])
            grads[f"mlp{j}.W"] = dw
            grads[f"mlp{j}.b"] = db
        d = self.cfg.d
        n_flat = self.schema.n_fields * d
        b_sz = h_last.shape[0]
        dfeats = dh[:, :n_flat].reshape(b_sz, self.schema.n_fields, d)
        dmean = dh[:, n_flat : n_flat + d]
        dtgt = dh[:, n_flat + d : n_flat + 2 * d]
        dscen = dh[:, n_flat + 2 * d :]
        beh_c = np.ascontiguousarray(beh)
        mean, std = kernels.dap_pool_fwd(beh_c, idb.seq_len)
        dbeh = kernels.dap_pool_bwd(
            np.ascontiguousarray(dmean), np.zeros_like(dmean), beh_c, idb.seq_len, mean, std
        )
        self.encoder.backward(dfeats, dbeh, dtgt, dscen, enc_cache, grads)
        return grads

    def loss_and_grads(self, idb):
        yhat, cache = self.forward(idb)
        loss = bce_loss(yhat, idb.label)
        return loss, self.backward(yhat, idb.label, cache)

    def score(self, idb, batch_size=4096):
        out = np.empty(idb.size, dtype=np.float64)
        for lo in range(0, idb.size, batch_size):
            sl = idb.take(slice(lo, lo + batch_size))
            out[lo : lo + sl.size] = self.forward(sl)[0]
        return out


def build_model(cfg, schema, seed, dtype=np.float64):
    """Assemble a model; same (cfg, schema, seed, dtype) gives identical params."""
    cfg.validate()
    if cfg.kind == "basednn":
        return BaseDnnModel(cfg, schema, seed, dtype=dtype)
    return SFPNetModel(cfg, schema, seed, dtype=dtype)
