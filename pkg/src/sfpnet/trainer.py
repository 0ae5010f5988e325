"""Training loop, evaluation, and the experiment drivers.

Everything here is deterministic given (data, configs, seed, precision):
parameter init is keyed on (seed, parameter name), the per-epoch shuffle on
the train seed alone (so ablation variants see identical batch orders), and
gradient reduction uses a fixed summation order.
"""

import os
import time
from dataclasses import dataclass, field, replace

import numpy as np

from . import kvconfig
from .encoding import Behavior, FeatureSchema, Instance, columnize
from .errors import ConfigError, TrainingDiverged
from .metrics import ScoredImpression, evaluate_scored, mann_whitney_u
from .model import ABLATION_FLAGS, ModelConfig, build_model
from .numerics import adam_step, grad_check

_SHUFFLE_STREAM = 7


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    lr_decay: float = 0.9  # multiplied into the rate at each epoch end
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 512
    epochs: int = 5
    seed: int = 0
    precision: str = "f64"  # f64 | f32
    scenario_filter: int = None  # train on one scenario's rows only

    def validate(self):
        if self.lr < 0:
            raise ConfigError(f"lr must be >= 0, got {self.lr}")
        if not 0 < self.lr_decay <= 1:
            raise ConfigError(f"lr_decay must be in (0, 1], got {self.lr_decay}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 0:
            raise ConfigError(f"epochs must be >= 0, got {self.epochs}")
        if self.precision not in ("f64", "f32"):
            raise ConfigError(f"precision must be f64 or f32, got {self.precision!r}")

    @property
    def dtype(self):
        return np.float64 if self.precision == "f64" else np.float32


_MODEL_INT_KEYS = ("l_blocks", "d", "attn_hidden")
_MODEL_BOOL_KEYS = ("attn_softmax",) + ABLATION_FLAGS
_TRAIN_FLOAT_KEYS = ("lr", "lr_decay", "beta1", "beta2", "eps")
_TRAIN_INT_KEYS = ("batch_size", "epochs", "seed")


def model_config_from_kv(kv, lines, source="<config>"):
    known = set(_MODEL_INT_KEYS) | set(_MODEL_BOOL_KEYS) | {
        "kind", "sdnn_sizes", "block_dims", "hidden_gate", "hidden_agg",
    }
    kvconfig.reject_unknown(kv, lines, known, source)
    d = ModelConfig()
    args = {}
    args["kind"] = kvconfig.parse_choice(kv, lines, "kind", d.kind, ("sfpnet", "basednn"), source)
    for k in _MODEL_INT_KEYS:
        args[k] = kvconfig.parse_int(kv, lines, k, getattr(d, k), source)
    for k in _MODEL_BOOL_KEYS:
        args[k] = kvconfig.parse_bool(kv, lines, k, getattr(d, k), source)
    args["sdnn_sizes"] = kvconfig.parse_int_tuple(kv, lines, "sdnn_sizes", d.sdnn_sizes, source)
    args["block_dims"] = kvconfig.parse_int_tuple(kv, lines, "block_dims", None, source)
    hg = kvconfig.parse_int(kv, lines, "hidden_gate", 0, source)
    ha = kvconfig.parse_int(kv, lines, "hidden_agg", 0, source)
    args["hidden_gate"] = hg or None
    args["hidden_agg"] = ha or None
    cfg = ModelConfig(**args)
    cfg.validate()
    return cfg


def model_config_from_file(path):
    kv, lines = kvconfig.load_kv(path)
    return model_config_from_kv(kv, lines, source=str(path))


def model_config_to_kv_text(cfg):
    kv = {"kind": cfg.kind}
    for k in _MODEL_INT_KEYS:
        kv[k] = getattr(cfg, k)
    kv["sdnn_sizes"] = ",".join(str(h) for h in cfg.sdnn_sizes)
    kv["block_dims"] = "" if cfg.block_dims is None else ",".join(str(x) for x in cfg.block_dims)
    kv["hidden_gate"] = cfg.hidden_gate or ""
    kv["hidden_agg"] = cfg.hidden_agg or ""
    for k in _MODEL_BOOL_KEYS:
        kv[k] = str(getattr(cfg, k)).lower()
    return kvconfig.dump_kv(kv)


def train_config_from_kv(kv, lines, source="<config>"):
    known = set(_TRAIN_FLOAT_KEYS) | set(_TRAIN_INT_KEYS) | {"precision", "scenario_filter"}
    kvconfig.reject_unknown(kv, lines, known, source)
    d = TrainConfig()
    args = {}
    for k in _TRAIN_FLOAT_KEYS:
        args[k] = kvconfig.parse_float(kv, lines, k, getattr(d, k), source)
    for k in _TRAIN_INT_KEYS:
        args[k] = kvconfig.parse_int(kv, lines, k, getattr(d, k), source)
    args["precision"] = kvconfig.parse_choice(kv, lines, "precision", d.precision, ("f64", "f32"), source)
    if "scenario_filter" in kv and kv["scenario_filter"] != "":
        args["scenario_filter"] = kvconfig.parse_int(kv, lines, "scenario_filter", None, source)
    cfg = TrainConfig(**args)
    cfg.validate()
    return cfg


def train_config_from_file(path):
    kv, lines = kvconfig.load_kv(path)
    return train_config_from_kv(kv, lines, source=str(path))


def train_config_to_kv_text(cfg):
    kv = {}
    for k in _TRAIN_FLOAT_KEYS:
        kv[k] = repr(getattr(cfg, k))
    for k in _TRAIN_INT_KEYS:
        kv[k] = getattr(cfg, k)
    kv["precision"] = cfg.precision
    kv["scenario_filter"] = "" if cfg.scenario_filter is None else cfg.scenario_filter
    return kvconfig.dump_kv(kv)


@dataclass
class RunRecord:
    model_config: ModelConfig
    train_config: TrainConfig
    epoch_losses: list = field(default_factory=list)
    report: object = None
    wall_time: float = 0.0
    checkpoint_path: str = None
    adam_steps: int = 0
    first_batch_rows: tuple = ()  # instance indices of the first batch (seed audit)


def train(model, train_instances, cfg, test_instances=None, idb=None, test_idb=None):
    """Mini-batch BCE + Adam over shuffled epochs; returns a RunRecord.

    ``idb``/``test_idb`` may carry pre-columnized batches for the given
    instance lists (they depend only on the schema, so experiment drivers
    reuse them across runs).
    """
    cfg.validate()
    if idb is None:
        idb = model.encoder.columnize(train_instances)
    if cfg.scenario_filter is not None:
        keep = np.flatnonzero(idb.scenario == cfg.scenario_filter + 1)
        idb = idb.take(keep)
    if idb.size == 0:
        raise ConfigError("train: no training instances (after scenario filter)")
    rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SHUFFLE_STREAM]))
    record = RunRecord(model_config=model.cfg, train_config=cfg)
    t0 = time.perf_counter()
    lr = cfg.lr
    n = idb.size
    last_gnorm = 0.0
    for epoch in range(cfg.epochs):
        perm = rng.permutation(n)
        if epoch == 0:
            record.first_batch_rows = tuple(int(i) for i in perm[: cfg.batch_size])
        total = 0.0
        for lo in range(0, n, cfg.batch_size):
            rows = perm[lo : lo + cfg.batch_size]
            batch = idb.take(rows)
            loss, grads = model.loss_and_grads(batch)
            if not np.isfinite(loss):
                raise TrainingDiverged(
                    f"non-finite loss at epoch {epoch} batch {lo // cfg.batch_size}; "
                    f"previous gradient norm {last_gnorm:.6e}"
                )
            last_gnorm = float(
                np.sqrt(sum(float((g * g).sum()) for g in grads.values()))
            )
            if lr > 0:
                adam_step(model.params, grads, lr, cfg.beta1, cfg.beta2, cfg.eps)
            total += loss * len(rows)
        record.epoch_losses.append(total / n)
        lr *= cfg.lr_decay
    record.adam_steps = model.params.t
    record.wall_time = time.perf_counter() - t0
    if test_instances is not None:
        record.report = evaluate(model, test_instances, idb=test_idb)
    return record


def evaluate(model, instances, idb=None):
    """Score every impression and build the per-scenario metric report."""
    if idb is None:
        idb = model.encoder.columnize(instances)
    scores = model.score(idb)
    scored = [
        ScoredImpression(float(s), inst.label, inst.session_id, inst.scenario_id)
        for s, inst in zip(scores, instances)
    ]
    return evaluate_scored(scored)


# ---------------------------------------------------------------------------
# gradient-check driver


def _tiny_schema():
    return FeatureSchema(
        context_fields=(("user_id", 7), ("segment", 5), ("extra", 6)),
        item_vocab=9,
        attr_vocab=5,
        n_scenarios=3,
        n_behaviors=5,
        max_attrs=2,
    )


def _tiny_instances():
    def mk(items, attrs):
        return tuple(Behavior(i, a) for i, a in zip(items, attrs))

    insts = [
        Instance((1, 2, 3), mk([1, 2, 3], [(1,), (2, 3), ()]), 4, (1, 2), 0, 1, "s0", 0),
        Instance((2, 1, 4), mk([5, 6, 7, 8, 2], [(2,), (3,), (4,), (1, 2), (2,)]), 3, (4,), 1, 0, "s1", 1),
        Instance((3, 3, 1), (), 7, (), 2, 1, "s2", 2),
        Instance((4, 2, 5), mk([2, 4], [(1,), (3,)]), 1, (2,), 1, 0, "s3", 3),
    ]
    return insts


def tiny_model_config(kind="sfpnet", **flags):
    return ModelConfig(
        kind=kind, l_blocks=2, d=4, sdnn_sizes=(8, 4), attn_hidden=6, **flags
    )


def _kink_gap(model, idb):
    """Distance of the closest relu pre-activation (and pooling std) to its kink.

    A central difference is exact on piecewise-linear relu chains except when
    the +/-h evaluations straddle a kink, and the pooling std's sqrt is
    ill-conditioned near zero variance; this probe lets the gradcheck driver
    pick an evaluation point where neither happens.
    """
    _, cache = model.forward(idb)
    gaps = [np.inf]
    stds = [np.inf]
    if model.kind == "basednn":
        for _, pre in cache[2]:
            gaps.append(np.abs(pre).min())
        return min(gaps), min(stds)
    _, states, head_cache, _ = cache
    for st, blk in zip(states, model.stack.blocks):
        c = st._caches
        mask = c["mask"][..., 0].astype(bool)
        if "gate" in c:
            gaps.append(np.abs(c["gate"][1]).min())
        if "agg" in c:
            gaps.append(np.abs(c["agg"][1]).min())
        for key, val in c.items():
            if key.startswith("feat"):
                gaps.append(np.abs(val[1]).min())
        seq = c["seq"]
        pre_b = seq[0] if len(seq) == 1 else seq[2][1]
        if mask.any():
            gaps.append(np.abs(pre_b[mask]).min())
        d_in = st.beh_in.shape[-1]
        multi = st.seq_len >= 2
        if multi.any() and not blk.no_dap:
            vals = st.bpool[multi, d_in:]
            vals = vals[vals > 0]  # exact zeros are pinned by relu clamping: safe
            if vals.size:
                stds.append(vals.min())
    lens = head_cache["pool"][2]
    n_b = head_cache["pool"][1].shape[1]
    live = np.arange(n_b)[None, :] < lens[:, None]
    if live.any():
        gaps.append(np.abs(head_cache["scores"][1][live]).min())
    for c in head_cache["layers"]:
        gaps.append(np.abs(c[1]).min())
        if len(c) > 2:
            gaps.append(np.abs(c[7]).min())
    return min(gaps), min(stds)


def run_gradcheck(model_cfg=None, seed=11, h=1e-4):
    """Full-model finite-difference check on the tiny configuration.

    The check point is the seeded init plus a jitter, re-drawn until no relu
    pre-activation (or pooling std) sits within a few h of its kink: at the
    raw init, zero biases put pre-activations exactly on the kink, where a
    symmetric difference cannot match the one-sided subgradient. h = 1e-4
    balances kink-straddle windows against loss roundoff on tiny entries.

    Returns (per-parameter max relative error dict, elapsed seconds).
    """
    cfg = model_cfg or tiny_model_config()
    schema = _tiny_schema()
    idb = None
    model = None
    for attempt in range(40):
        model = build_model(cfg, schema, seed=seed, dtype=np.float64)
        if idb is None:
            idb = model.encoder.columnize(_tiny_instances())
        rng = np.random.default_rng(np.random.SeedSequence([seed, 13, attempt]))
        for _, arr in model.params.items():
            arr += rng.uniform(-0.05, 0.05, size=arr.shape)
        gap, std = _kink_gap(model, idb)
        if gap > 4.0 * h and std > 1e-2:
            break
    else:
        raise ConfigError("run_gradcheck: no kink-free evaluation point found")

    def f(params):
        return model.loss_and_grads(idb)

    t0 = time.perf_counter()
    errs = grad_check(f, model.params, h=h)
    return errs, time.perf_counter() - t0


# ---------------------------------------------------------------------------
# experiment drivers

GRID_VARIANTS = ("full",) + ABLATION_FLAGS


@dataclass
class VariantRow:
    variant: str
    aucs: list
    sgaucs: list
    param_count: int

    @property
    def mean_auc(self):
        return float(np.mean(self.aucs))

    @property
    def std_auc(self):
        return float(np.std(self.aucs))

    @property
    def mean_sgauc(self):
        return float(np.mean(self.sgaucs))

    @property
    def std_sgauc(self):
        return float(np.std(self.sgaucs))


@dataclass
class AblationResult:
    rows: list  # VariantRow per variant, grid order
    seeds: tuple
    first_batch_rows: dict = field(default_factory=dict)  # (variant, seed) -> tuple

    def row(self, variant):
        for r in self.rows:
            if r.variant == variant:
                return r
        raise KeyError(variant)

    def to_csv(self):
        lines = ["variant,mean_auc,std_auc,mean_sgauc,std_sgauc,params,seeds"]
        for r in self.rows:
            lines.append(
                f"{r.variant},{repr(r.mean_auc)},{repr(r.std_auc)},"
                f"{repr(r.mean_sgauc)},{repr(r.std_sgauc)},{r.param_count},{len(r.aucs)}"
            )
        return "\n".join(lines) + "\n"

    def to_table(self):
        head = f"{'variant':>9} {'auc':>16} {'s_gauc':>16} {'params':>9}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.variant:>9} {r.mean_auc:.4f} +/- {r.std_auc:.4f} "
                f"{r.mean_sgauc:.4f} +/- {r.std_sgauc:.4f} {r.param_count:>9}"
            )
        return "\n".join(lines)


def _overall(report):
    return report.overall.auc, report.overall.s_gauc


def run_ablation_grid(train_insts, test_insts, schema, model_cfg, train_cfg,
                      seeds=(0, 1, 2, 3, 4), variants=GRID_VARIANTS, log=None):
    """Train every variant under every seed with identical data and batch order."""
    rows = []
    result = AblationResult(rows=rows, seeds=tuple(seeds))
    train_idb = columnize(schema, train_insts)
    test_idb = columnize(schema, test_insts)
    for variant in variants:
        cfg = model_cfg.with_flag(variant)
        aucs, sgaucs = [], []
        count = 0
        for seed in seeds:
            model = build_model(cfg, schema, seed=seed, dtype=train_cfg.dtype)
            count = model.params.param_count()
            rec = train(model, train_insts, replace(train_cfg, seed=seed), test_insts,
                        idb=train_idb, test_idb=test_idb)
            result.first_batch_rows[(variant, seed)] = rec.first_batch_rows
            a, g = _overall(rec.report)
            aucs.append(a)
            sgaucs.append(g)
            if log:
                log(f"ablate variant={variant} seed={seed} auc={a:.4f} sgauc={g:.4f} "
                    f"time={rec.wall_time:.1f}s")
        rows.append(VariantRow(variant, aucs, sgaucs, count))
    return result


@dataclass
class JointSeparateRow:
    scenario_id: int
    joint_aucs: list
    separate_aucs: list
    u_stat: float
    p_value: float

    @property
    def mean_delta(self):
        return float(np.mean(self.joint_aucs) - np.mean(self.separate_aucs))


@dataclass
class JointSeparateResult:
    rows: list
    aggregate_delta: float

    def row(self, scenario_id):
        for r in self.rows:
            if r.scenario_id == scenario_id:
                return r
        raise KeyError(scenario_id)

    def to_csv(self):
        lines = ["scenario_id,joint_auc,separate_auc,delta,u_stat,p_value"]
        for r in self.rows:
            lines.append(
                f"{r.scenario_id},{repr(float(np.mean(r.joint_aucs)))},"
                f"{repr(float(np.mean(r.separate_aucs)))},{repr(r.mean_delta)},"
                f"{repr(r.u_stat)},{repr(r.p_value)}"
            )
        lines.append(f"all,,,{repr(self.aggregate_delta)},,")
        return "\n".join(lines) + "\n"

    def to_table(self):
        head = f"{'scenario':>9} {'joint':>8} {'separate':>9} {'delta':>8} {'p':>8}"
        lines = [head, "-" * len(head)]
        for r in self.rows:
            lines.append(
                f"{r.scenario_id:>9} {float(np.mean(r.joint_aucs)):.4f} "
                f"{float(np.mean(r.separate_aucs)):>9.4f} {r.mean_delta:>+8.4f} {r.p_value:>8.4f}"
            )
        lines.append(f"{'all':>9} {'':>8} {'':>9} {self.aggregate_delta:>+8.4f}")
        return "\n".join(lines)


def run_joint_vs_separate(train_insts, test_insts, schema, model_cfg, train_cfg,
                          seeds=(0, 1, 2, 3, 4), log=None):
    """One joint model vs one model per scenario (equal epochs each)."""
    scenario_ids = sorted({i.scenario_id for i in train_insts})
    joint = {m: [] for m in scenario_ids}
    separate = {m: [] for m in scenario_ids}
    train_idb = columnize(schema, train_insts)
    test_idb = columnize(schema, test_insts)
    sub_tests = {m: [i for i in test_insts if i.scenario_id == m] for m in scenario_ids}
    for seed in seeds:
        model = build_model(model_cfg, schema, seed=seed, dtype=train_cfg.dtype)
        rec = train(model, train_insts, replace(train_cfg, seed=seed), test_insts,
                    idb=train_idb, test_idb=test_idb)
        per = {int(r.scenario_id): r.auc for r in rec.report.rows}
        for m in scenario_ids:
            joint[m].append(per[m])
        if log:
            log(f"joint seed={seed} auc={rec.report.overall.auc:.4f} time={rec.wall_time:.1f}s")
        for m in scenario_ids:
            sep_model = build_model(model_cfg, schema, seed=seed, dtype=train_cfg.dtype)
            sep_cfg = replace(train_cfg, seed=seed, scenario_filter=m)
            sep_rec = train(sep_model, train_insts, sep_cfg, sub_tests[m], idb=train_idb)
            separate[m].append(sep_rec.report.overall.auc)
            if log:
                log(f"separate scenario={m} seed={seed} auc={sep_rec.report.overall.auc:.4f} "
                    f"time={sep_rec.wall_time:.1f}s")
    rows = []
    for m in scenario_ids:
        u, p = mann_whitney_u(joint[m], separate[m])
        rows.append(JointSeparateRow(m, joint[m], separate[m], u, p))
    aggregate = float(np.mean([r.mean_delta for r in rows]))
    return JointSeparateResult(rows=rows, aggregate_delta=aggregate)


@dataclass
class LSweepResult:
    rows: list  # (L, mean_auc, std_auc, mean_wall_time)

    def to_csv(self):
        lines = ["l_blocks,mean_auc,std_auc,mean_wall_time"]
        for l_val, mean, std, wt in self.rows:
            lines.append(f"{l_val},{repr(mean)},{repr(std)},{repr(wt)}")
        return "\n".join(lines) + "\n"

    def to_table(self):
        head = f"{'L':>3} {'auc':>16} {'seconds':>8}"
        lines = [head, "-" * len(head)]
        for l_val, mean, std, wt in self.rows:
            lines.append(f"{l_val:>3} {mean:.4f} +/- {std:.4f} {wt:>8.1f}")
        return "\n".join(lines)


def run_l_sweep(train_insts, test_insts, schema, model_cfg, train_cfg,
                l_values, seeds=(0,), log=None):
    """One run per (L, seed); all runs share data and the seed schedule."""
    if not l_values:
        raise ConfigError("run_l_sweep: need at least one L value")
    rows = []
    train_idb = columnize(schema, train_insts)
    test_idb = columnize(schema, test_insts)
    for l_val in l_values:
        cfg = replace(model_cfg, l_blocks=l_val)
        aucs, times = [], []
        for seed in seeds:
            model = build_model(cfg, schema, seed=seed, dtype=train_cfg.dtype)
            rec = train(model, train_insts, replace(train_cfg, seed=seed), test_insts,
                        idb=train_idb, test_idb=test_idb)
            aucs.append(rec.report.overall.auc)
            times.append(rec.wall_time)
            if log:
                log(f"sweep L={l_val} seed={seed} auc={aucs[-1]:.4f} time={times[-1]:.1f}s")
        rows.append((l_val, float(np.mean(aucs)), float(np.std(aucs)), float(np.mean(times))))
    return LSweepResult(rows=rows)
