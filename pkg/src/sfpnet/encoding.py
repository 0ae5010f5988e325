"""Vocabularies, embedding tables, and instance encoding.

Raw instances carry integer ids per field; id 0 is reserved for
padding/unknown in every embedding table, and its row is frozen at zero
(the backward pass never accumulates into it). Scenario ids are the one
exception at the interface: instances carry raw scenario ids in
``[0, n_scenarios)``, which the encoder shifts by +1 into its table so the
pad-row convention still holds.
"""

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from . import kernels
from .errors import ShapeError, VocabError
from .numerics import named_seed, xavier_init


@dataclass(frozen=True)
class Vocab:
    """Id space of one field; ids live in [0, size), 0 = padding/unknown."""

    field: str
    size: int

    def check(self, raw_id):
        if not 0 <= raw_id < self.size:
            raise VocabError(f"field {self.field!r}: id {raw_id} outside [0, {self.size})")
        return raw_id


class Behavior(NamedTuple):
    item: int
    attrs: tuple


@dataclass(frozen=True)
class Instance:
    """One impression: context feature ids, behavior sequence, target, label."""

    feature_ids: tuple
    behaviors: tuple
    target_item: int
    target_attrs: tuple
    scenario_id: int
    label: int
    session_id: str
    timestamp: int


@dataclass
class EncodedInstance:
    features: np.ndarray  # (N_f, d)
    behaviors: np.ndarray  # (N_b, d), rows >= seq_len exactly zero
    seq_len: int
    target: np.ndarray  # (d,)
    scenario: np.ndarray  # (d,)


@dataclass(frozen=True)
class FeatureSchema:
    """Field layout shared by the dataset and the model.

    ``context_fields`` maps field name to vocab size (pad id 0 included);
    the first field is the user id by CSV convention. ``n_scenarios`` is
    the raw scenario count (the embedding table gets one extra pad row).
    """

    context_fields: tuple  # ((name, vocab_size), ...)
    item_vocab: int
    attr_vocab: int
    n_scenarios: int
    n_behaviors: int
    max_attrs: int = 1

    @property
    def n_fields(self):
        return len(self.context_fields)


class IdBatch(NamedTuple):
    """Instances columnized into id arrays for the batched forward pass."""

    feat: np.ndarray  # (B, N_f) int64
    beh_item: np.ndarray  # (B, N_b) int64, 0-padded
    beh_attr: np.ndarray  # (B, N_b, A) int64, 0-padded
    seq_len: np.ndarray  # (B,) int64
    tgt_item: np.ndarray  # (B,) int64
    tgt_attr: np.ndarray  # (B, A) int64, 0-padded
    scenario: np.ndarray  # (B,) int64, already shifted by +1 for the pad row
    label: np.ndarray  # (B,) float64

    def take(self, idx):
        return IdBatch(*(a[idx] for a in self))

    @property
    def size(self):
        return self.feat.shape[0]


def _check_range(values, size, field):
    bad = (values < 0) | (values >= size)
    if bad.any():
        offender = int(values[np.unravel_index(np.argmax(bad), values.shape)])
        raise VocabError(f"field {field!r}: id {offender} outside [0, {size})")


def columnize(schema, instances):
    """Validate instances against the schema and pack ids into an IdBatch.

    Depends only on the schema (not on any parameters), so the result can be
    prepared once and shared across models trained on the same data.
    """
    n = len(instances)
    feat = np.zeros((n, schema.n_fields), dtype=np.int64)
    beh_item = np.zeros((n, schema.n_behaviors), dtype=np.int64)
    beh_attr = np.zeros((n, schema.n_behaviors, schema.max_attrs), dtype=np.int64)
    seq_len = np.zeros(n, dtype=np.int64)
    tgt_item = np.zeros(n, dtype=np.int64)
    tgt_attr = np.zeros((n, schema.max_attrs), dtype=np.int64)
    scenario = np.zeros(n, dtype=np.int64)
    label = np.zeros(n, dtype=np.float64)
    a_max = schema.max_attrs
    for r, inst in enumerate(instances):
        if len(inst.feature_ids) != schema.n_fields:
            raise ShapeError(
                f"columnize: instance has {len(inst.feature_ids)} feature ids, schema has {schema.n_fields}"
            )
        feat[r] = inst.feature_ids
        if len(inst.behaviors) > schema.n_behaviors:
            raise ShapeError(
                f"columnize: {len(inst.behaviors)} behaviors exceed maximum {schema.n_behaviors}"
            )
        for i, b in enumerate(inst.behaviors):
            beh_item[r, i] = b.item
            if len(b.attrs) > a_max:
                raise ShapeError(f"columnize: behavior has {len(b.attrs)} attrs, maximum is {a_max}")
            beh_attr[r, i, : len(b.attrs)] = b.attrs
        seq_len[r] = len(inst.behaviors)
        tgt_item[r] = inst.target_item
        if len(inst.target_attrs) > a_max:
            raise ShapeError(
                f"columnize: target has {len(inst.target_attrs)} attrs, maximum is {a_max}"
            )
        tgt_attr[r, : len(inst.target_attrs)] = inst.target_attrs
        scenario[r] = inst.scenario_id
        label[r] = inst.label
    for j, (name, size) in enumerate(schema.context_fields):
        _check_range(feat[:, j], size, name)
    _check_range(beh_item, schema.item_vocab, "item")
    _check_range(beh_attr, schema.attr_vocab, "attr")
    _check_range(tgt_item, schema.item_vocab, "item")
    _check_range(tgt_attr, schema.attr_vocab, "attr")
    _check_range(scenario, schema.n_scenarios, "scenario")
    scenario += 1  # pad-row shift for the embedding table
    return IdBatch(feat, beh_item, beh_attr, seq_len, tgt_item, tgt_attr, scenario, label)


class Encoder:
    """Embedding tables over a schema, registered into a ParamStore."""

    def __init__(self, schema, params, seed, d):
        self.schema = schema
        self.params = params
        self.d = d
        self.vocabs = {name: Vocab(name, size) for name, size in schema.context_fields}
        self.vocabs["item"] = Vocab("item", schema.item_vocab)
        self.vocabs["attr"] = Vocab("attr", schema.attr_vocab)
        self.vocabs["scenario"] = Vocab("scenario", schema.n_scenarios)
        self._table_names = {}
        for name, size in schema.context_fields:
            self._make_table(name, size, seed)
        self._make_table("item", schema.item_vocab, seed)
        self._make_table("attr", schema.attr_vocab, seed)
        self._make_table("scenario", schema.n_scenarios + 1, seed)

    def _make_table(self, field, rows, seed):
        pname = f"emb.{field}"
        tab = xavier_init(rows, self.d, named_seed(seed, pname), dtype=self.params.dtype)
        tab[0, :] = 0.0  # pad row, frozen
        self.params.register(pname, tab)
        self._table_names[field] = pname

    def table(self, field):
        return self.params[self._table_names[field]]

    # -- single-instance path (reference semantics) ------------------------

    def embed_behavior(self, item_id, attr_ids):
        """Item embedding plus the elementwise mean of its attr embeddings."""
        self.vocabs["item"].check(item_id)
        vec = self.table("item")[item_id].copy()
        if attr_ids:
            acc = np.zeros(self.d, dtype=vec.dtype)
            for a in attr_ids:
                self.vocabs["attr"].check(a)
                acc += self.table("attr")[a]
            vec += acc / len(attr_ids)
        return vec

    def encode(self, inst):
        """Encode one instance into dense matrices (see EncodedInstance)."""
        sch = self.schema
        if len(inst.feature_ids) != sch.n_fields:
            raise ShapeError(
                f"encode: instance has {len(inst.feature_ids)} feature ids, schema has {sch.n_fields} fields"
            )
        if len(inst.behaviors) > sch.n_behaviors:
            raise ShapeError(
                f"encode: {len(inst.behaviors)} behaviors exceed the configured maximum {sch.n_behaviors}"
            )
        feats = np.empty((sch.n_fields, self.d), dtype=self.params.dtype)
        for j, (name, _) in enumerate(sch.context_fields):
            fid = self.vocabs[name].check(inst.feature_ids[j])
            feats[j] = self.table(name)[fid]
        beh = np.zeros((sch.n_behaviors, self.d), dtype=self.params.dtype)
        for i, b in enumerate(inst.behaviors):
            beh[i] = self.embed_behavior(b.item, tuple(b.attrs))
        target = self.embed_behavior(inst.target_item, tuple(inst.target_attrs))
        sid = self.vocabs["scenario"].check(inst.scenario_id)
        scenario = self.table("scenario")[sid + 1].copy()
        return EncodedInstance(
            features=feats,
            behaviors=beh,
            seq_len=len(inst.behaviors),
            target=target,
            scenario=scenario,
        )

    # -- batched path -------------------------------------------------------

    def columnize(self, instances):
        return columnize(self.schema, instances)

    def _attr_mean(self, attr_ids):
        # attr_ids: (..., A), 0-padded; pad slots are masked out explicitly
        # so the result never depends on the pad row's values
        emb = self.table("attr")[attr_ids]
        present = attr_ids != 0
        emb = emb * present[..., None]
        cnt = np.maximum(present.sum(axis=-1), 1).astype(emb.dtype)
        return emb.sum(axis=-2) / cnt[..., None], cnt

    def forward(self, idb):
        """Batched lookup. Returns (features, behaviors, target, scenario, cache)."""
        dt = self.params.dtype
        feats = np.empty(idb.feat.shape + (self.d,), dtype=dt)
        for j, (name, _) in enumerate(self.schema.context_fields):
            feats[:, j, :] = self.table(name)[idb.feat[:, j]]
        beh_attr_mean, beh_cnt = self._attr_mean(idb.beh_attr)
        beh = self.table("item")[idb.beh_item] + beh_attr_mean
        n_b = idb.beh_item.shape[1]
        pos = np.arange(n_b)[None, :] < idb.seq_len[:, None]
        beh = beh * pos[:, :, None]  # rows past seq_len are exactly zero
        tgt_attr_mean, tgt_cnt = self._attr_mean(idb.tgt_attr)
        target = self.table("item")[idb.tgt_item] + tgt_attr_mean
        scenario = self.table("scenario")[idb.scenario]
        cache = (idb, beh_cnt, tgt_cnt)
        return feats, beh, target, scenario, cache

    def backward(self, dfeat, dbeh, dtgt, dscen, cache, grads):
        """Scatter embedding gradients; pad id 0 never receives gradient."""
        idb, beh_cnt, tgt_cnt = cache
        dt = self.params.dtype
        for j, (name, _) in enumerate(self.schema.context_fields):
            pname = self._table_names[name]
            gtab = grads.setdefault(pname, np.zeros_like(self.params[pname]))
            kernels.scatter_add_rows(gtab, idb.feat[:, j].ravel(), np.ascontiguousarray(dfeat[:, j, :]))
        gitem = grads.setdefault("emb.item", np.zeros_like(self.params["emb.item"]))
        kernels.scatter_add_rows(gitem, idb.beh_item.ravel(), dbeh.reshape(-1, self.d))
        kernels.scatter_add_rows(gitem, idb.tgt_item.ravel(), np.ascontiguousarray(dtgt))
        gattr = grads.setdefault("emb.attr", np.zeros_like(self.params["emb.attr"]))
        a = self.schema.max_attrs
        beh_rows = np.repeat((dbeh / beh_cnt[..., None]).reshape(-1, self.d), a, axis=0)
        kernels.scatter_add_rows(gattr, idb.beh_attr.ravel(), beh_rows)
        tgt_rows = np.repeat((dtgt / tgt_cnt[..., None]).reshape(-1, self.d), a, axis=0)
        kernels.scatter_add_rows(gattr, idb.tgt_attr.ravel(), tgt_rows)
        gscen = grads.setdefault("emb.scenario", np.zeros_like(self.params["emb.scenario"]))
        kernels.scatter_add_rows(gscen, idb.scenario.ravel(), np.ascontiguousarray(dscen, dtype=dt))
