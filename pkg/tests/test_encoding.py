import numpy as np
import pytest

from sfpnet.encoding import Behavior, Encoder, FeatureSchema, Instance, columnize
from sfpnet.errors import ShapeError, VocabError
from sfpnet.numerics import ParamStore


def small_schema(n_behaviors=4, max_attrs=2):
    return FeatureSchema(
        context_fields=(("user_id", 6), ("segment", 4)),
        item_vocab=8,
        attr_vocab=5,
        n_scenarios=3,
        n_behaviors=n_behaviors,
        max_attrs=max_attrs,
    )


def make_encoder(seed=0, **kw):
    params = ParamStore()
    return Encoder(small_schema(**kw), params, seed=seed, d=3), params


def inst(feature_ids=(1, 2), behaviors=(), target_item=1, target_attrs=(1,),
         scenario_id=0, label=1, session_id="s", timestamp=0):
    return Instance(feature_ids, tuple(behaviors), target_item, tuple(target_attrs),
                    scenario_id, label, session_id, timestamp)


class TestEmbedBehavior:
    def test_item_only(self):
        enc, params = make_encoder()
        params["emb.item"][2] = [1.0, 1.0, 0.0]
        assert np.array_equal(enc.embed_behavior(2, ()), [1.0, 1.0, 0.0])

    def test_attr_mean_added(self):
        enc, params = make_encoder()
        params["emb.item"][2] = [1.0, 1.0, 0.0]
        params["emb.attr"][1] = [1.0, 0.0, 0.0]
        params["emb.attr"][2] = [0.0, 1.0, 0.0]
        out = enc.embed_behavior(2, (1, 2))
        assert np.allclose(out, [1.5, 1.5, 0.0])

    def test_pad_item_is_zero(self):
        enc, _ = make_encoder()
        assert not enc.embed_behavior(0, ()).any()

    def test_out_of_range_names_field_and_id(self):
        enc, _ = make_encoder()
        with pytest.raises(VocabError, match="item.*99"):
            enc.embed_behavior(99, ())
        with pytest.raises(VocabError, match="attr.*-1"):
            enc.embed_behavior(1, (-1,))


class TestEncode:
    def test_no_behaviors(self):
        enc, _ = make_encoder()
        e = enc.encode(inst())
        assert e.seq_len == 0
        assert not e.behaviors.any()
        assert e.behaviors.shape == (4, 3)

    def test_full_sequence_no_padding(self):
        enc, _ = make_encoder()
        behaviors = [Behavior(1 + i, (1,)) for i in range(4)]
        e = enc.encode(inst(behaviors=behaviors))
        assert e.seq_len == 4
        assert e.behaviors.any(axis=1).all()  # every row is a real behavior

    def test_too_many_behaviors_rejected(self):
        enc, _ = make_encoder()
        with pytest.raises(ShapeError):
            enc.encode(inst(behaviors=[Behavior(1, ())] * 5))

    def test_scenario_only_difference(self):
        enc, _ = make_encoder()
        a = enc.encode(inst(scenario_id=0))
        b = enc.encode(inst(scenario_id=1))
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.target, b.target)
        assert not np.array_equal(a.scenario, b.scenario)

    def test_deterministic_and_id_sensitive(self):
        enc, _ = make_encoder()
        a = enc.encode(inst())
        b = enc.encode(inst())
        assert np.array_equal(a.features, b.features)
        c = enc.encode(inst(feature_ids=(2, 2)))
        assert not np.array_equal(a.features, c.features)

    def test_wrong_field_count(self):
        enc, _ = make_encoder()
        with pytest.raises(ShapeError):
            enc.encode(inst(feature_ids=(1, 2, 3)))

    def test_seq_len_equals_behavior_count(self):
        enc, _ = make_encoder()
        for k in range(5):
            behaviors = [Behavior(1, (1,))] * k
            assert enc.encode(inst(behaviors=behaviors)).seq_len == k


class TestBatchedForward:
    def instances(self):
        return [
            inst(behaviors=[Behavior(1, (1,)), Behavior(2, (2, 3))], scenario_id=2),
            inst(feature_ids=(3, 1), behaviors=[], target_item=5, target_attrs=()),
            inst(feature_ids=(5, 3), behaviors=[Behavior(7, ())], scenario_id=1, label=0),
        ]

    def test_matches_single_encode(self):
        enc, _ = make_encoder(seed=4)
        insts = self.instances()
        idb = enc.columnize(insts)
        feats, beh, target, scen, _ = enc.forward(idb)
        for r, i in enumerate(insts):
            e = enc.encode(i)
            assert np.allclose(feats[r], e.features)
            assert np.allclose(beh[r], e.behaviors)
            assert np.allclose(target[r], e.target)
            assert np.allclose(scen[r], e.scenario)

    def test_columnize_validates(self):
        enc, _ = make_encoder()
        with pytest.raises(VocabError, match="scenario"):
            enc.columnize([inst(scenario_id=7)])
        with pytest.raises(VocabError, match="user_id"):
            enc.columnize([inst(feature_ids=(-2, 1))])

    def test_columnize_take_slices(self):
        enc, _ = make_encoder()
        idb = enc.columnize(self.instances())
        sub = idb.take(np.array([2, 0]))
        assert sub.size == 2
        assert sub.scenario[0] == idb.scenario[2]

    def test_backward_skips_pad_rows(self):
        enc, params = make_encoder()
        idb = enc.columnize(self.instances())
        feats, beh, target, scen, cache = enc.forward(idb)
        grads = {}
        enc.backward(
            np.ones_like(feats), np.ones_like(beh), np.ones_like(target),
            np.ones_like(scen), cache, grads,
        )
        for name in ("emb.user_id", "emb.segment", "emb.item", "emb.attr", "emb.scenario"):
            assert not grads[name][0].any(), name


def test_pad_rows_never_move_during_training():
    from sfpnet.data import SynthConfig, generate
    from sfpnet.model import ModelConfig, build_model
    from sfpnet.trainer import TrainConfig, train

    cfg = SynthConfig(n_users=40, n_items=50, impressions_per_user_scenario=(4,), seed=3)
    train_insts, _, _ = generate(cfg)
    model = build_model(ModelConfig(l_blocks=1, d=6, sdnn_sizes=(8,)), cfg.schema(), seed=0)
    train(model, train_insts, TrainConfig(epochs=2, batch_size=64, seed=0))
    for name, arr in model.params.items():
        if name.startswith("emb."):
            assert not arr[0].any(), f"pad row of {name} moved"
