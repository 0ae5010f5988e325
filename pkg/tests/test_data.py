import numpy as np
import pytest

from sfpnet.data import SynthConfig, generate, load_dataset, read_csv, write_csv, write_dataset
from sfpnet.encoding import Behavior, Instance
from sfpnet.errors import ConfigError, DataError
from sfpnet.metrics import auc


def small_cfg(**kw):
    base = dict(n_users=120, n_items=160, impressions_per_user_scenario=(6,), seed=5)
    base.update(kw)
    return SynthConfig(**base)


class TestConfig:
    def test_defaults_validate(self):
        SynthConfig().validate()

    def test_impressions_broadcast(self):
        assert small_cfg().impressions_tuple() == (6, 6, 6, 6)
        cfg = small_cfg(impressions_per_user_scenario=(6, 6, 6, 2))
        assert cfg.impressions_tuple() == (6, 6, 6, 2)

    def test_scenario_windows_cover_topics(self):
        cfg = SynthConfig()
        covered = set()
        for topics in cfg.scenario_topics():
            assert len(topics) == cfg.topics_per_scenario
            covered |= set(topics)
        assert covered == set(range(cfg.n_topics))

    def test_uncoverable_windows_rejected(self):
        with pytest.raises(ConfigError, match="cover"):
            small_cfg(n_scenarios=2).validate()

    def test_all_topics_per_scenario_is_degenerate_sanity(self):
        cfg = small_cfg(topics_per_scenario=8)
        cfg.validate()
        assert all(t == frozenset(range(8)) for t in cfg.scenario_topics())

    def test_invalid_values_rejected(self):
        with pytest.raises(ConfigError):
            small_cfg(flip_noise=0.7).validate()
        with pytest.raises(ConfigError):
            small_cfg(history_min=30).validate()
        with pytest.raises(ConfigError):
            small_cfg(topics_per_scenario=99).validate()
        with pytest.raises(ConfigError):
            small_cfg(impressions_per_user_scenario=(6, 6)).impressions_tuple()

    def test_kv_round_trip(self):
        cfg = small_cfg(base_rates=(-1.0, -0.5, 0.0, 0.5), flip_noise=0.125)
        text = cfg.to_kv_text()
        from sfpnet.kvconfig import parse_kv_text

        kv, lines = parse_kv_text(text)
        back = SynthConfig.from_kv(kv, lines)
        assert back == cfg

    def test_unknown_key_rejected_with_line(self):
        from sfpnet.kvconfig import parse_kv_text

        kv, lines = parse_kv_text("n_users=10\nbogus=3\n", source="cfg.txt")
        with pytest.raises(ConfigError, match="cfg.txt:2"):
            SynthConfig.from_kv(kv, lines, source="cfg.txt")


class TestGenerate:
    def test_deterministic_byte_identical(self, tmp_path):
        cfg = small_cfg()
        write_dataset(cfg, tmp_path / "a")
        write_dataset(cfg, tmp_path / "b")
        for name in ("train.csv", "test.csv", "synth-config.txt"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_seed_changes_data(self):
        t1, _, _ = generate(small_cfg())
        t2, _, _ = generate(small_cfg(seed=6))
        assert any(a.label != b.label or a.target_item != b.target_item
                   for a, b in zip(t1, t2))

    def test_split_sessions_disjoint(self):
        train, test, _ = generate(small_cfg())
        assert {i.session_id for i in train}.isdisjoint({i.session_id for i in test})
        frac = len(test) / (len(train) + len(test))
        assert 0.15 < frac < 0.25

    def test_scenario_rates_differ(self):
        train, _, _ = generate(small_cfg())
        rates = []
        for m in range(4):
            labels = [i.label for i in train if i.scenario_id == m]
            rates.append(np.mean(labels))
        assert max(rates) - min(rates) > 0.05

    def test_history_is_scenario_agnostic(self):
        train, _, _ = generate(small_cfg())
        by_user = {}
        for inst in train:
            key = inst.feature_ids[0]
            by_user.setdefault(key, set()).add(inst.behaviors)
        # the same user's history is identical across all their impressions
        assert all(len(histories) == 1 for histories in by_user.values())

    def test_sparse_scenario_config(self):
        cfg = small_cfg(impressions_per_user_scenario=(6, 6, 6, 1))
        train, test, _ = generate(cfg)
        counts = {m: 0 for m in range(4)}
        for i in train + test:
            counts[i.scenario_id] += 1
        assert counts[3] * 5 < counts[0]

    def test_bayes_scorer_beats_coin_flip(self):
        train, test, truth = generate(small_cfg())
        scores = [truth.bayes_score(i) for i in test]
        labels = [i.label for i in test]
        assert auc(scores, labels) > 0.65


class TestPlantedEffect:
    def test_bayes_beats_topic_scenario_scorer_at_default_config(self):
        # a scorer blind to per-behavior relevance: empirical click rate per
        # (target topic, scenario) cell, the ceiling for any model on those
        # two features alone
        cfg = SynthConfig()
        train, test, truth = generate(cfg)
        rate = {}
        for i in train:
            key = (i.target_attrs[0], i.scenario_id)
            cnt, tot = rate.get(key, (0, 0))
            rate[key] = (cnt + i.label, tot + 1)
        prior = np.mean([i.label for i in train])

        def coarse_score(inst):
            cnt, tot = rate.get((inst.target_attrs[0], inst.scenario_id), (0, 0))
            return (cnt + 5 * prior) / (tot + 5)

        labels = [i.label for i in test]
        coarse_auc = auc([coarse_score(i) for i in test], labels)
        bayes_auc = auc([truth.bayes_score(i) for i in test], labels)
        assert bayes_auc - coarse_auc > 0.03, (bayes_auc, coarse_auc)

    def test_pure_noise_floor_for_oracle(self):
        cfg = small_cfg(flip_noise=0.5, n_users=400)
        train, test, truth = generate(cfg)
        scores = [truth.bayes_score(i) for i in test]
        labels = [i.label for i in test]
        assert abs(auc(scores, labels) - 0.5) < 0.02


class TestCsv:
    def insts(self):
        return [
            Instance((3, 1), (Behavior(4, (2,)), Behavior(9, (1, 3))), 7, (2,), 1, 1, "u3-s1", 0),
            Instance((5, 2), (), 1, (), 0, 0, "u5-s0", 1),
            Instance((6, 2), (Behavior(2, ()),), 3, (1,), 2, 1, "u6-s2", 2),
        ]

    def test_round_trip(self, tmp_path):
        path = tmp_path / "x.csv"
        write_csv(self.insts(), path, n_fields=2)
        back = read_csv(path, n_scenarios=3)
        assert back == self.insts()

    def test_empty_behaviors_cell(self, tmp_path):
        path = tmp_path / "x.csv"
        write_csv(self.insts(), path, n_fields=2)
        back = read_csv(path)
        assert back[1].behaviors == ()

    def test_unknown_scenario_rejected_with_line(self, tmp_path):
        path = tmp_path / "x.csv"
        write_csv(self.insts(), path, n_fields=2)
        with pytest.raises(DataError, match=r"x\.csv:2.*scenario"):
            read_csv(path, n_scenarios=1)

    def test_bad_label_rejected(self, tmp_path):
        path = tmp_path / "bad.csv"
        lines = ["session_id,scenario_id,label,timestamp,user_id,target_item,target_attrs,f1,behaviors",
                 "s,0,2,0,1,1,,1,"]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match=r"bad\.csv:2.*label"):
            read_csv(path)

    def test_non_integer_cell_names_column(self, tmp_path):
        path = tmp_path / "bad.csv"
        lines = ["session_id,scenario_id,label,timestamp,user_id,target_item,target_attrs,f1,behaviors",
                 "s,0,1,0,xx,1,,1,"]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="user_id"):
            read_csv(path)

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "bad.csv"
        lines = ["session_id,scenario_id,label,timestamp,user_id,target_item,target_attrs,f1,behaviors",
                 "s,0,1,0,1,1"]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(DataError, match="columns"):
            read_csv(path)

    def test_missing_header(self, tmp_path):
        path = tmp_path / "empty.csv"
        path.write_text("")
        with pytest.raises(DataError, match="header"):
            read_csv(path)

    def test_dataset_dir_round_trip(self, tmp_path):
        cfg = small_cfg()
        train, test, _ = write_dataset(cfg, tmp_path / "d")
        train2, test2, cfg2 = load_dataset(tmp_path / "d")
        assert cfg2 == cfg
        assert train2 == train
        assert test2 == test
