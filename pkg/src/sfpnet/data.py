"""Synthetic multi-scenario dataset with a planted per-behavior effect.

Construction: topics get orthonormal latent vectors; each item belongs to
one topic and its latent is the topic vector plus Gaussian noise. Each
scenario is assigned a window of topics; each user has 2-4 preferred topics
and one scenario-agnostic history sampled from them. For an impression the
relevance r is the mean cosine between the target latent and the latents of
history behaviors whose topic belongs to the impression's scenario (0 when
none qualify), and the click label is Bernoulli(sigmoid(alpha*r + beta_m))
with optional label-flip noise. A coarse whole-sequence weight cannot
express "which behaviors matter in this scenario", so the fine-grained
tailoring mechanism is identifiable by design.

One session groups all impressions of a (user, scenario) pair; a fixed
fraction of sessions per scenario is held out as the test split.
"""

import os
from dataclasses import dataclass, replace

import numpy as np

from . import kvconfig
from .encoding import Behavior, FeatureSchema, Instance
from .errors import ConfigError, DataError

_STRUCT_STREAM = 0
_SPLIT_STREAM = 1
_USER_STREAM = 2


@dataclass(frozen=True)
class SynthConfig:
    n_users: int = 2000
    n_items: int = 1000
    n_topics: int = 8
    n_scenarios: int = 4
    topics_per_scenario: int = 2
    scenario_topic_overlap: int = 0
    n_segments: int = 8
    history_min: int = 10
    history_max: int = 20
    impressions_per_user_scenario: tuple = (20,)  # broadcast if shorter than n_scenarios
    noise_sigma: float = 0.25
    steepness: float = 6.0  # label-probability slope on relevance
    base_rates: tuple = None  # per-scenario logit offsets; default linspace(-1.6, -0.4)
    flip_noise: float = 0.05
    test_fraction: float = 0.2
    seed: int = 0

    def __post_init__(self):
        k = self.impressions_per_user_scenario
        if isinstance(k, int):
            k = (k,)
        if len(k) == 1:
            k = tuple(k) * self.n_scenarios
        object.__setattr__(self, "impressions_per_user_scenario", tuple(k))
        if self.base_rates is not None:
            object.__setattr__(self, "base_rates", tuple(self.base_rates))

    def validate(self):
        for name in ("n_users", "n_items", "n_topics", "n_scenarios",
                     "topics_per_scenario", "n_segments", "history_min",
                     "history_max"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.topics_per_scenario > self.n_topics:
            raise ConfigError(
                f"topics_per_scenario {self.topics_per_scenario} exceeds n_topics {self.n_topics}"
            )
        if not 0 <= self.scenario_topic_overlap < self.topics_per_scenario:
            raise ConfigError(
                f"scenario_topic_overlap must be in [0, topics_per_scenario), got {self.scenario_topic_overlap}"
            )
        if self.history_min > self.history_max:
            raise ConfigError("history_min exceeds history_max")
        if any(k < 1 for k in self.impressions_tuple()):
            raise ConfigError("impressions_per_user_scenario entries must be >= 1")
        if not 0.0 <= self.flip_noise <= 0.5:
            raise ConfigError(f"flip_noise must be in [0, 0.5], got {self.flip_noise}")
        if not 0.0 < self.test_fraction < 1.0:
            raise ConfigError(f"test_fraction must be in (0, 1), got {self.test_fraction}")
        covered = set()
        for topics in self.scenario_topics():
            covered.update(topics)
        if covered != set(range(self.n_topics)):
            raise ConfigError(
                f"scenario topic windows cover only {sorted(covered)} of {self.n_topics} topics"
            )
        if self.base_rates is not None and len(self.base_rates) != self.n_scenarios:
            raise ConfigError(
                f"base_rates has {len(self.base_rates)} entries for {self.n_scenarios} scenarios"
            )

    def impressions_tuple(self):
        k = self.impressions_per_user_scenario
        if len(k) != self.n_scenarios:
            raise ConfigError(
                f"impressions_per_user_scenario has {len(k)} entries for {self.n_scenarios} scenarios"
            )
        return k

    def scenario_topics(self):
        """Topic window per scenario; consecutive windows overlap by the
        configured amount and must jointly cover every topic."""
        stride = self.topics_per_scenario - self.scenario_topic_overlap
        return [
            frozenset((m * stride + j) % self.n_topics for j in range(self.topics_per_scenario))
            for m in range(self.n_scenarios)
        ]

    def base_rates_tuple(self):
        if self.base_rates is not None:
            return tuple(self.base_rates)
        return tuple(np.linspace(-1.6, -0.4, self.n_scenarios))

    def schema(self):
        return FeatureSchema(
            context_fields=(("user_id", self.n_users + 1), ("segment", self.n_segments + 1)),
            item_vocab=self.n_items + 1,
            attr_vocab=self.n_topics + 1,
            n_scenarios=self.n_scenarios,
            n_behaviors=self.history_max,
            max_attrs=1,
        )

    # -- key=value round trip ----------------------------------------------

    _INT_KEYS = ("n_users", "n_items", "n_topics", "n_scenarios", "topics_per_scenario",
                 "scenario_topic_overlap", "n_segments", "history_min", "history_max", "seed")
    _FLOAT_KEYS = ("noise_sigma", "steepness", "flip_noise", "test_fraction")

    def to_kv_text(self):
        kv = {k: getattr(self, k) for k in self._INT_KEYS}
        kv["impressions_per_user_scenario"] = ",".join(str(k) for k in self.impressions_tuple())
        for k in self._FLOAT_KEYS:
            kv[k] = repr(getattr(self, k))
        kv["base_rates"] = (
            "" if self.base_rates is None else ",".join(repr(b) for b in self.base_rates)
        )
        return kvconfig.dump_kv(kv)

    @classmethod
    def from_kv(cls, kv, lines, source="<config>"):
        known = set(cls._INT_KEYS) | set(cls._FLOAT_KEYS) | {
            "impressions_per_user_scenario", "base_rates",
        }
        kvconfig.reject_unknown(kv, lines, known, source)
        defaults = cls()
        args = {}
        for k in cls._INT_KEYS:
            args[k] = kvconfig.parse_int(kv, lines, k, getattr(defaults, k), source)
        for k in cls._FLOAT_KEYS:
            args[k] = kvconfig.parse_float(kv, lines, k, getattr(defaults, k), source)
        args["impressions_per_user_scenario"] = kvconfig.parse_int_tuple(
            kv, lines, "impressions_per_user_scenario",
            defaults.impressions_per_user_scenario, source,
        )
        args["base_rates"] = kvconfig.parse_float_tuple(kv, lines, "base_rates", None, source)
        cfg = cls(**args)
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path):
        kv, lines = kvconfig.load_kv(path)
        return cls.from_kv(kv, lines, source=str(path))


class GroundTruth:
    """Generator state needed to score impressions with the planted rule."""

    def __init__(self, cfg, item_latents, item_topics):
        self.cfg = cfg
        self.item_latents = item_latents  # (n_items+1, n_topics); row 0 unused
        self.item_topics = item_topics  # (n_items+1,), -1 for the pad row
        norms = np.linalg.norm(item_latents, axis=1)
        norms[norms == 0] = 1.0
        self._unit = item_latents / norms[:, None]
        self.scenario_topics = cfg.scenario_topics()
        self.base_rates = cfg.base_rates_tuple()

    def relevance(self, target_item, behavior_items, scenario_id):
        """Mean cosine to scenario-relevant history latents; 0 if none."""
        rel = self.scenario_topics[scenario_id]
        keep = [it for it in behavior_items if self.item_topics[it] in rel]
        if not keep:
            return 0.0
        q = self._unit[target_item]
        return float((self._unit[keep] @ q).mean())

    def bayes_score(self, inst):
        """P(label=1 | features) under the generating process (pre flip noise)."""
        r = self.relevance(inst.target_item, [b.item for b in inst.behaviors], inst.scenario_id)
        z = self.cfg.steepness * r + self.base_rates[inst.scenario_id]
        return 1.0 / (1.0 + np.exp(-z))


def generate(cfg):
    """Build (train, test, ground_truth); identical config gives identical data."""
    cfg.validate()
    imps = cfg.impressions_tuple()
    betas = np.asarray(cfg.base_rates_tuple())
    rng_struct = np.random.default_rng(np.random.SeedSequence([cfg.seed, _STRUCT_STREAM]))

    # items: round-robin topic assignment, latent = basis vector + noise
    item_topics = np.full(cfg.n_items + 1, -1, dtype=np.int64)
    item_topics[1:] = np.arange(cfg.n_items) % cfg.n_topics
    item_latents = np.zeros((cfg.n_items + 1, cfg.n_topics))
    eye = np.eye(cfg.n_topics)
    item_latents[1:] = eye[item_topics[1:]] + cfg.noise_sigma * rng_struct.normal(
        size=(cfg.n_items, cfg.n_topics)
    )
    truth = GroundTruth(cfg, item_latents, item_topics)
    unit = truth._unit

    scenario_topics = cfg.scenario_topics()
    topic_of = item_topics
    # item ids of topic t are t+1, t+1+T, ... (1-based round robin)
    items_per_topic = [
        (cfg.n_items - 1 - t) // cfg.n_topics + 1 if t < cfg.n_items else 0
        for t in range(cfg.n_topics)
    ]
    for t, cnt in enumerate(items_per_topic):
        if cnt == 0:
            raise ConfigError(f"n_items {cfg.n_items} leaves topic {t} without items")

    # session split: per scenario, a fixed fraction of users held out as test
    rng_split = np.random.default_rng(np.random.SeedSequence([cfg.seed, _SPLIT_STREAM]))
    n_test_users = max(1, int(round(cfg.test_fraction * cfg.n_users)))
    test_users = [
        set(rng_split.choice(cfg.n_users, size=n_test_users, replace=False) + 1)
        for _ in range(cfg.n_scenarios)
    ]

    train, test = [], []
    for u in range(1, cfg.n_users + 1):
        rng = np.random.default_rng(np.random.SeedSequence([cfg.seed, _USER_STREAM, u]))
        n_pref = int(rng.integers(2, 5))
        preferred = rng.choice(cfg.n_topics, size=n_pref, replace=False)
        segment = 1 + int(preferred.min()) % cfg.n_segments
        h = int(rng.integers(cfg.history_min, cfg.history_max + 1))
        topics = rng.choice(preferred, size=h)
        picks = rng.integers(0, np.asarray([items_per_topic[t] for t in topics]))
        hist_items = (topics + 1 + picks * cfg.n_topics).astype(np.int64)
        behaviors = tuple(Behavior(int(it), (int(topic_of[it]) + 1,)) for it in hist_items)
        hist_unit = unit[hist_items]  # (h, n_topics)

        for m in range(cfg.n_scenarios):
            rel_mask = np.asarray([topic_of[it] in scenario_topics[m] for it in hist_items])
            k = imps[m]
            targets = rng.integers(1, cfg.n_items + 1, size=k)
            cos = unit[targets] @ hist_unit.T  # (k, h)
            if rel_mask.any():
                r = cos[:, rel_mask].mean(axis=1)
            else:
                r = np.zeros(k)
            p = 1.0 / (1.0 + np.exp(-(cfg.steepness * r + betas[m])))
            labels = (rng.random(k) < p).astype(np.int64)
            flips = rng.random(k) < cfg.flip_noise
            labels[flips] = 1 - labels[flips]
            session = f"u{u}-s{m}"
            dest = test if u in test_users[m] else train
            for j in range(k):
                tgt = int(targets[j])
                dest.append(
                    Instance(
                        feature_ids=(u, segment),
                        behaviors=behaviors,
                        target_item=tgt,
                        target_attrs=(int(topic_of[tgt]) + 1,),
                        scenario_id=m,
                        label=int(labels[j]),
                        session_id=session,
                        timestamp=j,
                    )
                )
    return train, test, truth


# ---------------------------------------------------------------------------
# CSV schema
#
# header: session_id,scenario_id,label,timestamp,user_id,target_item,
#         target_attrs,f1..f{N_f-1},behaviors
# - user_id is context field 0; the f-columns carry the remaining fields
# - target_attrs: |-separated ids, may be empty
# - behaviors: "item:attr,attr;item;item:attr", oldest first, may be empty


def _f_columns(n_fields):
    return [f"f{j}" for j in range(1, n_fields)]


def header_row(n_fields):
    return ["session_id", "scenario_id", "label", "timestamp", "user_id",
            "target_item", "target_attrs"] + _f_columns(n_fields) + ["behaviors"]


def _fmt_behaviors(behaviors):
    parts = []
    for b in behaviors:
        if b.attrs:
            parts.append(f"{b.item}:{','.join(str(a) for a in b.attrs)}")
        else:
            parts.append(str(b.item))
    return ";".join(parts)


def write_csv(instances, path, n_fields=2):
    """Write instances in the documented CSV schema (UTF-8, header row)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(header_row(n_fields)) + "\n")
        for inst in instances:
            if len(inst.feature_ids) != n_fields:
                raise DataError(
                    f"{path}: instance has {len(inst.feature_ids)} context fields, expected {n_fields}"
                )
            row = [
                inst.session_id,
                str(inst.scenario_id),
                str(inst.label),
                str(inst.timestamp),
                str(inst.feature_ids[0]),
                str(inst.target_item),
                "|".join(str(a) for a in inst.target_attrs),
            ]
            row += [str(f) for f in inst.feature_ids[1:]]
            row.append(_fmt_behaviors(inst.behaviors))
            fh.write(",".join(row) + "\n")


def _parse_int_cell(val, path, line_no, col):
    try:
        return int(val)
    except ValueError:
        raise DataError(f"{path}:{line_no}: column {col!r}: not an integer: {val!r}") from None


def _parse_behaviors(cell, path, line_no):
    if cell == "":
        return ()
    out = []
    for part in cell.split(";"):
        item, _, attrs = part.partition(":")
        item_id = _parse_int_cell(item, path, line_no, "behaviors")
        attr_ids = tuple(
            _parse_int_cell(a, path, line_no, "behaviors") for a in attrs.split(",") if a != ""
        )
        out.append(Behavior(item_id, attr_ids))
    return tuple(out)


def read_csv(path, n_scenarios=None):
    """Parse a dataset CSV back into instances (exact round trip)."""
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines:
        raise DataError(f"{path}:1: empty file, header row required")
    header = lines[0].split(",")
    if header[:7] != header_row(2)[:7] or header[-1] != "behaviors":
        raise DataError(f"{path}:1: unrecognized header {lines[0]!r}")
    n_fields = len(header) - 7  # user_id + f-columns
    instances = []
    for no, raw in enumerate(lines[1:], start=2):
        cells = raw.split(",", maxsplit=6 + n_fields)
        if len(cells) != len(header):
            raise DataError(
                f"{path}:{no}: expected {len(header)} columns, got {len(cells)}"
            )
        session_id = cells[0]
        scenario_id = _parse_int_cell(cells[1], path, no, "scenario_id")
        if scenario_id < 0 or (n_scenarios is not None and scenario_id >= n_scenarios):
            raise DataError(
                f"{path}:{no}: column 'scenario_id': unknown scenario id {scenario_id}"
            )
        label = _parse_int_cell(cells[2], path, no, "label")
        if label not in (0, 1):
            raise DataError(f"{path}:{no}: column 'label': must be 0 or 1, got {label}")
        timestamp = _parse_int_cell(cells[3], path, no, "timestamp")
        user_id = _parse_int_cell(cells[4], path, no, "user_id")
        target_item = _parse_int_cell(cells[5], path, no, "target_item")
        tattrs = tuple(
            _parse_int_cell(a, path, no, "target_attrs")
            for a in cells[6].split("|")
            if a != ""
        )
        feats = (user_id,) + tuple(
            _parse_int_cell(cells[7 + j], path, no, f"f{j + 1}") for j in range(n_fields - 1)
        )
        behaviors = _parse_behaviors(cells[6 + n_fields], path, no)
        instances.append(
            Instance(
                feature_ids=feats,
                behaviors=behaviors,
                target_item=target_item,
                target_attrs=tattrs,
                scenario_id=scenario_id,
                label=label,
                session_id=session_id,
                timestamp=timestamp,
            )
        )
    return instances


def write_dataset(cfg, out_dir):
    """Generate and persist train/test CSVs plus the config for provenance."""
    train, test, truth = generate(cfg)
    os.makedirs(out_dir, exist_ok=True)
    n_fields = cfg.schema().n_fields
    write_csv(train, os.path.join(out_dir, "train.csv"), n_fields)
    write_csv(test, os.path.join(out_dir, "test.csv"), n_fields)
    with open(os.path.join(out_dir, "synth-config.txt"), "w", encoding="utf-8") as fh:
        fh.write(cfg.to_kv_text())
    return train, test, truth


def load_dataset(data_dir):
    """Read back a generated dataset directory: (train, test, config)."""
    cfg = SynthConfig.from_file(os.path.join(data_dir, "synth-config.txt"))
    train = read_csv(os.path.join(data_dir, "train.csv"), n_scenarios=cfg.n_scenarios)
    test = read_csv(os.path.join(data_dir, "test.csv"), n_scenarios=cfg.n_scenarios)
    return train, test, cfg
