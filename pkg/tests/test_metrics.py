import math

import numpy as np
import pytest

from sfpnet.errors import MetricError
from sfpnet.metrics import (
    EvalReport,
    ScoredImpression,
    auc,
    evaluate_scored,
    mann_whitney_u,
    s_gauc,
)

rng = np.random.default_rng(0)


def pairwise_auc(scores, labels):
    """O(P*N) enumeration oracle, ties counted one half."""
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = 0.0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1.0
            elif p == n:
                wins += 0.5
    return wins / (len(pos) * len(neg))


class TestAuc:
    def test_worked_example(self):
        assert auc([(0.9, 1), (0.8, 0), (0.3, 1)]) == 0.5

    def test_perfect_separation(self):
        assert auc([0.9, 0.8, 0.2, 0.1], [1, 1, 0, 0]) == 1.0

    def test_all_ties(self):
        assert auc([0.5, 0.5, 0.5, 0.5], [1, 0, 1, 0]) == 0.5

    def test_matches_pairwise_enumeration_exactly(self):
        for _ in range(200):
            n = int(rng.integers(2, 40))
            scores = rng.integers(0, 6, size=n) / 5.0  # coarse grid forces ties
            labels = rng.integers(0, 2, size=n)
            if labels.min() == labels.max():
                labels[0] = 1 - labels[0]
            assert auc(scores, labels) == pairwise_auc(scores, labels)

    def test_monotone_transform_invariance(self):
        scores = rng.normal(size=50)
        labels = rng.integers(0, 2, size=50)
        labels[0], labels[1] = 0, 1
        base = auc(scores, labels)
        assert auc(np.exp(scores), labels) == base
        assert auc(3 * scores + 7, labels) == base

    def test_single_class_rejected(self):
        with pytest.raises(MetricError):
            auc([0.1, 0.2], [1, 1])

    def test_matches_sklearn(self):
        from sklearn.metrics import roc_auc_score

        for _ in range(25):
            scores = rng.normal(size=60)
            labels = rng.integers(0, 2, size=60)
            labels[:2] = [0, 1]
            assert abs(auc(scores, labels) - roc_auc_score(labels, scores)) < 1e-12


def session(sid, scen, pos_scores, neg_scores):
    imps = [ScoredImpression(s, 1, sid, scen) for s in pos_scores]
    imps += [ScoredImpression(s, 0, sid, scen) for s in neg_scores]
    return imps


class TestSGauc:
    def test_single_session_equals_auc(self):
        imps = session("a", 0, [0.9, 0.4], [0.5])
        assert s_gauc(imps) == auc([(i.score, i.label) for i in imps])

    def test_weighted_example(self):
        # session a: 10 impressions, AUC exactly 0.6; session b: 30, AUC 0.8
        a = session("a", 0, [10, 9, 8, 2, 1], [7, 6, 5, 4, 3])
        b = session("b", 0, list(range(100, 112)) + [1, 2, 3],
                    list(range(50, 65)))
        assert auc([(i.score, i.label) for i in a]) == 0.6
        assert auc([(i.score, i.label) for i in b]) == 0.8
        assert s_gauc(a + b) == 0.75

    def test_duplication_invariance(self):
        imps = session("a", 0, [0.9, 0.8], [0.5, 0.1]) + session("b", 0, [0.7], [0.9, 0.2])
        doubled = []
        for i in imps:
            doubled += [i, i]
        assert abs(s_gauc(imps) - s_gauc(doubled)) < 1e-12

    def test_within_session_auc_range(self):
        for _ in range(20):
            imps = []
            aucs = []
            for sid in range(4):
                scores = rng.normal(size=8)
                labels = rng.integers(0, 2, size=8)
                labels[:2] = [0, 1]
                imps += [ScoredImpression(s, int(y), f"s{sid}", 0) for s, y in zip(scores, labels)]
                aucs.append(auc(scores, labels))
            g = s_gauc(imps)
            assert min(aucs) - 1e-12 <= g <= max(aucs) + 1e-12

    def test_single_class_sessions_excluded(self):
        mixed = session("a", 0, [0.9], [0.1])  # AUC 1.0
        pure = [ScoredImpression(0.5, 1, "b", 0)] * 50
        assert s_gauc(mixed + pure) == 1.0

    def test_no_evaluable_session_rejected(self):
        with pytest.raises(MetricError):
            s_gauc([ScoredImpression(0.5, 1, "a", 0), ScoredImpression(0.4, 1, "a", 0)])


class TestMannWhitney:
    def test_identical_samples(self):
        u, p = mann_whitney_u([1, 2, 3], [1, 2, 3])
        assert u == 4.5  # n^2 / 2
        assert p > 0.9

    def test_fully_separated(self):
        u, p = mann_whitney_u([1, 2, 3], [4, 5, 6])
        assert u == 0.0
        u2, _ = mann_whitney_u([4, 5, 6], [1, 2, 3])
        assert u2 == 9.0  # n_a * n_b - U

    def test_orientation_antisymmetry(self):
        a = rng.normal(size=12)
        b = rng.normal(size=9)
        u_ab, p_ab = mann_whitney_u(a, b)
        u_ba, p_ba = mann_whitney_u(b, a)
        assert abs(u_ab + u_ba - len(a) * len(b)) < 1e-9
        assert abs(p_ab - p_ba) < 1e-12

    def test_all_identical_values(self):
        u, p = mann_whitney_u([5, 5, 5], [5, 5])
        assert p == 1.0

    def test_empty_rejected(self):
        with pytest.raises(MetricError):
            mann_whitney_u([], [1])

    def test_matches_scipy_asymptotic(self):
        from scipy.stats import mannwhitneyu

        for trial in range(30):
            n_a, n_b = int(rng.integers(8, 25)), int(rng.integers(8, 25))
            a = np.round(rng.normal(size=n_a), 1)  # rounding forces ties
            b = np.round(rng.normal(size=n_b), 1)
            u, p = mann_whitney_u(a, b)
            ref = mannwhitneyu(a, b, alternative="two-sided", method="asymptotic")
            assert abs(u - ref.statistic) < 1e-9
            assert abs(p - ref.pvalue) < 1e-9


class TestEvalReport:
    def impressions(self):
        imps = []
        imps += session("u1-s0", 0, [0.9, 0.7], [0.3, 0.2])
        imps += session("u2-s0", 0, [0.6], [0.8])
        imps += session("u1-s1", 1, [0.9], [0.1, 0.5])
        return imps

    def test_rows_per_scenario_plus_overall(self):
        rep = evaluate_scored(self.impressions())
        assert [r.scenario_id for r in rep.rows] == ["0", "1"]
        assert rep.overall.scenario_id == "all"
        assert rep.overall.impressions == 9
        assert rep.overall.sessions == 3

    def test_single_class_scenario_marked_unavailable(self):
        imps = self.impressions() + [ScoredImpression(0.5, 1, "u9-s2", 2)]
        rep = evaluate_scored(imps)
        row2 = [r for r in rep.rows if r.scenario_id == "2"][0]
        assert row2.auc is None
        assert row2.s_gauc is None
        row0 = [r for r in rep.rows if r.scenario_id == "0"][0]
        assert row0.auc is not None

    def test_csv_round_shape(self):
        rep = evaluate_scored(self.impressions())
        lines = rep.to_csv().strip().split("\n")
        assert lines[0] == "scenario_id,auc,s_gauc,impressions,sessions"
        assert len(lines) == 4  # header + 2 scenarios + overall
        table = rep.to_table()
        assert "scenario" in table and "all" in table

    def test_csv_deterministic(self):
        a = evaluate_scored(self.impressions()).to_csv()
        b = evaluate_scored(self.impressions()).to_csv()
        assert a == b
