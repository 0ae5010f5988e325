"""Ranking metrics: ROC-AUC, session-weighted S-GAUC, Mann-Whitney U.

AUC is computed by rank sum with average ranks for ties (probability that a
random positive outranks a random negative, ties counted 1/2), which equals
pairwise enumeration exactly. S-GAUC weights per-session AUCs by impression
count; single-class sessions are excluded from both numerator and weight
sum. The U test uses the normal approximation with tie correction and
continuity correction.
"""

import math
from collections import defaultdict
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import MetricError


@dataclass(frozen=True)
class ScoredImpression:
    score: float
    label: int
    session_id: str
    scenario_id: int


def _average_ranks(values):
    """1-based ranks, ties sharing their average rank."""
    values = np.asarray(values, dtype=np.float64)
    order = np.argsort(values, kind="stable")
    ranks = np.empty(len(values), dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < len(values):
        j = i
        while j + 1 < len(values) and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def auc(scores, labels=None):
    """Rank-sum AUC; accepts (score, label) pairs or two parallel arrays."""
    if labels is None:
        pairs = list(scores)
        scores = np.asarray([p[0] for p in pairs], dtype=np.float64)
        labels = np.asarray([p[1] for p in pairs])
    else:
        scores = np.asarray(scores, dtype=np.float64)
        labels = np.asarray(labels)
    pos = labels == 1
    n_pos = int(pos.sum())
    n_neg = len(labels) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"auc undefined: {n_pos} positives and {n_neg} negatives"
        )
    ranks = _average_ranks(scores)
    return float((ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def s_gauc(impressions):
    """Impression-weighted mean of per-session AUCs.

    Sessions containing a single label class are skipped and their
    impressions excluded from the weight sum; if no session is evaluable
    this raises MetricError.
    """
    impressions = list(impressions)
    if not impressions:
        raise MetricError("s_gauc: empty input")
    by_session = defaultdict(list)
    for imp in impressions:
        by_session[imp.session_id].append(imp)
    num = 0.0
    den = 0
    for sess in by_session.values():
        labels = [imp.label for imp in sess]
        if len(set(labels)) < 2:
            continue
        a = auc([(imp.score, imp.label) for imp in sess])
        num += len(sess) * a
        den += len(sess)
    if den == 0:
        raise MetricError("s_gauc: no session contains both labels")
    return num / den


def mann_whitney_u(sample_a, sample_b):
    """U statistic (sample_a orientation) and two-sided normal-approx p."""
    a = np.asarray(sample_a, dtype=np.float64)
    b = np.asarray(sample_b, dtype=np.float64)
    if a.size == 0 or b.size == 0:
        raise MetricError("mann_whitney_u: both samples must be nonempty")
    pooled = np.concatenate([a, b])
    ranks = _average_ranks(pooled)
    n_a, n_b = a.size, b.size
    n = n_a + n_b
    u = float(ranks[:n_a].sum() - n_a * (n_a + 1) / 2.0)
    mu = n_a * n_b / 2.0
    _, counts = np.unique(pooled, return_counts=True)
    tie_term = float(((counts**3) - counts).sum())
    sigma2 = (n_a * n_b / 12.0) * ((n + 1) - tie_term / (n * (n - 1)))
    if sigma2 <= 0:
        return u, 1.0  # all pooled values identical
    z = max(0.0, (abs(u - mu) - 0.5) / math.sqrt(sigma2))
    p = math.erfc(z / math.sqrt(2.0))
    return u, min(1.0, max(0.0, p))


# ---------------------------------------------------------------------------
# evaluation reports


@dataclass
class ScenarioMetrics:
    scenario_id: str
    auc: Optional[float]
    s_gauc: Optional[float]
    impressions: int
    sessions: int


@dataclass
class EvalReport:
    rows: list  # per-scenario ScenarioMetrics, ordered by scenario id
    overall: ScenarioMetrics
    u_test_p: Optional[float] = None

    def to_csv(self):
        lines = ["scenario_id,auc,s_gauc,impressions,sessions"]
        for row in self.rows + [self.overall]:
            a = "" if row.auc is None else repr(row.auc)
            g = "" if row.s_gauc is None else repr(row.s_gauc)
            lines.append(f"{row.scenario_id},{a},{g},{row.impressions},{row.sessions}")
        return "\n".join(lines) + "\n"

    def to_table(self):
        header = f"{'scenario':>9} {'auc':>8} {'s_gauc':>8} {'impressions':>12} {'sessions':>9}"
        lines = [header, "-" * len(header)]
        for row in self.rows + [self.overall]:
            a = "   n/a" if row.auc is None else f"{row.auc:.4f}"
            g = "   n/a" if row.s_gauc is None else f"{row.s_gauc:.4f}"
            lines.append(
                f"{row.scenario_id:>9} {a:>8} {g:>8} {row.impressions:>12} {row.sessions:>9}"
            )
        return "\n".join(lines)


def _scenario_metrics(tag, imps):
    sessions = len({imp.session_id for imp in imps})
    try:
        a = auc([(imp.score, imp.label) for imp in imps])
    except MetricError:
        a = None
    try:
        g = s_gauc(imps)
    except MetricError:
        g = None
    return ScenarioMetrics(tag, a, g, len(imps), sessions)


def evaluate_scored(impressions):
    """Per-scenario and overall AUC / S-GAUC over scored impressions."""
    impressions = list(impressions)
    if not impressions:
        raise MetricError("evaluate_scored: empty input")
    by_scenario = defaultdict(list)
    for imp in impressions:
        by_scenario[imp.scenario_id].append(imp)
    rows = [
        _scenario_metrics(str(sid), by_scenario[sid]) for sid in sorted(by_scenario)
    ]
    overall = _scenario_metrics("all", impressions)
    return EvalReport(rows=rows, overall=overall)
