# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
Risk tiers from reconstruction errors: ranking, clusters, recall/precision,
and the cross-configuration consistency metric.
"""
import math
import os
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from riskformer.util import ConfigurationError, DataError, check_arg, logger

#: Report column holding autoencoder scores
ERROR_COLUMN = "reconstruction_error"

#: Report column holding classifier scores
PROBABILITY_COLUMN = "probability"


@dataclass
class ErrorRanking:
    """Account ids ordered by score (ties: ascending account id)."""

    account_ids: list
    scores: np.ndarray
    descending: bool = True

    def __len__(self):
        return len(self.account_ids)


@dataclass
class ClusterAssignment:
    """Partition of ranked accounts into clusters 1..K (1 = highest risk).

    Attributes:
        clusters (list): one list of account ids per cluster, in rank order
    """

    clusters: list = field(default_factory=list)

    def __post_init__(self):
        self._index = {a: k for k, members in enumerate(self.clusters, 1) for a in members}

    def __len__(self):
        return len(self.clusters)

    @property
    def sizes(self):
        return [len(c) for c in self.clusters]

    @property
    def account_ids(self):
        return set(self._index)

    def members(self, k):
        """Return the account ids of cluster `k` (1-based)."""
        return self.clusters[k - 1]

    def cluster_of(self, account_id):
        return self._index[account_id]


def rank_by_error(errors, descending=True):
    """Sort accounts by score.

    Args:
        errors (dict): account_id -> score
        descending (bool): highest scores first (outliers); pass False to
            rank similar samples first
    Raises:
        DataError: on NaN or infinite scores
    """
    check_arg(errors, dict)
    items = [(str(k), float(v)) for k, v in errors.items()]
    bad = [k for k, v in items if not math.isfinite(v)]
    if bad:
        raise DataError(f"Non-finite score for {len(bad)} account(s), e.g. {bad[0]!r}")
    if descending:
        items.sort(key=lambda kv: (-kv[1], kv[0]))
    else:
        items.sort(key=lambda kv: (kv[1], kv[0]))
    return ErrorRanking(
        account_ids=[k for k, _ in items],
        scores=np.array([v for _, v in items], dtype=np.float64),
        descending=descending,
    )


def cluster_sizes(n, fraction=0.15):
    """Return the fixed-size cluster scheme for `n` accounts.

    Every cluster holds floor(fraction * n) accounts, the final cluster holds
    the remainder, e.g. n=100, fraction=0.15 -> [15, 15, 15, 15, 15, 15, 10].
    """
    if isinstance(fraction, bool) or not isinstance(fraction, (int, float)):
        raise ConfigurationError(f"Cluster fraction must be a number, got {fraction!r}")
    if not 0 < fraction < 1:
        raise ConfigurationError(f"Cluster fraction must be in (0, 1), got {fraction}")
    if n < 1:
        raise DataError("Cannot cluster an empty ranking")
    size = int(math.floor(fraction * n))
    if size < 1:
        raise DataError(f"Cluster fraction {fraction} of {n} accounts gives empty clusters")
    n_full = int(math.ceil(1.0 / fraction - 1e-9)) - 1
    while n_full > 0 and n_full * size >= n:
        n_full -= 1
    return [size] * n_full + [n - n_full * size]


def fixed_size_clusters(ranking, fraction=0.15):
    """Slice the ranking into consecutive clusters of :func:`cluster_sizes`."""
    check_arg(ranking, ErrorRanking)
    sizes = cluster_sizes(len(ranking), fraction)
    clusters = []
    start = 0
    for size in sizes:
        clusters.append(list(ranking.account_ids[start : start + size]))
        start += size
    return ClusterAssignment(clusters=clusters)


def threshold_clusters(ranking, thresholds):
    """Cluster by score thresholds c1 > c2 > ... (descending ranking).

    Cluster 1 holds scores >= c1, cluster k scores in [c_k, c_{k-1}), and the
    last cluster everything below the smallest threshold. Clusters may be
    empty.
    """
    check_arg(ranking, ErrorRanking)
    check_arg(thresholds, (list, tuple), len(thresholds) >= 1)
    thresholds = [float(c) for c in thresholds]
    if any(a <= b for a, b in zip(thresholds, thresholds[1:])):
        raise ConfigurationError(f"Thresholds must be strictly descending: {thresholds}")
    clusters = [[] for _ in range(len(thresholds) + 1)]
    for account_id, score in zip(ranking.account_ids, ranking.scores):
        k = next((i for i, c in enumerate(thresholds) if score >= c), len(thresholds))
        clusters[k].append(account_id)
    return ClusterAssignment(clusters=clusters)


def recall(members, labeled):
    """|members & labeled| / |labeled|."""
    labeled = set(labeled)
    if not labeled:
        raise DataError("Recall needs a non-empty labeled set")
    return len(labeled.intersection(members)) / len(labeled)


def precision(members, labeled):
    """|members & labeled| / |members|."""
    members = set(members)
    if not members:
        raise DataError("Precision of an empty cluster is undefined")
    return len(members.intersection(labeled)) / len(members)


def cluster_metrics(assignment, labeled):
    """Per-cluster size, labeled count, recall and precision.

    Returns:
        dict with 'clusters' (list of dicts) and 'max_precision', the precision
        cluster 1 would have if it held every labeled account.
    """
    check_arg(assignment, ClusterAssignment)
    labeled = set(labeled)
    rows = []
    for k, members in enumerate(assignment.clusters, 1):
        hits = len(labeled.intersection(members))
        rows.append(
            {
                "cluster": k,
                "size": len(members),
                "labeled": hits,
                "recall": recall(members, labeled) if labeled else None,
                "precision": precision(members, labeled) if members else None,
            }
        )
    first = len(assignment.clusters[0]) if assignment.clusters else 0
    return {
        "clusters": rows,
        "labeled_total": len(labeled),
        "max_precision": min(1.0, len(labeled) / first) if first else None,
    }


@dataclass
class ConsistencyResult:
    percentages: list
    average: float
    denominator: str = "first"

    def as_dict(self):
        return {
            "denominator": self.denominator,
            "clusters": {k: round(p, 6) for k, p in enumerate(self.percentages, 1)},
            "average": round(self.average, 6),
        }


def consistency(assignments, denominator="first"):
    """Percentage of accounts that share cluster k under every configuration.

    Args:
        assignments (list): two or more ClusterAssignment over the same accounts
            and with the same number of clusters
        denominator (str): 'first' (size of cluster k under the first
            assignment) or 'union' (accounts in cluster k under any assignment)
    Returns:
        :class:`ConsistencyResult`
    Raises:
        DataError: on account or cluster-count mismatch
    """
    check_arg(assignments, (list, tuple), len(assignments) >= 2)
    if denominator not in ("first", "union"):
        raise ConfigurationError(f"Unknown consistency denominator {denominator!r}")
    first = assignments[0]
    for other in assignments[1:]:
        if len(other) != len(first):
            raise DataError(
                f"Cluster schemes differ: {len(first)} vs. {len(other)} clusters"
            )
        if other.account_ids != first.account_ids:
            raise DataError("Assignments cover different account sets")

    percentages = []
    for k in range(1, len(first) + 1):
        sets = [set(a.members(k)) for a in assignments]
        shared = set.intersection(*sets)
        if denominator == "first":
            total = len(sets[0])
        else:
            total = len(set.union(*sets))
        percentages.append(100.0 * len(shared) / total if total else 100.0)
    average = math.fsum(percentages) / len(percentages)
    return ConsistencyResult(percentages=percentages, average=average, denominator=denominator)


@dataclass
class RiskReport:
    """Ranked accounts with score, 1-based rank and cluster id."""

    account_ids: list
    scores: np.ndarray
    clusters: list
    score_name: str = ERROR_COLUMN

    def __len__(self):
        return len(self.account_ids)

    @classmethod
    def build(cls, ranking, assignment, score_name=ERROR_COLUMN):
        clusters = [assignment.cluster_of(a) for a in ranking.account_ids]
        return cls(
            account_ids=list(ranking.account_ids),
            scores=np.asarray(ranking.scores),
            clusters=clusters,
            score_name=score_name,
        )

    def assignment(self):
        k_max = max(self.clusters) if self.clusters else 0
        clusters = [[] for _ in range(k_max)]
        for account_id, k in zip(self.account_ids, self.clusters):
            clusters[k - 1].append(account_id)
        return ClusterAssignment(clusters=clusters)

    def to_frame(self):
        return pd.DataFrame(
            {
                "account_id": self.account_ids,
                self.score_name: self.scores,
                "rank": np.arange(1, len(self) + 1),
                "cluster": self.clusters,
            }
        )

    def write_csv(self, path):
        # repr precision, so a report can be re-read without loss
        self.to_frame().to_csv(path, index=False, float_format="%.17g")
        logger.info(f"Wrote report '{path}' ({len(self):,} accounts)")
        return path

    @classmethod
    def read_csv(cls, path):
        try:
            df = pd.read_csv(path, dtype={"account_id": str}, float_precision="round_trip")
        except FileNotFoundError:
            raise DataError(f"Report not found: '{path}'") from None
        if ERROR_COLUMN in df.columns:
            score_name = ERROR_COLUMN
        elif PROBABILITY_COLUMN in df.columns:
            score_name = PROBABILITY_COLUMN
        else:
            raise DataError(f"Report '{path}' has no score column")
        missing = {"account_id", "rank", "cluster"}.difference(df.columns)
        if missing:
            raise DataError(f"Report '{path}' lacks column(s): {', '.join(sorted(missing))}")
        df = df.sort_values("rank", kind="stable")
        return cls(
            account_ids=df["account_id"].tolist(),
            scores=df[score_name].to_numpy(dtype=np.float64),
            clusters=[int(k) for k in df["cluster"]],
            score_name=score_name,
        )


def metrics_summary(reports, labeled, denominator="first", names=None):
    """Recall/precision per cluster for every report, plus consistency.

    Raises:
        DataError: if reports cover different account sets
    """
    check_arg(reports, (list, tuple), len(reports) >= 1)
    names = names or [f"report{i}" for i in range(1, len(reports) + 1)]
    account_sets = [set(r.account_ids) for r in reports]
    if any(s != account_sets[0] for s in account_sets[1:]):
        raise DataError("Reports cover different account sets")
    unknown = set(labeled).difference(account_sets[0])
    if unknown:
        logger.warning(f"{len(unknown):,} labeled account(s) are not in the reports")
    labeled = set(labeled).intersection(account_sets[0])

    res = {"reports": {}}
    assignments = []
    for name, report in zip(names, reports):
        assignment = report.assignment()
        assignments.append(assignment)
        res["reports"][name] = cluster_metrics(assignment, labeled)
    if len(reports) >= 2:
        res["consistency"] = consistency(assignments, denominator).as_dict()
    return res


def report_basename(path):
    return os.path.splitext(os.path.basename(path))[0]


def write_latents(path, account_ids, latents):
    """Write latent vectors as CSV (account_id, z0, z1, ...)."""
    latents = np.asarray(latents)
    df = pd.DataFrame(latents, columns=[f"z{i}" for i in range(latents.shape[1])])
    df.insert(0, "account_id", list(account_ids))
    df.to_csv(path, index=False, float_format="%.17g")
    logger.info(f"Wrote {len(df):,} latent vectors to '{path}'")
    return path
