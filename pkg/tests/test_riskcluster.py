# (c) 2024 riskformer contributors
# Licensed under the MIT license: https://www.opensource.org/licenses/mit-license.php
"""
"""
import numpy as np
import pytest

from riskformer.riskcluster import (
    PROBABILITY_COLUMN,
    ClusterAssignment,
    RiskReport,
    cluster_metrics,
    cluster_sizes,
    consistency,
    fixed_size_clusters,
    metrics_summary,
    precision,
    rank_by_error,
    recall,
    threshold_clusters,
    write_latents,
)
from riskformer.util import ConfigurationError, DataError


def ids(n, prefix="a"):
    return [f"{prefix}{i:06d}" for i in range(n)]


class TestRanking:
    def test_descending(self):
        ranking = rank_by_error({"a": 0.1, "b": 0.5, "c": 0.3})
        assert ranking.account_ids == ["b", "c", "a"]
        np.testing.assert_array_equal(ranking.scores, [0.5, 0.3, 0.1])

    def test_ties(self):
        ranking = rank_by_error({"z": 0.2, "b": 0.2, "m": 0.9, "a": 0.2})
        assert ranking.account_ids == ["m", "a", "b", "z"]
        ranking = rank_by_error({"z": 0.2, "b": 0.2, "m": 0.1}, descending=False)
        assert ranking.account_ids == ["m", "b", "z"]

    def test_non_finite(self):
        with pytest.raises(DataError, match="Non-finite score"):
            rank_by_error({"a": 0.1, "b": float("nan")})
        with pytest.raises(DataError):
            rank_by_error({"a": float("inf")})

    def test_monotone_transform(self):
        rng = np.random.default_rng(0)
        errors = dict(zip(ids(200), rng.uniform(size=200)))
        base = rank_by_error(errors).account_ids
        assert rank_by_error({k: np.log(v) for k, v in errors.items()}).account_ids == base
        assert rank_by_error({k: 3 * v + 1 for k, v in errors.items()}).account_ids == base


class TestClusters:
    def test_sizes(self):
        assert cluster_sizes(100) == [15] * 6 + [10]
        assert cluster_sizes(347_546) == [52_131] * 6 + [34_760]
        assert cluster_sizes(7) == [1] * 7
        assert cluster_sizes(10, 0.5) == [5, 5]
        assert cluster_sizes(11, 0.25) == [2, 2, 2, 5]

    def test_sizes_sum(self):
        for n in (7, 8, 13, 99, 101, 1000, 12_345):
            for f in (0.1, 0.15, 0.2, 0.3):
                if int(f * n) < 1:
                    continue
                sizes = cluster_sizes(n, f)
                assert sum(sizes) == n
                assert all(s > 0 for s in sizes)
                assert len(set(sizes[:-1])) <= 1

    def test_size_errors(self):
        with pytest.raises(ConfigurationError):
            cluster_sizes(100, 0.0)
        with pytest.raises(ConfigurationError):
            cluster_sizes(100, 1.0)
        with pytest.raises(DataError, match="empty ranking"):
            cluster_sizes(0)
        with pytest.raises(DataError, match="empty clusters"):
            cluster_sizes(6)

    def test_fixed_size(self):
        errors = {a: float(i) for i, a in enumerate(ids(100))}
        assignment = fixed_size_clusters(rank_by_error(errors))
        assert assignment.sizes == [15] * 6 + [10]
        assert assignment.members(1) == ids(100)[::-1][:15]
        assert assignment.cluster_of("a000099") == 1
        assert assignment.cluster_of("a000000") == 7
        assert assignment.account_ids == set(ids(100))

    def test_thresholds(self):
        ranking = rank_by_error({"a": 0.9, "b": 0.5, "c": 0.2, "d": 0.05, "e": 0.5})
        assignment = threshold_clusters(ranking, [0.5, 0.1])
        assert assignment.clusters == [["a", "b", "e"], ["c"], ["d"]]
        assignment = threshold_clusters(ranking, [2.0, 1.0])
        assert assignment.sizes == [0, 0, 5]
        with pytest.raises(ConfigurationError, match="strictly descending"):
            threshold_clusters(ranking, [0.1, 0.5])


class TestMetrics:
    def test_recall_precision(self):
        labeled = {f"l{i}" for i in range(891)}
        members = [f"l{i}" for i in range(450)] + ids(52_131 - 450)
        assert recall(members, labeled) == pytest.approx(0.5050, abs=1e-4)
        assert precision(members, labeled) == pytest.approx(0.00863, abs=1e-5)
        assert 891 / 52_131 == pytest.approx(0.01709, abs=1e-5)

    def test_errors(self):
        with pytest.raises(DataError, match="non-empty labeled set"):
            recall(["a"], set())
        with pytest.raises(DataError, match="undefined"):
            precision([], {"a"})

    def test_cluster_metrics(self):
        assignment = ClusterAssignment(clusters=[["a", "b"], ["c", "d"], ["e"]])
        res = cluster_metrics(assignment, {"a", "d", "x"})
        assert res["labeled_total"] == 3
        assert res["max_precision"] == 1.0
        rows = res["clusters"]
        assert [r["labeled"] for r in rows] == [1, 1, 0]
        assert rows[0]["recall"] == pytest.approx(1 / 3)
        assert rows[0]["precision"] == 0.5
        assert rows[2]["precision"] == 0.0
        res = cluster_metrics(assignment, set())
        assert res["clusters"][0]["recall"] is None
        assert res["max_precision"] == 0.0


class TestConsistency:
    def setup_method(self):
        accounts = ids(200)
        self.a = ClusterAssignment(clusters=[accounts[:100], accounts[100:]])

    def test_half_shared(self):
        accounts = ids(200)
        b = ClusterAssignment(clusters=[accounts[:50] + accounts[150:], accounts[50:150]])
        res = consistency([self.a, b])
        assert res.percentages == [50.0, 50.0]
        assert res.average == 50.0
        res = consistency([self.a, b], denominator="union")
        assert res.percentages == pytest.approx([100 * 50 / 150] * 2)

    def test_four_accounts(self):
        a = ClusterAssignment(clusters=[["a", "b"], ["c", "d"]])
        b = ClusterAssignment(clusters=[["a"], ["b", "c", "d"]])
        res = consistency([a, b])
        assert res.percentages == [50.0, 100.0]
        assert res.average == 75.0

    def test_symmetric(self):
        rng = np.random.default_rng(11)
        accounts = ids(70)
        assignments = []
        for _ in range(3):
            order = rng.permutation(accounts).tolist()
            ranking = rank_by_error({a: float(i) for i, a in enumerate(order)})
            assignments.append(fixed_size_clusters(ranking))
        base = consistency(assignments).percentages
        assert consistency(assignments[::-1]).percentages == base
        assert consistency([assignments[1], assignments[2], assignments[0]]).percentages == base

    def test_identical_and_disjoint(self):
        assert consistency([self.a, self.a]).average == 100.0
        swapped = ClusterAssignment(clusters=[self.a.members(2), self.a.members(1)])
        assert consistency([self.a, swapped]).average == 0.0
        assert consistency([self.a, self.a, swapped]).percentages == [0.0, 0.0]

    def test_as_dict(self):
        d = consistency([self.a, self.a]).as_dict()
        assert d == {"denominator": "first", "clusters": {1: 100.0, 2: 100.0}, "average": 100.0}

    def test_errors(self):
        three = ClusterAssignment(clusters=[ids(200)[:10], ids(200)[10:20], ids(200)[20:]])
        with pytest.raises(DataError, match="2 vs. 3 clusters"):
            consistency([self.a, three])
        other = ClusterAssignment(clusters=[ids(100, "b"), ids(100, "c")])
        with pytest.raises(DataError, match="different account sets"):
            consistency([self.a, other])
        with pytest.raises(ConfigurationError, match="denominator"):
            consistency([self.a, self.a], denominator="last")


class TestReport:
    def setup_method(self):
        rng = np.random.default_rng(3)
        self.errors = dict(zip(ids(40), rng.uniform(size=40) / 7))
        ranking = rank_by_error(self.errors)
        self.report = RiskReport.build(ranking, fixed_size_clusters(ranking))

    def test_build(self):
        assert len(self.report) == 40
        assert self.report.clusters == sorted(self.report.clusters)
        assert self.report.assignment().sizes == [6] * 6 + [4]
        df = self.report.to_frame()
        assert list(df.columns) == ["account_id", "reconstruction_error", "rank", "cluster"]
        assert df["rank"].tolist() == list(range(1, 41))

    def test_csv_roundtrip(self, tmp_path):
        path = str(tmp_path / "report.csv")
        self.report.write_csv(path)
        again = RiskReport.read_csv(path)
        assert again.account_ids == self.report.account_ids
        assert again.clusters == self.report.clusters
        np.testing.assert_array_equal(again.scores, self.report.scores)

    def test_csv_full_precision(self, tmp_path):
        rng = np.random.default_rng(17)
        errors = dict(zip(ids(500), rng.uniform(size=500) / 3 + 1e-9))
        ranking = rank_by_error(errors)
        report = RiskReport.build(ranking, fixed_size_clusters(ranking))
        path = str(tmp_path / "report.csv")
        report.write_csv(path)
        again = RiskReport.read_csv(path)
        assert again.scores.tolist() == report.scores.tolist()
        # rewriting the re-read report gives the same bytes
        path2 = str(tmp_path / "report2.csv")
        again.write_csv(path2)
        with open(path, "rb") as f1, open(path2, "rb") as f2:
            assert f1.read() == f2.read()

    def test_probability_column(self, tmp_path):
        ranking = rank_by_error({"a": 0.9, "b": 0.1})
        report = RiskReport.build(
            ranking, ClusterAssignment(clusters=[["a"], ["b"]]), score_name=PROBABILITY_COLUMN
        )
        path = str(tmp_path / "p.csv")
        report.write_csv(path)
        assert RiskReport.read_csv(path).score_name == PROBABILITY_COLUMN

    def test_read_errors(self, tmp_path):
        with pytest.raises(DataError, match="not found"):
            RiskReport.read_csv(str(tmp_path / "none.csv"))
        path = tmp_path / "bad.csv"
        path.write_text("account_id,score,rank,cluster\na,1,1,1\n")
        with pytest.raises(DataError, match="no score column"):
            RiskReport.read_csv(str(path))
        path.write_text("account_id,probability,rank\na,1,1\n")
        with pytest.raises(DataError, match="lacks column"):
            RiskReport.read_csv(str(path))

    def test_metrics_summary(self):
        ranking = rank_by_error({k: v**2 for k, v in self.errors.items()})
        squared = RiskReport.build(ranking, fixed_size_clusters(ranking))
        labeled = set(self.report.account_ids[:3]) | {"unknown"}
        res = metrics_summary([self.report, squared], labeled, names=["raw", "squared"])
        assert set(res["reports"]) == {"raw", "squared"}
        raw = res["reports"]["raw"]
        assert raw["labeled_total"] == 3
        assert raw["clusters"][0]["recall"] == 1.0
        assert raw["clusters"][0]["precision"] == 0.5
        assert res["consistency"]["average"] == 100.0

    def test_metrics_summary_mismatch(self):
        other = RiskReport(account_ids=["x"], scores=np.array([0.1]), clusters=[1])
        with pytest.raises(DataError, match="different account sets"):
            metrics_summary([self.report, other], set())
        assert "consistency" not in metrics_summary([self.report], set())


def test_write_latents(tmp_path):
    path = str(tmp_path / "latents.csv")
    write_latents(path, ["a", "b"], np.array([[0.5, 1.0], [-1.0, 0.25]]))
    with open(path) as f:
        assert f.read().splitlines() == ["account_id,z0,z1", "a,0.5,1", "b,-1,0.25"]
