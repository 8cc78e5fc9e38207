import numpy as np
import pytest
from sklearn.metrics import normalized_mutual_info_score

from debiased_clip.cluster import _lloyd, cluster_report, kmeans, normalized_mutual_info


def restart_oracle(x, k, restarts, seed):
    """Best inertia of plain Lloyd runs from uniformly drawn initial points."""
    rng = np.random.default_rng(seed)
    best = np.inf
    for _ in range(restarts):
        c = x[rng.choice(len(x), k, replace=False)].astype(float)
        for _ in range(100):
            lab = ((x[:, None, :] - c[None]) ** 2).sum(-1).argmin(1)
            new = np.array([x[lab == j].mean(0) if (lab == j).any() else c[j] for j in range(k)])
            if np.allclose(new, c):
                break
            c = new
        lab = ((x[:, None, :] - c[None]) ** 2).sum(-1).argmin(1)
        best = min(best, float(((x - c[lab]) ** 2).sum()))
    return best


class TestKMeans:
    def test_single_cluster_is_mean(self, rng):
        x = rng.standard_normal((20, 3))
        a = kmeans(x, 1)
        np.testing.assert_allclose(a.centroids[0], x.mean(0))
        assert np.all(a.labels == 0)

    def test_two_blobs_recovered(self):
        rng = np.random.default_rng(0)
        truth = np.repeat([0, 1], 50)
        x = rng.standard_normal((100, 2)) + np.where(truth[:, None] == 1, 10.0, 0.0) * np.array([1.0, 0.0])
        labels = kmeans(x, 2, seed=0).labels
        assert np.array_equal(labels, truth) or np.array_equal(labels, 1 - truth)

    @pytest.mark.parametrize("seed", range(5))
    def test_not_worse_than_random_restarts(self, seed):
        x = np.random.default_rng(seed).standard_normal((8, 2))
        assert kmeans(x, 2, seed=seed).inertia <= restart_oracle(x, 2, 100, seed) + 1e-9

    def test_lloyd_monotone(self):
        for s in range(50):
            rng = np.random.default_rng(s)
            x = rng.standard_normal((30, 3))
            start = x[rng.choice(30, 4, replace=False)]
            hist = _lloyd(x, start.copy(), 100, 0.0).history
            assert all(b <= a + 1e-9 for a, b in zip(hist, hist[1:]))

    def test_empty_cluster_repaired(self):
        x = np.array([[0.0], [0.1], [0.2], [10.0]])
        a = _lloyd(x, np.array([[0.1], [100.0], [200.0]]), 50, 0.0)
        assert len(set(a.labels.tolist())) == 3

    def test_assignments_are_nearest(self, rng):
        x = rng.standard_normal((40, 2))
        a = kmeans(x, 3)
        d = ((x[:, None] - a.centroids[None]) ** 2).sum(-1)
        assert np.all(d[np.arange(40), a.labels] <= d.min(1) + 1e-12)

    def test_permutation_invariance(self, rng):
        x = rng.standard_normal((25, 2)) + np.repeat([[0, 0], [6, 6]], [12, 13], axis=0)
        perm = rng.permutation(25)
        a, b = kmeans(x, 2, seed=1), kmeans(x[perm], 2, seed=1)
        same = a.labels[perm][:, None] == a.labels[perm][None, :]
        assert np.array_equal(same, b.labels[:, None] == b.labels[None, :])

    def test_seeded(self, rng):
        x = rng.standard_normal((30, 2))
        assert np.array_equal(kmeans(x, 3, seed=2).labels, kmeans(x, 3, seed=2).labels)

    def test_k_too_large(self):
        with pytest.raises(ValueError):
            kmeans(np.zeros((3, 2)), 4)


class TestReport:
    def test_perfect_dependence(self):
        attrs = np.array(["a", "b", "c"] * 10)
        clusters = np.array([2, 0, 1] * 10)
        assert cluster_report(clusters, attrs)["nmi"] == pytest.approx(1.0)

    def test_independent_labels(self):
        rng = np.random.default_rng(0)
        assert normalized_mutual_info(rng.integers(0, 3, 2000), rng.integers(0, 4, 2000)) < 0.05

    def test_single_cluster(self):
        assert normalized_mutual_info(np.zeros(10, int), np.arange(10) % 2) == 0.0

    def test_matches_sklearn(self, rng):
        a, b = rng.integers(0, 4, 300), rng.integers(0, 3, 300)
        b[:150] = a[:150] % 3
        assert normalized_mutual_info(a, b) == pytest.approx(normalized_mutual_info_score(b, a), abs=1e-10)

    def test_contingency_counts(self):
        rep = cluster_report(np.array([0, 0, 1, 1]), np.array(["x", "y", "y", "y"]))
        assert rep["counts"] == [[1, 1], [0, 2]] and rep["categories"] == ["x", "y"]
