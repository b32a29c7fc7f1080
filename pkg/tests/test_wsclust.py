import itertools
import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from clusterda.wsclust import (
    Clustering,
    ConstraintSet,
    InfeasibleConstraints,
    WscConfig,
    cluster_stats,
    compact,
    conflicting_clusters,
    derive_constraints,
    export_clustering,
    kmeans,
    proportion_split,
    refine_conflicting,
    soft_constrained_kmeans,
    weakly_supervised_clustering,
)

U = -1  # unlabeled


def best_two_partition(x):
    """Exhaustive optimum of the k=2 objective (one-cluster solutions included)."""
    n = len(x)
    best = np.sum((x - x.mean(axis=0)) ** 2)
    for mask in range(1, 2 ** (n - 1)):
        side = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        cost = sum(np.sum((x[s] - x[s].mean(axis=0)) ** 2) for s in (side, ~side))
        best = min(best, cost)
    return best


def penalized_brute_force(x, must, w, k=2):
    """Minimum SSE + w * violated must-links over all k**n assignments."""
    best = None
    for a in itertools.product(range(k), repeat=len(x)):
        a = np.array(a)
        sse = sum(np.sum((x[a == j] - x[a == j].mean(axis=0)) ** 2) for j in set(a.tolist()))
        cost = sse + w * sum(a[i] != a[j] for i, j in must)
        if best is None or cost < best[0] - 1e-12:
            best = (cost, a)
    return best


def _groups(assignment):
    return sorted(sorted(np.flatnonzero(assignment == j).tolist()) for j in np.unique(assignment))


# ---------------------------------------------------------------- kmeans


def test_kmeans_separated_groups():
    x = np.array([[0, 0], [0.1, 0], [10, 0], [10.1, 0]])
    res = kmeans(x, 2)
    assert _groups(res.assignment) == [[0, 1], [2, 3]]


def test_kmeans_one_cluster_per_point_has_zero_objective(rng):
    x = rng.normal(size=(7, 3))
    res = kmeans(x, 7, WscConfig(kmeans_restarts=20))
    assert res.k == 7
    assert res.objective(x) == 0.0


def test_kmeans_matches_brute_force_on_small_instances():
    rng = np.random.default_rng(99)
    for _ in range(10):
        x = rng.normal(size=(int(rng.integers(3, 8)), 2))
        res = kmeans(x, 2, WscConfig(kmeans_restarts=20, seed=int(rng.integers(1 << 30))))
        assert res.objective(x) <= best_two_partition(x) * (1 + 1e-9) + 1e-12


def test_kmeans_errors():
    with pytest.raises(ValueError):
        kmeans(np.zeros((3, 2)), 0)
    with pytest.raises(ValueError):
        kmeans(np.zeros((0, 2)), 1)


def test_kmeans_more_clusters_than_distinct_points():
    x = np.array([[1.0, 1.0]] * 4 + [[2.0, 2.0]] * 2)
    res = kmeans(x, 5)
    assert res.k <= 2  # empty clusters are compacted away
    assert res.objective(x) == 0.0


@given(st.integers(1, 40), st.integers(1, 6), st.integers(0, 2**31 - 1))
@settings(max_examples=40, deadline=None)
def test_kmeans_invariants(n, k, seed):
    x = np.random.default_rng(seed).normal(size=(n, 2))
    # the monotone objective assertion runs inside every Lloyd iteration
    res = kmeans(x, k, WscConfig(seed=seed))
    assert res.assignment.max() < res.k <= k
    assert np.all(np.bincount(res.assignment, minlength=res.k) > 0)
    for j in range(res.k):
        assert np.allclose(res.centroids[j], x[res.members(j)].mean(axis=0))
    assert res == kmeans(x, k, WscConfig(seed=seed))


def test_compact_drops_empty_ids():
    x = np.arange(6, dtype=float)[:, None]
    res = compact(x, np.array([4, 4, 1, 1, 7, 7]))
    assert res.assignment.tolist() == [1, 1, 0, 0, 2, 2]
    assert res.centroids.ravel().tolist() == [2.5, 0.5, 4.5]


# ---------------------------------------------------------------- constraints


def test_derive_constraints_counts():
    cl = Clustering(np.array([0, 0, 0, 0, 1]), np.zeros((2, 1)))
    labels = np.array([0, 0, 1, U, U])
    cs = derive_constraints(cl, labels)
    assert cs.must_links == {(0, 1)}
    assert cs.cannot_links == {(0, 2), (1, 2)}


def test_derive_constraints_single_labeled_member():
    cl = Clustering(np.array([0, 0, 1]), np.zeros((2, 1)))
    assert len(derive_constraints(cl, np.array([1, U, U]))) == 0


def test_derive_constraints_pure_clusters_only_must_links():
    cl = Clustering(np.array([0, 0, 0, 1, 1, 1, 1]), np.zeros((2, 1)))
    labels = np.array([2, 2, 2, 0, 0, 0, U])
    cs = derive_constraints(cl, labels)
    assert not cs.cannot_links
    assert len(cs.must_links) == 3 + 3
    # no link crosses clusters
    assert all(cl.assignment[i] == cl.assignment[j] for i, j in cs.must_links)


def test_constraint_set_rules():
    with pytest.raises(ValueError):
        ConstraintSet({(1, 1)}, set())
    with pytest.raises(ValueError):
        ConstraintSet({(1, 2)}, {(2, 1)})
    assert ConstraintSet({(3, 1)}, set()).must_links == {(1, 3)}


def test_conflicting_clusters():
    cl = Clustering(np.array([0, 0, 1, 1, 2, 2]), np.zeros((3, 1)))
    assert conflicting_clusters(cl, np.array([0, 1, 0, 0, U, U])) == {0}
    assert conflicting_clusters(cl, np.full(6, U)) == set()


# ---------------------------------------------------------------- soft_constrained_kmeans


def test_soft_constrained_without_constraints_equals_kmeans(rng):
    x = rng.normal(size=(40, 3))
    cfg = WscConfig(seed=4)
    assert soft_constrained_kmeans(x, 5, ConstraintSet(), cfg) == kmeans(x, 5, cfg)


def test_zero_penalty_must_links_equal_kmeans(rng):
    x = rng.normal(size=(40, 2))
    cfg = WscConfig(seed=8, must_penalty=0.0)
    cs = ConstraintSet({(0, 5), (3, 17), (20, 21)}, set())
    assert soft_constrained_kmeans(x, 4, cs, cfg) == kmeans(x, 4, cfg)


def test_coincident_cannot_linked_points_are_separated():
    x = np.array([[1.0, 1.0], [1.0, 1.0]])
    res = soft_constrained_kmeans(x, 2, ConstraintSet(set(), {(0, 1)}))
    assert res.assignment[0] != res.assignment[1]


def test_must_link_penalty_example_against_brute_force():
    x = np.array([[0.0, 0.0], [0.1, 0.0], [5.0, 0.0]])
    cs = ConstraintSet({(0, 2)}, set())
    # cheap penalty: splitting off the far point and paying w wins
    cost, oracle = penalized_brute_force(x, cs.must_links, 0.01)
    assert np.isclose(cost, 0.005 + 0.01)
    res = soft_constrained_kmeans(x, 2, cs, WscConfig(must_penalty=0.01))
    assert _groups(res.assignment) == _groups(oracle)
    assert res.assignment[0] != res.assignment[2]
    # expensive penalty: every optimal assignment keeps the pair together
    cost, oracle = penalized_brute_force(x, cs.must_links, 100.0)
    assert oracle[0] == oracle[2] and np.isclose(cost, 12.5)
    res = soft_constrained_kmeans(x, 2, cs, WscConfig(must_penalty=100.0))
    assert res.assignment[0] == res.assignment[2]


def test_infeasible_constraints_report_point():
    x = np.array([[0.0], [1.0], [2.0]])
    cs = ConstraintSet(set(), {(0, 1), (0, 2), (1, 2)})
    with pytest.raises(InfeasibleConstraints) as info:
        soft_constrained_kmeans(x, 2, cs)
    assert info.value.point == 2


@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
@settings(max_examples=40, deadline=None)
def test_cannot_links_never_co_located(seed, k):
    r = np.random.default_rng(seed)
    n = 25
    x = r.normal(size=(n, 2))
    labels = np.full(n, U)
    lab_idx = r.choice(n, size=8, replace=False)
    labels[lab_idx] = r.integers(0, k, size=8)
    cl = Clustering(np.zeros(n, dtype=int), x.mean(axis=0, keepdims=True))
    cs = derive_constraints(cl, labels)
    try:
        res = soft_constrained_kmeans(x, k + 2, cs, WscConfig(seed=seed))
    except InfeasibleConstraints:
        return
    for i, j in cs.cannot_links:
        assert res.assignment[i] != res.assignment[j]


# ---------------------------------------------------------------- refine_conflicting


def _line_clustering(n_clusters, size, rng):
    x = np.concatenate([rng.normal(10 * j, 1.0, size=(size, 2)) for j in range(n_clusters)])
    assign = np.repeat(np.arange(n_clusters), size)
    return x, compact(x, assign)


def test_refine_without_conflicts_is_identity(rng):
    x, cl = _line_clustering(3, 10, rng)
    labels = np.full(30, U)
    labels[[0, 1, 12]] = [0, 0, 1]
    assert refine_conflicting(x, cl, labels) is cl


def test_refine_sub_cluster_count_from_size_ratio(rng):
    x, cl = _line_clustering(10, 30, rng)  # N=300, every cluster n_i=30
    labels = np.full(300, U)
    labels[[0, 29]] = [0, 1]
    res = refine_conflicting(x, cl, labels, WscConfig(K=30))
    # k_i = max(2, round(30 * 30 / 300)) = 3 sub-clusters replace cluster 0
    assert res.k == 9 + 3
    assert not conflicting_clusters(res, labels)
    # the untouched clusters pass through with the same members
    for j in range(1, 10):
        assert any(set(res.members(m).tolist()) == set(cl.members(j).tolist()) for m in range(res.k))


def test_refine_separates_opposite_ends():
    x = np.linspace(0, 1, 20)[:, None]
    labels = np.full(20, U)
    labels[0], labels[19] = 0, 1
    cl = compact(x, np.zeros(20, dtype=int))
    res = refine_conflicting(x, cl, labels, WscConfig(K=2))
    assert res.assignment[0] != res.assignment[19]


def test_refine_raises_k_to_label_count():
    x = np.random.default_rng(1).normal(size=(60, 2))
    labels = np.full(60, U)
    labels[:4] = [0, 1, 2, 3]
    cl = compact(x, np.zeros(60, dtype=int))
    res = refine_conflicting(x, cl, labels, WscConfig(K=1))
    assert res.k >= 4
    assert not conflicting_clusters(res, labels)


# ---------------------------------------------------------------- proportion_split


def _one_labeled_cluster(u, rng):
    """Cluster 0: one labeled sample of class 0 plus u unlabeled; cluster 1: unlabeled far away."""
    x = np.concatenate([rng.normal(0, 1, size=(u + 1, 2)), rng.normal(50, 1, size=(40, 2))])
    labels = np.full(len(x), U)
    labels[0] = 0
    assign = np.array([0] * (u + 1) + [1] * 40)
    return x, compact(x, assign), labels


@pytest.mark.parametrize("u, splits", [(30, True), (19, False), (20, True)])
def test_proportion_split_threshold(u, splits, rng):
    x, cl, labels = _one_labeled_cluster(u, rng)
    res = proportion_split(x, cl, labels, [0.2, 0.8], m_u=100)
    assert (res.k > cl.k) == splits


def test_unlabeled_clusters_never_split(rng):
    x, cl, labels = _one_labeled_cluster(5, rng)
    # cluster 1 holds 40 unlabeled samples, far above m_u * p for any class
    res = proportion_split(x, cl, labels, [0.01, 0.99], m_u=100)
    assert set(res.members(res.assignment[-1]).tolist()) == set(range(len(x) - 40, len(x)))


def test_identical_points_are_saturated():
    x = np.zeros((12, 2))
    labels = np.full(12, U)
    labels[0] = 0
    cl = compact(x, np.zeros(12, dtype=int))
    res, saturated = proportion_split(x, cl, labels, [0.1, 0.9], m_u=11, return_saturated=True)
    assert res.k == 1 and saturated == {0}


def test_proportion_split_rejects_conflicting_input():
    x = np.zeros((3, 1))
    cl = compact(x, np.zeros(3, dtype=int))
    with pytest.raises(ValueError):
        proportion_split(x, cl, np.array([0, 1, U]), [0.5, 0.5], 1)


@given(st.integers(0, 2**31 - 1), st.integers(2, 5))
@settings(max_examples=30, deadline=None)
def test_proportion_split_fixpoint(seed, c):
    r = np.random.default_rng(seed)
    n = int(r.integers(30, 120))
    x = r.normal(size=(n, 2)) * 3
    labels = np.full(n, U)
    lab = r.choice(n, size=max(c, n // 10), replace=False)
    labels[lab] = np.arange(len(lab)) % c
    p = np.bincount(labels[lab], minlength=c) / len(lab)
    m_u = int(np.sum(labels == U))
    cfg = WscConfig(K=4, seed=seed)
    refined = refine_conflicting(x, kmeans(x, 4, cfg), labels, cfg)
    res, saturated = proportion_split(x, refined, labels, p, m_u, cfg, return_saturated=True)
    assert res.k - refined.k <= n
    stats = cluster_stats(res, labels)
    for j in range(res.k):
        if stats.labeled_count[j] > 0 and len(res.members(j)) >= 2 and j not in saturated:
            assert m_u * p[stats.labeled_class[j]] > stats.unlabeled_count[j]


# ---------------------------------------------------------------- pipeline


def test_pipeline_equals_kmeans_when_labels_pure_and_small(rng):
    x = np.concatenate([rng.normal(10 * j, 0.5, size=(8, 2)) for j in range(4)])
    labels = np.full(32, U)
    labels[[0, 8, 16, 24]] = [0, 1, 2, 0]
    cfg = WscConfig(K=4, seed=2)
    km = kmeans(x, 4, cfg)
    # u_i = 7 stays below m_u * p_c for every class, so no split fires
    full = weakly_supervised_clustering(x, labels, [0.4, 0.3, 0.3], 28, cfg)
    assert full.same_partition(km)


def test_pipeline_output_has_no_conflicts(small_dataset):
    v = small_dataset.training_view()
    x = np.vstack([v.labeled_x, v.unlabeled_x])
    labels = np.concatenate([v.labeled_y, np.full(v.m_u, U)])
    p = np.bincount(v.labeled_y, minlength=3) / v.m_t
    for stage in ("soft", "full"):
        res = weakly_supervised_clustering(x, labels, p, v.m_u, WscConfig(K=10), stage)
        assert not conflicting_clusters(res, labels)
    with pytest.raises(ValueError):
        weakly_supervised_clustering(x, labels, p, v.m_u, WscConfig(K=10), "nope")


def test_export_clustering(tmp_path):
    cl = Clustering(np.array([0, 1, 1]), np.zeros((2, 1)))
    export_clustering(cl, np.array([2, U, U]), [10, 11, 12], tmp_path / "c.csv", tmp_path / "c.json")
    assert (tmp_path / "c.csv").read_text() == "sample_id,cluster_id\n10,0\n11,1\n12,1\n"
    side = json.loads((tmp_path / "c.json").read_text())
    assert side["k"] == 2
    assert side["clusters"][0] == {"id": 0, "labeled_class": 2, "labeled_count": 1, "unlabeled_count": 0}
    assert side["clusters"][1]["labeled_class"] is None
