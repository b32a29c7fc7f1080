"""Weakly-supervised clustering of target embeddings.

Three stages, each usable on its own:

1. :func:`kmeans` with k-means++ seeding and restarts;
2. :func:`refine_conflicting` re-clusters every cluster holding labeled
   samples of more than one class, using :func:`soft_constrained_kmeans`
   (soft must-links, hard cannot-links);
3. :func:`proportion_split` bisects clusters that hold more unlabeled samples
   than the class proportions allow for their labeled class.

``labels`` arguments are integer arrays aligned with ``points`` holding the
class of labeled samples and -1 for unlabeled ones.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from itertools import combinations
from pathlib import Path
from typing import Optional

import numpy as np

from .data import NO_LABEL, half_up


class InfeasibleConstraints(RuntimeError):
    def __init__(self, point: int):
        super().__init__(f"point {point} has no admissible centroid under its cannot-links")
        self.point = point


@dataclass(frozen=True)
class WscConfig:
    K: int = 30
    must_penalty: float = 1.0
    kmeans_max_iter: int = 100
    kmeans_restarts: int = 5
    tol: float = 1e-6
    seed: int = 0


@dataclass(frozen=True, eq=False)
class Clustering:
    assignment: np.ndarray
    centroids: np.ndarray

    @property
    def k(self) -> int:
        return len(self.centroids)

    def members(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == j)

    def objective(self, points) -> float:
        diff = np.asarray(points, dtype=np.float64) - self.centroids[self.assignment]
        return float(np.sum(diff * diff))

    def same_partition(self, other: "Clustering") -> bool:
        """Equal up to a relabeling of cluster ids."""
        if len(self.assignment) != len(other.assignment):
            return False
        pairs = set(zip(self.assignment.tolist(), other.assignment.tolist()))
        return len(pairs) == len(set(self.assignment.tolist())) == len(set(other.assignment.tolist()))

    def __eq__(self, other) -> bool:
        if not isinstance(other, Clustering):
            return NotImplemented
        return np.array_equal(self.assignment, other.assignment) and np.array_equal(
            self.centroids, other.centroids
        )

    __hash__ = None


@dataclass
class ConstraintSet:
    must_links: set = field(default_factory=set)
    cannot_links: set = field(default_factory=set)

    def __post_init__(self):
        self.must_links = {_pair(i, j) for i, j in self.must_links}
        self.cannot_links = {_pair(i, j) for i, j in self.cannot_links}
        if self.must_links & self.cannot_links:
            raise ValueError("a pair cannot be both must-linked and cannot-linked")

    def __len__(self) -> int:
        return len(self.must_links) + len(self.cannot_links)

    def constrained_points(self) -> list[int]:
        pts = set()
        for i, j in self.must_links | self.cannot_links:
            pts.update((i, j))
        return sorted(pts)


def _pair(i, j) -> tuple[int, int]:
    i, j = int(i), int(j)
    if i == j:
        raise ValueError(f"self-pair ({i}, {i}) is not a constraint")
    return (i, j) if i < j else (j, i)


@dataclass(frozen=True)
class ClusterStats:
    labeled_class: list
    labeled_count: np.ndarray
    unlabeled_count: np.ndarray


def _sq_dists(x: np.ndarray, c: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - c[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _as_points(points) -> np.ndarray:
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or len(x) == 0:
        raise ValueError("points must be a non-empty (n, d) array")
    return x


def compact(points: np.ndarray, assignment: np.ndarray) -> Clustering:
    """Drop empty clusters, renumber in ascending old-id order, recompute means."""
    used = np.unique(assignment)
    remap = np.full(assignment.max() + 1, -1)
    remap[used] = np.arange(len(used))
    new = remap[assignment]
    cents = np.zeros((len(used), points.shape[1]))
    np.add.at(cents, new, points)
    cents /= np.bincount(new, minlength=len(used))[:, None]
    return Clustering(new, cents)


def _kmeanspp(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = len(x)
    centers = [x[rng.integers(n)]]
    d2 = np.sum((x - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        if total > 0:
            i = rng.choice(n, p=d2 / total)
        else:
            i = rng.integers(n)
        centers.append(x[i])
        d2 = np.minimum(d2, np.sum((x - x[i]) ** 2, axis=1))
    return np.array(centers)


def _update_centroids(x, assign, cents):
    new = cents.copy()
    k = len(cents)
    sums = np.zeros_like(cents)
    np.add.at(sums, assign, x)
    counts = np.bincount(assign, minlength=k)
    nonempty = counts > 0
    # empty clusters keep their previous centroid until the final compaction
    new[nonempty] = sums[nonempty] / counts[nonempty, None]
    return new


def _nearest(d2: np.ndarray) -> np.ndarray:
    return np.argmin(d2, axis=1)


def _constrained_sweep(d2, constraints, must_penalty, order, cl_adj, ml_adj):
    n, k = d2.shape
    assign = np.full(n, -1)
    violations = 0
    for i in order:
        broken = np.zeros(k)
        for p in ml_adj.get(i, ()):
            if assign[p] >= 0:
                broken += 1.0
                broken[assign[p]] -= 1.0
        cost = d2[i] + must_penalty * broken
        for p in cl_adj.get(i, ()):
            if assign[p] >= 0:
                cost[assign[p]] = np.inf
        if np.all(np.isinf(cost)):
            raise InfeasibleConstraints(int(i))
        assign[i] = int(np.argmin(cost))
    free = assign < 0
    if np.any(free):
        assign[free] = _nearest(d2[free])
    for a, b in constraints.must_links:
        violations += assign[a] != assign[b]
    return assign, violations


def _lloyd(x, k, cfg: WscConfig, rng, constraints: Optional[ConstraintSet], check_monotone: bool):
    """One restart. Returns the compacted clustering and its penalized objective."""
    cents = _kmeanspp(x, k, rng)
    if constraints is not None:
        order = constraints.constrained_points()
        cl_adj, ml_adj = {}, {}
        for a, b in constraints.cannot_links:
            cl_adj.setdefault(a, []).append(b)
            cl_adj.setdefault(b, []).append(a)
        for a, b in constraints.must_links:
            ml_adj.setdefault(a, []).append(b)
            ml_adj.setdefault(b, []).append(a)
    prev_obj = np.inf
    assign = None
    viol = 0
    for _ in range(cfg.kmeans_max_iter):
        d2 = _sq_dists(x, cents)
        if constraints is None:
            assign = _nearest(d2)
        else:
            assign, viol = _constrained_sweep(d2, constraints, cfg.must_penalty, order, cl_adj, ml_adj)
        obj = float(d2[np.arange(len(x)), assign].sum())
        if check_monotone and obj > prev_obj * (1 + 1e-12) + 1e-12:
            raise AssertionError(f"k-means objective increased: {prev_obj} -> {obj}")
        prev_obj = obj
        new = _update_centroids(x, assign, cents)
        shift = float(np.max(np.sum((new - cents) ** 2, axis=1)))
        cents = new
        if shift <= cfg.tol ** 2:
            break
    # final assignment against the final centroids keeps centroid == member mean after compaction
    d2 = _sq_dists(x, cents)
    if constraints is None:
        assign = _nearest(d2)
    else:
        assign, viol = _constrained_sweep(d2, constraints, cfg.must_penalty, order, cl_adj, ml_adj)
    result = compact(x, assign)
    penalized = result.objective(x) + (cfg.must_penalty * viol if constraints is not None else 0.0)
    return result, penalized


def _run_restarts(points, k, cfg, constraints, check_monotone):
    x = _as_points(points)
    if k < 1:
        raise ValueError(f"k must be >= 1, got {k}")
    rng = np.random.default_rng(cfg.seed)
    best, best_obj, last_err = None, np.inf, None
    for _ in range(max(1, cfg.kmeans_restarts)):
        try:
            res, obj = _lloyd(x, k, cfg, rng, constraints, check_monotone)
        except InfeasibleConstraints as exc:
            last_err = exc
            continue
        if obj < best_obj:
            best, best_obj = res, obj
    if best is None:
        raise last_err
    return best


def kmeans(points, k: int, cfg: WscConfig = WscConfig(), check_monotone: bool = True) -> Clustering:
    """Lloyd's algorithm from k-means++ seeds; best of ``cfg.kmeans_restarts`` runs."""
    return _run_restarts(points, k, cfg, None, check_monotone)


def soft_constrained_kmeans(points, k: int, constraints: ConstraintSet, cfg: WscConfig = WscConfig()) -> Clustering:
    """Penalized Lloyd iteration with soft must-links and hard cannot-links.

    In each assignment sweep the constrained points are placed first, in
    ascending index order: a centroid already holding a cannot-link partner is
    excluded, and every must-link partner already placed elsewhere adds
    ``cfg.must_penalty`` to the squared distance. The remaining points go to
    their nearest centroid. Restarts are ranked by squared error plus the
    must-link penalty; a restart that hits an infeasible point is discarded.

    Raises :class:`InfeasibleConstraints` when every restart is infeasible.
    """
    n = len(_as_points(points))
    for i, j in constraints.must_links | constraints.cannot_links:
        if not (0 <= i < n and 0 <= j < n):
            raise ValueError(f"constraint ({i}, {j}) refers to a point outside 0..{n - 1}")
    return _run_restarts(points, k, cfg, constraints, check_monotone=False)


def _link_pairs(members, labels, must: set, cannot: set) -> None:
    lab = [int(i) for i in members if labels[i] != NO_LABEL]
    for a, b in combinations(lab, 2):
        (must if labels[a] == labels[b] else cannot).add(_pair(a, b))


def derive_constraints(clustering: Clustering, labels) -> ConstraintSet:
    """Must-links between same-class labeled co-members, cannot-links between different-class ones."""
    labels = np.asarray(labels)
    must, cannot = set(), set()
    for j in range(clustering.k):
        _link_pairs(clustering.members(j), labels, must, cannot)
    return ConstraintSet(must, cannot)


def conflicting_clusters(clustering: Clustering, labels) -> set[int]:
    labels = np.asarray(labels)
    out = set()
    for j in range(clustering.k):
        lab = labels[clustering.members(j)]
        if len(np.unique(lab[lab != NO_LABEL])) >= 2:
            out.add(j)
    return out


def cluster_stats(clustering: Clustering, labels) -> ClusterStats:
    """Per cluster: labeled class (None when unlabeled or mixed), labeled and unlabeled counts."""
    labels = np.asarray(labels)
    classes, nl, nu = [], [], []
    for j in range(clustering.k):
        lab = labels[clustering.members(j)]
        known = lab[lab != NO_LABEL]
        uniq = np.unique(known)
        classes.append(int(uniq[0]) if len(uniq) == 1 else None)
        nl.append(len(known))
        nu.append(len(lab) - len(known))
    return ClusterStats(classes, np.array(nl), np.array(nu))


def _assemble(points, groups: list[np.ndarray]) -> Clustering:
    assign = np.empty(len(points), dtype=np.int64)
    for j, idx in enumerate(groups):
        assign[idx] = j
    return compact(points, assign)


def refine_conflicting(points, clustering: Clustering, labels, cfg: WscConfig = WscConfig()) -> Clustering:
    """Re-cluster each conflicting cluster on its own members.

    A conflicting cluster of size n_i out of N points gets
    ``k_i = max(2, round(K * n_i / N))`` sub-clusters, raised to its number of
    distinct labels. If the greedy constrained sweep still finds no feasible
    placement, k_i is raised one at a time; at k_i equal to the number of
    labeled members it is always feasible.
    """
    x = _as_points(points)
    labels = np.asarray(labels)
    conflicting = conflicting_clusters(clustering, labels)
    if not conflicting:
        return clustering
    n_total = len(x)
    groups = []
    for j in range(clustering.k):
        idx = clustering.members(j)
        if j not in conflicting:
            groups.append(idx)
            continue
        local_labels = labels[idx]
        n_lab = int(np.sum(local_labels != NO_LABEL))
        distinct = len(np.unique(local_labels[local_labels != NO_LABEL]))
        k_i = max(2, half_up(cfg.K * len(idx) / n_total), distinct)
        k_i = min(k_i, len(idx))
        must, cannot = set(), set()
        _link_pairs(range(len(idx)), local_labels, must, cannot)
        cons = ConstraintSet(must, cannot)
        sub_cfg = WscConfig(cfg.K, cfg.must_penalty, cfg.kmeans_max_iter, cfg.kmeans_restarts, cfg.tol,
                            seed=cfg.seed * 1_000_003 + j)
        while True:
            try:
                sub = soft_constrained_kmeans(x[idx], k_i, cons, sub_cfg)
                break
            except InfeasibleConstraints:
                if k_i >= max(n_lab, distinct):
                    raise
                k_i += 1
        for s in range(sub.k):
            groups.append(idx[sub.members(s)])
    return _assemble(x, groups)


def _is_saturated(x: np.ndarray) -> bool:
    return bool(np.all(x == x[0]))


def proportion_split(points, clustering: Clustering, labels, proportions, m_u: int,
                     cfg: WscConfig = WscConfig(), return_saturated: bool = False):
    """Bisect labeled clusters while ``m_u * p[class] <= unlabeled count``.

    Sub-clusters return to the worklist when they keep a labeled member and
    at least two members. Clusters whose members are all the same point cannot
    be bisected and are marked saturated.
    """
    x = _as_points(points)
    labels = np.asarray(labels)
    p = np.asarray(proportions, dtype=np.float64)
    if conflicting_clusters(clustering, labels):
        raise ValueError("proportion_split needs a clustering without conflicting clusters")

    groups = [clustering.members(j) for j in range(clustering.k)]
    saturated = [False] * len(groups)
    work = [j for j, idx in enumerate(groups) if np.any(labels[idx] != NO_LABEL)]
    splits = 0
    while work:
        j = work.pop(0)
        idx = groups[j]
        lab = labels[idx]
        known = lab[lab != NO_LABEL]
        if len(known) == 0 or len(idx) < 2:
            continue
        u = len(idx) - len(known)
        if not m_u * p[int(known[0])] <= u:
            continue
        if _is_saturated(x[idx]):
            saturated[j] = True
            continue
        sub_cfg = WscConfig(cfg.K, cfg.must_penalty, cfg.kmeans_max_iter, cfg.kmeans_restarts, cfg.tol,
                            seed=cfg.seed * 1_000_003 + 7919 * splits + 1)
        sub = kmeans(x[idx], 2, sub_cfg)
        splits += 1
        if sub.k < 2:
            saturated[j] = True
            continue
        parts = [idx[sub.members(s)] for s in range(sub.k)]
        groups[j] = parts[0]
        for part in parts[1:]:
            groups.append(part)
            saturated.append(False)
        for jj in [j] + list(range(len(groups) - len(parts) + 1, len(groups))):
            sub_idx = groups[jj]
            if len(sub_idx) >= 2 and np.any(labels[sub_idx] != NO_LABEL):
                work.append(jj)

    result = _assemble(x, groups)
    if return_saturated:
        # _assemble keeps group order, so saturation flags carry over by position
        return result, {j for j, s in enumerate(saturated) if s}
    return result


STAGES = ("km", "soft", "full")


def weakly_supervised_clustering(embeddings, labels, proportions, m_u: int,
                                 cfg: WscConfig = WscConfig(), stage: str = "full") -> Clustering:
    """k-means(K), then refinement of conflicting clusters, then proportion splitting.

    ``stage`` stops the pipeline early: ``"km"`` (k-means only), ``"soft"``
    (through refinement) or ``"full"``.
    """
    if stage not in STAGES:
        raise ValueError(f"stage must be one of {STAGES}")
    x = _as_points(embeddings)
    labels = np.asarray(labels)
    result = kmeans(x, min(cfg.K, len(x)), cfg)
    if stage == "km":
        return result
    result = refine_conflicting(x, result, labels, cfg)
    if stage == "soft":
        return result
    return proportion_split(x, result, labels, proportions, m_u, cfg)


def export_clustering(clustering: Clustering, labels, sample_ids, csv_path, json_path) -> None:
    """``sample_id,cluster_id`` CSV plus a JSON sidecar of per-cluster stats."""
    stats = cluster_stats(clustering, labels)
    lines = ["sample_id,cluster_id"]
    lines += [f"{int(s)},{int(c)}" for s, c in zip(sample_ids, clustering.assignment)]
    Path(csv_path).write_text("\n".join(lines) + "\n", encoding="utf-8")
    side = {
        "k": clustering.k,
        "clusters": [
            {"id": j, "labeled_class": stats.labeled_class[j],
             "labeled_count": int(stats.labeled_count[j]),
             "unlabeled_count": int(stats.unlabeled_count[j])}
            for j in range(clustering.k)
        ],
    }
    Path(json_path).write_text(json.dumps(side, indent=1) + "\n", encoding="utf-8")
