"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line.

Oracles (finite differences, exhaustive partitions) are computed independently
of the code under test. Criteria 6-8 run on the synthetic benchmark
(600/150/66 per domain, 30 degree rotation plus offset).
"""
import json
import time

import numpy as np
import pytest

from clusterda import nnkit
from clusterda.adapt import AdaptConfig, TrainConfig, adapt, evaluate_model, pretrain_source, train_s_plus_t
from clusterda.cli import run
from clusterda.data import NO_LABEL, SynthConfig, class_proportions, generate_synthetic, pareto_counts, split_target
from clusterda.metrics import purity
from clusterda.nnkit import Model
from clusterda.wsclust import (
    WscConfig,
    conflicting_clusters,
    kmeans,
    proportion_split,
    refine_conflicting,
    weakly_supervised_clustering,
)
from conftest import central_difference, rel_error


@pytest.fixture
def report(capsys):
    def _report(n, ok, detail):
        with capsys.disabled():
            print(f"\ncriterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
        assert ok, detail

    return _report


# ---------------------------------------------------------------- 1. gradients


def test_c01_gradients_match_finite_differences(report):
    rng = np.random.default_rng(2024)
    start = time.perf_counter()
    worst = 0.0
    for _ in range(100):
        d, h, e, c = (int(rng.integers(lo, hi)) for lo, hi in ((2, 6), (3, 9), (2, 6), (2, 5)))
        m = nnkit.init_model(d, c, (h,), e, seed=int(rng.integers(1 << 30)))
        params = [p + 0.1 * rng.normal(size=p.shape) for p in m.params]
        x, y = rng.normal(size=(5, d)), rng.integers(0, c, size=5)
        xa, xp, xn = (rng.normal(size=(5, d)) for _ in range(3))
        margin = float(rng.uniform(0.5, 5.0))

        _, g_ce = nnkit.cross_entropy(Model(tuple(params)), x, y)
        n_ce = central_difference(lambda: nnkit.cross_entropy(Model(tuple(params)), x, y)[0], params)
        _, g_tr = nnkit.triplet_backward(Model(tuple(params)), xa, xp, xn, margin)
        n_tr = central_difference(lambda: nnkit.triplet_backward(Model(tuple(params)), xa, xp, xn, margin)[0], params)
        worst = max(worst, rel_error(g_ce, n_ce), rel_error(g_tr, n_tr))
    elapsed = time.perf_counter() - start
    report(1, worst < 1e-4 and elapsed < 10, f"max rel error {worst:.2e} over 100 configs, {elapsed:.1f}s")


# ---------------------------------------------------------------- 2. triplet examples


def test_c02_triplet_examples_and_inactive_gradients(report):
    rng = np.random.default_rng(7)
    vals = [
        abs(nnkit.triplet_loss([0, 0], [0, 0], [1, 0], 0.5) - 0.0),
        abs(nnkit.triplet_loss([0, 0], [2, 0], [1, 0], 0.5) - 3.5),
    ]
    for _ in range(20):
        fa, fp = rng.normal(size=(2, 4))
        eps = float(rng.uniform(0.1, 3))
        vals.append(abs(nnkit.triplet_loss(fa, fp, fp, eps) - eps))
    examples_ok = max(vals) <= 1e-12

    # anchor equals positive, negative far away: hinge inactive with slack
    m = nnkit.init_model(3, 2, (5,), 4, seed=1)
    xa = rng.normal(size=(6, 3))
    xn = xa + 50.0
    loss, grads = nnkit.triplet_backward(m, xa, xa, xn, 0.5)
    zero_ok = loss == 0.0 and all(np.all(g == 0) for g in grads)
    report(2, examples_ok and zero_ok, f"max example error {max(vals):.1e}, inactive grads exactly zero: {zero_ok}")


# ---------------------------------------------------------------- 3. k-means oracle


def _exhaustive_two_partition(x):
    n = len(x)
    best = np.inf
    for mask in range(1, 2 ** (n - 1)):
        side = np.array([(mask >> i) & 1 for i in range(n)], dtype=bool)
        best = min(best, sum(np.sum((x[s] - x[s].mean(axis=0)) ** 2) for s in (side, ~side)))
    return best


def test_c03_kmeans_matches_exhaustive_optimum(report):
    rng = np.random.default_rng(31)
    start = time.perf_counter()
    hits = 0
    for i in range(50):
        x = rng.normal(size=(int(rng.integers(3, 9)), 2))
        opt = _exhaustive_two_partition(x)
        got = kmeans(x, 2, WscConfig(K=2, kmeans_restarts=20, seed=i)).objective(x)
        hits += abs(got - opt) <= 1e-9
    elapsed = time.perf_counter() - start
    report(3, hits >= 48 and elapsed < 5, f"{hits}/50 instances at the optimum, {elapsed:.2f}s")


# ---------------------------------------------------------------- 4 and 5. refinement and splitting


def _random_runs():
    """100 seeded target-train sets: C in 2..5, 100-500 target samples, alpha 1."""
    for r in range(100):
        rng = np.random.default_rng(r)
        c = int(rng.integers(2, 6))
        want = int(rng.integers(100, 501))
        n_max = int(want / np.sum(np.arange(1, c + 1, dtype=float) ** -2.0))
        while pareto_counts(n_max, c, 1.0).sum() < 100:
            n_max += 1
        cfg = SynthConfig(num_classes=c, dim=int(rng.integers(2, 5)), n_max=n_max, train_frac=1.0, val_frac=0.0,
                          seed=r)
        ds = split_target(generate_synthetic(cfg), float(rng.uniform(0.05, 0.3)), r)
        v = ds.training_view()
        x = np.vstack([v.labeled_x, v.unlabeled_x])
        labels = np.concatenate([v.labeled_y, np.full(v.m_u, NO_LABEL)])
        yield r, c, x, labels, class_proportions(v.labeled_y, c), v.m_u


@pytest.fixture(scope="module")
def pipeline_runs():
    out = []
    for r, c, x, labels, p, m_u in _random_runs():
        assert 100 <= len(x) <= 500
        cfg = WscConfig(seed=r)
        km = kmeans(x, min(cfg.K, len(x)), cfg)
        refined = refine_conflicting(x, km, labels, cfg)
        split, saturated = proportion_split(x, refined, labels, p, m_u, cfg, return_saturated=True)
        out.append(dict(x=x, labels=labels, p=p, m_u=m_u, refined=refined, split=split, saturated=saturated,
                        full=weakly_supervised_clustering(x, labels, p, m_u, cfg)))
    return out


def test_c04_refinement_leaves_no_conflicts(report, pipeline_runs):
    clean = sum(not conflicting_clusters(r["refined"], r["labels"]) for r in pipeline_runs)
    report(4, clean == 100, f"{clean}/100 runs without conflicting clusters after refinement")


def test_c05_proportion_split_fixpoint(report, pipeline_runs):
    good = 0
    for r in pipeline_runs:
        cl, labels = r["full"], r["labels"]
        ok = cl.same_partition(r["split"])
        for j in range(cl.k):
            idx = cl.members(j)
            known = labels[idx][labels[idx] != NO_LABEL]
            if len(known) == 0 or j in r["saturated"]:
                continue
            u = len(idx) - len(known)
            ok &= r["m_u"] * r["p"][int(known[0])] > u
        good += bool(ok)
    report(5, good == 100, f"{good}/100 runs where every non-saturated labeled cluster is below its quota")


# ---------------------------------------------------------------- 6. purity gain


def test_c06_minority_purity_ordering(report):
    res = {s: [] for s in ("km", "soft", "full")}
    for seed in range(20):
        ds = split_target(generate_synthetic(SynthConfig.benchmark(seed)), 0.3, seed)
        v = ds.training_view()
        x = np.vstack([v.labeled_x, v.unlabeled_x])
        labels = np.concatenate([v.labeled_y, np.full(v.m_u, NO_LABEL)])
        truth = np.concatenate([v.labeled_y, ds.unlabeled_truth()])
        p = class_proportions(v.labeled_y, 3)
        minority = int(np.argmin(np.bincount(truth, minlength=3)))
        for stage in res:
            cl = weakly_supervised_clustering(x, labels, p, v.m_u, WscConfig(seed=seed), stage)
            res[stage].append(purity(cl.assignment, truth, 3)[1][minority])
    # a minority class that leads no cluster has undefined purity; count it as 0
    km, soft, full = (float(np.mean(np.nan_to_num(res[s]))) for s in ("km", "soft", "full"))
    ok = full >= soft >= km and full - km >= 0.02
    report(6, ok, f"minority purity km {km:.4f}, soft {soft:.4f}, full {full:.4f} (gain {full - km:+.4f})")


# ---------------------------------------------------------------- 7 and 8. end-to-end trend


@pytest.fixture(scope="module")
def sweep():
    start = time.perf_counter()
    rows = []
    for seed in range(10):
        ds = split_target(generate_synthetic(SynthConfig.benchmark(seed)), 0.02, seed)
        tc = TrainConfig(seed=seed)
        cfg = AdaptConfig(train=tc, wsc=WscConfig(seed=seed))
        s_model, _ = pretrain_source(nnkit.init_model(ds.dim, ds.num_classes, tc.hidden, tc.embed_dim, seed), ds, tc)
        s = evaluate_model(s_model, ds)
        st = evaluate_model(train_s_plus_t(s_model, ds, cfg)[0], ds)
        a = evaluate_model(adapt(s_model, ds, cfg)[0], ds)
        rows.append((s.mdice, st.mdice, a.mdice, st.midice, a.midice))
    return np.array(rows), time.perf_counter() - start


def test_c07_end_to_end_trend(report, sweep):
    r, elapsed = sweep
    a_st = int(np.sum(r[:, 2] > r[:, 1]))
    st_s = int(np.sum(r[:, 1] > r[:, 0]))
    gain = float(np.mean(r[:, 2] - r[:, 1]))
    ok = a_st >= 8 and st_s >= 8 and gain >= 0.02 and elapsed < 300
    report(7, ok, f"adapt>S+T {a_st}/10, S+T>S {st_s}/10, mean gain {gain:+.4f}, {elapsed:.0f}s")


def test_c08_minority_dice_benefit(report, sweep):
    r, _ = sweep
    st_mi, a_mi = float(np.nanmean(r[:, 3])), float(np.nanmean(r[:, 4]))
    report(8, a_mi >= st_mi, f"mean MiDice adapt {a_mi:.4f} vs S+T {st_mi:.4f}")


# ---------------------------------------------------------------- 9. CLI determinism

QUICK = ["--n-max", "150", "--max-rounds", "3", "--epochs-per-round", "1", "--pretrain-multiplier", "2",
         "--hidden", "16", "--embed-dim", "8", "--k", "10", "--seed", "4"]


def test_c09_cli_modes_are_byte_identical(report, tmp_path):
    data = tmp_path / "gen" / "dataset.csv"
    assert run(["--mode", "gen-data", "--out", str(tmp_path / "gen"), *QUICK]) == 0
    assert run(["--mode", "adapt", "--data", str(data), "--out", str(tmp_path / "base"), *QUICK]) == 0
    modes = {
        "gen-data": [],
        "s": ["--data", str(data)],
        "s+t": ["--data", str(data)],
        "adapt": ["--data", str(data)],
        "ablate": ["--data", str(data)],
        "eval": ["--data", str(data), "--checkpoint", str(tmp_path / "base" / "model.ckpt")],
        "report": ["--runs", str(tmp_path / "base")],
    }
    differing = []
    for mode, extra in modes.items():
        dirs = [tmp_path / f"{mode}-{i}" for i in (1, 2)]
        for d in dirs:
            assert run(["--mode", mode, "--out", str(d), *extra, *QUICK]) == 0
        names = [f for f in ("history.json", "metrics.json", "config.json", "dataset.csv") if (dirs[0] / f).exists()]
        assert names, mode
        differing += [f"{mode}/{f}" for f in names if (dirs[0] / f).read_bytes() != (dirs[1] / f).read_bytes()]
    report(9, not differing, f"{len(modes)} modes run twice, differing files: {differing or 'none'}")


# ---------------------------------------------------------------- 10. label hygiene


def test_c10_poisoned_truth_keeps_trajectory(report):
    ds = split_target(generate_synthetic(SynthConfig.benchmark(0)), 0.02, 0)
    hidden = ds.truth != NO_LABEL
    poisoned = ds.replace(truth=np.where(hidden, (ds.truth + 1) % ds.num_classes, NO_LABEL))
    tc = TrainConfig(seed=0)
    cfg = AdaptConfig(train=tc, wsc=WscConfig(seed=0))
    s_model, _ = pretrain_source(nnkit.init_model(ds.dim, ds.num_classes, tc.hidden, tc.embed_dim, 0), ds, tc)
    m1, h1 = adapt(s_model, ds, cfg)
    m2, h2 = adapt(s_model, poisoned, cfg)
    purity_changed = [r.purity for r in h1.records] != [r.purity for r in h2.records]
    ok = h1.trajectory_hash() == h2.trajectory_hash() and m1.equals(m2) and purity_changed
    detail = json.dumps({"rounds": len(h1.records), "hash": h1.trajectory_hash()[:12],
                         "diagnostics_saw_poison": purity_changed})
    report(10, ok, detail)
