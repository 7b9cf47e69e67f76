"""Acceptance suite: eight end-to-end criteria, one PASS/FAIL line each.

Run on its own with ``pytest tests/test_acceptance.py -v`` (the summary lines
are printed even when output capture is on) or ``python tests/test_acceptance.py``.
"""

import itertools
import math
import sys
import time

import numpy as np
import pytest

from metafit import nn, selfcheck
from metafit.episodes import make_dataset_pair, sample_episode, synth_pools
from metafit.evaluation import auc, finetune_baseline, knn_feature_baseline, meta_test, pretrain_supervised
from metafit.metaloss import MetaConfig, da_task_loss
from metafit.nn import ArchSpec
from metafit.trainer import TrainCheckpoint, TrainSchedule, train

EPS = 1e-6
ETAS = (1.0, 3.0, 5.0, 7.0)


@pytest.fixture
def verdict(request):
    """Print a single summary line for the criterion, bypassing capture."""
    capman = request.config.pluginmanager.getplugin("capturemanager")

    def emit(number, ok, detail):
        line = f"[acceptance {number}] {'PASS' if ok else 'FAIL'}  {detail}"
        if capman is not None:
            with capman.global_and_fixture_disabled():
                print("\n" + line, flush=True)
        else:
            print(line, flush=True)
        return ok

    return emit


def test_criterion_1_da_loss_oracle(verdict):
    t0 = time.perf_counter()
    worst = 0.0
    clamped = 0
    for i in range(21):
        L = i / 10.0
        for eta in (0, 1, 3, 5, 7):
            # independent oracle, plain float arithmetic
            gate = 1.0 - L
            if gate < EPS:
                gate = EPS
                clamped += 1
            want = (L ** eta) * -math.log(gate)
            got = float(da_task_loss(L, float(eta), EPS).data)
            worst = max(worst, abs(got - want) / max(1.0, abs(want)))
    elapsed = time.perf_counter() - t0
    ok = worst <= 1e-9 and clamped > 0 and elapsed < 1.0
    assert verdict(1, ok, f"max error {worst:.2e} over 105 grid points ({clamped} clamped), {elapsed:.2f}s")


def test_criterion_2_down_weighting(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(2)
    violations = 0
    for eta in ETAS:
        a, b = rng.uniform(0.0, 1.0, 10_000), rng.uniform(0.0, 1.0, 10_000)
        l1, l2 = np.minimum(a, b), np.maximum(a, b)
        keep = (l1 > 0) & (l1 < l2)
        l1, l2 = l1[keep], l2[keep]
        ratio = da_task_loss(l1, eta, EPS).data / da_task_loss(l2, eta, EPS).data
        violations += int(np.sum(~(ratio < l1 / l2)))
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and elapsed < 5.0
    assert verdict(2, ok, f"{violations} violations over 4 x 10^4 pairs, {elapsed:.2f}s")


def test_criterion_3_gradient_fidelity(verdict):
    t0 = time.perf_counter()
    results = selfcheck.run_suite(trials=100, composite_trials=10, seed=0)
    elapsed = time.perf_counter() - t0
    worst = max(r.max_error for r in results)
    failed = [r.name for r in results if not r.passed]
    da_case = nn.parameter_count(ArchSpec.mlp(2, (8,)))
    ok = not failed and worst < 1e-4 and elapsed < 60.0 and da_case <= 200
    detail = f"{len(results)} checks, max rel err {worst:.2e}, second-order case {da_case} params, {elapsed:.1f}s"
    if failed:
        detail += f", failed: {failed}"
    assert verdict(3, ok, detail)


def test_criterion_4_episode_invariants(verdict):
    t0 = time.perf_counter()
    train_set, test_set = make_dataset_pair(*synth_pools(0, 8, 3, 40, 8))
    rng = np.random.default_rng(4)
    violations = 0
    disjoint_classes = not set(train_set.class_ids) & set(test_set.class_ids)
    for i in range(10_000):
        ds = train_set if i % 2 == 0 else test_set
        k, q = (1, 3, 5)[i % 3], 15
        e = sample_episode(ds, k, q, rng)
        ok_episode = (
            not set(e.support_ids) & set(e.query_ids)
            and len(set(e.support_ids)) == 2 * k
            and len(set(e.query_ids)) == 2 * q
            and np.array_equal(np.bincount(e.support_y.astype(int), minlength=2), [k, k])
            and np.array_equal(np.bincount(e.query_y.astype(int), minlength=2), [q, q])
            and set(e.classes) <= set(ds.class_ids)
            and all(sid.split("/")[0] in e.classes for sid in e.support_ids + e.query_ids)
        )
        violations += not ok_episode
    elapsed = time.perf_counter() - t0
    ok = violations == 0 and disjoint_classes and elapsed < 30.0
    assert verdict(4, ok, f"{violations} violations over 10^4 episodes, class pools disjoint={disjoint_classes}, {elapsed:.1f}s")


def pair_count_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    wins = sum(1.0 if p > n else 0.5 if p == n else 0.0 for p, n in itertools.product(pos, neg))
    return wins / (len(pos) * len(neg))


def test_criterion_5_auc_oracle(verdict):
    t0 = time.perf_counter()
    rng = np.random.default_rng(5)
    mismatches, with_ties = 0, 0
    for _ in range(1000):
        n = int(rng.integers(2, 21))
        labels = rng.permutation(np.r_[0, 1, rng.integers(0, 2, n - 2)])
        # coarse grid forces ties in most instances
        scores = rng.integers(0, 6, n) / 5.0 if rng.random() < 0.7 else rng.standard_normal(n)
        with_ties += len(set(scores.tolist())) < n
        mismatches += auc(scores, labels) != pair_count_auc(scores.tolist(), labels.tolist())
    elapsed = time.perf_counter() - t0
    ok = mismatches == 0 and elapsed < 5.0
    assert verdict(5, ok, f"{mismatches} mismatches over 1000 instances ({with_ties} with ties), {elapsed:.2f}s")


BENCH_SPEC = ArchSpec.mlp(8, (32, 32))
BENCH_CFG = MetaConfig(k=5, q=15, tasks_per_batch=4)
BENCH_ITERS = 1000
RUNS = 30


@pytest.fixture(scope="module")
def bench_pools():
    return synth_pools(0, 8, 3, 40, 8)


def test_criterion_6_synthetic_benchmark(verdict, bench_pools):
    t0 = time.perf_counter()
    train_set, test_set = bench_pools
    schedule = TrainSchedule.scaled(BENCH_ITERS)
    daml = train(BENCH_SPEC, train_set, BENCH_CFG, schedule).params
    maml = train(BENCH_SPEC, train_set, BENCH_CFG, schedule.without_da()).params
    means = {}
    for name, params in (("daml", daml), ("maml", maml)):
        for k in (1, 3, 5):
            means[name, k] = meta_test(BENCH_SPEC, params, test_set, BENCH_CFG, RUNS, seed=0, k=k, method=name).mean
    encoder = pretrain_supervised(BENCH_SPEC, train_set, iterations=500, seed=0)
    knn = knn_feature_baseline(BENCH_SPEC, encoder, test_set, k=5, q=15, runs=RUNS, seed=0).mean
    elapsed = time.perf_counter() - t0

    a = means["daml", 5] >= 0.90
    b = means["daml", 5] >= means["maml", 5] - 0.02
    c = means["daml", 5] - knn >= 0.05 and means["maml", 5] - knn >= 0.05
    d = all(means[m, k2] >= means[m, k1] - 0.02 for m in ("daml", "maml") for k1, k2 in ((1, 3), (3, 5)))
    ok = a and b and c and d and elapsed < 600.0
    detail = (
        f"DAML k1/3/5 {means['daml', 1]:.3f}/{means['daml', 3]:.3f}/{means['daml', 5]:.3f}, "
        f"MAML {means['maml', 1]:.3f}/{means['maml', 3]:.3f}/{means['maml', 5]:.3f}, KNN {knn:.3f}; "
        f"(a){a} (b){b} (c){c} (d){d}; {elapsed:.0f}s"
    )
    assert verdict(6, ok, detail)


def test_criterion_7_finetune_overfits(verdict, bench_pools):
    t0 = time.perf_counter()
    train_set, test_set = bench_pools
    init = pretrain_supervised(BENCH_SPEC, train_set, iterations=500, seed=0)
    cfg = MetaConfig(gamma=0.3, q=15)
    k1 = finetune_baseline(BENCH_SPEC, init, test_set, cfg, ft_steps=100, runs=RUNS, seed=0, k=1)
    k5 = finetune_baseline(BENCH_SPEC, init, test_set, cfg, ft_steps=100, runs=RUNS, seed=0, k=5)
    elapsed = time.perf_counter() - t0
    worst_loss = max(k1.extra["support_loss"])
    gap = k5.mean - k1.mean
    ok = worst_loss < 0.01 and gap >= 0.05 and elapsed < 180.0
    detail = f"k=1 max support loss {worst_loss:.2e}, AUC k=1 {k1.mean:.3f} vs k=5 {k5.mean:.3f} (gap {gap:.3f}); {elapsed:.0f}s"
    assert verdict(7, ok, detail)


def test_criterion_8_determinism_and_resume(verdict, bench_pools, tmp_path):
    train_set, _ = bench_pools
    schedule = TrainSchedule.scaled(60, checkpoint_every=30)
    run = lambda name, **kw: train(BENCH_SPEC, train_set, BENCH_CFG, schedule, out_dir=tmp_path / name, **kw)
    run("a")
    run("b")
    same = (tmp_path / "a/checkpoints/last.mfc").read_bytes() == (tmp_path / "b/checkpoints/last.mfc").read_bytes()
    mid = TrainCheckpoint.load(tmp_path / "a/checkpoints/iter_000030.mfc")
    run("resumed", resume=mid)
    resumed = (tmp_path / "resumed/checkpoints/last.mfc").read_bytes() == (tmp_path / "a/checkpoints/last.mfc").read_bytes()
    ok = same and resumed
    assert verdict(8, ok, f"repeat run bit-identical={same}, midpoint resume bit-identical={resumed} (float64, 60 iterations)")


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, "-v"]))
