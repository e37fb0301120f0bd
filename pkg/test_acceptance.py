"""End-to-end checks at benchmark scale. Run with `pytest -m slow`."""

import time
from statistics import median

import numpy as np
import pytest
from scipy.stats import spearmanr

from bench import evaluate, run_benchmark
from dataset import make_synthetic, train_test_split
from models import AdversaryKind, BenchBudget, TreeParams
from tree import audit, train_forest
from unlearn import delete, dry_run_cost

pytestmark = pytest.mark.slow

RUNS = 5
BENCH_PARAMS = dict(d_max=10, k=5)
NO_LIMIT = BenchBudget(max_seconds=3_600)


@pytest.fixture(scope="module")
def synthetic_100k():
    return make_synthetic(100_000, seed=0)


def _speedups(d, d_rmax, adversary, seeds):
    params = TreeParams(d_rmax=d_rmax, **BENCH_PARAMS)
    return [run_benchmark(d, params, 10, seed, adversary, NO_LIMIT).speedup for seed in seeds]


@pytest.mark.parametrize("d_rmax", [0, 3])
def test_audit_clean_after_500_random_deletions(d_rmax):
    d = make_synthetic(10_000, seed=1)
    f = train_forest(d, TreeParams(d_max=10, k=5, d_rmax=d_rmax), 5, seed=0)
    rng = np.random.default_rng(0)
    for victim in rng.choice(d.ids, size=500, replace=False):
        delete(f, int(victim))
    report = audit(f)
    assert report.clean, report.mismatches[:5]


def test_greedy_speedup_and_random_layers(synthetic_100k):
    seeds = range(RUNS)
    greedy = _speedups(synthetic_100k, 0, AdversaryKind.random(), seeds)
    layered = _speedups(synthetic_100k, 3, AdversaryKind.random(), seeds)
    assert median(greedy) >= 10
    assert median(layered) >= median(greedy)


def test_worst_case_adversary_is_slower(synthetic_100k):
    seeds = range(RUNS)
    random_runs = _speedups(synthetic_100k, 0, AdversaryKind.random(), seeds)
    worst_runs = _speedups(synthetic_100k, 0, AdversaryKind.worst_of(100), seeds)
    assert median(worst_runs) <= median(random_runs)


def test_small_k_matches_large_k_accuracy(synthetic_100k):
    train, test = train_test_split(synthetic_100k, 0.8, seed=0)
    fit, validation = train_test_split(train, 0.8, seed=1)
    scores = {
        k: evaluate(train_forest(fit, TreeParams(d_max=10, k=k), 10, seed=0), validation, "accuracy")
        for k in (5, 10, 25)
    }
    best_k = max(scores, key=scores.get)
    tuned = evaluate(train_forest(train, TreeParams(d_max=10, k=best_k), 10, seed=0), test, "accuracy")
    baseline = evaluate(train_forest(train, TreeParams(d_max=10, k=100), 10, seed=0), test, "accuracy")
    assert abs(tuned - baseline) <= 0.01


def _train_seconds(d, seed):
    started = time.perf_counter()
    train_forest(d, TreeParams(**BENCH_PARAMS), 5, seed)
    return time.perf_counter() - started


def _zero_retrain_seconds(d, count=100):
    f = train_forest(d, TreeParams(**BENCH_PARAMS), 5, seed=0)
    rng = np.random.default_rng(0)
    timings = []
    for victim in rng.permutation(d.ids):
        if len(timings) == count:
            break
        if dry_run_cost(f, int(victim)):
            continue
        started = time.perf_counter()
        delete(f, int(victim))
        timings.append(time.perf_counter() - started)
    assert len(timings) == count
    return median(timings)


def test_training_and_deletion_scale():
    small, double = make_synthetic(10_000, seed=2), make_synthetic(20_000, seed=2)
    ratios = [_train_seconds(double, s) / _train_seconds(small, s) for s in range(RUNS)]
    assert median(ratios) <= 2.5

    ratio = _zero_retrain_seconds(make_synthetic(50_000, seed=3)) / _zero_retrain_seconds(make_synthetic(5_000, seed=3))
    assert ratio <= 3


def test_more_random_layers_do_not_reduce_speedup(synthetic_100k):
    depths, speedups = [], []
    for d_rmax in (0, 3, 6):
        for speedup in _speedups(synthetic_100k, d_rmax, AdversaryKind.random(), range(RUNS)):
            depths.append(d_rmax)
            speedups.append(speedup)
    assert spearmanr(depths, speedups).correlation >= 0
