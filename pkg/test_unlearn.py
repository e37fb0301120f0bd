import copy
from collections import Counter
from itertools import combinations

import numpy as np
import pytest
from scipy.stats import chi2_contingency, chisquare

from conftest import exact_params, random_tiny_dataset
from dataset import Dataset
from errors import EmptyForestError, UnknownInstanceError
from models import Criterion, ForestParams, TreeParams
from splitcrit import enumerate_valid_thresholds, sample_thresholds
from tree import (
    DareTree,
    Forest,
    GreedyNode,
    Leaf,
    RandomNode,
    audit,
    collect_ids,
    forest_signature,
    predict,
    train_forest,
    train_tree,
)
from unlearn import delete, delete_batch, dry_run_cost, naive_retrain, retrain_histogram


def _scratch_signature(f: Forest) -> tuple:
    fresh = train_forest(f.database.compact(), f.tree_params, f.params.n_trees, f.params.seed)
    return forest_signature(fresh)


def test_bookkeeping_only_deletion(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=4, k=5), 3, seed=0)
    victim = next(int(i) for i in synthetic_small.ids[:100] if dry_run_cost(f, int(i)) == 0)
    report = delete(f, victim)
    assert report.retrain_cost == 0
    assert report.instance_id == victim
    assert len(report.trees) == 3
    assert f.database.n == 599
    assert all(victim not in collect_ids(tree.root).tolist() for tree in f.trees)
    assert audit(f).clean


def test_invalidated_thresholds_are_replaced_and_split_moves():
    d = Dataset(np.array([[1.0], [2.0], [3.0], [4.0]]), np.array([1, 0, 1, 0]))
    f = train_forest(d, exact_params(p=1, d_max=1), 1, seed=0)
    root = f.trees[0].root
    assert [t.v for t in root.candidates[0].thresholds] == [1.5, 2.5, 3.5]
    # 1.5 and 3.5 score the same up to rounding.
    initial = root.threshold
    assert initial in (1.5, 3.5)

    report = delete(f, 1)
    root = f.trees[0].root
    assert isinstance(root, GreedyNode)
    assert [t.v for t in root.candidates[0].thresholds] == [3.5]
    assert root.threshold == 3.5
    assert report.retrain_cost == (3 if initial == 1.5 else 0)
    assert audit(f).clean


def test_sequential_deletions_match_scratch_training():
    rng = np.random.default_rng(123)
    for _ in range(50):
        p = int(rng.integers(1, 4))
        d = random_tiny_dataset(rng, n=int(rng.integers(20, 41)), p=p)
        criterion = Criterion.GINI if rng.random() < 0.5 else Criterion.ENTROPY
        params = exact_params(p=p, d_max=int(rng.integers(1, 5)), criterion=criterion)
        f = train_forest(d, params, 2, seed=int(rng.integers(1_000)))
        for victim in rng.choice(d.ids, size=10, replace=False):
            delete(f, int(victim))
            assert forest_signature(f) == _scratch_signature(f)


def test_batch_of_one_matches_single_delete(synthetic_small):
    params = TreeParams(d_max=5, d_rmax=1, k=3)
    a = train_forest(synthetic_small, params, 3, seed=8)
    b = train_forest(synthetic_small, params, 3, seed=8)
    (batch_report,) = delete_batch(a, [17])
    single_report = delete(b, 17)
    assert forest_signature(a) == forest_signature(b)
    assert batch_report.retrain_cost == single_report.retrain_cost


def test_batch_deletion_matches_scratch_training():
    rng = np.random.default_rng(5)
    d = random_tiny_dataset(rng, n=40, p=3)
    f = train_forest(d, exact_params(p=3, d_max=4), 2, seed=1)
    reports = delete_batch(f, [30, 4, 12, 4, 25, 7])
    assert [r.instance_id for r in reports] == [4, 7, 12, 25, 30]
    assert f.database.n == 35
    assert forest_signature(f) == _scratch_signature(f)


def test_batch_with_random_layers_audits_clean(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=6, d_rmax=2, k=3), 3, seed=2)
    victims = np.random.default_rng(0).choice(synthetic_small.ids, size=40, replace=False)
    reports = delete_batch(f, victims.tolist())
    assert len(reports) == 40
    assert audit(f).clean


def test_unknown_id_changes_nothing(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=4, k=3), 2, seed=0)
    before = forest_signature(f)
    with pytest.raises(UnknownInstanceError) as info:
        delete(f, 10_000)
    assert info.value.exit_code == 4
    with pytest.raises(UnknownInstanceError) as info:
        delete_batch(f, [3, 10_000, 10_001])
    assert info.value.ids == [10_000, 10_001]
    assert forest_signature(f) == before
    assert f.database.n == 600


def test_second_delete_of_same_id_is_unknown(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=4, k=3), 1, seed=0)
    delete(f, 5)
    with pytest.raises(UnknownInstanceError):
        delete(f, 5)


@pytest.mark.parametrize("d_rmax", [0, 2])
def test_dry_run_matches_actual_cost_and_leaves_forest_untouched(synthetic_small, d_rmax):
    f = train_forest(synthetic_small, TreeParams(d_max=6, d_rmax=d_rmax, k=3), 3, seed=4)
    before = forest_signature(f)
    states = [tree.rng.bit_generator.state for tree in f.trees]
    for victim in synthetic_small.ids[:20]:
        victim = int(victim)
        cost = dry_run_cost(f, victim)
        assert dry_run_cost(f, victim) == cost
        clone = copy.deepcopy(f)
        assert delete(clone, victim).retrain_cost == cost
    assert forest_signature(f) == before
    assert [tree.rng.bit_generator.state for tree in f.trees] == states
    assert f.database.n == 600
    with pytest.raises(UnknownInstanceError):
        dry_run_cost(f, 10_000)


@pytest.mark.parametrize("d_rmax", [0, 3])
def test_audit_clean_after_many_deletions(synthetic_small, d_rmax):
    f = train_forest(synthetic_small, TreeParams(d_max=6, d_rmax=d_rmax, k=3), 3, seed=9)
    victims = np.random.default_rng(1).choice(synthetic_small.ids, size=100, replace=False)
    reports = [delete(f, int(v)) for v in victims]
    report = audit(f)
    assert report.clean, report.mismatches[:3]
    assert f.database.n == 500
    histogram = retrain_histogram(reports)
    assert sum(histogram.values()) == sum(r.retrain_cost for r in reports)
    assert list(histogram) == sorted(histogram)


def test_emptied_random_branch_resamples_threshold():
    d = Dataset(np.array([[0.0], [10.0], [11.0], [12.0]]), np.array([1, 0, 1, 0]))
    params = TreeParams(d_max=2, d_rmax=1, k=3, p_tilde=1)
    f = next(
        forest
        for forest in (train_forest(d.copy(), params, 1, seed=s) for s in range(100))
        if forest.trees[0].root.n_left == 1
    )
    report = delete(f, 0)
    root = f.trees[0].root
    assert isinstance(root, RandomNode)
    assert 10.0 <= root.threshold < 12.0
    assert report.resample_events >= 1
    assert report.retrain_cost == 3
    assert audit(f).clean


def test_random_node_on_now_constant_attribute_becomes_leaf():
    d = Dataset(np.array([[0.0], [5.0], [5.0]]), np.array([1, 0, 1]))
    f = train_forest(d, TreeParams(d_max=2, d_rmax=1, p_tilde=1), 1, seed=0)
    assert isinstance(f.trees[0].root, RandomNode)
    delete(f, 0)
    root = f.trees[0].root
    assert isinstance(root, Leaf)
    assert sorted(root.instance_ids.tolist()) == [1, 2]
    assert audit(f).clean


def test_deleting_everything_empties_the_forest():
    d = Dataset(np.arange(12.0).reshape(-1, 2), np.array([0, 1, 0, 1, 1, 0]))
    f = train_forest(d, TreeParams(d_max=3, k=2), 2, seed=0)
    delete_batch(f, d.ids.tolist())
    assert f.empty
    assert all(isinstance(tree.root, Leaf) and tree.root.empty for tree in f.trees)
    with pytest.raises(EmptyForestError):
        predict(f, [0.0, 0.0])


def test_naive_retrain_leaves_original_untouched(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=4, k=3), 2, seed=0)
    before = forest_signature(f)
    fresh = naive_retrain(f, 42)
    assert fresh.database.n == 599
    assert not fresh.database.contains(42)
    assert fresh.params.seed == 1
    assert forest_signature(f) == before
    with pytest.raises(UnknownInstanceError):
        naive_retrain(f, 10_000)


def test_replacement_thresholds_keep_sampling_uniform():
    base = Dataset(np.arange(1.0, 8.0).reshape(-1, 1), np.array([1, 0, 1, 0, 1, 0, 1]))
    params = TreeParams(d_max=1, k=2, p_tilde=1)
    tally = Counter()
    for trial in range(10_000):
        db = base.copy()
        rng = np.random.default_rng(trial)
        root = train_tree(db, db.ids, 0, params, rng)
        f = Forest(ForestParams(tree=params, n_trees=1, seed=0), [DareTree(0, root, rng)], db)
        delete(f, 6)
        root = f.trees[0].root
        tally[tuple(t.v for t in root.candidates[0].thresholds)] += 1

    subsets = list(combinations([1.5, 2.5, 3.5, 4.5, 5.5], 2))
    assert set(tally) == set(subsets)
    assert chisquare([tally[s] for s in subsets]).pvalue > 0.001

    # Sampling the surviving data from scratch gives the same distribution.
    pool = enumerate_valid_thresholds(np.arange(1.0, 7.0), np.array([1, 0, 1, 0, 1, 0]))
    fresh = Counter()
    for trial in range(10_000):
        drawn = sample_thresholds(pool, 2, np.random.default_rng(10_000 + trial))
        fresh[tuple(sorted(t.v for t in drawn))] += 1
    assert set(fresh) == set(subsets)
    table = [[tally[s] for s in subsets], [fresh[s] for s in subsets]]
    assert chi2_contingency(table).pvalue > 0.001
