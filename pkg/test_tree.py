import numpy as np
import pytest

from conftest import exact_params, random_tiny_dataset
from dataset import Dataset, make_synthetic
from errors import DimensionMismatchError, EmptyDatasetError
from models import Criterion, ForestParams, TreeParams
from splitcrit import NodeCounts, gini_score
from tree import (
    DareTree,
    Forest,
    GreedyNode,
    Leaf,
    RandomNode,
    audit,
    forest_signature,
    iter_nodes,
    memory_report,
    predict,
    predict_proba,
    train_forest,
    train_tree,
)


def _shape(node):
    if isinstance(node, Leaf):
        return ("leaf", sorted(node.instance_ids.tolist()))
    return ("split", node.attribute, node.threshold, _shape(node.left), _shape(node.right))


def _cart_oracle(X, y, ids, depth, d_max, min_support=2):
    """Exhaustive greedy build with (score, attribute, threshold) tie-breaking."""
    n, n_pos = len(ids), int(y.sum())
    if n_pos in (0, n) or depth >= d_max or n < min_support:
        return ("leaf", sorted(ids.tolist()))
    best = None
    for a in range(X.shape[1]):
        distinct = sorted(set(X[:, a].tolist()))
        for v1, v2 in zip(distinct, distinct[1:]):
            pair = (X[:, a] == v1) | (X[:, a] == v2)
            if len(set(y[pair].tolist())) < 2:
                continue
            v = (v1 + v2) / 2
            left = X[:, a] <= v
            key = (gini_score(n, n_pos, int(left.sum()), int(y[left].sum())), a, v)
            best = key if best is None or key < best else best
    if best is None:
        return ("leaf", sorted(ids.tolist()))
    _, a, v = best
    left = X[:, a] <= v
    return (
        "split",
        a,
        v,
        _cart_oracle(X[left], y[left], ids[left], depth + 1, d_max, min_support),
        _cart_oracle(X[~left], y[~left], ids[~left], depth + 1, d_max, min_support),
    )


def _route(node, x):
    while not isinstance(node, Leaf):
        node = node.left if x[node.attribute] <= node.threshold else node.right
    return node.value


def test_pure_data_gives_single_leaf():
    d = Dataset(np.arange(6.0).reshape(-1, 2), np.ones(3, dtype=int))
    node = train_tree(d, d.ids, 0, TreeParams(), np.random.default_rng(0))
    assert isinstance(node, Leaf)
    assert node.value == 1.0
    assert sorted(node.instance_ids.tolist()) == [0, 1, 2]


def test_empty_inputs_are_rejected():
    d = Dataset(np.arange(4.0).reshape(-1, 1), np.array([0, 1, 0, 1]))
    with pytest.raises(EmptyDatasetError):
        train_tree(d, [], 0, TreeParams(), np.random.default_rng(0))
    with pytest.raises(EmptyDatasetError):
        train_forest(Dataset(np.empty((0, 1)), np.empty(0, dtype=int)), TreeParams(), 1, 0)


def test_all_random_layers(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=4, d_rmax=4), 2, seed=1)
    internal = [node for tree in f.trees for _, _, node in iter_nodes(tree.root) if not isinstance(node, Leaf)]
    assert internal
    assert all(isinstance(node, RandomNode) for node in internal)


def test_random_layers_sit_above_greedy_layers(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=5, d_rmax=2), 2, seed=1)
    for tree in f.trees:
        for _, depth, node in iter_nodes(tree.root):
            if isinstance(node, Leaf):
                continue
            assert isinstance(node, RandomNode if depth < 2 else GreedyNode)
            if isinstance(node, RandomNode):
                assert node.n_left >= 1 and node.n_right >= 1
                assert node.n_left + node.n_right == node.counts.n


def test_deterministic_mode_matches_cart_oracle(tiny_dataset):
    d = tiny_dataset
    f = train_forest(d, exact_params(p=2), 1, seed=0)
    expected = _cart_oracle(d.features, d.labels, d.ids, 0, 3)
    assert _shape(f.trees[0].root) == expected


def test_deterministic_mode_matches_cart_oracle_on_random_data():
    rng = np.random.default_rng(17)
    for _ in range(20):
        d = random_tiny_dataset(rng, n=int(rng.integers(8, 60)), p=int(rng.integers(1, 4)))
        f = train_forest(d, exact_params(p=d.p), 1, seed=int(rng.integers(1000)))
        assert _shape(f.trees[0].root) == _cart_oracle(d.features, d.labels, d.ids, 0, 3)


def test_same_seed_same_forest(synthetic_small):
    params = TreeParams(d_max=5, d_rmax=1, k=3)
    a = train_forest(synthetic_small, params, 3, seed=42)
    b = train_forest(synthetic_small, params, 3, seed=42)
    assert forest_signature(a) == forest_signature(b)


def test_single_tree_forest_predicts_like_its_tree(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=4, k=3), 1, seed=0)
    for x in synthetic_small.features[:25]:
        assert predict(f, x) == _route(f.trees[0].root, x)


def test_predict_averages_tree_values():
    d = Dataset(np.zeros((5, 2)), np.array([1, 0, 0, 0, 0]))
    ids = np.arange(5)
    trees = [
        DareTree(0, Leaf(NodeCounts(5, 1), ids), np.random.default_rng(0)),
        DareTree(1, Leaf(NodeCounts(5, 3), ids), np.random.default_rng(1)),
    ]
    f = Forest(ForestParams(tree=TreeParams(d_max=1), n_trees=2), trees, d)
    assert predict(f, [3.0, -1.0]) == pytest.approx(0.4)


def test_predict_follows_hand_traced_routes():
    d = Dataset(np.zeros((5, 2)), np.array([0, 0, 1, 1, 0]))
    root = RandomNode(
        counts=NodeCounts(5, 2),
        attribute=0,
        threshold=0.5,
        n_left=2,
        n_right=3,
        left=Leaf(NodeCounts(2, 0), np.array([0, 1])),
        right=RandomNode(
            counts=NodeCounts(3, 2),
            attribute=1,
            threshold=2.0,
            n_left=1,
            n_right=2,
            left=Leaf(NodeCounts(1, 1), np.array([2])),
            right=Leaf(NodeCounts(2, 1), np.array([3, 4])),
        ),
    )
    f = Forest(ForestParams(tree=TreeParams(d_max=2, d_rmax=2), n_trees=1), [DareTree(0, root, np.random.default_rng(0))], d)
    X = np.array([[0.5, 9.0], [1.0, 2.0], [1.0, 3.0], [0.2, 0.0]])
    assert predict_proba(f, X).tolist() == [0.0, 1.0, 0.5, 0.0]


def test_predict_rejects_wrong_dimension(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=2), 1, seed=0)
    with pytest.raises(DimensionMismatchError):
        predict(f, np.zeros(3))
    with pytest.raises(DimensionMismatchError):
        predict_proba(f, np.zeros((2, 3)))


@pytest.mark.parametrize("d_rmax", [0, 2])
@pytest.mark.parametrize("criterion", [Criterion.GINI, Criterion.ENTROPY])
def test_fresh_forest_audits_clean(synthetic_small, d_rmax, criterion):
    f = train_forest(synthetic_small, TreeParams(d_max=6, d_rmax=d_rmax, k=4, criterion=criterion), 3, seed=5)
    report = audit(f)
    assert report.clean, report.mismatches[:3]
    assert report.nodes_checked > 3


def test_audit_flags_one_corrupted_leaf_count(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=5, k=3), 2, seed=0)
    path, _, leaf = next(item for item in iter_nodes(f.trees[1].root) if isinstance(item[2], Leaf) and item[2].counts.n > 0)
    leaf.counts = NodeCounts(leaf.counts.n, leaf.counts.n_pos + 1)
    report = audit(f)
    assert len(report.mismatches) == 1
    mismatch = report.mismatches[0]
    assert (mismatch.tree, mismatch.path, mismatch.field) == (1, path, "counts.n_pos")


def test_audit_flags_one_corrupted_threshold_stat(synthetic_small):
    f = train_forest(synthetic_small, TreeParams(d_max=5, k=3), 1, seed=0)
    root = f.trees[0].root
    assert isinstance(root, GreedyNode)
    root.candidates[0].thresholds[0].n_left += 1
    report = audit(f)
    assert [(m.path, m.field) for m in report.mismatches] == [("root", "candidates[0][0].n_left")]


def test_memory_report_single_leaf():
    d = Dataset(np.arange(20.0).reshape(-1, 2), np.ones(10, dtype=int))
    report = memory_report(train_forest(d, TreeParams(), 1, seed=0))
    assert report.decision_stats_bytes == 0
    assert report.leaf_stats_bytes >= 8 * 10
    assert report.n_leaves == 1
    assert report.structure_bytes + report.decision_stats_bytes + report.leaf_stats_bytes == report.total_bytes


def test_decision_stats_dominate_on_greedy_forests():
    d = make_synthetic(2_000, seed=0)
    report = memory_report(train_forest(d, TreeParams(d_max=10, k=10), 10, seed=0))
    assert report.structure_bytes + report.decision_stats_bytes + report.leaf_stats_bytes == report.total_bytes
    assert report.decision_stats_bytes > report.leaf_stats_bytes
    assert report.decision_stats_bytes > report.structure_bytes
    assert report.n_nodes == report.n_greedy + report.n_random + report.n_leaves
