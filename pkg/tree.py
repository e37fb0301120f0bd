"""DaRE trees: construction, prediction, auditing and memory accounting.

Top `d_rmax` layers hold random nodes (uniform attribute, uniform threshold);
below them greedy nodes cache statistics for k sampled valid thresholds on
each of p_tilde sampled attributes. Leaves keep the ids of the training
instances routed to them, which is what makes exact deletion possible.
"""

import logging
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Tuple, Union

import numpy as np
from joblib import Parallel, delayed

from config import get_settings
from dataset import Dataset
from errors import DimensionMismatchError, EmptyDatasetError, EmptyForestError
from models import AuditMismatch, AuditReport, ForestParams, MemoryReport, TreeParams
from splitcrit import (
    NodeCounts,
    ThresholdStats,
    best_candidate,
    enumerate_valid_thresholds,
    sample_thresholds,
)

logger = logging.getLogger(__name__)


@dataclass(slots=True)
class Leaf:
    counts: NodeCounts
    instance_ids: np.ndarray

    @property
    def value(self) -> float:
        return self.counts.n_pos / self.counts.n if self.counts.n else 0.0

    @property
    def empty(self) -> bool:
        return self.counts.n == 0


@dataclass(slots=True)
class RandomNode:
    counts: NodeCounts
    attribute: int
    threshold: float
    n_left: int
    n_right: int
    left: "TreeNode"
    right: "TreeNode"


@dataclass(slots=True)
class AttributeCandidates:
    attribute: int
    thresholds: List[ThresholdStats] = field(default_factory=list)


@dataclass(slots=True)
class GreedyNode:
    counts: NodeCounts
    candidates: List[AttributeCandidates]
    attribute: int
    threshold: float
    left: "TreeNode"
    right: "TreeNode"

    @property
    def chosen(self) -> Tuple[int, int]:
        """(attribute slot, threshold slot) of the split in use."""
        for a_slot, entry in enumerate(self.candidates):
            if entry.attribute != self.attribute:
                continue
            for t_slot, stats in enumerate(entry.thresholds):
                if stats.v == self.threshold:
                    return a_slot, t_slot
        raise LookupError(f"split ({self.attribute}, {self.threshold}) is not among the stored candidates")

    def scoring_view(self) -> List[Tuple[int, List[ThresholdStats]]]:
        return [(entry.attribute, entry.thresholds) for entry in self.candidates]


TreeNode = Union[GreedyNode, RandomNode, Leaf]


@dataclass
class DareTree:
    index: int
    root: TreeNode
    rng: np.random.Generator


@dataclass
class Forest:
    params: ForestParams
    trees: List[DareTree]
    database: Dataset

    @property
    def tree_params(self) -> TreeParams:
        return self.params.tree

    @property
    def p(self) -> int:
        return self.database.p

    @property
    def empty(self) -> bool:
        return self.database.n == 0

    # Params pickle as JSON data: saved bytes must not depend on set ordering.
    def __getstate__(self) -> dict:
        return {"params": self.params.model_dump(mode="json"), "trees": self.trees, "database": self.database}

    def __setstate__(self, state: dict) -> None:
        self.params = ForestParams.model_validate(state["params"])
        self.trees = state["trees"]
        self.database = state["database"]


def uniform_threshold(rng: np.random.Generator, low: float, high: float) -> float:
    """Draw v uniformly from [low, high); requires low < high."""
    while True:
        v = float(rng.uniform(low, high))
        if low <= v < high:
            return v


def collect_ids(node: TreeNode) -> np.ndarray:
    """Instance ids held by the leaves below `node`."""
    if isinstance(node, Leaf):
        return node.instance_ids
    parts = []
    stack = [node]
    while stack:
        current = stack.pop()
        if isinstance(current, Leaf):
            parts.append(current.instance_ids)
        else:
            stack.append(current.right)
            stack.append(current.left)
    return np.concatenate(parts) if parts else np.empty(0, dtype=np.int64)


def empty_leaf() -> Leaf:
    return Leaf(NodeCounts(0, 0), np.empty(0, dtype=np.int64))


class _TreeBuilder:
    """Recursive training over database rows."""

    def __init__(self, database: Dataset, params: TreeParams, rng: np.random.Generator):
        self.database = database
        self.params = params
        self.p_tilde = params.resolve_p_tilde(database.p)
        self.rng = rng

    def build(self, rows: np.ndarray, depth: int) -> TreeNode:
        labels = self.database.raw_labels[rows]
        counts = NodeCounts(int(rows.size), int(labels.sum()))
        if self._stops(counts, depth):
            return self._leaf(rows, counts)

        X = self.database.raw_features[rows]
        low, high = X.min(axis=0), X.max(axis=0)
        usable = np.flatnonzero(low < high)
        if usable.size == 0:
            return self._leaf(rows, counts)

        if depth < self.params.d_rmax:
            return self._random_node(rows, X, counts, usable, low, high, depth)
        return self._greedy_node(rows, X, labels, counts, usable, depth)

    def _stops(self, counts: NodeCounts, depth: int) -> bool:
        return (
            counts.n_pos == 0
            or counts.n_pos == counts.n
            or depth >= self.params.d_max
            or counts.n < self.params.min_support
        )

    def _leaf(self, rows: np.ndarray, counts: NodeCounts) -> Leaf:
        return Leaf(counts, np.array(self.database.raw_ids[rows], dtype=np.int64))

    def _random_node(self, rows, X, counts, usable, low, high, depth) -> RandomNode:
        attribute = int(usable[self.rng.integers(usable.size)])
        threshold = uniform_threshold(self.rng, float(low[attribute]), float(high[attribute]))
        go_left = X[:, attribute] <= threshold
        n_left = int(go_left.sum())
        return RandomNode(
            counts=counts,
            attribute=attribute,
            threshold=threshold,
            n_left=n_left,
            n_right=counts.n - n_left,
            left=self.build(rows[go_left], depth + 1),
            right=self.build(rows[~go_left], depth + 1),
        )

    def _greedy_node(self, rows, X, labels, counts, usable, depth) -> GreedyNode:
        if usable.size <= self.p_tilde:
            attributes = usable
        else:
            attributes = np.sort(self.rng.choice(usable, size=self.p_tilde, replace=False))
        candidates = [
            self.sample_attribute(int(a), X[:, a], labels) for a in attributes
        ]
        node = GreedyNode(counts, candidates, -1, 0.0, empty_leaf(), empty_leaf())
        self.split_greedy(node, rows, X, depth)
        return node

    def sample_attribute(self, attribute: int, values: np.ndarray, labels: np.ndarray) -> AttributeCandidates:
        pool = enumerate_valid_thresholds(values, labels)
        return AttributeCandidates(attribute, sample_thresholds(pool, self.params.k, self.rng))

    def split_greedy(self, node: GreedyNode, rows: np.ndarray, X: Optional[np.ndarray], depth: int) -> None:
        """Pick the best stored candidate and (re)build both children."""
        a_slot, t_slot, _ = best_candidate(node.counts, node.scoring_view(), self.params.criterion)
        node.attribute = node.candidates[a_slot].attribute
        node.threshold = node.candidates[a_slot].thresholds[t_slot].v
        if X is None:
            X = self.database.raw_features[rows]
        go_left = X[:, node.attribute] <= node.threshold
        node.left = self.build(rows[go_left], depth + 1)
        node.right = self.build(rows[~go_left], depth + 1)


def train_tree(
    database: Dataset,
    ids: np.ndarray,
    depth: int,
    params: TreeParams,
    rng: np.random.Generator,
) -> TreeNode:
    """Build a (sub)tree over `ids` rooted at `depth`."""
    ids = np.asarray(ids, dtype=np.int64)
    if ids.size == 0:
        raise EmptyDatasetError("cannot train a tree on no instances")
    return _TreeBuilder(database, params, rng).build(database.rows_for(ids), depth)


def _train_one(database: Dataset, params: TreeParams, index: int, seed: np.random.SeedSequence) -> DareTree:
    rng = np.random.default_rng(seed)
    return DareTree(index, train_tree(database, database.ids, 0, params, rng), rng)


def train_forest(
    d: Dataset,
    params: TreeParams,
    n_trees: int,
    seed: int,
    n_jobs: Optional[int] = None,
) -> Forest:
    """Train `n_trees` trees on the full dataset, each from its own spawned stream."""
    if d.n == 0:
        raise EmptyDatasetError("cannot train a forest on an empty dataset")
    forest_params = ForestParams(tree=params, n_trees=n_trees, seed=seed)
    params.resolve_p_tilde(d.p)
    n_jobs = n_jobs if n_jobs is not None else get_settings().n_jobs
    streams = np.random.SeedSequence(seed).spawn(n_trees)
    trees = Parallel(n_jobs=n_jobs)(
        delayed(_train_one)(d, params, index, stream) for index, stream in enumerate(streams)
    )
    logger.debug("Trained %d trees on n=%d p=%d", n_trees, d.n, d.p)
    return Forest(forest_params, list(trees), d)


def _leaf_values(node: TreeNode, X: np.ndarray, rows: np.ndarray, out: np.ndarray) -> None:
    if rows.size == 0:
        return
    if isinstance(node, Leaf):
        out[rows] = node.value
        return
    go_left = X[rows, node.attribute] <= node.threshold
    _leaf_values(node.left, X, rows[go_left], out)
    _leaf_values(node.right, X, rows[~go_left], out)


def predict_proba(f: Forest, X) -> np.ndarray:
    """Mean leaf value over trees for each row of X."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or X.shape[1] != f.p:
        raise DimensionMismatchError(f"expected rows with {f.p} attributes, got shape {X.shape}")
    if f.empty:
        raise EmptyForestError("every training instance has been deleted; the forest cannot predict")
    rows = np.arange(X.shape[0])
    total = np.zeros(X.shape[0], dtype=np.float64)
    values = np.empty(X.shape[0], dtype=np.float64)
    for tree in f.trees:
        _leaf_values(tree.root, X, rows, values)
        total += values
    return total / len(f.trees)


def predict(f: Forest, x) -> float:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1 or x.shape[0] != f.p:
        raise DimensionMismatchError(f"expected {f.p} attribute values, got shape {x.shape}")
    return float(predict_proba(f, x[None, :])[0])


def iter_nodes(node: TreeNode, depth: int = 0, path: str = "root") -> Iterator[Tuple[str, int, TreeNode]]:
    yield path, depth, node
    if not isinstance(node, Leaf):
        yield from iter_nodes(node.left, depth + 1, path + "/L")
        yield from iter_nodes(node.right, depth + 1, path + "/R")


class _Auditor:
    def __init__(self, forest: Forest):
        self.forest = forest
        self.database = forest.database
        self.params = forest.tree_params
        self.mismatches: List[AuditMismatch] = []
        self.nodes_checked = 0
        self.tree_index = 0

    def report(self, path: str, name: str, expected, actual) -> None:
        self.mismatches.append(
            AuditMismatch(tree=self.tree_index, path=path, field=name, expected=str(expected), actual=str(actual))
        )

    def compare(self, path: str, name: str, expected, actual) -> None:
        if expected != actual:
            self.report(path, name, expected, actual)

    def run(self) -> AuditReport:
        alive = np.sort(self.database.ids)
        for tree in self.forest.trees:
            self.tree_index = tree.index
            held = np.sort(self.check(tree.root, "root", 0))
            if held.size != alive.size or not np.array_equal(held, alive):
                self.report("root", "partition", f"{alive.size} database ids", f"{held.size} leaf ids")
        return AuditReport(n_trees=len(self.forest.trees), nodes_checked=self.nodes_checked, mismatches=self.mismatches)

    def check(self, node: TreeNode, path: str, depth: int) -> np.ndarray:
        """Audit `node` and return the database rows held below it."""
        self.nodes_checked += 1
        if depth > self.params.d_max:
            self.report(path, "depth", f"<= {self.params.d_max}", depth)
        if isinstance(node, Leaf):
            return self.check_leaf(node, path)

        left_rows = self.check(node.left, path + "/L", depth + 1)
        right_rows = self.check(node.right, path + "/R", depth + 1)
        rows = np.concatenate([left_rows, right_rows])
        labels = self.database.raw_labels[rows]
        self.compare(path, "counts.n", int(rows.size), node.counts.n)
        self.compare(path, "counts.n_pos", int(labels.sum()), node.counts.n_pos)

        X = self.database.raw_features
        if np.any(X[left_rows, node.attribute] > node.threshold) or np.any(X[right_rows, node.attribute] <= node.threshold):
            self.report(path, "routing", f"x[{node.attribute}] <= {node.threshold} goes left", "misrouted instances")

        expected_type = "random" if depth < self.params.d_rmax else "greedy"
        actual_type = "random" if isinstance(node, RandomNode) else "greedy"
        self.compare(path, "node_type", expected_type, actual_type)

        if isinstance(node, RandomNode):
            self.check_random(node, path, rows, left_rows.size)
        else:
            self.check_greedy(node, path, rows, labels)
        return rows

    def check_leaf(self, node: Leaf, path: str) -> np.ndarray:
        rows = self.database.locate(node.instance_ids)
        unknown = node.instance_ids[rows < 0]
        if unknown.size:
            self.report(path, "instance_ids", "ids present in database", f"unknown ids {unknown.tolist()[:10]}")
        rows = rows[rows >= 0]
        self.compare(path, "counts.n", int(node.instance_ids.size), node.counts.n)
        self.compare(path, "counts.n_pos", int(self.database.raw_labels[rows].sum()), node.counts.n_pos)
        return rows

    def check_random(self, node: RandomNode, path: str, rows: np.ndarray, n_left: int) -> None:
        self.compare(path, "n_left", n_left, node.n_left)
        self.compare(path, "n_right", rows.size - n_left, node.n_right)
        if rows.size:
            values = self.database.raw_features[rows, node.attribute]
            low, high = float(values.min()), float(values.max())
            if not low <= node.threshold < high:
                self.report(path, "threshold", f"in [{low}, {high})", node.threshold)

    def check_greedy(self, node: GreedyNode, path: str, rows: np.ndarray, labels: np.ndarray) -> None:
        fresh: List[Tuple[int, List[ThresholdStats]]] = []
        for a_slot, entry in enumerate(node.candidates):
            values = self.database.raw_features[rows, entry.attribute]
            recomputed = []
            for t_slot, stored in enumerate(entry.thresholds):
                label = f"candidates[{a_slot}][{t_slot}]"
                actual = _recount(stored, values, labels)
                recomputed.append(actual)
                for name in ("n_left", "n_left_pos", "n_v1", "n_v2", "pos_v1", "pos_v2"):
                    self.compare(path, f"{label}.{name}", getattr(actual, name), getattr(stored, name))
                between = np.any((values > stored.v1) & (values < stored.v2))
                if not actual.is_valid() or between:
                    self.report(path, f"{label}.valid", "valid adjacent threshold", f"v={stored.v}")
            fresh.append((entry.attribute, recomputed))

        try:
            a_slot, t_slot = node.chosen
        except LookupError:
            self.report(path, "chosen", "split among stored candidates", (node.attribute, node.threshold))
            return
        if rows.size == 0:
            return
        best_a, best_t, _ = best_candidate(NodeCounts(int(rows.size), int(labels.sum())), fresh, self.params.criterion)
        if (best_a, best_t) != (a_slot, t_slot):
            winner = (fresh[best_a][0], fresh[best_a][1][best_t].v)
            self.report(path, "chosen", winner, (node.attribute, node.threshold))


def _recount(stored: ThresholdStats, values: np.ndarray, labels: np.ndarray) -> ThresholdStats:
    at_v1 = values == stored.v1
    at_v2 = values == stored.v2
    left = values <= stored.v
    return ThresholdStats(
        v=stored.v,
        v1=stored.v1,
        v2=stored.v2,
        n_left=int(left.sum()),
        n_left_pos=int(labels[left].sum()),
        n_v1=int(at_v1.sum()),
        n_v2=int(at_v2.sum()),
        pos_v1=int(labels[at_v1].sum()),
        pos_v2=int(labels[at_v2].sum()),
    )


def audit(f: Forest) -> AuditReport:
    """Recompute every cached statistic from the leaf instance lists."""
    return _Auditor(f).run()


# Byte sizes of a compact C-style layout.
NODE_HEADER_BYTES = 24  # type tag + two child pointers
SPLIT_BYTES = 12  # int32 attribute + float64 threshold
COUNTS_BYTES = 16  # n, n_pos
BRANCH_COUNTS_BYTES = 16  # n_left, n_right
ATTRIBUTE_ENTRY_BYTES = 8  # attribute index + threshold count
THRESHOLD_STATS_BYTES = 72  # nine 8-byte fields
INSTANCE_ID_BYTES = 8


def memory_report(f: Forest) -> MemoryReport:
    structure = decision = leaf = 0
    n_greedy = n_random = n_leaves = 0
    for tree in f.trees:
        for _, _, node in iter_nodes(tree.root):
            structure += NODE_HEADER_BYTES
            if isinstance(node, Leaf):
                n_leaves += 1
                leaf += COUNTS_BYTES + INSTANCE_ID_BYTES * int(node.instance_ids.size)
                continue
            structure += SPLIT_BYTES
            decision += COUNTS_BYTES
            if isinstance(node, RandomNode):
                n_random += 1
                decision += BRANCH_COUNTS_BYTES
            else:
                n_greedy += 1
                for entry in node.candidates:
                    decision += ATTRIBUTE_ENTRY_BYTES + THRESHOLD_STATS_BYTES * len(entry.thresholds)
    db = f.database
    data = int(db.features.nbytes + db.labels.nbytes + db.ids.nbytes)
    return MemoryReport(
        structure_bytes=structure,
        decision_stats_bytes=decision,
        leaf_stats_bytes=leaf,
        total_bytes=structure + decision + leaf,
        data_bytes=data,
        n_nodes=n_greedy + n_random + n_leaves,
        n_greedy=n_greedy,
        n_random=n_random,
        n_leaves=n_leaves,
    )


def _stats_key(stats: ThresholdStats) -> tuple:
    return (stats.v, stats.v1, stats.v2, stats.n_left, stats.n_left_pos, stats.n_v1, stats.n_v2, stats.pos_v1, stats.pos_v2)


def tree_signature(node: TreeNode) -> tuple:
    """Canonical nested tuple; equal signatures mean structurally identical trees."""
    if isinstance(node, Leaf):
        return ("leaf", node.counts.n, node.counts.n_pos, tuple(sorted(node.instance_ids.tolist())))
    children = (tree_signature(node.left), tree_signature(node.right))
    if isinstance(node, RandomNode):
        return ("random", node.counts.n, node.counts.n_pos, node.attribute, node.threshold, node.n_left, node.n_right) + children
    candidates = tuple(
        (entry.attribute, tuple(sorted(_stats_key(t) for t in entry.thresholds)))
        for entry in sorted(node.candidates, key=lambda e: e.attribute)
    )
    return ("greedy", node.counts.n, node.counts.n_pos, node.attribute, node.threshold, candidates) + children


def forest_signature(f: Forest) -> tuple:
    return tuple(tree_signature(tree.root) for tree in f.trees)
