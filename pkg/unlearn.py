"""Exact deletion of training instances from a DaRE forest.

A deletion walks each tree along the paths of the deleted instances, fixes
the cached statistics on the way down and retrains only the topmost subtree
whose split would change. Dry runs walk the same way under a rollback
journal and stop at the first retrain.
"""

import logging
import time
from typing import Dict, Iterable, List, Optional, Tuple

import numpy as np

from errors import UnknownInstanceError
from models import DeletionReport, RetrainEvent, TreeDeletionRecord
from splitcrit import NodeCounts, best_candidate, enumerate_valid_thresholds, resample_replacements
from tree import (
    AttributeCandidates,
    DareTree,
    Forest,
    GreedyNode,
    Leaf,
    RandomNode,
    TreeNode,
    _TreeBuilder,
    collect_ids,
    empty_leaf,
    train_forest,
    uniform_threshold,
)

logger = logging.getLogger(__name__)


def _snapshot(node: TreeNode) -> tuple:
    if isinstance(node, Leaf):
        return (node.counts, node.instance_ids)
    if isinstance(node, RandomNode):
        return (node.counts, node.attribute, node.threshold, node.n_left, node.n_right, node.left, node.right)
    candidates = [AttributeCandidates(e.attribute, [t.copy() for t in e.thresholds]) for e in node.candidates]
    return (node.counts, candidates, node.attribute, node.threshold, node.left, node.right)


def _restore(node: TreeNode, saved: tuple) -> None:
    if isinstance(node, Leaf):
        node.counts, node.instance_ids = saved
    elif isinstance(node, RandomNode):
        node.counts, node.attribute, node.threshold, node.n_left, node.n_right, node.left, node.right = saved
    else:
        node.counts, node.candidates, node.attribute, node.threshold, node.left, node.right = saved


class _DeletionWalk:
    """One tree's share of a (batch) deletion."""

    def __init__(self, forest: Forest, tree: DareTree, dry_run: bool = False):
        self.database = forest.database
        self.params = forest.tree_params
        self.tree = tree
        self.builder = _TreeBuilder(forest.database, forest.tree_params, tree.rng)
        self.dry_run = dry_run
        self.X = forest.database.raw_features
        self.y = forest.database.raw_labels
        self.events: List[Tuple[int, RetrainEvent]] = []
        self.resamples: List[Tuple[int, int]] = []
        self.journal: List[Tuple[TreeNode, tuple]] = []

    def rollback(self) -> None:
        for node, saved in reversed(self.journal):
            _restore(node, saved)
        self.journal.clear()

    def _trigger(self, batch: np.ndarray) -> int:
        return int(self.database.raw_ids[batch].min())

    def _gather(self, node: TreeNode, batch: np.ndarray) -> np.ndarray:
        rows = self.database.rows_for(collect_ids(node))
        return rows[~np.isin(rows, batch)]

    def _retrain(self, node: TreeNode, batch: np.ndarray, depth: int, rows: Optional[np.ndarray] = None) -> TreeNode:
        rows = self._gather(node, batch) if rows is None else rows
        kind = "random" if isinstance(node, RandomNode) else "greedy"
        self.events.append((self._trigger(batch), RetrainEvent(depth=depth, n_instances=int(rows.size), node_type=kind)))
        logger.debug("tree %d: retrain %s subtree at depth %d on %d instances", self.tree.index, kind, depth, rows.size)
        if self.dry_run:
            return node
        if rows.size == 0:
            return empty_leaf()
        return self.builder.build(rows, depth)

    def visit(self, node: TreeNode, batch: np.ndarray, depth: int) -> TreeNode:
        """Remove `batch` rows from the subtree at `node`; returns its replacement."""
        if self.dry_run:
            self.journal.append((node, _snapshot(node)))
        removed_pos = int(self.y[batch].sum())
        counts = NodeCounts(node.counts.n - int(batch.size), node.counts.n_pos - removed_pos)
        node.counts = counts

        if isinstance(node, Leaf):
            node.instance_ids = node.instance_ids[~np.isin(node.instance_ids, self.database.raw_ids[batch])]
            return node

        if counts.n == 0:
            return node if self.dry_run else empty_leaf()
        if counts.n_pos == 0 or counts.n_pos == counts.n or counts.n < self.params.min_support:
            return self._retrain(node, batch, depth)

        if isinstance(node, RandomNode):
            return self._visit_random(node, batch, depth)
        return self._visit_greedy(node, batch, depth)

    def _descend(self, node: TreeNode, batch: np.ndarray, depth: int) -> TreeNode:
        go_left = self.X[batch, node.attribute] <= node.threshold
        if go_left.any():
            node.left = self.visit(node.left, batch[go_left], depth + 1)
        if not go_left.all():
            node.right = self.visit(node.right, batch[~go_left], depth + 1)
        return node

    def _visit_random(self, node: RandomNode, batch: np.ndarray, depth: int) -> TreeNode:
        go_left = self.X[batch, node.attribute] <= node.threshold
        node.n_left -= int(go_left.sum())
        node.n_right -= int((~go_left).sum())
        if node.n_left > 0 and node.n_right > 0:
            return self._descend(node, batch, depth)

        rows = self._gather(node, batch)
        values = self.X[rows, node.attribute]
        low, high = float(values.min()), float(values.max())
        if low == high:
            return self._retrain(node, batch, depth, rows)

        self.events.append((self._trigger(batch), RetrainEvent(depth=depth, n_instances=int(rows.size), node_type="random")))
        self.resamples.append((self._trigger(batch), 1))
        if self.dry_run:
            return node
        node.threshold = uniform_threshold(self.tree.rng, low, high)
        go_left = values <= node.threshold
        node.n_left = int(go_left.sum())
        node.n_right = int(rows.size) - node.n_left
        node.left = self.builder.build(rows[go_left], depth + 1)
        node.right = self.builder.build(rows[~go_left], depth + 1)
        logger.debug("tree %d: resampled random threshold at depth %d", self.tree.index, depth)
        return node

    def _decrement(self, node: GreedyNode, batch: np.ndarray) -> None:
        labels = self.y[batch].tolist()
        for entry in node.candidates:
            xs = self.X[batch, entry.attribute].tolist()
            for t in entry.thresholds:
                for x, label in zip(xs, labels):
                    if x <= t.v:
                        t.n_left -= 1
                        t.n_left_pos -= label
                    if x == t.v1:
                        t.n_v1 -= 1
                        t.pos_v1 -= label
                    elif x == t.v2:
                        t.n_v2 -= 1
                        t.pos_v2 -= label

    def _visit_greedy(self, node: GreedyNode, batch: np.ndarray, depth: int) -> TreeNode:
        self._decrement(node, batch)
        rows: Optional[np.ndarray] = None
        resampled = 0
        refreshed: List[AttributeCandidates] = []
        for entry in node.candidates:
            kept = [t for t in entry.thresholds if t.is_valid()]
            if len(kept) == len(entry.thresholds):
                refreshed.append(entry)
                continue
            if rows is None:
                rows = self._gather(node, batch)
            values = self.X[rows, entry.attribute]
            if values.min() == values.max():
                continue
            pool = enumerate_valid_thresholds(values, self.y[rows])
            added = resample_replacements(pool, kept, self.params.k - len(kept), self.tree.rng)
            resampled += len(added)
            entry.thresholds = sorted(kept + added, key=lambda t: t.v)
            if entry.thresholds:
                refreshed.append(entry)

        p_tilde = self.builder.p_tilde
        if len(refreshed) < len(node.candidates) and len(refreshed) < p_tilde:
            rows = self._gather(node, batch) if rows is None else rows
            X = self.X[rows]
            selected = {entry.attribute for entry in refreshed}
            eligible = np.array(
                [a for a in np.flatnonzero(X.min(axis=0) < X.max(axis=0)) if int(a) not in selected],
                dtype=np.int64,
            )
            need = min(p_tilde - len(refreshed), eligible.size)
            if need:
                if eligible.size > need:
                    eligible = np.sort(self.tree.rng.choice(eligible, size=need, replace=False))
                labels = self.y[rows]
                for a in eligible:
                    refreshed.append(self.builder.sample_attribute(int(a), X[:, a], labels))
                    resampled += 1
            refreshed.sort(key=lambda e: e.attribute)
        node.candidates = refreshed
        if resampled:
            self.resamples.append((self._trigger(batch), resampled))

        if not refreshed:
            return self._retrain(node, batch, depth, rows)

        a_slot, t_slot, _ = best_candidate(node.counts, node.scoring_view(), self.params.criterion)
        attribute = refreshed[a_slot].attribute
        threshold = refreshed[a_slot].thresholds[t_slot].v
        if (attribute, threshold) == (node.attribute, node.threshold):
            return self._descend(node, batch, depth)

        rows = self._gather(node, batch) if rows is None else rows
        self.events.append((self._trigger(batch), RetrainEvent(depth=depth, n_instances=int(rows.size), node_type="greedy")))
        logger.debug(
            "tree %d: split at depth %d moved to x[%d] <= %g, retraining %d instances",
            self.tree.index, depth, attribute, threshold, rows.size,
        )
        if self.dry_run:
            return node
        node.attribute, node.threshold = attribute, threshold
        go_left = self.X[rows, attribute] <= threshold
        node.left = self.builder.build(rows[go_left], depth + 1)
        node.right = self.builder.build(rows[~go_left], depth + 1)
        return node


def _require_known(f: Forest, ids: Iterable[int]) -> List[int]:
    ids = sorted({int(i) for i in ids})
    missing = f.database.missing(ids)
    if missing:
        raise UnknownInstanceError(missing)
    return ids


def delete_batch(f: Forest, ids: Iterable[int]) -> List[DeletionReport]:
    """Delete several instances at once; each node is retrained at most once.

    Returns one report per distinct id in ascending order. Nothing is
    modified when any id is unknown.
    """
    ids = _require_known(f, ids)
    if not ids:
        return []
    rows = f.database.rows_for(ids)
    started = time.perf_counter()
    per_tree: List[Tuple[int, _DeletionWalk, float]] = []
    for tree in f.trees:
        tree_started = time.perf_counter()
        walk = _DeletionWalk(f, tree)
        tree.root = walk.visit(tree.root, rows, 0)
        per_tree.append((tree.index, walk, time.perf_counter() - tree_started))
    f.database.remove(ids)
    elapsed = time.perf_counter() - started

    share = 1.0 / len(ids)
    reports = []
    for instance_id in ids:
        records = []
        for index, walk, tree_seconds in per_tree:
            records.append(
                TreeDeletionRecord(
                    tree=index,
                    retrain_events=[event for trigger, event in walk.events if trigger == instance_id],
                    resample_events=sum(count for trigger, count in walk.resamples if trigger == instance_id),
                    wall_time=tree_seconds * share,
                )
            )
        reports.append(DeletionReport(instance_id=instance_id, trees=records, wall_time=elapsed * share))

    if f.empty:
        logger.warning("All training instances have been deleted; the forest can no longer predict")
    return reports


def delete(f: Forest, instance_id: int) -> DeletionReport:
    return delete_batch(f, [instance_id])[0]


def dry_run_cost(f: Forest, instance_id: int) -> int:
    """Instances that delete() would retrain, leaving the forest untouched."""
    _require_known(f, [instance_id])
    rows = f.database.rows_for([instance_id])
    cost = 0
    for tree in f.trees:
        state = tree.rng.bit_generator.state
        walk = _DeletionWalk(f, tree, dry_run=True)
        try:
            walk.visit(tree.root, rows, 0)
        finally:
            walk.rollback()
            tree.rng.bit_generator.state = state
        cost += sum(event.n_instances for _, event in walk.events)
    return cost


def naive_retrain(f: Forest, instance_id: int, seed: Optional[int] = None) -> Forest:
    """Baseline: train a fresh forest on the database without `instance_id`."""
    _require_known(f, [instance_id])
    remaining = f.database.without([instance_id])
    seed = f.params.seed + 1 if seed is None else seed
    return train_forest(remaining, f.tree_params, f.params.n_trees, seed)


def retrain_histogram(reports: Iterable[DeletionReport]) -> Dict[int, int]:
    histogram: Dict[int, int] = {}
    for report in reports:
        for depth, total in report.depth_histogram().items():
            histogram[depth] = histogram.get(depth, 0) + total
    return dict(sorted(histogram.items()))
