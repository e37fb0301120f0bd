"""Split criteria, valid-threshold enumeration and threshold sampling.

Every score is computed from integer counts, so identical counts always give
bit-identical doubles whatever order the data arrived in.
"""

from collections.abc import Sequence as SequenceABC
from dataclasses import dataclass, fields, replace
from typing import List, Sequence, Tuple, Union

import numpy as np

from errors import EmptyCandidatesError, InvalidCountsError
from models import Criterion


@dataclass(slots=True)
class NodeCounts:
    n: int
    n_pos: int


@dataclass(slots=True)
class ThresholdStats:
    """Cached counts for one candidate threshold v between adjacent values v1 < v2."""

    v: float
    v1: float
    v2: float
    n_left: int
    n_left_pos: int
    n_v1: int
    n_v2: int
    pos_v1: int
    pos_v2: int

    def is_valid(self) -> bool:
        total = self.n_v1 + self.n_v2
        positives = self.pos_v1 + self.pos_v2
        return self.n_v1 >= 1 and self.n_v2 >= 1 and 0 < positives < total

    def copy(self) -> "ThresholdStats":
        return replace(self)


_STAT_FIELDS = tuple(f.name for f in fields(ThresholdStats))


class ThresholdCandidates(SequenceABC):
    """Array-backed, read-only list of ThresholdStats sorted by v."""

    def __init__(self, **columns: np.ndarray):
        for name in _STAT_FIELDS:
            setattr(self, name, columns[name])

    def __len__(self) -> int:
        return int(self.v.size)

    def __getitem__(self, index: int) -> ThresholdStats:
        if isinstance(index, slice):
            return self.take(np.arange(len(self))[index])
        return ThresholdStats(
            v=float(self.v[index]),
            v1=float(self.v1[index]),
            v2=float(self.v2[index]),
            n_left=int(self.n_left[index]),
            n_left_pos=int(self.n_left_pos[index]),
            n_v1=int(self.n_v1[index]),
            n_v2=int(self.n_v2[index]),
            pos_v1=int(self.pos_v1[index]),
            pos_v2=int(self.pos_v2[index]),
        )

    def take(self, indices) -> List[ThresholdStats]:
        return [self[int(i)] for i in indices]


ThresholdPool = Union[ThresholdCandidates, Sequence[ThresholdStats]]


def _take(candidates: ThresholdPool, indices) -> List[ThresholdStats]:
    if isinstance(candidates, ThresholdCandidates):
        return candidates.take(indices)
    return [candidates[int(i)] for i in indices]


def _values(candidates: ThresholdPool) -> np.ndarray:
    if isinstance(candidates, ThresholdCandidates):
        return candidates.v
    return np.array([t.v for t in candidates], dtype=np.float64)


def _branch_impurity(criterion: Criterion, n_b: np.ndarray, pos_b: np.ndarray, n: np.ndarray) -> np.ndarray:
    with np.errstate(divide="ignore", invalid="ignore"):
        q = np.where(n_b > 0, pos_b / n_b, 0.0)
        if criterion == Criterion.GINI:
            impurity = 1.0 - q * q - (1.0 - q) * (1.0 - q)
        else:
            r = 1.0 - q
            impurity = -(np.where(q > 0, q * np.log2(q), 0.0) + np.where(r > 0, r * np.log2(r), 0.0))
        return np.where(n_b > 0, (n_b / n) * impurity, 0.0)


def score_counts(criterion: Criterion, n, n_pos, n_left, n_left_pos) -> np.ndarray:
    """Weighted impurity of a binary split; lower is better. Broadcasts over arrays."""
    n = np.asarray(n, dtype=np.float64)
    n_pos = np.asarray(n_pos, dtype=np.float64)
    n_left = np.asarray(n_left, dtype=np.float64)
    n_left_pos = np.asarray(n_left_pos, dtype=np.float64)
    left = _branch_impurity(criterion, n_left, n_left_pos, n)
    right = _branch_impurity(criterion, n - n_left, n_pos - n_left_pos, n)
    return left + right


def _check_counts(n: int, n_pos: int, n_left: int, n_left_pos: int) -> None:
    consistent = (
        n >= 1
        and 0 <= n_pos <= n
        and 0 <= n_left <= n
        and 0 <= n_left_pos <= n_left
        and n_left_pos <= n_pos
        and n_pos - n_left_pos <= n - n_left
    )
    if not consistent:
        raise InvalidCountsError(f"inconsistent counts n={n} n_pos={n_pos} n_left={n_left} n_left_pos={n_left_pos}")


def gini_score(n: int, n_pos: int, n_left: int, n_left_pos: int) -> float:
    _check_counts(n, n_pos, n_left, n_left_pos)
    return float(score_counts(Criterion.GINI, [n], [n_pos], [n_left], [n_left_pos])[0])


def entropy_score(n: int, n_pos: int, n_left: int, n_left_pos: int) -> float:
    _check_counts(n, n_pos, n_left, n_left_pos)
    return float(score_counts(Criterion.ENTROPY, [n], [n_pos], [n_left], [n_left_pos])[0])


def enumerate_valid_thresholds(values, labels) -> ThresholdCandidates:
    """All midpoints between adjacent distinct values whose instances carry both labels."""
    values = np.asarray(values, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    distinct, inverse = np.unique(values, return_inverse=True)
    counts = np.bincount(inverse, minlength=distinct.size).astype(np.int64)
    positives = np.bincount(inverse, weights=labels, minlength=distinct.size).astype(np.int64)

    pair_n = counts[:-1] + counts[1:]
    pair_pos = positives[:-1] + positives[1:]
    index = np.flatnonzero((pair_pos > 0) & (pair_pos < pair_n))

    v1 = distinct[index]
    v2 = distinct[index + 1]
    v = (v1 + v2) / 2.0
    # Adjacent doubles: the midpoint can round onto v2, which would route v2 left.
    v = np.where(v < v2, v, v1)
    return ThresholdCandidates(
        v=v,
        v1=v1,
        v2=v2,
        n_left=np.cumsum(counts)[index],
        n_left_pos=np.cumsum(positives)[index],
        n_v1=counts[index],
        n_v2=counts[index + 1],
        pos_v1=positives[index],
        pos_v2=positives[index + 1],
    )


def sample_thresholds(candidates: ThresholdPool, k: int, rng: np.random.Generator) -> List[ThresholdStats]:
    """Uniform size-k subset without replacement, or everything when the pool is small."""
    m = len(candidates)
    if m <= k:
        return _take(candidates, range(m))
    chosen = np.sort(rng.choice(m, size=k, replace=False))
    return _take(candidates, chosen)


def resample_replacements(
    candidates: ThresholdPool,
    kept: Sequence[ThresholdStats],
    need: int,
    rng: np.random.Generator,
) -> List[ThresholdStats]:
    """Draw `need` thresholds uniformly from the valid pool minus those already kept."""
    if need < 1 or len(candidates) == 0:
        return []
    kept_values = np.array([t.v for t in kept], dtype=np.float64)
    pool = np.flatnonzero(~np.isin(_values(candidates), kept_values))
    if pool.size <= need:
        return _take(candidates, pool)
    chosen = np.sort(rng.choice(pool, size=need, replace=False))
    return _take(candidates, chosen)


def select_best(scored: Sequence[Tuple[int, float, float]]) -> Tuple[int, float]:
    """Argmin of (attribute, threshold, score) by score, then attribute, then threshold."""
    if not scored:
        raise EmptyCandidatesError("select_best needs at least one candidate")
    attribute, threshold, _ = min(scored, key=lambda c: (c[2], c[0], c[1]))
    return attribute, threshold


def best_candidate(
    counts: NodeCounts,
    candidates: Sequence[Tuple[int, Sequence[ThresholdStats]]],
    criterion: Criterion,
) -> Tuple[int, int, float]:
    """Positions (attribute slot, threshold slot) and score of the select_best winner."""
    slots, attrs, thresholds, n_left, n_left_pos = [], [], [], [], []
    for a_slot, (attribute, stats) in enumerate(candidates):
        for t_slot, t in enumerate(stats):
            slots.append((a_slot, t_slot))
            attrs.append(attribute)
            thresholds.append(t.v)
            n_left.append(t.n_left)
            n_left_pos.append(t.n_left_pos)
    if not slots:
        raise EmptyCandidatesError("node has no stored candidates")
    scores = score_counts(criterion, counts.n, counts.n_pos, n_left, n_left_pos)
    winner = int(np.lexsort((np.asarray(thresholds), np.asarray(attrs), scores))[0])
    a_slot, t_slot = slots[winner]
    return a_slot, t_slot, float(scores[winner])
