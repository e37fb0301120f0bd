"""Deletion-efficiency benchmarks, predictive metrics and hyperparameter tuning."""

import logging
import math
import time
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.stats import gmean
from sklearn.metrics import roc_auc_score
from sklearn.model_selection import KFold

from dataset import Dataset
from errors import (
    BenchmarkError,
    DegenerateFoldError,
    DimensionMismatchError,
    EmptyDatasetError,
    InvalidParamsError,
    SingleClassError,
)
from models import AdversaryKind, BenchBudget, BenchResult, GridScore, TreeParams
from tree import Forest, predict_proba, train_forest
from unlearn import delete, dry_run_cost

logger = logging.getLogger(__name__)

MetricFn = Callable[[np.ndarray, np.ndarray], float]


def _as_pair(y_true, y_prob) -> Tuple[np.ndarray, np.ndarray]:
    y_true = np.asarray(y_true, dtype=np.int64).ravel()
    y_prob = np.asarray(y_prob, dtype=np.float64).ravel()
    if y_true.size != y_prob.size:
        raise DimensionMismatchError(f"{y_true.size} labels but {y_prob.size} scores")
    if y_true.size == 0:
        raise DimensionMismatchError("metrics need at least one instance")
    return y_true, y_prob


def metric_accuracy(y_true, y_prob) -> float:
    y_true, y_prob = _as_pair(y_true, y_prob)
    return float(np.mean((y_prob > 0.5).astype(np.int64) == y_true))


def metric_auc(y_true, y_prob) -> float:
    """Probability that a random positive outranks a random negative; ties count half."""
    y_true, y_prob = _as_pair(y_true, y_prob)
    n_pos = int((y_true == 1).sum())
    if n_pos == 0 or n_pos == y_true.size:
        raise SingleClassError("AUC needs both classes")
    return float(roc_auc_score(y_true, y_prob))


def metric_ap(y_true, y_prob) -> float:
    """Step-wise average precision. Equal scores keep their input order."""
    y_true, y_prob = _as_pair(y_true, y_prob)
    n_pos = int(y_true.sum())
    if n_pos == 0:
        raise SingleClassError("average precision needs at least one positive")
    ranked = y_true[np.argsort(-y_prob, kind="stable")]
    precision = np.cumsum(ranked) / np.arange(1, ranked.size + 1)
    return float(precision[ranked == 1].sum() / n_pos)


METRICS: Dict[str, MetricFn] = {
    "accuracy": metric_accuracy,
    "auc": metric_auc,
    "ap": metric_ap,
}


def choose_metric(d: Dataset) -> str:
    """AP below 1% positives, AUC up to 20%, accuracy otherwise."""
    fraction = d.positive_fraction
    if fraction < 0.01:
        return "ap"
    if fraction <= 0.20:
        return "auc"
    return "accuracy"


def _metric_fn(metric: Union[str, MetricFn]) -> MetricFn:
    if callable(metric):
        return metric
    try:
        return METRICS[metric]
    except KeyError:
        raise InvalidParamsError(f"unknown metric '{metric}', expected one of {sorted(METRICS)}") from None


def evaluate(f: Forest, test: Dataset, metric: Union[str, MetricFn]) -> float:
    return _metric_fn(metric)(test.labels, predict_proba(f, test.features))


def next_victim(adv: AdversaryKind, f: Forest, rng: np.random.Generator) -> int:
    """Pick the next instance to delete."""
    ids = f.database.ids
    if ids.size == 0:
        raise EmptyDatasetError("no instances left to delete")
    if adv.kind == "random":
        return int(ids[rng.integers(ids.size)])
    if adv.sample_size >= ids.size:
        candidates = ids
    else:
        candidates = np.sort(rng.choice(ids, size=adv.sample_size, replace=False))
    costs = [dry_run_cost(f, int(c)) for c in candidates]
    # argmax keeps the first maximum, i.e. the lowest id.
    return int(candidates[int(np.argmax(costs))])


def run_benchmark(
    d: Dataset,
    params: TreeParams,
    n_trees: int,
    seed: int,
    adversary: AdversaryKind,
    budget: BenchBudget,
    test: Optional[Dataset] = None,
    metric: Optional[str] = None,
    n_jobs: Optional[int] = None,
) -> BenchResult:
    """Count deletions that fit in the time of one naive retrain."""
    if budget.max_deletions is None and budget.max_seconds is None:
        raise BenchmarkError("benchmark budget needs max_deletions or max_seconds")
    if budget.max_deletions == 0 or budget.max_seconds == 0:
        raise BenchmarkError("benchmark budget must be positive")
    if d.n < 2:
        raise EmptyDatasetError("benchmark needs at least two training instances")

    rng = np.random.default_rng(seed)
    baseline_victim = int(d.ids[rng.integers(d.n)])
    started = time.perf_counter()
    train_forest(d.without([baseline_victim]), params, n_trees, seed + 1, n_jobs=n_jobs)
    naive_seconds = time.perf_counter() - started

    started = time.perf_counter()
    forest = train_forest(d.copy(), params, n_trees, seed, n_jobs=n_jobs)
    train_seconds = time.perf_counter() - started
    logger.info("Naive retrain %.3fs, DaRE train %.3fs (n=%d, %s)", naive_seconds, train_seconds, d.n, adversary.label)

    metric_name = None
    before = None
    if test is not None and test.n:
        metric_name = metric or choose_metric(d)
        before = evaluate(forest, test, metric_name)

    result = BenchResult(
        adversary=adversary.label,
        n_train=d.n,
        train_seconds=train_seconds,
        naive_time_per_deletion=naive_seconds,
        deletions_completed=0,
        metric=metric_name,
        metric_before=before,
    )

    loop_started = time.perf_counter()
    cumulative = 0.0
    attempts = 0
    histogram: Dict[int, int] = {}
    while forest.database.n > 0:
        if budget.max_deletions is not None and attempts >= budget.max_deletions:
            break
        if budget.max_seconds is not None and time.perf_counter() - loop_started >= budget.max_seconds:
            break
        victim = next_victim(adversary, forest, rng)
        deletion_started = time.perf_counter()
        report = delete(forest, victim)
        seconds = time.perf_counter() - deletion_started
        attempts += 1
        cumulative += seconds
        if cumulative > naive_seconds:
            break
        result.per_deletion_times.append(seconds)
        result.per_deletion_ids.append(victim)
        result.per_deletion_costs.append(report.retrain_cost)
        depths = report.depth_histogram()
        result.per_deletion_histograms.append(depths)
        for depth, total in depths.items():
            histogram[depth] = histogram.get(depth, 0) + total

    result.deletions_completed = len(result.per_deletion_times)
    result.retrain_depth_histogram = dict(sorted(histogram.items()))
    if metric_name is not None and not forest.empty:
        result.metric_after = evaluate(forest, test, metric_name)
    logger.info("%s adversary: %d deletions within one naive retrain", adversary.label, result.deletions_completed)
    return result


def geometric_mean_speedup(results: Sequence[BenchResult]) -> float:
    speedups = [r.speedup for r in results]
    if not speedups or min(speedups) <= 0:
        return 0.0
    return float(gmean(speedups))


def fold_assignment(n: int, folds: int, seed: int) -> np.ndarray:
    """Balanced fold index per position, shuffled by `seed`."""
    assignment = np.empty(n, dtype=np.int64)
    splitter = KFold(n_splits=folds, shuffle=True, random_state=seed)
    for fold, (_, held_out) in enumerate(splitter.split(np.arange(n))):
        assignment[held_out] = fold
    return assignment


def cv_score(
    d: Dataset,
    params: TreeParams,
    n_trees: int,
    folds: int,
    metric: Union[str, MetricFn],
    seed: int,
    n_jobs: Optional[int] = None,
) -> float:
    """Mean held-out metric over `folds` folds."""
    if folds < 2 or folds > d.n:
        raise DegenerateFoldError(f"cannot split {d.n} instances into {folds} folds")
    score = _metric_fn(metric)
    assignment = fold_assignment(d.n, folds, seed)
    ids = d.ids
    scores = []
    for fold in range(folds):
        train = d.subset(ids[assignment != fold])
        test = d.subset(ids[assignment == fold])
        forest = train_forest(train, params, n_trees, seed, n_jobs=n_jobs)
        try:
            scores.append(score(test.labels, predict_proba(forest, test.features)))
        except SingleClassError as exc:
            raise DegenerateFoldError(f"fold {fold}: {exc}") from exc
    return float(np.mean(scores))


def tune_drmax(
    d: Dataset,
    base_params: TreeParams,
    n_trees: int,
    tolerance: float,
    seed: int,
    folds: int = 5,
    metric: Union[str, MetricFn] = "accuracy",
    score_cache: Optional[Dict[int, float]] = None,
    n_jobs: Optional[int] = None,
) -> int:
    """Deepest random-layer count whose CV score stays within `tolerance` of greedy.

    Depths are tried from 1 upwards and the search stops at the first one
    that falls outside the tolerance.
    """
    if math.isnan(tolerance) or tolerance < 0:
        raise InvalidParamsError(f"tolerance must be non-negative, got {tolerance}")
    if math.isinf(tolerance):
        return base_params.d_max
    cache = score_cache if score_cache is not None else {}

    def score_at(depth: int) -> float:
        if depth not in cache:
            params = base_params.model_copy(update={"d_rmax": depth})
            cache[depth] = cv_score(d, params, n_trees, folds, metric, seed, n_jobs=n_jobs)
            logger.info("d_rmax=%d: cv score %.4f", depth, cache[depth])
        return cache[depth]

    reference = score_at(0)
    selected = 0
    for depth in range(1, base_params.d_max + 1):
        if reference - score_at(depth) > tolerance:
            break
        selected = depth
    return selected


def grid_search(
    d: Dataset,
    n_trees_grid: Iterable[int],
    d_max_grid: Iterable[int],
    k_grid: Iterable[int],
    base_params: TreeParams,
    folds: int,
    metric: Union[str, MetricFn],
    seed: int,
    n_jobs: Optional[int] = None,
) -> Tuple[GridScore, List[GridScore]]:
    """Greedy (d_rmax=0) grid over T, d_max and k; the first best point wins ties."""
    grid: List[GridScore] = []
    best: Optional[GridScore] = None
    for n_trees in n_trees_grid:
        for d_max in d_max_grid:
            for k in k_grid:
                params = base_params.model_copy(update={"d_max": d_max, "k": k, "d_rmax": 0})
                point = GridScore(
                    n_trees=n_trees,
                    d_max=d_max,
                    k=k,
                    score=cv_score(d, params, n_trees, folds, metric, seed, n_jobs=n_jobs),
                )
                grid.append(point)
                if best is None or point.score > best.score:
                    best = point
    if best is None:
        raise InvalidParamsError("tuning grids must not be empty")
    return best, grid
