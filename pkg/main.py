"""Command-line entry point: generate, train, predict, delete, benchmark, tune, inspect.

JSON summaries go to stdout, logs to stderr. Exit codes: 0 success,
1 domain failure, 2 usage, 3 I/O, 4 unknown instance id.
"""

import argparse
import csv
import json
import logging
import math
import sys
import time
from pathlib import Path
from statistics import median
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from bench import (
    METRICS,
    choose_metric,
    evaluate,
    geometric_mean_speedup,
    grid_search,
    next_victim,
    run_benchmark,
    tune_drmax,
)
from config import configure_logging, get_settings
from dataset import (
    Dataset,
    encode_frame,
    encode_labels,
    load_csv,
    make_synthetic,
    read_frame,
    save_csv,
    train_test_split,
)
from errors import DareError, InvalidParamsError
from model_file import load_model, save_model
from models import AdversaryKind, BenchBudget, Criterion, TrainSummary, TreeParams, TuneResult
from tree import audit, memory_report, predict_proba, train_forest
from unlearn import delete, delete_batch

logger = logging.getLogger("dare")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_IO = 3


def _at_least(minimum: int):
    def parse(text: str) -> int:
        try:
            value = int(text)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid integer {text!r}") from None
        if value < minimum:
            raise argparse.ArgumentTypeError(f"must be >= {minimum}, got {value}")
        return value

    return parse


def _int_list(minimum: int):
    item = _at_least(minimum)

    def parse(text: str) -> List[int]:
        values = [item(part) for part in text.split(",") if part.strip()]
        if not values:
            raise argparse.ArgumentTypeError("grid must not be empty")
        return values

    return parse


def _tolerances(text: str) -> List[float]:
    values = []
    for part in text.split(","):
        part = part.strip()
        if not part:
            continue
        try:
            value = float(part)
        except ValueError:
            raise argparse.ArgumentTypeError(f"invalid tolerance {part!r}") from None
        if math.isnan(value) or value < 0:
            raise argparse.ArgumentTypeError(f"tolerance must be >= 0, got {part}")
        values.append(value)
    if not values:
        raise argparse.ArgumentTypeError("tolerance list must not be empty")
    return values


def _adversary(text: str) -> AdversaryKind:
    if text == "random":
        return AdversaryKind.random()
    if text.startswith("worst") and text[5:].isdigit() and int(text[5:]) >= 1:
        return AdversaryKind.worst_of(int(text[5:]))
    raise argparse.ArgumentTypeError(f"expected 'random' or 'worst<N>' (e.g. worst1000), got {text!r}")


def _model_path(text: str) -> Path:
    path = Path(text)
    return path if path.is_absolute() else Path(get_settings().model_dir) / path


def _print_json(payload) -> None:
    print(json.dumps(payload, indent=2, sort_keys=True))


def _add_data_flags(parser: argparse.ArgumentParser) -> None:
    source = parser.add_mutually_exclusive_group(required=True)
    source.add_argument("--data", help="CSV file with a header row")
    source.add_argument("--synthetic", type=_at_least(1), metavar="N", help="Generate N synthetic instances")
    parser.add_argument("--label-column", default="label")
    parser.add_argument("--categorical", default="", help="Comma-separated categorical columns to one-hot encode")
    parser.add_argument("--positive-label", default=None, help="Label value mapped to 1")


def _add_tree_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--trees", type=_at_least(1), default=10)
    parser.add_argument("--max-depth", type=_at_least(0), default=10)
    parser.add_argument("--drmax", type=_at_least(0), default=0)
    parser.add_argument("--k", type=_at_least(1), default=5)
    parser.add_argument("--p-tilde", type=_at_least(1), default=None, help="Attributes per greedy split (default floor(sqrt(p)))")
    parser.add_argument("--criterion", choices=[c.value for c in Criterion], default=Criterion.GINI.value)
    parser.add_argument("--min-support", type=_at_least(2), default=2)


def _seed(args) -> int:
    return args.seed if args.seed is not None else get_settings().default_seed


def _load_data(args) -> Dataset:
    if args.synthetic is not None:
        return make_synthetic(args.synthetic, _seed(args))
    categorical = [c.strip() for c in args.categorical.split(",") if c.strip()]
    return load_csv(args.data, args.label_column, categorical, args.positive_label)


def _tree_params(args, parser: argparse.ArgumentParser, **overrides) -> TreeParams:
    fields = dict(
        d_max=args.max_depth,
        d_rmax=args.drmax,
        k=args.k,
        p_tilde=args.p_tilde,
        criterion=Criterion(args.criterion),
        min_support=args.min_support,
    )
    fields.update(overrides)
    try:
        return TreeParams(**fields)
    except ValidationError as exc:
        parser.error(f"invalid tree parameters: {exc.errors()[0]['msg']} (check --drmax/--max-depth)")


def _check_p_tilde(params: TreeParams, dataset: Dataset, parser: argparse.ArgumentParser) -> None:
    if params.p_tilde is None:
        return
    try:
        params.resolve_p_tilde(dataset.p)
    except InvalidParamsError:
        parser.error(f"--p-tilde {params.p_tilde} must lie in [1, {dataset.p}] for this data")


def cmd_generate(args, parser) -> int:
    dataset = make_synthetic(args.n, _seed(args))
    save_csv(dataset, args.out)
    _print_json({"out": str(args.out), "n": dataset.n, "p": dataset.p, "positive_fraction": dataset.positive_fraction})
    return EXIT_OK


def cmd_train(args, parser) -> int:
    params = _tree_params(args, parser)
    dataset = _load_data(args)
    _check_p_tilde(params, dataset, parser)
    started = time.perf_counter()
    forest = train_forest(dataset, params, args.trees, _seed(args), n_jobs=args.n_jobs)
    seconds = time.perf_counter() - started
    save_model(forest, _model_path(args.out))
    summary = TrainSummary(n=dataset.n, p=dataset.p, training_seconds=seconds, params=forest.params, memory=memory_report(forest))
    _print_json(summary.model_dump(mode="json"))
    return EXIT_OK


def cmd_predict(args, parser) -> int:
    forest = load_model(_model_path(args.model))
    frame = read_frame(args.data)
    labels = None
    if args.label_column in frame.columns:
        labels = frame.pop(args.label_column)
    names = forest.database.feature_names
    categorical = [c for c in frame.columns if c not in names and any(n.startswith(f"{c}=") for n in names)]
    features, _ = encode_frame(frame, categorical, names)
    probabilities = predict_proba(forest, features)

    out = pd.DataFrame({"probability": probabilities, "prediction": (probabilities > 0.5).astype(int)})
    if args.out:
        out.to_csv(args.out, index=False)
    summary = {"n": int(probabilities.size)}
    if labels is not None:
        test = Dataset(features, encode_labels(labels, forest.database.label_classes), feature_names=names)
        metric = args.metric or choose_metric(forest.database)
        summary[metric] = evaluate(forest, test, metric)
    if not args.out:
        summary["probabilities"] = probabilities.tolist()
    _print_json(summary)
    return EXIT_OK


def _read_ids(path: str) -> List[int]:
    text = Path(path).read_text(encoding="utf-8")
    tokens = text.replace(",", " ").split()
    try:
        return [int(token) for token in tokens]
    except ValueError as exc:
        raise DareError(f"ids file {path} must hold integer ids: {exc}") from exc


def _write_deletion_csv(path: Path, reports) -> None:
    with open(path, "w", newline="", encoding="utf-8") as handle:
        writer = csv.writer(handle)
        writer.writerow(["instance_id", "tree", "wall_time", "retrain_cost", "resample_events", "depth_histogram"])
        for report in reports:
            for record in report.trees:
                depths = {}
                for event in record.retrain_events:
                    depths[event.depth] = depths.get(event.depth, 0) + event.n_instances
                writer.writerow(
                    [
                        report.instance_id,
                        record.tree,
                        f"{record.wall_time:.9f}",
                        record.retrain_cost,
                        record.resample_events,
                        json.dumps(dict(sorted(depths.items()))),
                    ]
                )


def cmd_delete(args, parser) -> int:
    model_path = _model_path(args.model)
    forest = load_model(model_path)
    before = forest.database.n
    if args.ids:
        reports = delete_batch(forest, _read_ids(args.ids))
    else:
        rng = np.random.default_rng(_seed(args))
        reports = []
        for _ in range(args.count):
            if forest.empty:
                logger.warning("Database exhausted after %d deletions", len(reports))
                break
            reports.append(delete(forest, next_victim(args.adversary, forest, rng)))

    out_path = _model_path(args.out) if args.out else model_path
    save_model(forest, out_path)
    report_path = Path(args.report) if args.report else out_path.with_suffix(".deletions.csv")
    _write_deletion_csv(report_path, reports)
    _print_json(
        {
            "deleted": len(reports),
            "n_before": before,
            "n_after": forest.database.n,
            "retrain_cost": sum(r.retrain_cost for r in reports),
            "model": str(out_path),
            "report": str(report_path),
        }
    )
    return EXIT_OK


def _mean_or_none(values) -> Optional[float]:
    values = [v for v in values if v is not None]
    return float(np.mean(values)) if values else None


def _benchmark_point(dataset: Dataset, params: TreeParams, args, seed: int, budget: BenchBudget, out_dir: Path) -> dict:
    out_dir.mkdir(parents=True, exist_ok=True)
    results = []
    for repeat in range(args.repeats):
        train, test = train_test_split(dataset, 1.0 - args.test_fraction, seed + repeat)
        result = run_benchmark(
            train, params, args.trees, seed + repeat, args.adversary, budget,
            test=test, metric=args.metric, n_jobs=args.n_jobs,
        )
        results.append(result)
        with open(out_dir / f"repeat_{repeat}.csv", "w", newline="", encoding="utf-8") as handle:
            writer = csv.writer(handle)
            writer.writerow(["index", "instance_id", "wall_time", "retrain_cost", "depth_histogram"])
            for index, (instance_id, seconds, cost, depths) in enumerate(
                zip(result.per_deletion_ids, result.per_deletion_times, result.per_deletion_costs, result.per_deletion_histograms)
            ):
                writer.writerow([index, instance_id, f"{seconds:.9f}", cost, json.dumps(depths)])

    summary = {
        "adversary": args.adversary.label,
        "params": params.model_dump(mode="json"),
        "n_trees": args.trees,
        "seed": seed,
        "repeats": [
            result.model_dump(
                mode="json",
                exclude={"per_deletion_times", "per_deletion_ids", "per_deletion_costs", "per_deletion_histograms"},
            )
            for result in results
        ],
        "speedup_geometric_mean": geometric_mean_speedup(results),
        "speedup_median": float(median(r.speedup for r in results)),
    }
    with open(out_dir / "summary.json", "w", encoding="utf-8") as handle:
        json.dump(summary, handle, indent=2, sort_keys=True)
    return summary


def cmd_benchmark(args, parser) -> int:
    if args.budget is None and args.max_seconds is None:
        parser.error("benchmark needs --budget or --max-seconds")
    k_grid = args.k_grid or [args.k]
    drmax_grid = args.drmax_grid or [args.drmax]
    points = [_tree_params(args, parser, k=k, d_rmax=d_rmax) for k in k_grid for d_rmax in drmax_grid]
    budget = BenchBudget(max_deletions=args.budget, max_seconds=args.max_seconds)
    dataset = _load_data(args)
    for params in points:
        _check_p_tilde(params, dataset, parser)
    out_dir = Path(args.out)
    seed = _seed(args)

    if args.k_grid is None and args.drmax_grid is None:
        _print_json(_benchmark_point(dataset, points[0], args, seed, budget, out_dir))
        return EXIT_OK

    sweep = []
    for params in points:
        logger.info("Benchmarking k=%d d_rmax=%d", params.k, params.d_rmax)
        summary = _benchmark_point(dataset, params, args, seed, budget, out_dir / f"k{params.k}_drmax{params.d_rmax}")
        sweep.append(
            {
                "k": params.k,
                "d_rmax": params.d_rmax,
                "speedup_geometric_mean": summary["speedup_geometric_mean"],
                "speedup_median": summary["speedup_median"],
                "metric_after": _mean_or_none([r["metric_after"] for r in summary["repeats"]]),
            }
        )
    payload = {"adversary": args.adversary.label, "n_trees": args.trees, "seed": seed, "points": sweep}
    with open(out_dir / "sweep.json", "w", encoding="utf-8") as handle:
        json.dump(payload, handle, indent=2, sort_keys=True)
    _print_json(payload)
    return EXIT_OK


def cmd_tune(args, parser) -> int:
    base = _tree_params(args, parser)
    dataset = _load_data(args)
    _check_p_tilde(base, dataset, parser)
    seed = _seed(args)
    metric = args.metric or choose_metric(dataset)
    best, grid = grid_search(
        dataset, args.trees_grid, args.max_depth_grid, args.k_grid, base, args.folds, metric, seed, n_jobs=args.n_jobs
    )
    tuned = base.model_copy(update={"d_max": best.d_max, "k": best.k, "d_rmax": 0})
    cache = {0: best.score}
    selected = {}
    for tolerance in args.tolerance:
        selected[repr(tolerance)] = tune_drmax(
            dataset, tuned, best.n_trees, tolerance, seed, args.folds, metric, score_cache=cache, n_jobs=args.n_jobs
        )
    result = TuneResult(
        metric=metric, n_trees=best.n_trees, d_max=best.d_max, k=best.k, greedy_score=best.score, grid=grid, d_rmax=selected
    )
    payload = result.model_dump(mode="json")
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True), encoding="utf-8")
    _print_json(payload)
    return EXIT_OK


def cmd_inspect(args, parser) -> int:
    forest = load_model(_model_path(args.model))
    report = audit(forest)
    _print_json({"audit": report.model_dump(mode="json"), "memory": memory_report(forest).model_dump(mode="json")})
    if not report.clean:
        for mismatch in report.mismatches:
            logger.error("tree %d %s %s: expected %s, found %s", mismatch.tree, mismatch.path, mismatch.field, mismatch.expected, mismatch.actual)
        return EXIT_FAILURE
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dare", description="Random forests with exact, fast instance deletion")
    parser.add_argument("--log-level", default=None, help="Override DARE_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("generate", help="Write a synthetic dataset as CSV")
    p.add_argument("--n", type=_at_least(1), required=True)
    p.add_argument("--seed", type=_at_least(0), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_generate)

    p = commands.add_parser("train", help="Train a forest and save the model")
    _add_data_flags(p)
    _add_tree_flags(p)
    p.add_argument("--seed", type=_at_least(0), default=None)
    p.add_argument("--n-jobs", type=int, default=None)
    p.add_argument("--out", required=True, help="Model file to write")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("predict", help="Score a CSV with a saved model")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--label-column", default="label")
    p.add_argument("--metric", choices=sorted(METRICS), default=None)
    p.add_argument("--out", default=None, help="CSV of probabilities (default: print them)")
    p.set_defaults(handler=cmd_predict)

    p = commands.add_parser("delete", help="Delete training instances from a saved model")
    p.add_argument("--model", required=True)
    target = p.add_mutually_exclusive_group(required=True)
    target.add_argument("--ids", help="File of instance ids (whitespace or comma separated)")
    target.add_argument("--adversary", type=_adversary, help="random | worst1000 | worst<N>")
    p.add_argument("--count", type=_at_least(1), default=1)
    p.add_argument("--seed", type=_at_least(0), default=None)
    p.add_argument("--out", default=None, help="Updated model (default: overwrite --model)")
    p.add_argument("--report", default=None, help="Deletion report CSV")
    p.set_defaults(handler=cmd_delete)

    p = commands.add_parser("benchmark", help="Measure deletion speedup over naive retraining")
    _add_data_flags(p)
    _add_tree_flags(p)
    p.add_argument("--adversary", type=_adversary, default=AdversaryKind.random())
    p.add_argument("--budget", type=_at_least(1), default=None, help="Maximum deletions per repeat")
    p.add_argument("--max-seconds", type=float, default=None, help="Maximum deletion-loop seconds per repeat")
    p.add_argument("--repeats", type=_at_least(1), default=5)
    p.add_argument("--k-grid", type=_int_list(1), default=None, help="Sweep k over these values (default: --k)")
    p.add_argument("--drmax-grid", type=_int_list(0), default=None, help="Sweep d_rmax over these values (default: --drmax)")
    p.add_argument("--test-fraction", type=float, default=0.2)
    p.add_argument("--metric", choices=sorted(METRICS), default=None)
    p.add_argument("--seed", type=_at_least(0), default=None)
    p.add_argument("--n-jobs", type=int, default=None)
    p.add_argument("--out", required=True, help="Output directory")
    p.set_defaults(handler=cmd_benchmark)

    p = commands.add_parser("tune", help="Grid-search T, d_max, k and pick d_rmax per tolerance")
    _add_data_flags(p)
    _add_tree_flags(p)
    p.add_argument("--trees-grid", type=_int_list(1), default=[10, 50, 100, 250])
    p.add_argument("--max-depth-grid", type=_int_list(0), default=[1, 3, 5, 10, 20])
    p.add_argument("--k-grid", type=_int_list(1), default=[5, 10, 25, 50])
    p.add_argument("--tolerance", type=_tolerances, default=[0.001, 0.0025, 0.005, 0.01])
    p.add_argument("--folds", type=_at_least(2), default=5)
    p.add_argument("--metric", choices=sorted(METRICS), default=None)
    p.add_argument("--seed", type=_at_least(0), default=None)
    p.add_argument("--n-jobs", type=int, default=None)
    p.add_argument("--out", default=None, help="JSON file for the selection")
    p.set_defaults(handler=cmd_tune)

    p = commands.add_parser("inspect", help="Audit a saved model and report memory use")
    p.add_argument("--model", required=True)
    p.set_defaults(handler=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    if args.command == "benchmark" and not 0.0 < args.test_fraction < 1.0:
        parser.error("--test-fraction must lie in (0, 1)")
    try:
        return args.handler(args, parser)
    except DareError as exc:
        logger.error("%s", exc)
        return exc.exit_code
    except OSError as exc:
        logger.error("I/O error: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
