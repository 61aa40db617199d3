"""Command line entry point: `gen`, `run`, and `summarize` subcommands.

`run` executes every grid cell of a config file and writes results.csv,
summary.json and per-round jsonl logs under the config's output_dir. The
worker pool (--jobs) parallelizes over (cell, fold) tasks; outputs are
byte-identical for any job count because every task is keyed by config
content, not by scheduling order.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor

from .config import ExperimentConfig, RunPlan, load_config
from .evaluation import (
    assemble_result,
    build_plan,
    read_results_csv,
    run_fold,
    summarize_results,
    summary_from_rows,
    write_results_csv,
)
from .federation import batch_size_for
from .phantom import save_dataset, save_manifest


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fhsim",
        description="multi-center training simulation: generate phantoms, "
                    "run experiment grids, summarize results",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="materialize the phantom dataset tree")
    gen.add_argument("--config", required=True, help="TOML config file")
    gen.add_argument("--out", default="", help="target directory "
                     "(default: the config's data.dataset_dir)")
    gen.add_argument("--force", action="store_true",
                     help="overwrite an existing dataset tree")

    run = sub.add_parser("run", help="run every cell of the config grid")
    run.add_argument("--config", required=True, help="TOML config file")
    run.add_argument("--jobs", type=int, default=1,
                     help="worker processes over (cell, fold) tasks")
    run.add_argument("--force", action="store_true",
                     help="overwrite existing results in output_dir")
    run.add_argument("--dry-run", action="store_true",
                     help="print the resolved plan without training")

    summ = sub.add_parser("summarize",
                          help="re-derive summary.json from a results.csv")
    summ.add_argument("--results", required=True, help="path to results.csv")
    summ.add_argument("--out", default="",
                      help="summary path (default: summary.json next to the csv)")
    return parser


def _fail(message: str, code: int = 2) -> int:
    print(f"error: {message}", file=sys.stderr)
    return code


# -- gen -------------------------------------------------------------------------


def cmd_gen(args) -> int:
    try:
        plan = load_config(args.config)
    except (OSError, ValueError) as err:
        return _fail(str(err))
    config = plan.cells[0]  # data keys are shared across cells
    out = args.out or config.dataset_dir
    if not out:
        return _fail("no target directory: set data.dataset_dir or pass --out")
    if os.path.exists(os.path.join(out, "manifest.json")) and not args.force:
        return _fail(f"{out} already holds a dataset; pass --force to overwrite", 1)

    from .phantom import generate_center

    profiles = config.center_profiles()
    os.makedirs(out, exist_ok=True)
    total = 0
    for profile in profiles:
        dataset = generate_center(profile, config.dataset_seed)
        save_dataset(dataset, out)
        total += len(dataset.subjects)
    save_manifest(list(profiles), config.dataset_seed, out)
    print(f"wrote {total} subjects across {len(profiles)} centers to {out}")
    return 0


# -- run -------------------------------------------------------------------------


def _dry_run(plan: RunPlan) -> int:
    config = plan.cells[0]
    datasets = config.load_datasets()
    subjects = {ds.center_id: sorted(ed.subject_id for ed, _ in ds.subjects)
                for ds in datasets}
    n_subjects = sum(len(ids) for ids in subjects.values())
    source = config.dataset_dir or f"generated, seed {config.dataset_seed}"
    print(f"output_dir: {plan.output_dir}")
    print(f"cells ({len(plan.cells)}): "
          + " ".join(cell.cell_id() for cell in plan.cells))
    print(f"dataset: {len(datasets)} centers, {n_subjects} subjects ({source})")
    print(f"repeat seeds: {list(config.repeat_seeds)}")

    iterations = config.iterations_per_round
    for scheme in sorted({cell.scheme for cell in plan.cells}):
        fold_plan = build_plan(
            ExperimentConfig(**{**_cell_kwargs(config), "scheme": scheme}), datasets)
        print(f"scheme {scheme}: {fold_plan.fold_count} folds")
        for index, fold in enumerate(fold_plan.folds):
            training = [cid for cid, ids in sorted(subjects.items())
                        if any(s in fold.train for s in ids)]
            parts = []
            pooled = 0
            for cid, ids in sorted(subjects.items()):
                n_train = 2 * sum(1 for s in ids if s in fold.train)
                n_val = 2 * sum(1 for s in ids if s in fold.validation)
                n_test = 2 * sum(1 for s in ids if s in fold.test)
                pooled += n_train
                note = f"{cid} {n_train}/{n_val}/{n_test}"
                if n_train:
                    note += f" b{batch_size_for(n_train, iterations)}"
                parts.append(note)
            print(f"  fold {index}: " + "; ".join(parts))
            print(f"    reference centers: {','.join(training)}; "
                  f"pooled batch {batch_size_for(pooled, len(training) * iterations)}"
                  f" over {len(training)}x{iterations} iterations")
    return 0


def _cell_kwargs(config: ExperimentConfig) -> dict:
    from dataclasses import fields

    return {f.name: getattr(config, f.name) for f in fields(ExperimentConfig)}


def _fold_task(payload):
    config, fold_index, log_dir = payload
    return run_fold(config, fold_index, datasets=None, log_dir=log_dir)


def cmd_run(args) -> int:
    try:
        plan = load_config(args.config)
    except (OSError, ValueError) as err:
        return _fail(str(err))
    if args.jobs < 1:
        return _fail("--jobs must be >= 1")
    if args.dry_run:
        return _dry_run(plan)

    out = plan.output_dir
    results_path = os.path.join(out, "results.csv")
    if os.path.exists(results_path) and not args.force:
        return _fail(f"{results_path} exists; pass --force to overwrite", 1)
    log_dir = os.path.join(out, "logs")
    os.makedirs(log_dir, exist_ok=True)

    first = plan.cells[0]
    datasets = first.load_datasets()
    fold_counts = {
        scheme: build_plan(
            ExperimentConfig(**{**_cell_kwargs(first), "scheme": scheme}), datasets
        ).fold_count
        for scheme in sorted({cell.scheme for cell in plan.cells})
    }
    tasks = [
        (cell, fold_index, log_dir)
        for cell in plan.cells
        for fold_index in range(fold_counts[cell.scheme])
    ]

    if args.jobs == 1:
        outputs = [run_fold(cell, fold_index, datasets, log_dir)
                   for cell, fold_index, log_dir in tasks]
    else:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            outputs = list(pool.map(_fold_task, tasks, chunksize=1))

    by_cell = {}
    for (cell, _, _), runs in zip(tasks, outputs):
        by_cell.setdefault(cell.cell_id(), []).extend(runs)
    results = [assemble_result(cell, by_cell[cell.cell_id()]) for cell in plan.cells]

    write_results_csv(results, results_path)
    _write_summary(summarize_results(results), os.path.join(out, "summary.json"))
    print(f"wrote {results_path} ({len(results)} cells, "
          f"{len(tasks)} fold tasks) and summary.json")
    return 0


def _write_summary(summary: dict, path) -> None:
    with open(path, "w") as fh:
        fh.write(json.dumps(summary, sort_keys=True, indent=2) + "\n")


# -- summarize ---------------------------------------------------------------------


def cmd_summarize(args) -> int:
    try:
        rows = read_results_csv(args.results)
        summary = summary_from_rows(rows)
    except (OSError, ValueError) as err:
        return _fail(str(err))
    out = args.out or os.path.join(os.path.dirname(args.results) or ".", "summary.json")
    _write_summary(summary, out)
    print(f"wrote {out} ({len(summary['cells'])} cells)")
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handler = {"gen": cmd_gen, "run": cmd_run, "summarize": cmd_summarize}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
