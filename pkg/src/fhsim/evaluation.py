"""Fold planning, AUC, repeated-seed experiment running, and result files.

Two cross-validation schemes over multi-center data, at subject
granularity so the two timepoints of a subject always travel together:

* collaborative (ccv): 5 folds; every center contributes ~20% of its
  subjects to each fold's test set, stratified by class; of the rest,
  10% per center becomes validation.
* leave-center-out (lco): one fold per center; the whole held-out center
  is the test set, the remaining centers split 90/10 train/validation.

The same plan object is shared by the federated and the
central-data-sharing framework so their comparison never mixes splits.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass

import numpy as np

from .augmentation import AugmentationTier
from .seeding import derive_rng

SCHEME_CCV = "ccv"
SCHEME_LCO = "lco"
CCV_FOLD_COUNT = 5
VALIDATION_FRACTION = 0.10


@dataclass(frozen=True)
class Fold:
    train: frozenset
    validation: frozenset
    test: frozenset


@dataclass(frozen=True)
class FoldPlan:
    scheme: str
    folds: tuple  # of Fold
    subject_center: dict  # subject_id -> center_id
    subject_label: dict  # subject_id -> {0,1}

    def __post_init__(self):
        if self.scheme not in (SCHEME_CCV, SCHEME_LCO):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        everyone = frozenset(self.subject_center)
        test_union = set()
        for fold in self.folds:
            if fold.train & fold.validation or fold.train & fold.test or fold.validation & fold.test:
                raise ValueError("fold sets must be disjoint")
            if fold.train | fold.validation | fold.test != everyone:
                raise ValueError("fold sets must cover all subjects")
            if test_union & fold.test:
                raise ValueError("test sets must not overlap across folds")
            test_union |= fold.test
        if test_union != everyone:
            raise ValueError("test sets across folds must cover all subjects")

    @property
    def fold_count(self) -> int:
        return len(self.folds)


def _stratified_parts(subjects_by_class: dict, n_parts: int, rng) -> list[set]:
    """Cyclic deal of per-class shuffled subjects into n_parts.

    The dealing offset continues across classes, so part sizes differ by
    at most 1 per center (largest-remainder behavior).
    """
    parts = [set() for _ in range(n_parts)]
    offset = 0
    for label in sorted(subjects_by_class):
        ids = sorted(subjects_by_class[label])
        rng.shuffle(ids)
        for i, sid in enumerate(ids):
            parts[(offset + i) % n_parts].add(sid)
        offset = (offset + len(ids)) % n_parts
    return parts


def _split_validation(subject_ids, labels: dict, rng) -> tuple[set, set]:
    """Per-class 10% validation draw; returns (train, validation)."""
    by_class = {}
    for sid in sorted(subject_ids):
        by_class.setdefault(labels[sid], []).append(sid)
    val = set()
    for label in sorted(by_class):
        ids = by_class[label]
        rng.shuffle(ids)
        k = int(round(VALIDATION_FRACTION * len(ids)))
        val.update(ids[:k])
    return set(subject_ids) - val, val


def _check_inputs(center_subjects: dict, labels: dict):
    all_ids = [sid for ids in center_subjects.values() for sid in ids]
    if len(all_ids) != len(set(all_ids)):
        raise ValueError("subject ids must be globally unique")
    missing = [sid for sid in all_ids if sid not in labels]
    if missing:
        raise ValueError(f"labels missing for {missing[:3]}...")


def plan_ccv(center_subjects: dict, labels: dict, seed: int) -> FoldPlan:
    """5-fold plan where every center feeds every fold's test set."""
    _check_inputs(center_subjects, labels)
    for cid, ids in sorted(center_subjects.items()):
        if len(ids) < CCV_FOLD_COUNT:
            raise ValueError(
                f"center {cid!r} has {len(ids)} subjects; "
                f"cannot give all {CCV_FOLD_COUNT} folds a non-empty test part"
            )
    test_parts = [set() for _ in range(CCV_FOLD_COUNT)]
    for cid in sorted(center_subjects):
        by_class = {}
        for sid in center_subjects[cid]:
            by_class.setdefault(labels[sid], []).append(sid)
        rng = derive_rng(seed, "ccv-test", cid)
        for f, part in enumerate(_stratified_parts(by_class, CCV_FOLD_COUNT, rng)):
            test_parts[f] |= part

    folds = []
    for f in range(CCV_FOLD_COUNT):
        train = set()
        val = set()
        for cid in sorted(center_subjects):
            remaining = [s for s in sorted(center_subjects[cid]) if s not in test_parts[f]]
            rng = derive_rng(seed, "ccv-val", cid, f)
            tr, va = _split_validation(remaining, labels, rng)
            train |= tr
            val |= va
        folds.append(Fold(frozenset(train), frozenset(val), frozenset(test_parts[f])))

    subject_center = {sid: cid for cid, ids in center_subjects.items() for sid in ids}
    return FoldPlan(SCHEME_CCV, tuple(folds), subject_center, dict(labels))


def plan_lco(center_subjects: dict, labels: dict, seed: int) -> FoldPlan:
    """One fold per center; the held-out center is the entire test set."""
    _check_inputs(center_subjects, labels)
    if len(center_subjects) < 2:
        raise ValueError("leave-center-out needs at least 2 centers")
    folds = []
    for held_out in sorted(center_subjects):
        train = set()
        val = set()
        for cid in sorted(center_subjects):
            if cid == held_out:
                continue
            rng = derive_rng(seed, "lco-val", held_out, cid)
            tr, va = _split_validation(sorted(center_subjects[cid]), labels, rng)
            train |= tr
            val |= va
        folds.append(Fold(frozenset(train), frozenset(val), frozenset(center_subjects[held_out])))
    subject_center = {sid: cid for cid, ids in center_subjects.items() for sid in ids}
    return FoldPlan(SCHEME_LCO, tuple(folds), subject_center, dict(labels))


def auc(scores, labels) -> float:
    """Mann-Whitney AUC: (concordant + 0.5*tied) / (n_pos * n_neg).

    Computed from average ranks, which is exactly equal to the pairwise
    count for any tie pattern (rank sums are half-integers, so no rounding
    enters before the final division).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise ValueError("scores and labels must be equal-length vectors")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC needs both classes present")

    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores), dtype=np.float64)
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        # average 1-based rank for the tie group [i, j]
        avg = (i + j) / 2.0 + 1.0
        ranks[order[i : j + 1]] = avg
        i = j + 1

    rank_sum_pos = float(ranks[labels == 1].sum())
    u = rank_sum_pos - n_pos * (n_pos + 1) / 2.0
    return u / (n_pos * n_neg)


# -- experiment execution ------------------------------------------------------


@dataclass(frozen=True)
class FoldRun:
    """Harness-side outputs of one (fold, repeat-seed) training run."""

    fold_index: int
    seed: int
    predictions: tuple  # of PredictionRecord over the fold's test pool
    rounds: int
    best_validation: float


@dataclass(frozen=True)
class ExperimentResult:
    """One grid cell's outcome over all folds and repeat seeds."""

    fingerprint: str
    framework: str
    scheme: str
    tier: str
    prior: str
    fold_count: int
    repeat_seeds: tuple
    fold_runs: tuple  # of FoldRun, sorted by (fold_index, seed)
    auc_total: dict  # seed -> AUC over all test predictions pooled
    auc_per_center: dict  # seed -> {center_id: AUC over that center's pool}
    fold_center_auc: dict  # (fold_index, seed, center|"total") -> AUC
    mean_auc: float
    sd_auc: float


def build_plan(config, datasets) -> FoldPlan:
    """The fold plan shared by every framework under one config."""
    center_subjects = {
        ds.center_id: [ed.subject_id for ed, _ in ds.subjects] for ds in datasets
    }
    labels = {ed.subject_id: ed.label for ds in datasets for ed, _ in ds.subjects}
    if config.scheme == SCHEME_CCV:
        return plan_ccv(center_subjects, labels, config.split_seed)
    return plan_lco(center_subjects, labels, config.split_seed)


def run_fold(config, fold_index: int, datasets=None, log_dir=None) -> tuple:
    """Train one fold once per repeat seed; returns one FoldRun per seed.

    The run key carries (experiment seed, scheme, fold, repeat seed) but not
    the framework, so the pooled baseline and the federated runs share their
    initialization and shuffle streams and differ only in orchestration.
    """
    from . import preprocess
    from .aggregation import WeightScheme
    from .federation import CDS, Federation, jsonl_log_sink, run_cds, run_federated

    if datasets is None:
        datasets = config.load_datasets()
    plan = build_plan(config, datasets)
    fold = plan.folds[fold_index]
    pipeline = config.pipeline()
    spec = config.model_spec()
    trainer = config.trainer()
    policy = config.policy()

    sites = [preprocess.CenterSite(ds, pipeline) for ds in datasets]
    reference = preprocess.build_reference(sites, fold, pipeline)
    keep_channels = policy.tier is not AugmentationTier.NONE
    materials = {
        site.center_id: site.fold_materials(fold, reference, spec, keep_channels)
        for site in sites
    }
    scorer = preprocess.make_auc_scorer(
        preprocess.pooled_eval_set(materials, "validation"), spec
    )

    runs = []
    for seed in config.repeat_seeds:
        run_key = (config.experiment_seed, config.scheme, fold_index, seed)
        log_fh = None
        sink = None
        if log_dir is not None:
            name = f"{config.cell_id()}-fold{fold_index}-seed{seed}.jsonl"
            log_fh = open(os.path.join(log_dir, name), "w")
            sink = jsonl_log_sink(log_fh)
        try:
            if config.framework == "cds":
                node = preprocess.build_pooled_node(materials, spec, trainer, policy, run_key)
                federation = Federation((node,), CDS, trainer, spec)
                best, logs = run_cds(federation, scorer, run_key, log_sink=sink)
            else:
                nodes = preprocess.build_center_nodes(materials, spec, trainer, policy, run_key)
                weighting = (
                    WeightScheme.SAMPLE_PROPORTIONAL
                    if config.framework == "fl"
                    else WeightScheme.EQUAL_VOTE
                )
                federation = Federation(tuple(nodes), weighting, trainer, spec)
                best, logs = run_federated(federation, scorer, run_key, log_sink=sink)
        finally:
            if log_fh is not None:
                log_fh.close()
        records = preprocess.prediction_records(materials, best, spec, "test")
        runs.append(FoldRun(
            fold_index=fold_index,
            seed=seed,
            predictions=tuple(records),
            rounds=len(logs),
            best_validation=max(log.validation_score for log in logs),
        ))
    return tuple(runs)


def _auc_of(records) -> float:
    return auc([r.score for r in records], [r.label for r in records])


def _has_both_classes(records) -> bool:
    labels = {r.label for r in records}
    return labels == {0, 1}


def assemble_result(config, fold_runs) -> ExperimentResult:
    """Pool per-(fold, seed) predictions into the cell-level result."""
    runs = tuple(sorted(fold_runs, key=lambda r: (r.fold_index, r.seed)))
    seen = [(r.fold_index, r.seed) for r in runs]
    if len(set(seen)) != len(seen):
        raise ValueError("duplicate (fold, seed) runs")
    fold_indices = sorted({r.fold_index for r in runs})
    seeds = tuple(config.repeat_seeds)
    for f in fold_indices:
        have = {r.seed for r in runs if r.fold_index == f}
        if have != set(seeds):
            raise ValueError(f"fold {f} is missing seeds {sorted(set(seeds) - have)}")

    auc_total = {}
    auc_per_center = {}
    fold_center = {}
    for seed in seeds:
        pool = [p for r in runs if r.seed == seed for p in r.predictions]
        auc_total[seed] = _auc_of(pool)
        per = {}
        for cid in sorted({p.center_id for p in pool}):
            sub = [p for p in pool if p.center_id == cid]
            if _has_both_classes(sub):
                per[cid] = _auc_of(sub)
        auc_per_center[seed] = per
    for r in runs:
        groups = {"total": list(r.predictions)}
        for p in r.predictions:
            groups.setdefault(p.center_id, []).append(p)
        for center, records in groups.items():
            if _has_both_classes(records):
                fold_center[(r.fold_index, r.seed, center)] = _auc_of(records)

    totals = [auc_total[s] for s in seeds]
    mean = float(np.mean(totals))
    sd = float(np.std(totals, ddof=1)) if len(totals) > 1 else 0.0
    return ExperimentResult(
        fingerprint=config.fingerprint(),
        framework=config.framework,
        scheme=config.scheme,
        tier=config.tier,
        prior=config.prior,
        fold_count=len(fold_indices),
        repeat_seeds=seeds,
        fold_runs=runs,
        auc_total=auc_total,
        auc_per_center=auc_per_center,
        fold_center_auc=fold_center,
        mean_auc=mean,
        sd_auc=sd,
    )


def run_experiment(config, datasets=None, log_dir=None) -> ExperimentResult:
    """All folds, all repeat seeds, one framework: one result-table cell.

    Folds are fixed by the split seed; repeat seeds vary only the model
    initialization, local shuffles and augmentation draws.
    """
    if datasets is None:
        datasets = config.load_datasets()
    plan = build_plan(config, datasets)
    runs = []
    for fold_index in range(plan.fold_count):
        runs.extend(run_fold(config, fold_index, datasets, log_dir))
    return assemble_result(config, runs)


# -- result files ----------------------------------------------------------------

RESULT_COLUMNS = ("framework", "scheme", "tier", "prior", "fold", "seed", "center", "auc")
POOLED_FOLD = "pooled"
TOTAL_CENTER = "total"


def _center_order(center: str):
    # named centers first, the cross-center total last
    return (1, "") if center == TOTAL_CENTER else (0, center)


def result_rows(result: ExperimentResult) -> list:
    """Flatten one result into csv rows; AUC carried as shortest-repr text.

    Per-(fold, seed) rows come first, then the seed-level rows pooled over
    folds (fold column "pooled"), which are what the summary is built from.
    """
    head = (result.framework, result.scheme, result.tier, result.prior)
    rows = []
    for key in sorted(result.fold_center_auc,
                      key=lambda k: (k[0], k[1], _center_order(k[2]))):
        fold_index, seed, center = key
        rows.append(head + (str(fold_index), str(seed), center,
                            repr(result.fold_center_auc[key])))
    for seed in result.repeat_seeds:
        per = result.auc_per_center[seed]
        for center in sorted(per):
            rows.append(head + (POOLED_FOLD, str(seed), center, repr(per[center])))
        rows.append(head + (POOLED_FOLD, str(seed), TOTAL_CENTER,
                            repr(result.auc_total[seed])))
    return rows


def write_results_csv(results, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RESULT_COLUMNS)
        for result in results:
            writer.writerows(result_rows(result))


def read_results_csv(path) -> list:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != RESULT_COLUMNS:
            raise ValueError(f"unexpected results header {header}")
        return [tuple(row) for row in reader]


def summary_from_rows(rows) -> dict:
    """Per-cell mean and sd across repeat seeds, from the pooled rows."""
    cells = {}
    for framework, scheme, tier, prior, fold, seed, center, auc_text in rows:
        if fold != POOLED_FOLD:
            continue
        cell = cells.setdefault((framework, scheme, tier, prior), {})
        cell.setdefault(center, {})[int(seed)] = float(auc_text)

    def stats(by_seed: dict) -> dict:
        values = [by_seed[s] for s in sorted(by_seed)]
        sd = float(np.std(values, ddof=1)) if len(values) > 1 else 0.0
        return {"mean": float(np.mean(values)), "sd": sd}

    out = {}
    for key in sorted(cells):
        framework, scheme, tier, prior = key
        per = cells[key]
        if TOTAL_CENTER not in per:
            raise ValueError(f"cell {key} has no pooled total rows")
        out["|".join(key)] = {
            "framework": framework,
            "scheme": scheme,
            "tier": tier,
            "prior": prior,
            "seeds": len(per[TOTAL_CENTER]),
            "total": stats(per[TOTAL_CENTER]),
            "per_center": {
                center: stats(by_seed)
                for center, by_seed in sorted(per.items())
                if center != TOTAL_CENTER
            },
        }
    return {"cells": out}


def summarize_results(results) -> dict:
    rows = []
    for result in results:
        rows.extend(result_rows(result))
    return summary_from_rows(rows)
