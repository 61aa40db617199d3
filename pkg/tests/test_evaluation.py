import numpy as np
import pytest

from fhsim.evaluation import (
    CCV_FOLD_COUNT,
    SCHEME_CCV,
    SCHEME_LCO,
    auc,
    plan_ccv,
    plan_lco,
)


def make_centers(sizes, hcm_fractions=None):
    centers = {}
    labels = {}
    for idx, (cid, n) in enumerate(sorted(sizes.items())):
        ids = [f"{cid}_s{i:03d}" for i in range(n)]
        centers[cid] = ids
        frac = 0.5 if hcm_fractions is None else hcm_fractions[idx]
        n_hcm = int(round(frac * n))
        for i, sid in enumerate(ids):
            labels[sid] = 1 if i < n_hcm else 0
    return centers, labels


def brute_force_auc(scores, labels):
    pos = [s for s, y in zip(scores, labels) if y == 1]
    neg = [s for s, y in zip(scores, labels) if y == 0]
    total = 0.0
    for p in pos:
        for q in neg:
            if p > q:
                total += 1.0
            elif p == q:
                total += 0.5
    return total / (len(pos) * len(neg))


def assert_fold_laws(plan, centers):
    everyone = {sid for ids in centers.values() for sid in ids}
    test_union = set()
    for fold in plan.folds:
        assert not fold.train & fold.validation
        assert not fold.train & fold.test
        assert not fold.validation & fold.test
        assert fold.train | fold.validation | fold.test == everyone
        assert not test_union & fold.test
        test_union |= fold.test
    assert test_union == everyone


# ---------------------------------------------------------------------------
# collaborative 5-fold plan


def test_ccv_per_center_test_sizes():
    centers, labels = make_centers({"c1": 5, "c2": 10})
    plan = plan_ccv(centers, labels, seed=0)
    assert plan.fold_count == CCV_FOLD_COUNT
    assert plan.scheme == SCHEME_CCV
    for fold in plan.folds:
        assert sum(1 for s in fold.test if s.startswith("c1")) == 1
        assert sum(1 for s in fold.test if s.startswith("c2")) == 2


def test_ccv_partition_laws():
    centers, labels = make_centers({"a": 23, "b": 35, "c": 12, "d": 20})
    plan = plan_ccv(centers, labels, seed=3)
    assert_fold_laws(plan, centers)


def test_ccv_default_sizes_fold_totals():
    centers, labels = make_centers({"a": 23, "b": 35, "c": 12, "d": 20})
    plan = plan_ccv(centers, labels, seed=1)
    totals = [len(f.test) for f in plan.folds]
    assert all(17 <= t <= 19 for t in totals)  # 20% of 90 subjects, +/-1 rounding
    assert sum(totals) == 90


def test_ccv_per_center_fold_balance_within_one():
    centers, labels = make_centers({"a": 23, "b": 35, "c": 12, "d": 20})
    plan = plan_ccv(centers, labels, seed=2)
    for cid in centers:
        sizes = [sum(1 for s in f.test if s.startswith(cid)) for f in plan.folds]
        assert max(sizes) - min(sizes) <= 1


def test_ccv_stratification_balances_classes():
    centers, labels = make_centers({"a": 20})
    plan = plan_ccv(centers, labels, seed=4)
    for fold in plan.folds:
        split = [labels[s] for s in fold.test]
        assert abs(sum(split) - (len(split) - sum(split))) <= 1


def test_ccv_deterministic_and_seed_sensitive():
    centers, labels = make_centers({"a": 23, "b": 35})
    p1 = plan_ccv(centers, labels, seed=7)
    p2 = plan_ccv(centers, labels, seed=7)
    p3 = plan_ccv(centers, labels, seed=8)
    assert [f.test for f in p1.folds] == [f.test for f in p2.folds]
    assert [f.validation for f in p1.folds] == [f.validation for f in p2.folds]
    assert [f.test for f in p1.folds] != [f.test for f in p3.folds]


def test_ccv_too_small_center_rejected():
    centers, labels = make_centers({"tiny": 4, "big": 20})
    with pytest.raises(ValueError, match="tiny"):
        plan_ccv(centers, labels, seed=0)


def test_ccv_duplicate_ids_rejected():
    centers = {"a": ["s1", "s2", "s3", "s4", "s5"], "b": ["s1", "t2", "t3", "t4", "t5"]}
    labels = {sid: 0 for ids in centers.values() for sid in ids}
    with pytest.raises(ValueError):
        plan_ccv(centers, labels, seed=0)


# ---------------------------------------------------------------------------
# leave-center-out plan


def test_lco_fold_per_center():
    centers, labels = make_centers({"a": 23, "b": 35, "c": 12, "d": 20})
    plan = plan_lco(centers, labels, seed=0)
    assert plan.fold_count == 4
    assert plan.scheme == SCHEME_LCO
    held_out = [sorted({plan.subject_center[s] for s in f.test}) for f in plan.folds]
    assert held_out == [["a"], ["b"], ["c"], ["d"]]
    for fold, cid in zip(plan.folds, "abcd"):
        assert fold.test == frozenset(centers[cid])


def test_lco_partition_laws():
    centers, labels = make_centers({"a": 10, "b": 7, "c": 15})
    plan = plan_lco(centers, labels, seed=5)
    assert_fold_laws(plan, centers)


def test_lco_train_val_never_touch_held_out():
    centers, labels = make_centers({"a": 10, "b": 12, "c": 9})
    plan = plan_lco(centers, labels, seed=1)
    for fold in plan.folds:
        held = {plan.subject_center[s] for s in fold.test}
        others = {plan.subject_center[s] for s in fold.train | fold.validation}
        assert not held & others


def test_lco_single_center_rejected():
    centers, labels = make_centers({"a": 10})
    with pytest.raises(ValueError):
        plan_lco(centers, labels, seed=0)


def test_fold_laws_random_configs():
    rng = np.random.default_rng(42)
    for trial in range(40):
        k = int(rng.integers(2, 6))
        sizes = {f"c{j}": int(rng.integers(5, 40)) for j in range(k)}
        fracs = [float(rng.uniform(0.3, 0.7)) for _ in range(k)]
        centers, labels = make_centers(sizes, fracs)
        seed = int(rng.integers(1 << 30))
        assert_fold_laws(plan_ccv(centers, labels, seed), centers)
        assert_fold_laws(plan_lco(centers, labels, seed), centers)


# ---------------------------------------------------------------------------
# AUC


def test_auc_perfect_ranking():
    assert auc([0.2, 0.8], [0, 1]) == 1.0


def test_auc_full_tie():
    assert auc([0.5, 0.5], [0, 1]) == 0.5


def test_auc_reversed_ranking():
    assert auc([0.9, 0.1], [0, 1]) == 0.0


def test_auc_matches_brute_force_exactly():
    rng = np.random.default_rng(0)
    for trial in range(30):
        n = int(rng.integers(2, 200))
        labels = rng.integers(0, 2, size=n)
        if labels.sum() in (0, n):
            labels[0] = 1 - labels[0]
        # quantized scores force plenty of ties
        scores = np.round(rng.uniform(size=n), 1)
        assert auc(scores, labels) == brute_force_auc(scores, labels)


def test_auc_invariant_under_monotone_transform():
    rng = np.random.default_rng(1)
    scores = rng.normal(size=50)
    labels = rng.integers(0, 2, size=50)
    labels[0], labels[1] = 0, 1
    base = auc(scores, labels)
    assert auc(np.exp(scores), labels) == base
    assert auc(3.0 * scores + 7.0, labels) == base


def test_auc_single_class_rejected():
    with pytest.raises(ValueError):
        auc([0.1, 0.9], [1, 1])
    with pytest.raises(ValueError):
        auc([0.1, 0.9], [0, 0])
