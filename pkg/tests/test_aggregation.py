import numpy as np
import pytest

from fhsim.aggregation import CenterUpdate, WeightScheme, aggregate, effective_weights
from fhsim.model import LayoutMismatchError, ParameterVector

TABLE_SIZES = [46, 70, 24, 40]  # four centers, 180 subjects total


def scalar_updates(values, counts):
    return [
        CenterUpdate(f"c{i}", ParameterVector(np.array([v], dtype=np.float64), "s1"), n)
        for i, (v, n) in enumerate(zip(values, counts))
    ]


def vector_updates(rng, k, dim, counts=None):
    counts = counts or [int(rng.integers(1, 100)) for _ in range(k)]
    return [
        CenterUpdate(f"c{i}", ParameterVector(rng.normal(size=dim), f"log{dim - 1}"), counts[i])
        for i in range(k)
    ]


def test_sample_proportional_table_sizes():
    ups = scalar_updates([1.0, 2.0, 3.0, 4.0], TABLE_SIZES)
    out = aggregate(ups, WeightScheme.SAMPLE_PROPORTIONAL)
    assert abs(out.values[0] - 418.0 / 180.0) < 1e-12


def test_equal_vote_is_plain_mean():
    ups = scalar_updates([1.0, 2.0, 3.0, 4.0], TABLE_SIZES)
    out = aggregate(ups, WeightScheme.EQUAL_VOTE)
    assert out.values[0] == pytest.approx(2.5, abs=1e-15)


def test_identical_vectors_fixed_point():
    v = np.array([0.25, -1.5, 3.75])
    ups = [
        CenterUpdate(f"c{i}", ParameterVector(v, "log2"), n)
        for i, n in enumerate([5, 9, 2])
    ]
    for scheme in WeightScheme:
        out = aggregate(ups, scheme)
        assert np.allclose(out.values, v, rtol=1e-15, atol=1e-15)


def test_effective_weights_table():
    ups = scalar_updates([1.0, 2.0, 3.0, 4.0], TABLE_SIZES)
    w = dict(effective_weights(ups, WeightScheme.SAMPLE_PROPORTIONAL))
    for i, n in enumerate(TABLE_SIZES):
        assert w[f"c{i}"] == n / 180


def test_effective_weights_equal_vote():
    ups = scalar_updates([1.0, 2.0, 3.0], [10, 20, 30])
    w = effective_weights(ups, WeightScheme.EQUAL_VOTE)
    assert [x for _, x in w] == [1 / 3, 1 / 3, 1 / 3]


def test_effective_weights_single_update():
    ups = scalar_updates([7.0], [13])
    for scheme in WeightScheme:
        assert effective_weights(ups, scheme) == [("c0", 1.0)]


def test_weights_convex():
    rng = np.random.default_rng(1)
    for _ in range(20):
        k = int(rng.integers(1, 9))
        ups = vector_updates(rng, k, 5)
        for scheme in WeightScheme:
            w = [x for _, x in effective_weights(ups, scheme)]
            assert all(x >= 0 for x in w)
            assert abs(sum(w) - 1.0) < 1e-12


def test_equal_counts_schemes_agree_bitwise():
    rng = np.random.default_rng(2)
    for k in (2, 3, 5, 7):
        ups = vector_updates(rng, k, 17, counts=[12] * k)
        a = aggregate(ups, WeightScheme.SAMPLE_PROPORTIONAL)
        b = aggregate(ups, WeightScheme.EQUAL_VOTE)
        assert np.array_equal(a.values, b.values)


def test_permutation_of_inputs_gives_identical_result():
    rng = np.random.default_rng(3)
    ups = vector_updates(rng, 6, 33)
    base = aggregate(ups, WeightScheme.SAMPLE_PROPORTIONAL)
    for _ in range(5):
        perm = list(rng.permutation(len(ups)))
        out = aggregate([ups[i] for i in perm], WeightScheme.SAMPLE_PROPORTIONAL)
        assert np.array_equal(out.values, base.values)


def test_idempotence_k_copies():
    rng = np.random.default_rng(4)
    v = rng.normal(size=12)
    for k in (1, 2, 3, 7, 10):
        ups = [CenterUpdate(f"c{i}", ParameterVector(v, "log11"), 4) for i in range(k)]
        for scheme in WeightScheme:
            out = aggregate(ups, scheme)
            assert np.allclose(out.values, v, rtol=1e-15, atol=1e-15)


def test_homogeneity():
    rng = np.random.default_rng(5)
    ups = vector_updates(rng, 4, 9)
    base = aggregate(ups, WeightScheme.SAMPLE_PROPORTIONAL)
    alpha = -2.75
    scaled = [
        CenterUpdate(u.center_id, ParameterVector(alpha * u.params.values, u.params.layout_id), u.sample_count)
        for u in ups
    ]
    out = aggregate(scaled, WeightScheme.SAMPLE_PROPORTIONAL)
    assert np.allclose(out.values, alpha * base.values, rtol=1e-12, atol=1e-15)


def test_single_update_returned_unchanged():
    v = np.array([1.0, 2.0, 3.0])
    ups = [CenterUpdate("only", ParameterVector(v, "log2"), 57)]
    for scheme in WeightScheme:
        out = aggregate(ups, scheme)
        assert np.array_equal(out.values, v)


def test_empty_updates_rejected():
    with pytest.raises(ValueError):
        aggregate([], WeightScheme.EQUAL_VOTE)


def test_layout_mismatch_rejected():
    ups = [
        CenterUpdate("a", ParameterVector(np.zeros(3), "log2"), 1),
        CenterUpdate("b", ParameterVector(np.zeros(4), "log3"), 1),
    ]
    with pytest.raises(LayoutMismatchError):
        aggregate(ups, WeightScheme.EQUAL_VOTE)


def test_bad_sample_count_rejected():
    with pytest.raises(ValueError):
        CenterUpdate("a", ParameterVector(np.zeros(2), "log1"), 0)
    with pytest.raises(ValueError):
        CenterUpdate("a", ParameterVector(np.zeros(2), "log1"), 2.5)


def test_duplicate_center_ids_rejected():
    ups = [
        CenterUpdate("a", ParameterVector(np.zeros(2), "log1"), 1),
        CenterUpdate("a", ParameterVector(np.ones(2), "log1"), 1),
    ]
    with pytest.raises(ValueError):
        aggregate(ups, WeightScheme.EQUAL_VOTE)
