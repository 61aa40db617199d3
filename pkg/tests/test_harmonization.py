import numpy as np
import pytest

from fhsim.harmonization import (
    LANDMARK_PERCENTILES,
    HistogramAggregate,
    Region,
    average_histogram,
    center_aggregate,
    intensity_range,
    match_histogram,
    merge_aggregates,
    reference_from_json,
    reference_to_json,
    rescale_unit,
    subject_histogram,
    uniform_bin_edges,
)
from fhsim.phantom import Volume, default_profiles, generate_center


def flat_volume(values, mask_value=1, spacing=(1.0, 1.0, 1.0)):
    arr = np.asarray(values, dtype=np.float64).reshape(-1, 1, 1)
    mask = np.full(arr.shape, mask_value, dtype=np.uint8)
    return Volume(arr, mask, spacing, 0, "c", "s", "ED")


def two_bin_aggregate(center_id, per_image_hists):
    edges = np.array([0.0, 0.5, 1.0])
    counts = np.sum(per_image_hists, axis=0, dtype=np.float64)
    return HistogramAggregate(center_id, edges, counts, len(per_image_hists))


# ---------------------------------------------------------------------------
# subject_histogram


def test_constant_image_single_bin():
    vol = flat_volume([0.4] * 30)
    h = subject_histogram(vol, Region.WHOLE_IMAGE, uniform_bin_edges(0.0, 1.0, 10))
    assert h.sum() == pytest.approx(1.0)
    assert h[4] == 1.0  # 0.4 falls in bin [0.4, 0.5)


def test_mask_only_empty_mask_rejected():
    vol = flat_volume([1.0, 2.0], mask_value=0)
    with pytest.raises(ValueError):
        subject_histogram(vol, Region.MASK_ONLY, uniform_bin_edges(0.0, 1.0, 4))


def test_uniform_ramp_equal_mass():
    n = 1000
    vol = flat_volume(np.linspace(0.0, 1.0, n, endpoint=False))
    h = subject_histogram(vol, Region.WHOLE_IMAGE, uniform_bin_edges(0.0, 1.0, 10))
    assert np.all(np.abs(h - 0.1) <= 1.0 / n + 1e-12)


def test_out_of_range_values_clamp_into_boundary_bins():
    vol = flat_volume([-5.0, 0.2, 99.0])
    h = subject_histogram(vol, Region.WHOLE_IMAGE, uniform_bin_edges(0.0, 1.0, 4))
    assert h.sum() == pytest.approx(1.0)
    assert h[0] == pytest.approx(2 / 3)  # -5.0 and 0.2
    assert h[-1] == pytest.approx(1 / 3)  # 99.0


def test_mask_only_uses_only_masked_voxels():
    arr = np.array([0.1, 0.1, 0.9, 0.9]).reshape(-1, 1, 1)
    mask = np.array([1, 1, 0, 0], dtype=np.uint8).reshape(-1, 1, 1)
    vol = Volume(arr, mask, (1, 1, 1), 0, "c", "s", "ED")
    h = subject_histogram(vol, Region.MASK_ONLY, uniform_bin_edges(0.0, 1.0, 2))
    assert h[0] == 1.0 and h[1] == 0.0


# ---------------------------------------------------------------------------
# average_histogram


def test_average_two_equal_centers():
    a = two_bin_aggregate("a", [[1.0, 0.0]])
    b = two_bin_aggregate("b", [[0.0, 1.0]])
    ref = average_histogram([a, b])
    assert np.allclose(ref.density, [0.5, 0.5])


def test_average_mass_weighted_by_image_count():
    # center a: 3 images all [1,0]; center b: 1 image [0,1]
    a = two_bin_aggregate("a", [[1.0, 0.0]] * 3)
    b = two_bin_aggregate("b", [[0.0, 1.0]])
    ref = average_histogram([a, b])
    assert np.allclose(ref.density, [0.75, 0.25])


def test_average_single_center_is_its_mean():
    a = two_bin_aggregate("a", [[1.0, 0.0], [0.0, 1.0], [1.0, 0.0], [1.0, 0.0]])
    ref = average_histogram([a])
    assert np.allclose(ref.density, [0.75, 0.25])


def test_average_permutation_invariant():
    rng = np.random.default_rng(0)
    edges = uniform_bin_edges(0.0, 1.0, 16)
    aggs = []
    for i in range(4):
        n = int(rng.integers(1, 6))
        hists = rng.dirichlet(np.ones(16), size=n)
        aggs.append(HistogramAggregate(f"c{i}", edges, hists.sum(axis=0), n))
    base = average_histogram(aggs)
    out = average_histogram(aggs[::-1])
    assert np.array_equal(base.density, out.density)
    assert base.landmarks == out.landmarks


def test_average_equal_counts_is_plain_mean():
    edges = uniform_bin_edges(0.0, 1.0, 4)
    h1 = np.array([0.5, 0.5, 0.0, 0.0])
    h2 = np.array([0.0, 0.0, 1.0, 0.0])
    h3 = np.array([0.25, 0.25, 0.25, 0.25])
    h4 = np.array([0.0, 1.0, 0.0, 0.0])
    aggs = [
        HistogramAggregate("a", edges, h1 + h2, 2),
        HistogramAggregate("b", edges, h3 + h4, 2),
    ]
    ref = average_histogram(aggs)
    assert np.allclose(ref.density, (h1 + h2 + h3 + h4) / 4)


def test_average_rejects_mismatched_bins():
    a = two_bin_aggregate("a", [[1.0, 0.0]])
    b = HistogramAggregate("b", np.array([0.0, 1.0, 2.0]), np.array([1.0, 0.0]), 1)
    with pytest.raises(ValueError):
        average_histogram([a, b])


def test_landmarks_nondecreasing_and_cover_percentiles():
    rng = np.random.default_rng(1)
    edges = uniform_bin_edges(0.0, 2.0, 64)
    hists = rng.dirichlet(np.ones(64), size=7)
    agg = HistogramAggregate("a", edges, hists.sum(axis=0), 7)
    ref = average_histogram([agg])
    values = ref.landmark_values()
    assert np.all(np.diff(values) >= 0)
    assert [p for p, _ in ref.landmarks] == list(LANDMARK_PERCENTILES)


def test_merge_aggregates_matches_single_pass():
    ds = generate_center(default_profiles()[3], seed=0)
    vols = ds.volumes()
    edges = uniform_bin_edges(*intensity_range(vols, Region.WHOLE_IMAGE), 32)
    whole = center_aggregate("center_d", vols, Region.WHOLE_IMAGE, edges)
    first = center_aggregate("center_d", vols[:10], Region.WHOLE_IMAGE, edges)
    rest = center_aggregate("center_d", vols[10:], Region.WHOLE_IMAGE, edges)
    merged = merge_aggregates(first, rest)
    assert merged.sample_count == whole.sample_count
    assert np.allclose(merged.counts, whole.counts, rtol=0, atol=1e-12)
    with pytest.raises(ValueError):
        merge_aggregates(first, center_aggregate("other", vols[:2], Region.WHOLE_IMAGE, edges))


# ---------------------------------------------------------------------------
# match_histogram


def test_match_to_own_landmarks_near_identity():
    rng = np.random.default_rng(2)
    vals = rng.uniform(0.0, 1.0, size=400)
    vol = flat_volume(vals)
    edges = uniform_bin_edges(0.0, 1.0, 256)
    agg = center_aggregate("c", [vol], Region.WHOLE_IMAGE, edges)
    ref = average_histogram([agg])
    out = match_histogram(vol, ref, Region.WHOLE_IMAGE)
    bin_width = edges[1] - edges[0]
    inner = (vals > np.percentile(vals, 1)) & (vals < np.percentile(vals, 99))
    assert np.all(np.abs(out.intensities.ravel()[inner] - vals[inner]) <= bin_width + 1e-9)


def test_match_moves_landmarks_onto_reference():
    rng = np.random.default_rng(3)
    vol = flat_volume(rng.normal(0.6, 0.15, size=2000))
    ref_vol = flat_volume(rng.normal(0.3, 0.1, size=2000))
    edges = uniform_bin_edges(-0.2, 1.2, 256)
    ref = average_histogram([center_aggregate("r", [ref_vol], Region.WHOLE_IMAGE, edges)])
    out = match_histogram(vol, ref, Region.WHOLE_IMAGE)
    got = np.percentile(out.intensities.ravel(), LANDMARK_PERCENTILES)
    want = ref.landmark_values()
    bin_width = edges[1] - edges[0]
    assert np.all(np.abs(got - want) <= bin_width + 1e-9)


def test_match_is_monotone():
    rng = np.random.default_rng(4)
    vals = rng.uniform(0.0, 1.0, size=500)
    vol = flat_volume(vals)
    edges = uniform_bin_edges(0.0, 1.0, 64)
    ref_vol = flat_volume(rng.beta(2.0, 5.0, size=500))
    ref = average_histogram([center_aggregate("r", [ref_vol], Region.WHOLE_IMAGE, edges)])
    out = match_histogram(vol, ref, Region.WHOLE_IMAGE)
    order = np.argsort(vals)
    mapped = out.intensities.ravel()[order]
    assert np.all(np.diff(mapped) >= 0)


def test_match_clamps_outside_p1_p99():
    rng = np.random.default_rng(5)
    vals = np.concatenate([rng.uniform(0.2, 0.8, size=500), [-10.0, 10.0]])
    vol = flat_volume(vals)
    edges = uniform_bin_edges(0.0, 1.0, 64)
    ref_vol = flat_volume(rng.uniform(0.0, 1.0, size=500))
    ref = average_histogram([center_aggregate("r", [ref_vol], Region.WHOLE_IMAGE, edges)])
    out = match_histogram(vol, ref, Region.WHOLE_IMAGE)
    marks = ref.landmark_values()
    flat = out.intensities.ravel()
    assert flat[-2] == marks[0]  # -10 clamps to the mapped p1
    assert flat[-1] == marks[-1]  # +10 clamps to the mapped p99


def test_match_constant_image_rejected():
    vol = flat_volume([0.5] * 50)
    edges = uniform_bin_edges(0.0, 1.0, 8)
    ref = average_histogram([center_aggregate("r", [flat_volume(np.linspace(0, 1, 50))],
                                              Region.WHOLE_IMAGE, edges)])
    with pytest.raises(ValueError):
        match_histogram(vol, ref, Region.WHOLE_IMAGE)


def test_match_mask_only_zeroes_outside():
    rng = np.random.default_rng(6)
    arr = rng.uniform(0.1, 0.9, size=(6, 6, 2))
    mask = np.zeros((6, 6, 2), dtype=np.uint8)
    mask[2:5, 2:5, :] = 2
    vol = Volume(arr, mask, (1, 1, 1), 0, "c", "s", "ED")
    edges = uniform_bin_edges(0.0, 1.0, 64)
    ref = average_histogram([center_aggregate("r", [vol], Region.MASK_ONLY, edges)])
    out = match_histogram(vol, ref, Region.MASK_ONLY)
    assert np.all(out.intensities[mask == 0] == 0.0)
    assert np.any(out.intensities[mask > 0] != 0.0)


def test_match_reduces_center_gap():
    # two centers offset by +/-0.2 around the same anatomy
    rng = np.random.default_rng(7)
    base = rng.uniform(0.3, 0.7, size=800)
    a = flat_volume(base - 0.2)
    b = flat_volume(base + 0.2)
    edges = uniform_bin_edges(-0.2, 1.2, 128)
    aggs = [
        center_aggregate("a", [a], Region.WHOLE_IMAGE, edges),
        center_aggregate("b", [b], Region.WHOLE_IMAGE, edges),
    ]
    ref = average_histogram(aggs)
    ma = match_histogram(a, ref, Region.WHOLE_IMAGE)
    mb = match_histogram(b, ref, Region.WHOLE_IMAGE)

    def mean_hist(vol):
        return subject_histogram(vol, Region.WHOLE_IMAGE, edges)

    before = np.abs(mean_hist(a) - mean_hist(b)).sum()
    after = np.abs(mean_hist(ma) - mean_hist(mb)).sum()
    assert after <= 0.5 * before


# ---------------------------------------------------------------------------
# rescale_unit


def test_rescale_simple_values():
    vol = flat_volume([2.0, 4.0, 6.0])
    out = rescale_unit(vol, Region.WHOLE_IMAGE)
    assert np.array_equal(out.intensities.ravel(), [0.0, 0.5, 1.0])


def test_rescale_already_unit_unchanged():
    vals = np.array([0.0, 0.25, 0.75, 1.0])
    vol = flat_volume(vals)
    out = rescale_unit(vol, Region.WHOLE_IMAGE)
    assert np.array_equal(out.intensities.ravel(), vals)


def test_rescale_idempotent():
    rng = np.random.default_rng(8)
    vol = flat_volume(rng.normal(size=200))
    once = rescale_unit(vol, Region.WHOLE_IMAGE)
    twice = rescale_unit(once, Region.WHOLE_IMAGE)
    assert np.array_equal(once.intensities, twice.intensities)


def test_rescale_constant_rejected():
    with pytest.raises(ValueError):
        rescale_unit(flat_volume([3.0] * 10), Region.WHOLE_IMAGE)


def test_rescale_mask_only_zeroes_outside():
    arr = np.array([5.0, 1.0, 3.0, 9.0]).reshape(-1, 1, 1)
    mask = np.array([1, 1, 1, 0], dtype=np.uint8).reshape(-1, 1, 1)
    vol = Volume(arr, mask, (1, 1, 1), 0, "c", "s", "ED")
    out = rescale_unit(vol, Region.MASK_ONLY)
    assert np.array_equal(out.intensities.ravel(), [1.0, 0.0, 0.5, 0.0])


# ---------------------------------------------------------------------------
# serialization


def test_reference_json_round_trip():
    rng = np.random.default_rng(9)
    edges = uniform_bin_edges(0.0, 1.0, 32)
    hists = rng.dirichlet(np.ones(32), size=5)
    ref = average_histogram([HistogramAggregate("a", edges, hists.sum(axis=0), 5)])
    back = reference_from_json(reference_to_json(ref))
    assert np.array_equal(back.bin_edges, ref.bin_edges)
    assert np.array_equal(back.density, ref.density)
    assert back.landmarks == ref.landmarks
