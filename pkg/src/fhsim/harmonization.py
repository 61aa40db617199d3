"""Privacy-preserving intensity standardization across centers.

Each center reduces its images to one histogram aggregate (a sum of
per-image, mass-1 histograms over shared bins). The server averages the
aggregates into a reference histogram, weighting every image equally, and
extracts percentile landmarks. Images are then standardized by a monotone
piecewise-linear map sending their own landmarks onto the reference ones,
followed by a [0,1] rescale. No subject-level data ever crosses the
center boundary: only (bin_edges, counts, sample_count) triples do.
"""

from __future__ import annotations

import enum
import json
from dataclasses import dataclass, replace

import numpy as np

from .phantom import Volume

LANDMARK_PERCENTILES = (1, 10, 20, 30, 40, 50, 60, 70, 80, 90, 99)
DEFAULT_BIN_COUNT = 256


class Region(enum.Enum):
    WHOLE_IMAGE = "whole_image"
    MASK_ONLY = "mask_only"


@dataclass(frozen=True)
class HistogramAggregate:
    center_id: str
    bin_edges: np.ndarray  # B+1 ascending reals
    counts: np.ndarray  # B nonneg reals; sum of per-image mass-1 histograms
    sample_count: int  # N_k, number of images folded in

    def __post_init__(self):
        edges = np.ascontiguousarray(self.bin_edges, dtype=np.float64)
        counts = np.ascontiguousarray(self.counts, dtype=np.float64)
        if edges.ndim != 1 or counts.ndim != 1 or len(edges) != len(counts) + 1:
            raise ValueError("need B+1 bin edges for B counts")
        if np.any(np.diff(edges) <= 0):
            raise ValueError("bin edges must be strictly ascending")
        if np.any(counts < 0):
            raise ValueError("counts must be nonnegative")
        if self.sample_count < 0:
            raise ValueError("sample_count must be nonnegative")
        if abs(counts.sum() - self.sample_count) > 1e-6 * max(1, self.sample_count):
            raise ValueError("counts must sum to the number of mass-1 histograms")
        edges.setflags(write=False)
        counts.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "counts", counts)


@dataclass(frozen=True)
class ReferenceHistogram:
    bin_edges: np.ndarray
    density: np.ndarray  # B nonneg reals summing to 1
    landmarks: tuple  # of (percentile, intensity), nondecreasing intensities

    def __post_init__(self):
        edges = np.ascontiguousarray(self.bin_edges, dtype=np.float64)
        dens = np.ascontiguousarray(self.density, dtype=np.float64)
        if len(edges) != len(dens) + 1:
            raise ValueError("need B+1 bin edges for B density values")
        if abs(dens.sum() - 1.0) > 1e-9:
            raise ValueError("density must sum to 1")
        values = [v for _, v in self.landmarks]
        if any(b < a for a, b in zip(values, values[1:])):
            raise ValueError("landmarks must be nondecreasing")
        edges.setflags(write=False)
        dens.setflags(write=False)
        object.__setattr__(self, "bin_edges", edges)
        object.__setattr__(self, "density", dens)
        object.__setattr__(self, "landmarks", tuple((float(p), float(v)) for p, v in self.landmarks))

    def landmark_values(self) -> np.ndarray:
        return np.array([v for _, v in self.landmarks])


def uniform_bin_edges(lo: float, hi: float, n_bins: int = DEFAULT_BIN_COUNT) -> np.ndarray:
    if not hi > lo:
        raise ValueError("need hi > lo for histogram bins")
    return np.linspace(lo, hi, n_bins + 1)


def _region_values(volume: Volume, region: Region) -> np.ndarray:
    if region is Region.WHOLE_IMAGE:
        return volume.intensities.ravel()
    if region is Region.MASK_ONLY:
        vals = volume.intensities[volume.mask > 0]
        if vals.size == 0:
            raise ValueError("mask selects no voxels")
        return vals
    raise ValueError(f"unknown region {region!r}")


def intensity_range(volumes, region: Region) -> tuple[float, float]:
    """Scalar (min, max) over a set of volumes; safe to share across centers."""
    lo = np.inf
    hi = -np.inf
    for vol in volumes:
        vals = _region_values(vol, region)
        lo = min(lo, float(vals.min()))
        hi = max(hi, float(vals.max()))
    return lo, hi


def subject_histogram(volume: Volume, region: Region, bin_edges) -> np.ndarray:
    """Mass-1 histogram of the selected voxels over shared bins.

    Values outside the bin range are clamped into the boundary bins so every
    voxel contributes and the total mass is exactly 1.
    """
    edges = np.asarray(bin_edges, dtype=np.float64)
    vals = np.clip(_region_values(volume, region), edges[0], edges[-1])
    counts, _ = np.histogram(vals, bins=edges)
    return counts / vals.size


def center_aggregate(center_id: str, volumes, region: Region, bin_edges) -> HistogramAggregate:
    """Sum of the center's per-image histograms; the only summary it shares."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    counts = np.zeros(len(edges) - 1)
    n = 0
    for vol in volumes:
        counts += subject_histogram(vol, region, edges)
        n += 1
    if n == 0:
        raise ValueError("center has no volumes to aggregate")
    return HistogramAggregate(center_id, edges, counts, n)


def merge_aggregates(a: HistogramAggregate, b: HistogramAggregate) -> HistogramAggregate:
    """Monoid merge for parallel reduction over chunks of one center's images."""
    if a.center_id != b.center_id:
        raise ValueError("can only merge aggregates of the same center")
    if not np.array_equal(a.bin_edges, b.bin_edges):
        raise ValueError("bin edges differ")
    return HistogramAggregate(
        a.center_id, a.bin_edges, a.counts + b.counts, a.sample_count + b.sample_count
    )


def _percentiles_from_density(edges: np.ndarray, density: np.ndarray, percentiles) -> np.ndarray:
    """Inverse CDF of a binned density, linear within bins."""
    cdf = np.concatenate([[0.0], np.cumsum(density)])
    cdf /= cdf[-1]
    out = np.empty(len(percentiles))
    for i, p in enumerate(percentiles):
        q = p / 100.0
        j = int(np.searchsorted(cdf, q, side="left"))
        if j <= 0:
            out[i] = edges[0]
        elif j >= len(cdf):
            out[i] = edges[-1]
        else:
            span = cdf[j] - cdf[j - 1]
            frac = 0.0 if span == 0.0 else (q - cdf[j - 1]) / span
            out[i] = edges[j - 1] + frac * (edges[j] - edges[j - 1])
    return out


def average_histogram(aggregates) -> ReferenceHistogram:
    """Image-mass-weighted mean of all centers' histograms, plus landmarks.

    Every image carries weight 1/N with N the total image count, so a center
    with N_k images contributes mass N_k/N. Summation runs in ascending
    center_id order for bit-reproducibility.
    """
    aggs = sorted(aggregates, key=lambda a: a.center_id)
    if not aggs:
        raise ValueError("no aggregates to average")
    edges = aggs[0].bin_edges
    for a in aggs[1:]:
        if not np.array_equal(a.bin_edges, edges):
            raise ValueError("aggregates must share bin edges")
    total = sum(a.sample_count for a in aggs)
    if total <= 0:
        raise ValueError("total sample count is zero")
    mass = np.zeros(len(edges) - 1)
    for a in aggs:
        mass += a.counts
    density = mass / mass.sum()
    marks = _percentiles_from_density(edges, density, LANDMARK_PERCENTILES)
    landmarks = tuple(zip((float(p) for p in LANDMARK_PERCENTILES), marks.tolist()))
    return ReferenceHistogram(edges, density, landmarks)


def _image_landmarks(values: np.ndarray) -> np.ndarray:
    return np.percentile(values, LANDMARK_PERCENTILES)


def match_histogram(volume: Volume, reference: ReferenceHistogram, region: Region) -> Volume:
    """Monotone piecewise-linear map from the image's landmarks to the
    reference's; values beyond the 1st/99th percentile clamp to the mapped
    endpoints. Under MASK_ONLY the out-of-mask voxels are set to 0."""
    vals = _region_values(volume, region)
    src = _image_landmarks(vals)
    dst = reference.landmark_values()
    keep = np.concatenate([[True], np.diff(src) > 0])
    src, dst = src[keep], dst[keep]
    if len(src) < 2:
        raise ValueError("image region is constant; landmarks are degenerate")
    mapped_vals = np.interp(vals, src, dst)
    if region is Region.WHOLE_IMAGE:
        mapped = mapped_vals.reshape(volume.intensities.shape)
    else:
        mapped = np.zeros_like(volume.intensities)
        mapped[volume.mask > 0] = mapped_vals
    return replace(volume, intensities=mapped)


def rescale_unit(volume: Volume, region: Region) -> Volume:
    """Affine map of the region's intensities onto [0,1]; min to 0, max to 1."""
    vals = _region_values(volume, region)
    lo = float(vals.min())
    hi = float(vals.max())
    if not hi > lo:
        raise ValueError("region is constant; cannot rescale")
    if region is Region.WHOLE_IMAGE:
        out = (volume.intensities - lo) / (hi - lo)
    else:
        out = np.zeros_like(volume.intensities)
        sel = volume.mask > 0
        out[sel] = (volume.intensities[sel] - lo) / (hi - lo)
    return replace(volume, intensities=out)


# ---------------------------------------------------------------------------
# JSON serialization for audit and golden files


def reference_to_json(reference: ReferenceHistogram) -> str:
    payload = {
        "bin_edges": reference.bin_edges.tolist(),
        "density": reference.density.tolist(),
        "landmarks": [[p, v] for p, v in reference.landmarks],
    }
    return json.dumps(payload, indent=2)


def reference_from_json(text: str) -> ReferenceHistogram:
    payload = json.loads(text)
    return ReferenceHistogram(
        np.array(payload["bin_edges"]),
        np.array(payload["density"]),
        tuple((p, v) for p, v in payload["landmarks"]),
    )
