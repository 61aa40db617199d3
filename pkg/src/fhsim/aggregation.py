"""Combine per-center parameter vectors into a global model.

Two weighting schemes: sample-proportional averaging (each center weighted
n_k/n) and equal voting (each center weighted 1/K). Both run through one
weighted-sum path so that when all sample counts are equal the two schemes
produce bitwise-identical results.

Summation follows a fixed canonical order (ascending center_id), which makes
the result independent of how updates arrive from concurrent workers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .model import LayoutMismatchError, ParameterVector


class WeightScheme(enum.Enum):
    SAMPLE_PROPORTIONAL = "sample_proportional"
    EQUAL_VOTE = "equal_vote"


@dataclass(frozen=True)
class CenterUpdate:
    center_id: str
    params: ParameterVector
    sample_count: int

    def __post_init__(self):
        if not isinstance(self.sample_count, (int, np.integer)) or self.sample_count < 1:
            raise ValueError(f"sample_count must be a positive integer, got {self.sample_count!r}")


def _canonical(updates: list[CenterUpdate]) -> list[CenterUpdate]:
    if not updates:
        raise ValueError("aggregate requires at least one update")
    ids = [u.center_id for u in updates]
    if len(set(ids)) != len(ids):
        raise ValueError("duplicate center_id in updates")
    first = updates[0].params
    for u in updates[1:]:
        if u.params.layout_id != first.layout_id or len(u.params) != len(first):
            raise LayoutMismatchError(
                f"update layouts differ: {u.params.layout_id!r} vs {first.layout_id!r}"
            )
    return sorted(updates, key=lambda u: u.center_id)


def effective_weights(updates: list[CenterUpdate], scheme: WeightScheme) -> list[tuple[str, float]]:
    """Per-center convex weights in canonical (ascending center_id) order.

    Each weight is a single double-precision division (n_k/n or 1/K), never a
    pre-normalized running increment, so equal sample counts give exactly the
    equal-vote weights.
    """
    ordered = _canonical(updates)
    if scheme is WeightScheme.SAMPLE_PROPORTIONAL:
        total = sum(int(u.sample_count) for u in ordered)
        if total <= 0:
            raise ValueError("total sample count must be positive")
        return [(u.center_id, int(u.sample_count) / total) for u in ordered]
    if scheme is WeightScheme.EQUAL_VOTE:
        k = len(ordered)
        return [(u.center_id, 1.0 / k) for u in ordered]
    raise ValueError(f"unknown scheme {scheme!r}")


def aggregate(updates: list[CenterUpdate], scheme: WeightScheme) -> ParameterVector:
    """Weighted sum of parameter vectors under the given scheme."""
    ordered = _canonical(updates)
    weights = dict(effective_weights(ordered, scheme))
    if len(ordered) == 1:
        # degenerate K=1: the single vector unchanged, both schemes
        return ordered[0].params
    acc = np.zeros(len(ordered[0].params), dtype=np.float64)
    for u in ordered:
        acc += weights[u.center_id] * u.params.values
    return ParameterVector(acc, ordered[0].params.layout_id)
