"""Round-based training orchestration.

One round = every participating node trains locally for a fixed number of
SGD iterations, the orchestrator aggregates the returned parameter vectors,
and the new global model is scored on the pooled validation split. Training
stops at max_epochs or when validation AUC stagnates for `patience` rounds;
the best-validation model is reported.

The pooled central-data-sharing baseline runs through the same engine as a
single node holding the union of the training data, with its per-round
iteration count scaled by K so both frameworks take the same number of SGD
steps per epoch.

Privacy boundary: the orchestrator sees nodes only through the
TrainingCenter protocol, whose payloads are parameter vectors, sample
counts, and scalar losses. Validation scoring happens behind an opaque
scalar-returning callable, so no subject-level data reaches this module.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Protocol, runtime_checkable

import numpy as np

from .aggregation import CenterUpdate, WeightScheme, aggregate
from .model import ModelSpec, ParameterVector, TrainerConfig, init_parameters
from .seeding import derive_int

CDS = "cds"
STAGNATION_TOLERANCE = 1e-9


@runtime_checkable
class TrainingCenter(Protocol):
    """What the orchestrator is allowed to ask of a center."""

    @property
    def center_id(self) -> str: ...

    @property
    def sample_count(self) -> int: ...

    def train_round(self, params: ParameterVector, round_index: int) -> CenterUpdate: ...

    def train_loss(self, params: ParameterVector) -> float: ...


@dataclass(frozen=True)
class Federation:
    centers: tuple  # of TrainingCenter
    scheme: object  # a WeightScheme, or CDS for the pooled baseline
    trainer: TrainerConfig
    model_spec: ModelSpec

    def __post_init__(self):
        if len(self.centers) < 1:
            raise ValueError("federation needs at least one center")
        ids = [c.center_id for c in self.centers]
        if len(set(ids)) != len(ids):
            raise ValueError("center ids must be unique")
        if self.scheme is not CDS and not isinstance(self.scheme, WeightScheme):
            raise ValueError(f"scheme must be a WeightScheme or CDS, got {self.scheme!r}")
        if self.scheme is CDS and len(self.centers) != 1:
            raise ValueError("the pooled baseline runs as exactly one node")
        object.__setattr__(self, "centers", tuple(self.centers))


@dataclass(frozen=True)
class RoundLog:
    round_index: int
    global_params: ParameterVector
    per_center_train_loss: dict
    validation_score: float

    def __post_init__(self):
        if not 0.0 <= self.validation_score <= 1.0:
            raise ValueError("validation_score must be in [0, 1]")


def batch_size_for(center_size: int, iterations: int) -> int:
    """Smallest batch size that parses the center within `iterations` batches."""
    if center_size < 1 or iterations < 1:
        raise ValueError("center_size and iterations must be >= 1")
    return -(-center_size // iterations)


def batch_plan(order, iterations: int) -> list:
    """Split a shuffled index order into `iterations` equal batches.

    When the size does not divide evenly, the tail batch wraps around to the
    start of the order so every batch is full.
    """
    n = len(order)
    size = batch_size_for(n, iterations)
    return [
        [order[(i * size + j) % n] for j in range(size)]
        for i in range(iterations)
    ]


def run_rounds(
    federation: Federation,
    scorer,
    initial_params: ParameterVector,
    start_round: int = 0,
    log_sink=None,
) -> tuple[ParameterVector, list[RoundLog]]:
    """Train until stagnation or the epoch cap; return the best-scoring model.

    The per-round state is Markov: round t+1 depends only on the global
    params after round t and each node's (data, key, round index), which is
    what makes checkpoint-resume via `start_round` exact.
    """
    weight_scheme = (
        WeightScheme.SAMPLE_PROPORTIONAL if federation.scheme is CDS else federation.scheme
    )
    trainer = federation.trainer
    params = initial_params
    logs: list[RoundLog] = []
    best_params = initial_params
    best_score = -np.inf
    stagnation = 0
    for round_index in range(start_round, trainer.max_epochs):
        updates = [node.train_round(params, round_index) for node in federation.centers]
        params = aggregate(updates, weight_scheme)
        losses = {
            node.center_id: float(node.train_loss(params)) for node in federation.centers
        }
        score = float(scorer(params))
        log = RoundLog(round_index, params, losses, score)
        logs.append(log)
        if log_sink is not None:
            log_sink(log)
        if score > best_score + STAGNATION_TOLERANCE:
            best_score = score
            best_params = params
            stagnation = 0
        else:
            stagnation += 1
            if stagnation >= trainer.patience:
                break
    return best_params, logs


def initial_parameters(federation: Federation, run_key: tuple) -> ParameterVector:
    """The identical model distributed to every center at round zero.

    The key deliberately excludes the framework name, so a federated run and
    a pooled run over the same (fold, seed) start from the same vector.
    """
    return init_parameters(federation.model_spec, derive_int(*run_key, "init"))


def run_federated(
    federation: Federation, scorer, run_key: tuple, log_sink=None
) -> tuple[ParameterVector, list[RoundLog]]:
    if federation.scheme is CDS:
        raise ValueError("run_federated expects a WeightScheme federation")
    return run_rounds(federation, scorer, initial_parameters(federation, run_key), log_sink=log_sink)


def run_cds(
    federation: Federation, scorer, run_key: tuple, log_sink=None
) -> tuple[ParameterVector, list[RoundLog]]:
    if federation.scheme is not CDS:
        raise ValueError("run_cds expects a CDS federation")
    return run_rounds(federation, scorer, initial_parameters(federation, run_key), log_sink=log_sink)


def jsonl_log_sink(fh):
    """Round-log stream: one JSON record per line (params omitted)."""

    def sink(log: RoundLog):
        record = {
            "round": log.round_index,
            "validation_score": log.validation_score,
            "per_center_train_loss": dict(sorted(log.per_center_train_loss.items())),
            "param_count": len(log.global_params),
        }
        fh.write(json.dumps(record) + "\n")

    return sink
