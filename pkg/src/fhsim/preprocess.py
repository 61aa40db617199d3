"""Per-center data preparation and the restricted training node.

A CenterSite owns one center's raw volumes. Everything subject-level stays
inside it; what leaves is either an aggregate (scalar intensity range, a
histogram aggregate, parameter vectors, scalar losses) or — for the
simulation harness only — per-sample prediction scores used to compute AUC.

The per-fold pipeline is: resample to common spacing, crop around the mask,
optionally match to the cross-center reference histogram, rescale to [0,1],
induce the channel prior, and flatten through the model's pooling stage.
Training-time augmentation draws fresh parameters per (sample, round) and
re-runs the pooling stage for transformed samples only.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .aggregation import CenterUpdate
from .augmentation import AugmentationPolicy, AugmentationTier, apply_sample, draw_sample
from .evaluation import Fold, auc
from .federation import batch_plan
from .harmonization import (
    HistogramAggregate,
    ReferenceHistogram,
    Region,
    average_histogram,
    center_aggregate,
    intensity_range,
    match_histogram,
    rescale_unit,
    uniform_bin_edges,
)
from .model import (
    ModelSpec,
    TrainerConfig,
    featurize,
    forward_features,
    gradient_features,
    loss_features,
    sgd_step,
)
from .phantom import CenterDataset, Prior, crop, induce_prior, resample
from .seeding import derive_rng


@dataclass(frozen=True)
class PipelineConfig:
    target_spacing: tuple = (2.5, 2.5, 7.0)
    crop_window: tuple = (32, 32, 8)
    harmonize: bool = True
    region: Region = Region.MASK_ONLY
    n_bins: int = 256
    prior: Prior = Prior.MASKED

    def __post_init__(self):
        if any(s <= 0 for s in self.target_spacing):
            raise ValueError("target_spacing must be positive")
        if any(w < 1 for w in self.crop_window):
            raise ValueError("crop_window must be positive")
        if self.n_bins < 2:
            raise ValueError("n_bins must be >= 2")


@dataclass
class SampleSet:
    """One split's network-ready samples, in canonical (subject, timepoint) order."""

    features: np.ndarray  # (n, n_features)
    labels: np.ndarray  # (n,)
    subject_ids: list
    timepoints: list
    channels: np.ndarray | None = None  # (n, 3, x, y, z); kept only for augmentation
    masks: np.ndarray | None = None  # (n, x, y, z)

    def __len__(self) -> int:
        return len(self.labels)


@dataclass(frozen=True)
class FoldMaterials:
    center_id: str
    train: SampleSet
    validation: SampleSet
    test: SampleSet


class CenterSite:
    """Private holder of one center's volumes plus its shareable aggregates."""

    def __init__(self, dataset: CenterDataset, pipeline: PipelineConfig):
        self._dataset = dataset
        self._pipeline = pipeline
        self._prepared = None

    @property
    def center_id(self) -> str:
        return self._dataset.center_id

    def subject_ids(self) -> list:
        return sorted(ed.subject_id for ed, _ in self._dataset.subjects)

    def subject_labels(self) -> dict:
        return {ed.subject_id: ed.label for ed, _ in self._dataset.subjects}

    def _prepare(self) -> list:
        """Resample + crop every volume once; fold-independent."""
        if self._prepared is None:
            out = []
            for vol in self._dataset.volumes():
                out.append(crop(resample(vol, self._pipeline.target_spacing),
                                self._pipeline.crop_window))
            out.sort(key=lambda v: (v.subject_id, v.timepoint))
            self._prepared = out
        return self._prepared

    # -- aggregate queries (safe to cross the center boundary) --------------

    def scalar_range(self) -> tuple:
        return intensity_range(self._prepare(), self._pipeline.region)

    def histogram_aggregate(self, bin_edges) -> HistogramAggregate:
        return center_aggregate(self.center_id, self._prepare(),
                                self._pipeline.region, bin_edges)

    # -- harness-side fold preparation ---------------------------------------

    def fold_materials(
        self,
        fold: Fold,
        reference: ReferenceHistogram | None,
        model_spec: ModelSpec,
        keep_channels: bool = False,
    ) -> FoldMaterials:
        pipeline = self._pipeline
        groups = {"train": [], "validation": [], "test": []}
        for vol in self._prepare():
            if vol.subject_id in fold.train:
                group = "train"
            elif vol.subject_id in fold.validation:
                group = "validation"
            elif vol.subject_id in fold.test:
                group = "test"
            else:
                raise ValueError(f"subject {vol.subject_id!r} missing from fold")
            if reference is not None:
                vol = match_histogram(vol, reference, pipeline.region)
            vol = rescale_unit(vol, pipeline.region)
            groups[group].append(vol)

        def build(volumes, with_channels):
            if not volumes:
                d = model_spec.n_features
                return SampleSet(np.empty((0, d)), np.empty(0, dtype=np.int64), [], [])
            chans = [induce_prior(v, pipeline.prior) for v in volumes]
            feats = featurize(model_spec, chans)
            labels = np.array([v.label for v in volumes], dtype=np.int64)
            sids = [v.subject_id for v in volumes]
            tps = [v.timepoint for v in volumes]
            if with_channels:
                return SampleSet(feats, labels, sids, tps,
                                 channels=np.stack(chans),
                                 masks=np.stack([v.mask for v in volumes]))
            return SampleSet(feats, labels, sids, tps)

        return FoldMaterials(
            self.center_id,
            build(groups["train"], keep_channels),
            build(groups["validation"], False),
            build(groups["test"], False),
        )


def training_center_ids(sites, fold: Fold) -> list:
    """Centers holding at least one training subject, ascending id."""
    out = []
    for site in sorted(sites, key=lambda s: s.center_id):
        if any(sid in fold.train for sid in site.subject_ids()):
            out.append(site.center_id)
    return out


def build_reference(sites, fold: Fold, pipeline: PipelineConfig) -> ReferenceHistogram | None:
    """Average histogram over all images of the fold's training centers.

    Under leave-center-out the held-out center has no training subjects, so
    it is structurally absent from the aggregate list. Returns None when
    harmonization is disabled.
    """
    if not pipeline.harmonize:
        return None
    by_id = {site.center_id: site for site in sites}
    train_ids = training_center_ids(sites, fold)
    if not train_ids:
        raise ValueError("no training centers in fold")
    ranges = [by_id[cid].scalar_range() for cid in train_ids]
    lo = min(r[0] for r in ranges)
    hi = max(r[1] for r in ranges)
    edges = uniform_bin_edges(lo, hi, pipeline.n_bins)
    aggregates = [by_id[cid].histogram_aggregate(edges) for cid in train_ids]
    return average_histogram(aggregates)


class CenterNode:
    """TrainingCenter implementation over one prepared training sample set."""

    def __init__(
        self,
        center_id: str,
        train_set: SampleSet,
        model_spec: ModelSpec,
        trainer: TrainerConfig,
        policy: AugmentationPolicy,
        run_key: tuple,
        iterations: int | None = None,
    ):
        if len(train_set) == 0:
            raise ValueError(f"center {center_id!r} has no training samples")
        if policy.tier is not AugmentationTier.NONE and train_set.channels is None:
            raise ValueError("augmentation requires channel data; build materials with keep_channels")
        self._center_id = center_id
        self._set = train_set
        self._spec = model_spec
        self._trainer = trainer
        self._policy = policy
        self._run_key = tuple(run_key)
        self._iterations = trainer.iterations_per_round if iterations is None else iterations
        self.augment_calls = 0

    @property
    def center_id(self) -> str:
        return self._center_id

    @property
    def sample_count(self) -> int:
        return len(self._set)

    def _features_for(self, idx: int, round_index: int, cache: dict) -> np.ndarray:
        if self._policy.tier is AugmentationTier.NONE:
            return self._set.features[idx]
        if idx in cache:
            return cache[idx]
        rng = derive_rng(
            *self._run_key, "aug",
            self._set.subject_ids[idx], self._set.timepoints[idx], round_index,
        )
        sample = draw_sample(self._policy, rng)
        if sample is None:
            row = self._set.features[idx]
        else:
            ch, mask = apply_sample(sample, self._set.channels[idx], self._set.masks[idx])
            row = featurize(self._spec, [ch])[0]
            self.augment_calls += 1
        cache[idx] = row
        return row

    def train_round(self, params, round_index: int) -> CenterUpdate:
        n = len(self._set)
        rng = derive_rng(*self._run_key, "shuffle", self._center_id, round_index)
        order = [int(i) for i in rng.permutation(n)]
        cache: dict = {}
        for batch in batch_plan(order, self._iterations):
            rows = np.stack([self._features_for(i, round_index, cache) for i in batch])
            labels = self._set.labels[batch]
            grad = gradient_features(self._spec, params, rows, labels)
            params = sgd_step(params, grad, self._trainer.learning_rate)
        return CenterUpdate(self._center_id, params, n)

    def train_loss(self, params) -> float:
        return loss_features(self._spec, params, self._set.features, self._set.labels)


def build_center_nodes(
    materials: dict,
    model_spec: ModelSpec,
    trainer: TrainerConfig,
    policy: AugmentationPolicy,
    run_key: tuple,
) -> list:
    """One node per center that has training data, ascending center id."""
    nodes = []
    for cid in sorted(materials):
        if len(materials[cid].train) > 0:
            nodes.append(CenterNode(cid, materials[cid].train, model_spec,
                                    trainer, policy, run_key))
    if not nodes:
        raise ValueError("no center has training data")
    return nodes


def _concat_sets(sets) -> SampleSet:
    sets = [s for s in sets if len(s) > 0]
    if not sets:
        raise ValueError("nothing to pool")
    channels = None
    masks = None
    if all(s.channels is not None for s in sets):
        channels = np.concatenate([s.channels for s in sets])
        masks = np.concatenate([s.masks for s in sets])
    return SampleSet(
        np.concatenate([s.features for s in sets]),
        np.concatenate([s.labels for s in sets]),
        [sid for s in sets for sid in s.subject_ids],
        [tp for s in sets for tp in s.timepoints],
        channels=channels,
        masks=masks,
    )


def build_pooled_node(
    materials: dict,
    model_spec: ModelSpec,
    trainer: TrainerConfig,
    policy: AugmentationPolicy,
    run_key: tuple,
) -> CenterNode:
    """The central-data-sharing node: union of all training data.

    Its id is the '+'-join of the contributing center ids and its per-round
    iteration count is K times the federated one, so with K=1 it is
    indistinguishable from the single federated node — same id, same sample
    order, same shuffle stream, same batch size.
    """
    contributing = [cid for cid in sorted(materials) if len(materials[cid].train) > 0]
    if not contributing:
        raise ValueError("no center has training data")
    pooled = _concat_sets([materials[cid].train for cid in contributing])
    pooled_id = "+".join(contributing)
    k = len(contributing)
    return CenterNode(pooled_id, pooled, model_spec, trainer, policy, run_key,
                      iterations=k * trainer.iterations_per_round)


def pooled_eval_set(materials: dict, which: str) -> SampleSet:
    """Validation or test samples pooled across centers in canonical order."""
    if which not in ("validation", "test"):
        raise ValueError("which must be 'validation' or 'test'")
    sets = [getattr(materials[cid], which) for cid in sorted(materials)]
    return _concat_sets(sets)


def make_auc_scorer(eval_set: SampleSet, model_spec: ModelSpec):
    """Opaque scalar scorer handed to the orchestrator for early stopping."""
    if len(eval_set) == 0:
        raise ValueError("no validation samples")

    def scorer(params) -> float:
        return auc(forward_features(model_spec, params, eval_set.features), eval_set.labels)

    return scorer


@dataclass(frozen=True)
class PredictionRecord:
    subject_id: str
    timepoint: str
    center_id: str
    label: int
    score: float


def prediction_records(materials: dict, params, model_spec: ModelSpec, which: str = "test"):
    """Per-sample scores for the harness's AUC bookkeeping."""
    records = []
    for cid in sorted(materials):
        sset = getattr(materials[cid], which)
        if len(sset) == 0:
            continue
        scores = forward_features(model_spec, params, sset.features)
        for sid, tp, label, score in zip(sset.subject_ids, sset.timepoints,
                                         sset.labels, scores):
            records.append(PredictionRecord(sid, tp, cid, int(label), float(score)))
    return records
