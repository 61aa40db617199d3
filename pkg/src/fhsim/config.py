"""Experiment configuration: typed cells, the TOML schema, grid expansion.

A config file describes one experiment *grid*; each combination of
(framework, scheme, tier, prior) becomes an ExperimentConfig cell. All
other keys are shared across cells. Unknown keys are errors so a typo can
never silently change an experiment.

Schema (all keys optional, defaults shown in ExperimentConfig):

    name = "demo"
    output_dir = "runs/demo"

    [grid]
    framework = ["cds", "fl", "fl-ev"]
    scheme    = ["ccv", "lco"]
    tier      = ["none", "basic", "shape", "shape-intensity"]
    prior     = ["baseline", "masked", "per-structure"]

    [data]
    dataset_seed = 11
    dataset_dir  = ""        # read volumes from disk instead of generating

    [[data.center]]          # explicit roster; omit for the built-in one
    center_id = "center_a"
    n_subjects = 23
    class_balance = 0.5217
    intensity_offset = 0.2
    intensity_scale = 1.0
    noise_sigma = 0.02
    spacing = [1.5, 1.5, 6.0]
    myo_thickness_nor = [6.6, 1.25]
    myo_thickness_hcm = [8.3, 1.3]
    grid_shape = [48, 48, 10]         # optional
    hcm_myo_contrast = 0.0            # optional per-center pathology shading
    hcm_contraction_deficit = 0.0     # optional per-center HCM motion deficit
    hcm_rv_scale = 0.0                # optional per-center HCM RV remodeling
    anatomy_scale = 1.0               # optional population body-size factor

    [preprocess]
    target_spacing = [2.5, 2.5, 7.0]
    crop_window = [32, 32, 8]
    harmonize = true
    region = "mask-only"     # or "whole-image"
    n_bins = 256

    [model]
    kind = "mlp"             # or "logistic"
    hidden_width = 24
    downsample_factor = 2

    [training]
    learning_rate = 0.2
    max_epochs = 100
    patience = 10
    iterations_per_round = 7
    apply_probability = 0.5

    [seeds]
    split = 202
    experiment = 303
    repeats = [0, 1, 2, 3, 4]

The environment variable FHSIM_SEED, when set, replaces the repeat list
with that single seed (smoke-test mode).
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import MISSING, dataclass, fields

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from .augmentation import AugmentationPolicy, AugmentationTier
from .harmonization import Region
from .model import ModelSpec, TrainerConfig
from .phantom import CenterProfile, Prior, default_profiles, load_dataset, load_manifest
from .preprocess import PipelineConfig

FRAMEWORK_CDS = "cds"
FRAMEWORK_FL = "fl"
FRAMEWORK_FL_EV = "fl-ev"
FRAMEWORKS = (FRAMEWORK_CDS, FRAMEWORK_FL, FRAMEWORK_FL_EV)
SCHEMES = ("ccv", "lco")
MODEL_KINDS = ("logistic", "mlp")
SEED_ENV_VAR = "FHSIM_SEED"


def _token(value: str) -> str:
    """Config tokens are hyphenated; enum values use underscores."""
    return str(value).strip().lower().replace("-", "_")


def _tier_of(token: str) -> AugmentationTier:
    try:
        return AugmentationTier(_token(token))
    except ValueError:
        raise ValueError(f"unknown tier {token!r}") from None


def _prior_of(token: str) -> Prior:
    try:
        return Prior(_token(token))
    except ValueError:
        raise ValueError(f"unknown prior {token!r}") from None


def _region_of(token: str) -> Region:
    try:
        return Region(_token(token))
    except ValueError:
        raise ValueError(f"unknown region {token!r}") from None


@dataclass(frozen=True)
class ExperimentConfig:
    """One grid cell plus everything shared by all cells."""

    framework: str = FRAMEWORK_FL
    scheme: str = "ccv"
    tier: str = "none"
    prior: str = "masked"
    name: str = "default"
    # data
    dataset_seed: int = 11
    dataset_dir: str = ""
    profiles: tuple = ()  # () selects the built-in roster
    # preprocessing
    target_spacing: tuple = (2.5, 2.5, 7.0)
    crop_window: tuple = (32, 32, 8)
    harmonize: bool = True
    region: str = "mask-only"
    n_bins: int = 256
    # model
    model: str = "mlp"
    hidden_width: int = 24
    downsample_factor: int = 2
    # training
    learning_rate: float = 0.2
    max_epochs: int = 100
    patience: int = 10
    iterations_per_round: int = 7
    apply_probability: float = 0.5
    # seeds
    split_seed: int = 202
    experiment_seed: int = 303
    repeat_seeds: tuple = (0, 1, 2, 3, 4)

    def __post_init__(self):
        if self.framework not in FRAMEWORKS:
            raise ValueError(f"unknown framework {self.framework!r}; expected one of {FRAMEWORKS}")
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        _tier_of(self.tier)
        _prior_of(self.prior)
        _region_of(self.region)
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {self.model!r}")
        if not self.repeat_seeds:
            raise ValueError("repeat_seeds must not be empty")
        if len(set(self.repeat_seeds)) != len(self.repeat_seeds):
            raise ValueError("repeat_seeds must be distinct")
        object.__setattr__(self, "profiles", tuple(self.profiles))
        object.__setattr__(self, "repeat_seeds", tuple(int(s) for s in self.repeat_seeds))
        object.__setattr__(self, "target_spacing", tuple(float(s) for s in self.target_spacing))
        object.__setattr__(self, "crop_window", tuple(int(w) for w in self.crop_window))
        # fail fast on bad numeric combinations
        self.pipeline()
        self.model_spec()
        self.trainer()

    # -- typed views ---------------------------------------------------------

    def tier_enum(self) -> AugmentationTier:
        return _tier_of(self.tier)

    def prior_enum(self) -> Prior:
        return _prior_of(self.prior)

    def pipeline(self) -> PipelineConfig:
        return PipelineConfig(
            target_spacing=self.target_spacing,
            crop_window=self.crop_window,
            harmonize=self.harmonize,
            region=_region_of(self.region),
            n_bins=self.n_bins,
            prior=self.prior_enum(),
        )

    def model_spec(self) -> ModelSpec:
        return ModelSpec(
            kind=self.model,
            input_shape=(3,) + self.crop_window,
            hidden_width=self.hidden_width if self.model == "mlp" else 0,
            downsample_factor=self.downsample_factor,
        )

    def trainer(self) -> TrainerConfig:
        return TrainerConfig(
            learning_rate=self.learning_rate,
            max_epochs=self.max_epochs,
            patience=self.patience,
            iterations_per_round=self.iterations_per_round,
            seed=self.experiment_seed,
        )

    def policy(self) -> AugmentationPolicy:
        return AugmentationPolicy(self.tier_enum(), self.apply_probability)

    def center_profiles(self) -> tuple:
        return self.profiles if self.profiles else tuple(default_profiles())

    def load_datasets(self) -> list:
        """Materialize the center datasets this config describes."""
        from .phantom import generate_center

        if self.dataset_dir:
            profiles, _ = load_manifest(self.dataset_dir)
            return [load_dataset(self.dataset_dir, p.center_id) for p in profiles]
        return [generate_center(p, self.dataset_seed) for p in self.center_profiles()]

    def cell_id(self) -> str:
        return f"{self.framework}-{self.scheme}-{self.tier}-{self.prior}"

    def fingerprint(self) -> str:
        """Stable digest of everything that determines the outputs."""
        payload = {}
        for f in fields(self):
            value = getattr(self, f.name)
            if f.name == "profiles":
                value = [
                    {pf.name: getattr(p, pf.name) for pf in fields(CenterProfile)}
                    for p in self.center_profiles()
                ]
            payload[f.name] = value
        blob = json.dumps(payload, sort_keys=True, default=list)
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:16]


@dataclass(frozen=True)
class RunPlan:
    """Everything `run` needs: the output directory and the grid cells."""

    output_dir: str
    cells: tuple  # of ExperimentConfig

    def __post_init__(self):
        if not self.cells:
            raise ValueError("run plan has no cells")


def _require_keys(table: dict, allowed, where: str):
    unknown = sorted(set(table) - set(allowed))
    if unknown:
        raise ValueError(f"unknown key {where}.{unknown[0]!r} (allowed: {sorted(allowed)})")


def _profile_from_table(table: dict, index: int) -> CenterProfile:
    where = f"data.center[{index}]"
    allowed = {f.name for f in fields(CenterProfile)}
    optional = {f.name for f in fields(CenterProfile) if f.default is not MISSING}
    _require_keys(table, allowed, where)
    missing = sorted(allowed - optional - set(table))
    if missing:
        raise ValueError(f"{where} is missing key {missing[0]!r}")
    kwargs = dict(table)
    for key in ("spacing", "myo_thickness_nor", "myo_thickness_hcm", "grid_shape"):
        if key in kwargs:
            kwargs[key] = tuple(kwargs[key])
    return CenterProfile(**kwargs)


_GRID_KEYS = ("framework", "scheme", "tier", "prior")


def parse_config(text: str) -> RunPlan:
    """Parse a TOML config document into the expanded grid of cells."""
    doc = tomllib.loads(text)
    _require_keys(doc, {"name", "output_dir", "grid", "data", "preprocess",
                        "model", "training", "seeds"}, "config")

    name = doc.get("name", "default")
    output_dir = doc.get("output_dir", os.path.join("runs", name))

    grid = dict(doc.get("grid", {}))
    _require_keys(grid, _GRID_KEYS, "grid")
    axes = {}
    for key, fallback in zip(_GRID_KEYS, ("fl", "ccv", "none", "masked")):
        values = grid.get(key, [fallback])
        if isinstance(values, str):
            values = [values]
        if not values:
            raise ValueError(f"grid.{key} must not be empty")
        if len(set(values)) != len(values):
            raise ValueError(f"grid.{key} has duplicate entries")
        axes[key] = [str(v) for v in values]

    shared = {"name": name}

    data = dict(doc.get("data", {}))
    _require_keys(data, {"dataset_seed", "dataset_dir", "center"}, "data")
    if "dataset_seed" in data:
        shared["dataset_seed"] = int(data["dataset_seed"])
    if "dataset_dir" in data:
        shared["dataset_dir"] = str(data["dataset_dir"])
    centers = data.get("center", [])
    if centers:
        shared["profiles"] = tuple(
            _profile_from_table(t, i) for i, t in enumerate(centers)
        )

    pre = dict(doc.get("preprocess", {}))
    _require_keys(pre, {"target_spacing", "crop_window", "harmonize", "region", "n_bins"},
                  "preprocess")
    if "target_spacing" in pre:
        shared["target_spacing"] = tuple(pre["target_spacing"])
    if "crop_window" in pre:
        shared["crop_window"] = tuple(pre["crop_window"])
    if "harmonize" in pre:
        shared["harmonize"] = bool(pre["harmonize"])
    if "region" in pre:
        shared["region"] = str(pre["region"])
    if "n_bins" in pre:
        shared["n_bins"] = int(pre["n_bins"])

    model = dict(doc.get("model", {}))
    _require_keys(model, {"kind", "hidden_width", "downsample_factor"}, "model")
    if "kind" in model:
        shared["model"] = str(model["kind"])
    if "hidden_width" in model:
        shared["hidden_width"] = int(model["hidden_width"])
    if "downsample_factor" in model:
        shared["downsample_factor"] = int(model["downsample_factor"])

    training = dict(doc.get("training", {}))
    _require_keys(training, {"learning_rate", "max_epochs", "patience",
                             "iterations_per_round", "apply_probability"}, "training")
    if "learning_rate" in training:
        shared["learning_rate"] = float(training["learning_rate"])
    if "max_epochs" in training:
        shared["max_epochs"] = int(training["max_epochs"])
    if "patience" in training:
        shared["patience"] = int(training["patience"])
    if "iterations_per_round" in training:
        shared["iterations_per_round"] = int(training["iterations_per_round"])
    if "apply_probability" in training:
        shared["apply_probability"] = float(training["apply_probability"])

    seeds = dict(doc.get("seeds", {}))
    _require_keys(seeds, {"split", "experiment", "repeats"}, "seeds")
    if "split" in seeds:
        shared["split_seed"] = int(seeds["split"])
    if "experiment" in seeds:
        shared["experiment_seed"] = int(seeds["experiment"])
    if "repeats" in seeds:
        shared["repeat_seeds"] = tuple(int(s) for s in seeds["repeats"])

    env_seed = os.environ.get(SEED_ENV_VAR)
    if env_seed is not None:
        shared["repeat_seeds"] = (int(env_seed),)

    cells = []
    for framework in axes["framework"]:
        for scheme in axes["scheme"]:
            for tier in axes["tier"]:
                for prior in axes["prior"]:
                    cells.append(ExperimentConfig(
                        framework=framework, scheme=scheme, tier=tier,
                        prior=prior, **shared,
                    ))
    return RunPlan(output_dir=output_dir, cells=tuple(cells))


def load_config(path) -> RunPlan:
    with open(path, "rb") as fh:
        text = fh.read().decode("utf-8")
    try:
        return parse_config(text)
    except ValueError as err:
        raise ValueError(f"{path}: {err}") from None
