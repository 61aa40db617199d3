"""Synthetic multi-center cardiac-like phantoms with controlled center shift.

Each subject is a pair of volumes (end-diastole, end-systole) built from
concentric ellipsoids: a blood-pool cavity (class 3) inside a myocardial
shell (class 2) whose thickness is class-conditional (hypertrophic subjects
get a thicker shell), plus an adjacent crescent (class 1) painted behind the
shell. Per-center intensity offset/scale/noise and voxel spacing induce
non-IID shift across centers.

Also provides the shared spatial transforms (resample, crop), the channel
priors fed to the classifiers, and a small binary volume container (.fhv).
"""

from __future__ import annotations

import enum
import json
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

from .kernels import nearest_sample, rasterize_phantom, trilinear_sample
from .seeding import derive_rng

LABEL_NOR = 0
LABEL_HCM = 1

CLASS_BACKGROUND = 0
CLASS_RV = 1
CLASS_MYO = 2
CLASS_LV = 3

# per-class base intensity before the center shift is applied
BASE_INTENSITY = np.array([0.1, 0.5, 0.35, 0.6], dtype=np.float64)

FHV_MAGIC = b"FHV1"


class GeometryError(ValueError):
    """Sampled anatomy does not fit the voxel grid."""


class Prior(enum.Enum):
    BASELINE = "baseline"
    MASKED = "masked"
    PER_STRUCTURE = "per_structure"


@dataclass(frozen=True)
class Volume:
    intensities: np.ndarray  # (x, y, z) float64
    mask: np.ndarray  # (x, y, z) uint8, values in {0, 1, 2, 3}
    spacing: tuple[float, float, float]  # mm per axis
    label: int
    center_id: str
    subject_id: str
    timepoint: str  # "ED" or "ES"

    def __post_init__(self):
        inten = np.ascontiguousarray(self.intensities, dtype=np.float64)
        mask = np.ascontiguousarray(self.mask, dtype=np.uint8)
        if inten.ndim != 3 or inten.shape != mask.shape:
            raise ValueError("intensities and mask must share a 3D shape")
        if mask.max(initial=0) > 3:
            raise ValueError("mask values must be in {0, 1, 2, 3}")
        if len(self.spacing) != 3 or any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be three positive reals")
        if self.label not in (LABEL_NOR, LABEL_HCM):
            raise ValueError(f"label must be 0 (NOR) or 1 (HCM), got {self.label}")
        if self.timepoint not in ("ED", "ES"):
            raise ValueError(f"timepoint must be 'ED' or 'ES', got {self.timepoint!r}")
        inten.setflags(write=False)
        mask.setflags(write=False)
        object.__setattr__(self, "intensities", inten)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.intensities.shape


@dataclass(frozen=True)
class CenterProfile:
    center_id: str
    n_subjects: int
    class_balance: float  # fraction of HCM subjects
    intensity_offset: float
    intensity_scale: float
    noise_sigma: float
    spacing: tuple[float, float, float]
    myo_thickness_nor: tuple[float, float]  # (mean, sd) in mm
    myo_thickness_hcm: tuple[float, float]
    grid_shape: tuple[int, int, int] = (48, 48, 10)
    # additive myocardial intensity shift for HCM subjects; sign and size
    # vary per center, modeling scanner-dependent pathology appearance
    hcm_myo_contrast: float = 0.0
    # reduction of end-systolic inward motion for HCM subjects; negative
    # values model hyperdynamic cohorts whose HCM hearts contract harder
    hcm_contraction_deficit: float = 0.0
    # fractional RV crescent enlargement for HCM subjects; cohorts differ in
    # how much right-sided remodeling accompanies the disease
    hcm_rv_scale: float = 0.0
    # population body-size factor applied to all anatomy drawn at this center
    anatomy_scale: float = 1.0

    def __post_init__(self):
        if self.n_subjects < 1:
            raise ValueError("n_subjects must be >= 1")
        if not 0.0 <= self.class_balance <= 1.0:
            raise ValueError("class_balance must be in [0, 1]")
        if self.intensity_scale <= 0:
            raise ValueError("intensity_scale must be positive")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be nonnegative")
        if any(s <= 0 for s in self.spacing):
            raise ValueError("spacing must be positive")
        if self.myo_thickness_nor[0] <= 0 or self.myo_thickness_hcm[0] <= 0:
            raise ValueError("thickness means must be positive")
        if self.myo_thickness_hcm[0] <= self.myo_thickness_nor[0]:
            raise ValueError("hcm thickness mean must exceed nor thickness mean")
        if not -0.25 <= self.hcm_contraction_deficit <= 0.25:
            raise ValueError("hcm_contraction_deficit must be in [-0.25, 0.25]")
        if not -0.3 <= self.hcm_rv_scale <= 0.3:
            raise ValueError("hcm_rv_scale must be in [-0.3, 0.3]")
        if not 0.7 <= self.anatomy_scale <= 1.4:
            raise ValueError("anatomy_scale must be in [0.7, 1.4]")


@dataclass(frozen=True)
class CenterDataset:
    center_id: str
    subjects: tuple  # of (ED Volume, ES Volume) pairs

    def __post_init__(self):
        for ed, es in self.subjects:
            if ed.label != es.label or ed.subject_id != es.subject_id:
                raise ValueError("ED/ES volumes of one subject must share label and id")
            if ed.center_id != self.center_id or es.center_id != self.center_id:
                raise ValueError("volume center_id does not match dataset")

    @property
    def sample_count(self) -> int:
        # the two timepoints are fed as separate network samples
        return 2 * len(self.subjects)

    def volumes(self) -> list[Volume]:
        out = []
        for ed, es in self.subjects:
            out.append(ed)
            out.append(es)
        return out


def _draw_geometry(profile: CenterProfile, rng, label: int):
    """One anatomy draw in mm; raise if it does not fit the grid."""
    nx, ny, nz = profile.grid_shape
    sx, sy, sz = profile.spacing
    ext = (nx * sx, ny * sy, nz * sz)
    body = profile.anatomy_scale

    cx = ext[0] / 2.0 + rng.uniform(-3.0, 3.0)
    cy = ext[1] / 2.0 + rng.uniform(-3.0, 3.0)
    cz = ext[2] / 2.0 + rng.uniform(-2.0, 2.0)

    cav_rx = max(6.0, rng.normal(10.0, 1.0)) * body
    cav_ry = max(5.5, rng.normal(9.0, 1.0)) * body
    cav_rz = max(9.0, rng.normal(13.0, 1.0)) * body

    mean, sd = profile.myo_thickness_hcm if label == LABEL_HCM else profile.myo_thickness_nor
    thickness = max(1.5, rng.normal(mean, sd)) * body

    outer = (cx, cy, cz, cav_rx + thickness, cav_ry + thickness, cav_rz + 0.6 * thickness)
    cavity = (cx, cy, cz, cav_rx, cav_ry, cav_rz)

    rv_cx = cx - (cav_rx + 0.5 * thickness)
    rv_factor = 1.0 + (profile.hcm_rv_scale if label == LABEL_HCM else 0.0)
    rv = (rv_cx, cy, cz, 0.9 * cav_rx * rv_factor,
          0.85 * (cav_ry + thickness) * rv_factor, 0.9 * cav_rz * rv_factor)

    for ell in (outer, rv):
        c = ell[:3]
        r = ell[3:]
        for axis in range(3):
            if c[axis] - r[axis] < 0.0 or c[axis] + r[axis] > ext[axis]:
                raise GeometryError(
                    f"ellipsoid extent [{c[axis] - r[axis]:.1f}, {c[axis] + r[axis]:.1f}] mm "
                    f"exceeds grid extent {ext[axis]:.1f} mm on axis {axis}"
                )
    contraction = rng.normal(0.30, 0.04)
    if label == LABEL_HCM:
        contraction -= profile.hcm_contraction_deficit
    contraction = float(np.clip(contraction, 0.08, 0.45))
    return cavity, outer, rv, contraction


def _sample_geometry(profile: CenterProfile, rng, label: int, tries: int = 50):
    """Rejection-sample anatomy that fits; keeps tail draws unclipped."""
    for _ in range(tries - 1):
        try:
            return _draw_geometry(profile, rng, label)
        except GeometryError:
            continue
    return _draw_geometry(profile, rng, label)


def _render(profile: CenterProfile, cavity, outer, rv, rng,
            label: int) -> tuple[np.ndarray, np.ndarray]:
    mask = rasterize_phantom(profile.grid_shape, profile.spacing, cavity, outer, rv)
    base = BASE_INTENSITY[mask]
    if label == LABEL_HCM and profile.hcm_myo_contrast != 0.0:
        base = base + profile.hcm_myo_contrast * (mask == 2)
    img = base * profile.intensity_scale + profile.intensity_offset
    if profile.noise_sigma > 0:
        img = img + rng.normal(0.0, profile.noise_sigma, size=img.shape)
    return img, mask


def generate_center(profile: CenterProfile, seed: int) -> CenterDataset:
    """Deterministically generate one center's subjects for a given seed."""
    n_hcm = int(round(profile.n_subjects * profile.class_balance))
    subjects = []
    for i in range(profile.n_subjects):
        label = LABEL_HCM if i < n_hcm else LABEL_NOR
        rng = derive_rng(seed, "phantom", profile.center_id, i)
        cavity, outer, rv, contraction = _sample_geometry(profile, rng, label)
        subject_id = f"{profile.center_id}_s{i:03d}"

        ed_img, ed_mask = _render(profile, cavity, outer, rv, rng, label)
        es_cavity = cavity[:3] + tuple(r * (1.0 - contraction) for r in cavity[3:])
        es_img, es_mask = _render(profile, es_cavity, outer, rv, rng, label)

        common = dict(
            spacing=profile.spacing,
            label=label,
            center_id=profile.center_id,
            subject_id=subject_id,
        )
        ed = Volume(ed_img, ed_mask, timepoint="ED", **common)
        es = Volume(es_img, es_mask, timepoint="ES", **common)
        subjects.append((ed, es))
    return CenterDataset(profile.center_id, tuple(subjects))


def default_profiles() -> list[CenterProfile]:
    """Four centers with a 23/35/12/20 subject imbalance and distinct shift."""
    common = dict(
        myo_thickness_nor=(6.6, 1.25),
        myo_thickness_hcm=(8.3, 1.3),
    )
    return [
        CenterProfile(
            "center_a", 23, 12 / 23, intensity_offset=0.20, intensity_scale=1.00,
            noise_sigma=0.020, spacing=(1.5, 1.5, 6.0), grid_shape=(48, 48, 10),
            hcm_myo_contrast=0.10, hcm_contraction_deficit=0.10,
            hcm_rv_scale=0.20, anatomy_scale=1.00, **common,
        ),
        CenterProfile(
            "center_b", 35, 17 / 35, intensity_offset=-0.20, intensity_scale=1.25,
            noise_sigma=0.035, spacing=(1.2, 1.2, 5.0), grid_shape=(60, 60, 12),
            hcm_myo_contrast=0.12, hcm_contraction_deficit=0.12,
            hcm_rv_scale=0.22, anatomy_scale=1.10, **common,
        ),
        CenterProfile(
            "center_c", 12, 6 / 12, intensity_offset=-0.20, intensity_scale=0.85,
            noise_sigma=0.028, spacing=(1.8, 1.8, 7.5), grid_shape=(40, 40, 8),
            hcm_myo_contrast=-0.15, hcm_contraction_deficit=0.08,
            hcm_rv_scale=-0.25, anatomy_scale=0.82, **common,
        ),
        CenterProfile(
            "center_d", 20, 10 / 20, intensity_offset=0.20, intensity_scale=1.10,
            noise_sigma=0.024, spacing=(1.5, 1.5, 5.0), grid_shape=(48, 48, 12),
            hcm_myo_contrast=0.04, hcm_contraction_deficit=0.08,
            hcm_rv_scale=0.18, anatomy_scale=1.04, **common,
        ),
    ]


# ---------------------------------------------------------------------------
# spatial transforms


def resample(volume: Volume, target_spacing) -> Volume:
    """Regrid to a new spacing: trilinear intensities, nearest-neighbor mask."""
    target = tuple(float(s) for s in target_spacing)
    if len(target) != 3 or any(s <= 0 for s in target):
        raise ValueError("target spacing must be three positive reals")
    src_shape = volume.shape
    out_shape = tuple(
        max(1, int(round(src_shape[a] * volume.spacing[a] / target[a]))) for a in range(3)
    )
    # index-space coordinates of output voxel centers, origin-aligned
    axes = [
        np.arange(out_shape[a], dtype=np.float64) * (target[a] / volume.spacing[a])
        for a in range(3)
    ]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    xs = np.ascontiguousarray(gx.ravel())
    ys = np.ascontiguousarray(gy.ravel())
    zs = np.ascontiguousarray(gz.ravel())
    inten = trilinear_sample(volume.intensities, xs, ys, zs, 0.0).reshape(out_shape)
    mask = nearest_sample(volume.mask, xs, ys, zs, 0).reshape(out_shape)
    return replace(volume, intensities=inten, mask=mask, spacing=target)


def mask_bbox_center(mask: np.ndarray) -> tuple[int, int, int]:
    """Floor of the midpoint of the non-zero bounding box, per axis."""
    nz = np.nonzero(mask)
    if nz[0].size == 0:
        raise ValueError("mask has no non-zero voxels")
    return tuple(int((int(ax.min()) + int(ax.max())) // 2) for ax in nz)


def crop(volume: Volume, window: tuple[int, int, int]) -> Volume:
    """Fixed-size window centered on the mask bounding box, zero-padded."""
    if any(w < 1 for w in window):
        raise ValueError("window must be positive")
    center = mask_bbox_center(volume.mask)
    inten = np.zeros(window, dtype=np.float64)
    mask = np.zeros(window, dtype=np.uint8)
    src_lo, src_hi, dst_lo, dst_hi = [], [], [], []
    for a in range(3):
        start = center[a] - window[a] // 2
        lo = max(start, 0)
        hi = min(start + window[a], volume.shape[a])
        if lo >= hi:
            src_lo.append(0), src_hi.append(0), dst_lo.append(0), dst_hi.append(0)
            continue
        src_lo.append(lo)
        src_hi.append(hi)
        dst_lo.append(lo - start)
        dst_hi.append(hi - start)
    src = tuple(slice(src_lo[a], src_hi[a]) for a in range(3))
    dst = tuple(slice(dst_lo[a], dst_hi[a]) for a in range(3))
    inten[dst] = volume.intensities[src]
    mask[dst] = volume.mask[src]
    return replace(volume, intensities=inten, mask=mask)


def induce_prior(volume: Volume, prior: Prior) -> np.ndarray:
    """Build the 3-channel network input for one volume."""
    img = volume.intensities
    if prior is Prior.BASELINE:
        return np.stack([img, img, img])
    if prior is Prior.MASKED:
        masked = img * (volume.mask > 0)
        return np.stack([masked, masked, masked])
    if prior is Prior.PER_STRUCTURE:
        return np.stack([img * (volume.mask == c) for c in (1, 2, 3)])
    raise ValueError(f"unknown prior {prior!r}")


# ---------------------------------------------------------------------------
# .fhv container and dataset directory layout

_TIMEPOINT_CODE = {"ED": 0, "ES": 1}
_TIMEPOINT_NAME = {0: "ED", 1: "ES"}


def write_fhv(volume: Volume, path) -> None:
    cid = volume.center_id.encode("utf-8")
    sid = volume.subject_id.encode("utf-8")
    if len(cid) > 0xFFFF or len(sid) > 0xFFFF:
        raise ValueError("identifier too long for container")
    with open(path, "wb") as fh:
        fh.write(FHV_MAGIC)
        fh.write(struct.pack("<3I", *volume.shape))
        fh.write(struct.pack("<3d", *volume.spacing))
        fh.write(struct.pack("<BB", volume.label, _TIMEPOINT_CODE[volume.timepoint]))
        fh.write(struct.pack("<H", len(cid)))
        fh.write(cid)
        fh.write(struct.pack("<H", len(sid)))
        fh.write(sid)
        fh.write(volume.intensities.astype("<f4").tobytes())
        fh.write(volume.mask.astype(np.uint8).tobytes())


def read_fhv(path) -> Volume:
    with open(path, "rb") as fh:
        if fh.read(4) != FHV_MAGIC:
            raise ValueError(f"{path}: not a volume container")
        shape = struct.unpack("<3I", fh.read(12))
        spacing = struct.unpack("<3d", fh.read(24))
        label, tp = struct.unpack("<BB", fh.read(2))
        (cid_len,) = struct.unpack("<H", fh.read(2))
        center_id = fh.read(cid_len).decode("utf-8")
        (sid_len,) = struct.unpack("<H", fh.read(2))
        subject_id = fh.read(sid_len).decode("utf-8")
        n = shape[0] * shape[1] * shape[2]
        inten = np.frombuffer(fh.read(4 * n), dtype="<f4").astype(np.float64).reshape(shape)
        mask = np.frombuffer(fh.read(n), dtype=np.uint8).reshape(shape)
    return Volume(inten, mask, spacing, label, center_id, subject_id, _TIMEPOINT_NAME[tp])


def save_dataset(dataset: CenterDataset, root) -> None:
    cdir = os.path.join(root, dataset.center_id)
    os.makedirs(cdir, exist_ok=True)
    for ed, es in dataset.subjects:
        write_fhv(ed, os.path.join(cdir, f"{ed.subject_id}_ED.fhv"))
        write_fhv(es, os.path.join(cdir, f"{es.subject_id}_ES.fhv"))


def load_dataset(root, center_id: str) -> CenterDataset:
    cdir = os.path.join(root, center_id)
    eds = {}
    ess = {}
    for name in sorted(os.listdir(cdir)):
        if not name.endswith(".fhv"):
            continue
        vol = read_fhv(os.path.join(cdir, name))
        (eds if vol.timepoint == "ED" else ess)[vol.subject_id] = vol
    if set(eds) != set(ess):
        raise ValueError(f"{center_id}: unpaired ED/ES volumes")
    subjects = tuple((eds[sid], ess[sid]) for sid in sorted(eds))
    return CenterDataset(center_id, subjects)


def save_manifest(profiles: list[CenterProfile], seed: int, root) -> None:
    payload = {
        "seed": seed,
        "centers": [
            {
                "center_id": p.center_id,
                "n_subjects": p.n_subjects,
                "class_balance": p.class_balance,
                "intensity_offset": p.intensity_offset,
                "intensity_scale": p.intensity_scale,
                "noise_sigma": p.noise_sigma,
                "spacing": list(p.spacing),
                "myo_thickness_nor": list(p.myo_thickness_nor),
                "myo_thickness_hcm": list(p.myo_thickness_hcm),
                "grid_shape": list(p.grid_shape),
                "hcm_myo_contrast": p.hcm_myo_contrast,
                "hcm_contraction_deficit": p.hcm_contraction_deficit,
                "hcm_rv_scale": p.hcm_rv_scale,
                "anatomy_scale": p.anatomy_scale,
            }
            for p in profiles
        ],
    }
    with open(os.path.join(root, "manifest.json"), "w") as fh:
        json.dump(payload, fh, indent=2)
        fh.write("\n")


def load_manifest(root) -> tuple[list[CenterProfile], int]:
    with open(os.path.join(root, "manifest.json")) as fh:
        payload = json.load(fh)
    profiles = [
        CenterProfile(
            c["center_id"],
            c["n_subjects"],
            c["class_balance"],
            c["intensity_offset"],
            c["intensity_scale"],
            c["noise_sigma"],
            tuple(c["spacing"]),
            tuple(c["myo_thickness_nor"]),
            tuple(c["myo_thickness_hcm"]),
            tuple(c["grid_shape"]),
            c.get("hcm_myo_contrast", 0.0),
            c.get("hcm_contraction_deficit", 0.0),
            c.get("hcm_rv_scale", 0.0),
            c.get("anatomy_scale", 1.0),
        )
        for c in payload["centers"]
    ]
    return profiles, int(payload["seed"])
