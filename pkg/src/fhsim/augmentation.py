"""Stochastic training-time augmentation in four nested tiers.

A draw either returns identity (probability 1-p) or picks one transform
uniformly from the tier's pool and samples its parameters. Spatial
transforms move intensities (trilinear) and mask (nearest-neighbor)
through the same coordinate field; intensity transforms never touch the
mask. Inputs are (channels, x, y, z) arrays plus an (x, y, z) mask.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .kernels import nearest_sample, trilinear_sample

ELASTIC_CONTROL_GRID = (5, 5, 3)
ELASTIC_SIGMA_VOXELS = 2.0
ROTATE_MAX_DEGREES = 15.0
BIAS_COEFF_RANGE = 0.3
SPIKE_RELATIVE_AMPLITUDE = (0.02, 0.10)
GAMMA_LOG_RANGE = (np.log(0.7), np.log(1.5))
NOISE_SIGMA_MAX = 0.25


class AugmentationTier(enum.Enum):
    NONE = "none"
    BASIC = "basic"
    SHAPE = "shape"
    SHAPE_INTENSITY = "shape_intensity"


@dataclass(frozen=True)
class AugmentationPolicy:
    tier: AugmentationTier
    apply_probability: float = 0.5

    def __post_init__(self):
        if not 0.0 <= self.apply_probability <= 1.0:
            raise ValueError("apply_probability must be in [0, 1]")


@dataclass(frozen=True)
class AugmentationSample:
    transform_id: str
    params: dict


_BASIC = ("rotate", "hflip", "vflip")
_SHAPE = _BASIC + ("elastic",)
_SHAPE_INTENSITY = _SHAPE + ("spike", "bias_field", "gaussian_noise", "gamma")


def transform_pool(tier: AugmentationTier) -> tuple[str, ...]:
    if tier is AugmentationTier.NONE:
        return ()
    if tier is AugmentationTier.BASIC:
        return _BASIC
    if tier is AugmentationTier.SHAPE:
        return _SHAPE
    if tier is AugmentationTier.SHAPE_INTENSITY:
        return _SHAPE_INTENSITY
    raise ValueError(f"unknown tier {tier!r}")


def draw_sample(policy: AugmentationPolicy, rng) -> AugmentationSample | None:
    """Decide identity vs transform and fix all random parameters now."""
    pool = transform_pool(policy.tier)
    if not pool:
        return None
    if rng.uniform() >= policy.apply_probability:
        return None
    tid = pool[int(rng.integers(len(pool)))]
    if tid == "rotate":
        params = {"degrees": float(rng.uniform(-ROTATE_MAX_DEGREES, ROTATE_MAX_DEGREES))}
    elif tid in ("hflip", "vflip"):
        params = {}
    elif tid == "elastic":
        params = {
            "displacement": rng.normal(
                0.0, ELASTIC_SIGMA_VOXELS, size=(3,) + ELASTIC_CONTROL_GRID
            )
        }
    elif tid == "spike":
        params = {
            "rel_amplitude": float(rng.uniform(*SPIKE_RELATIVE_AMPLITUDE)),
            "phase": float(rng.uniform(0.0, 2.0 * np.pi)),
            "freq_fraction": rng.uniform(0.1, 0.45, size=3),
        }
    elif tid == "bias_field":
        params = {"coefficients": rng.uniform(-BIAS_COEFF_RANGE, BIAS_COEFF_RANGE, size=20)}
    elif tid == "gaussian_noise":
        params = {"sigma": float(rng.uniform(0.0, NOISE_SIGMA_MAX)), "seed": int(rng.integers(2**63))}
    elif tid == "gamma":
        params = {"exponent": float(np.exp(rng.uniform(*GAMMA_LOG_RANGE)))}
    else:  # pragma: no cover
        raise ValueError(f"unhandled transform {tid!r}")
    return AugmentationSample(tid, params)


def _check_input(channels: np.ndarray, mask: np.ndarray):
    channels = np.asarray(channels, dtype=np.float64)
    mask = np.asarray(mask, dtype=np.uint8)
    if channels.ndim != 4 or channels.shape[1:] != mask.shape:
        raise ValueError("need (channels, x, y, z) intensities and matching (x, y, z) mask")
    return channels, mask


def _warp(channels, mask, xs, ys, zs):
    """Resample every channel (trilinear) and the mask (nearest) at coords."""
    shape = mask.shape
    out_ch = np.stack([
        trilinear_sample(np.ascontiguousarray(c), xs, ys, zs, 0.0).reshape(shape)
        for c in channels
    ])
    out_mask = nearest_sample(np.ascontiguousarray(mask), xs, ys, zs, 0).reshape(shape)
    return out_ch, out_mask


def _snap(value: float) -> float:
    # exact-lattice rotations (multiples of 90 degrees) stay exact
    for target in (-1.0, 0.0, 1.0):
        if abs(value - target) < 1e-12:
            return target
    return value


def rotate(channels, mask, degrees: float):
    """In-plane (axial) rotation about the volume center axis."""
    channels, mask = _check_input(channels, mask)
    theta = np.deg2rad(degrees)
    c = _snap(float(np.cos(theta)))
    s = _snap(float(np.sin(theta)))
    nx, ny, nz = mask.shape
    cx = (nx - 1) / 2.0
    cy = (ny - 1) / 2.0
    ii, jj, kk = np.meshgrid(
        np.arange(nx, dtype=np.float64),
        np.arange(ny, dtype=np.float64),
        np.arange(nz, dtype=np.float64),
        indexing="ij",
    )
    di = ii - cx
    dj = jj - cy
    xs = np.ascontiguousarray((cx + c * di + s * dj).ravel())
    ys = np.ascontiguousarray((cy - s * di + c * dj).ravel())
    zs = np.ascontiguousarray(kk.ravel())
    return _warp(channels, mask, xs, ys, zs)


def hflip(channels, mask):
    channels, mask = _check_input(channels, mask)
    return channels[:, ::-1].copy(), mask[::-1].copy()


def vflip(channels, mask):
    channels, mask = _check_input(channels, mask)
    return channels[:, :, ::-1].copy(), mask[:, ::-1].copy()


def elastic(channels, mask, displacement):
    """Dense warp from a coarse control grid of voxel displacements.

    The control grid is upsampled to the volume shape with cubic spline
    interpolation, then added to the identity coordinate field.
    """
    channels, mask = _check_input(channels, mask)
    disp = np.asarray(displacement, dtype=np.float64)
    if disp.shape != (3,) + ELASTIC_CONTROL_GRID:
        raise ValueError(f"displacement grid must have shape {(3,) + ELASTIC_CONTROL_GRID}")
    shape = mask.shape
    axes = [
        np.linspace(0.0, ELASTIC_CONTROL_GRID[a] - 1.0, shape[a]) if shape[a] > 1
        else np.zeros(1)
        for a in range(3)
    ]
    grid = np.meshgrid(*axes, indexing="ij")
    coords = np.stack([g.ravel() for g in grid])
    fields = [
        ndimage.map_coordinates(disp[a], coords, order=3, mode="nearest").reshape(shape)
        for a in range(3)
    ]
    ii, jj, kk = np.meshgrid(
        *(np.arange(n, dtype=np.float64) for n in shape), indexing="ij"
    )
    xs = np.ascontiguousarray((ii + fields[0]).ravel())
    ys = np.ascontiguousarray((jj + fields[1]).ravel())
    zs = np.ascontiguousarray((kk + fields[2]).ravel())
    return _warp(channels, mask, xs, ys, zs)


def spike(channels, mask, rel_amplitude: float, phase: float, freq_fraction):
    """k-space spike: one conjugate-symmetric high-frequency component."""
    channels, mask = _check_input(channels, mask)
    shape = mask.shape
    k = tuple(max(1, int(round(f * n))) for f, n in zip(freq_fraction, shape))
    k_neg = tuple((-ki) % n for ki, n in zip(k, shape))
    out = np.empty_like(channels)
    n_total = channels[0].size
    for c, img in enumerate(channels):
        rms = float(np.sqrt(np.mean(img * img)))
        coeff = rel_amplitude * rms * n_total / 2.0
        f = np.fft.fftn(img)
        f[k] += coeff * np.exp(1j * phase)
        f[k_neg] += coeff * np.exp(-1j * phase)
        out[c] = np.fft.ifftn(f).real
    return out, mask


def bias_field(channels, mask, coefficients):
    """Multiplicative exp(P(x,y,z)) with P a random degree-3 polynomial."""
    channels, mask = _check_input(channels, mask)
    coeffs = np.asarray(coefficients, dtype=np.float64)
    shape = mask.shape
    axes = [
        np.linspace(-1.0, 1.0, n) if n > 1 else np.zeros(1)
        for n in shape
    ]
    x, y, z = np.meshgrid(*axes, indexing="ij")
    monomials = []
    for dx in range(4):
        for dy in range(4 - dx):
            for dz in range(4 - dx - dy):
                monomials.append(x**dx * y**dy * z**dz)
    if len(coeffs) != len(monomials):
        raise ValueError(f"need {len(monomials)} polynomial coefficients")
    p = np.zeros(shape)
    for c, m in zip(coeffs, monomials):
        p += c * m
    field = np.exp(p)
    return channels * field, mask


def gaussian_noise(channels, mask, sigma: float, seed: int):
    channels, mask = _check_input(channels, mask)
    noise_rng = np.random.default_rng(seed)
    return channels + noise_rng.normal(0.0, sigma, size=channels.shape), mask


def gamma(channels, mask, exponent: float):
    """Power-law intensity remap; assumes inputs already rescaled to [0,1]."""
    channels, mask = _check_input(channels, mask)
    return np.power(np.clip(channels, 0.0, None), exponent), mask


_APPLIERS = {
    "rotate": lambda ch, m, p: rotate(ch, m, p["degrees"]),
    "hflip": lambda ch, m, p: hflip(ch, m),
    "vflip": lambda ch, m, p: vflip(ch, m),
    "elastic": lambda ch, m, p: elastic(ch, m, p["displacement"]),
    "spike": lambda ch, m, p: spike(ch, m, p["rel_amplitude"], p["phase"], p["freq_fraction"]),
    "bias_field": lambda ch, m, p: bias_field(ch, m, p["coefficients"]),
    "gaussian_noise": lambda ch, m, p: gaussian_noise(ch, m, p["sigma"], p["seed"]),
    "gamma": lambda ch, m, p: gamma(ch, m, p["exponent"]),
}

INTENSITY_ONLY = frozenset({"spike", "bias_field", "gaussian_noise", "gamma"})


def apply_sample(sample: AugmentationSample, channels, mask):
    try:
        applier = _APPLIERS[sample.transform_id]
    except KeyError:
        raise ValueError(f"unknown transform {sample.transform_id!r}") from None
    return applier(channels, mask, sample.params)


def augment(channels, mask, policy: AugmentationPolicy, rng):
    """One stochastic augmentation draw; identity with probability 1-p."""
    sample = draw_sample(policy, rng)
    if sample is None:
        return channels, mask
    return apply_sample(sample, channels, mask)
