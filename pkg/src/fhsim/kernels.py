"""Hot per-voxel kernels, numba-jitted with a pure-numpy fallback.

The backend is picked once at import time from the ``FHSIM_BACKEND``
environment variable: ``numba`` (default when numba imports cleanly) or
``numpy``. Both paths perform the same floating-point operations in the
same order, so they produce bitwise-identical results; tests assert this
and ``benchmarks/bench_kernels.py`` compares their speed.

Coordinate convention for the samplers: voxel i sits at coordinate i, the
valid domain is [0, n-1] per axis, anything outside is filled with a
constant.
"""

from __future__ import annotations

import os

import numpy as np

_ENV_CHOICE = os.environ.get("FHSIM_BACKEND", "").strip().lower()
if _ENV_CHOICE not in ("", "numba", "numpy"):
    raise RuntimeError(f"FHSIM_BACKEND must be 'numba' or 'numpy', got {_ENV_CHOICE!r}")

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False
    if _ENV_CHOICE == "numba":
        raise

BACKEND = _ENV_CHOICE or ("numba" if HAVE_NUMBA else "numpy")


# ---------------------------------------------------------------------------
# trilinear / nearest resampling


def _trilinear_sample_numpy(src, xs, ys, zs, fill):
    nx, ny, nz = src.shape
    oob = (
        (xs < 0.0) | (ys < 0.0) | (zs < 0.0)
        | (xs > nx - 1.0) | (ys > ny - 1.0) | (zs > nz - 1.0)
    )
    x = np.where(oob, 0.0, xs)
    y = np.where(oob, 0.0, ys)
    z = np.where(oob, 0.0, zs)
    ix = np.minimum(np.floor(x).astype(np.int64), nx - 2 if nx > 1 else 0)
    iy = np.minimum(np.floor(y).astype(np.int64), ny - 2 if ny > 1 else 0)
    iz = np.minimum(np.floor(z).astype(np.int64), nz - 2 if nz > 1 else 0)
    jx = np.minimum(ix + 1, nx - 1)
    jy = np.minimum(iy + 1, ny - 1)
    jz = np.minimum(iz + 1, nz - 1)
    fx = x - ix
    fy = y - iy
    fz = z - iz
    out = (
        src[ix, iy, iz] * (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
        + src[jx, iy, iz] * fx * (1.0 - fy) * (1.0 - fz)
        + src[ix, jy, iz] * (1.0 - fx) * fy * (1.0 - fz)
        + src[jx, jy, iz] * fx * fy * (1.0 - fz)
        + src[ix, iy, jz] * (1.0 - fx) * (1.0 - fy) * fz
        + src[jx, iy, jz] * fx * (1.0 - fy) * fz
        + src[ix, jy, jz] * (1.0 - fx) * fy * fz
        + src[jx, jy, jz] * fx * fy * fz
    )
    out[oob] = fill
    return out


def _nearest_sample_numpy(src, xs, ys, zs, fill):
    nx, ny, nz = src.shape
    oob = (
        (xs < 0.0) | (ys < 0.0) | (zs < 0.0)
        | (xs > nx - 1.0) | (ys > ny - 1.0) | (zs > nz - 1.0)
    )
    x = np.where(oob, 0.0, xs)
    y = np.where(oob, 0.0, ys)
    z = np.where(oob, 0.0, zs)
    ix = np.minimum(np.floor(x + 0.5).astype(np.int64), nx - 1)
    iy = np.minimum(np.floor(y + 0.5).astype(np.int64), ny - 1)
    iz = np.minimum(np.floor(z + 0.5).astype(np.int64), nz - 1)
    out = src[ix, iy, iz]
    out[oob] = fill
    return out


# ---------------------------------------------------------------------------
# block-mean pooling (ceil output dims; edge blocks average what exists)


def _block_mean_pool_numpy(vol, f):
    nx, ny, nz = vol.shape
    ox = -(-nx // f)
    oy = -(-ny // f)
    oz = -(-nz // f)
    padded = np.zeros((ox * f, oy * f, oz * f), dtype=np.float64)
    padded[:nx, :ny, :nz] = vol
    acc = np.zeros((ox, oy, oz), dtype=np.float64)
    for fi in range(f):
        for fj in range(f):
            for fk in range(f):
                acc = acc + padded[fi::f, fj::f, fk::f]
    bx = np.minimum((np.arange(ox) + 1) * f, nx) - np.arange(ox) * f
    by = np.minimum((np.arange(oy) + 1) * f, ny) - np.arange(oy) * f
    bz = np.minimum((np.arange(oz) + 1) * f, nz) - np.arange(oz) * f
    counts = bx[:, None, None] * by[None, :, None] * bz[None, None, :]
    return acc / counts


# ---------------------------------------------------------------------------
# phantom rasterization: concentric ellipsoids -> class mask
#
# Classes: 0 background, 1 RV crescent, 2 myocardial shell, 3 LV cavity.
# Each ellipsoid is (cx, cy, cz, ax, ay, az) in mm; voxel (i,j,k) sits at
# physical position (i*sx, j*sy, k*sz).


def _rasterize_phantom_numpy(shape, spacing, cavity, outer, rv):
    nx, ny, nz = shape
    sx, sy, sz = spacing
    x = np.arange(nx, dtype=np.float64) * sx
    y = np.arange(ny, dtype=np.float64) * sy
    z = np.arange(nz, dtype=np.float64) * sz
    gx = x[:, None, None]
    gy = y[None, :, None]
    gz = z[None, None, :]

    def q(e):
        tx = (gx - e[0]) / e[3]
        ty = (gy - e[1]) / e[4]
        tz = (gz - e[2]) / e[5]
        return tx * tx + ty * ty + tz * tz

    in_cavity = q(cavity) <= 1.0
    in_outer = q(outer) <= 1.0
    in_rv = q(rv) <= 1.0
    mask = np.zeros(shape, dtype=np.uint8)
    mask[in_rv] = 1
    mask[in_outer] = 2
    mask[in_cavity] = 3
    return mask


if HAVE_NUMBA:

    @njit(cache=True)
    def _trilinear_sample_numba(src, xs, ys, zs, fill):
        nx, ny, nz = src.shape
        n = xs.shape[0]
        out = np.empty(n, dtype=np.float64)
        mx = nx - 2 if nx > 1 else 0
        my = ny - 2 if ny > 1 else 0
        mz = nz - 2 if nz > 1 else 0
        for i in range(n):
            x = xs[i]
            y = ys[i]
            z = zs[i]
            if x < 0.0 or y < 0.0 or z < 0.0 or x > nx - 1.0 or y > ny - 1.0 or z > nz - 1.0:
                out[i] = fill
                continue
            ix = int(np.floor(x))
            iy = int(np.floor(y))
            iz = int(np.floor(z))
            if ix > mx:
                ix = mx
            if iy > my:
                iy = my
            if iz > mz:
                iz = mz
            jx = min(ix + 1, nx - 1)
            jy = min(iy + 1, ny - 1)
            jz = min(iz + 1, nz - 1)
            fx = x - ix
            fy = y - iy
            fz = z - iz
            out[i] = (
                src[ix, iy, iz] * (1.0 - fx) * (1.0 - fy) * (1.0 - fz)
                + src[jx, iy, iz] * fx * (1.0 - fy) * (1.0 - fz)
                + src[ix, jy, iz] * (1.0 - fx) * fy * (1.0 - fz)
                + src[jx, jy, iz] * fx * fy * (1.0 - fz)
                + src[ix, iy, jz] * (1.0 - fx) * (1.0 - fy) * fz
                + src[jx, iy, jz] * fx * (1.0 - fy) * fz
                + src[ix, jy, jz] * (1.0 - fx) * fy * fz
                + src[jx, jy, jz] * fx * fy * fz
            )
        return out

    @njit(cache=True)
    def _nearest_sample_numba_impl(src, xs, ys, zs, fill, out):
        nx, ny, nz = src.shape
        for i in range(xs.shape[0]):
            x = xs[i]
            y = ys[i]
            z = zs[i]
            if x < 0.0 or y < 0.0 or z < 0.0 or x > nx - 1.0 or y > ny - 1.0 or z > nz - 1.0:
                out[i] = fill
                continue
            ix = min(int(np.floor(x + 0.5)), nx - 1)
            iy = min(int(np.floor(y + 0.5)), ny - 1)
            iz = min(int(np.floor(z + 0.5)), nz - 1)
            out[i] = src[ix, iy, iz]
        return out

    def _nearest_sample_numba(src, xs, ys, zs, fill):
        out = np.empty(xs.shape[0], dtype=src.dtype)
        return _nearest_sample_numba_impl(src, xs, ys, zs, fill, out)

    @njit(cache=True)
    def _block_mean_pool_numba(vol, f):
        nx, ny, nz = vol.shape
        ox = -(-nx // f)
        oy = -(-ny // f)
        oz = -(-nz // f)
        out = np.empty((ox, oy, oz), dtype=np.float64)
        for i in range(ox):
            bx = min((i + 1) * f, nx) - i * f
            for j in range(oy):
                by = min((j + 1) * f, ny) - j * f
                for k in range(oz):
                    bz = min((k + 1) * f, nz) - k * f
                    acc = 0.0
                    for fi in range(f):
                        ii = i * f + fi
                        if ii >= nx:
                            continue
                        for fj in range(f):
                            jj = j * f + fj
                            if jj >= ny:
                                continue
                            for fk in range(f):
                                kk = k * f + fk
                                if kk >= nz:
                                    continue
                                acc = acc + vol[ii, jj, kk]
                    out[i, j, k] = acc / (bx * by * bz)
        return out

    @njit(cache=True)
    def _rasterize_phantom_numba_impl(nx, ny, nz, sx, sy, sz, cavity, outer, rv):
        mask = np.zeros((nx, ny, nz), dtype=np.uint8)
        for i in range(nx):
            px = i * sx
            for j in range(ny):
                py = j * sy
                for k in range(nz):
                    pz = k * sz
                    tx = (px - rv[0]) / rv[3]
                    ty = (py - rv[1]) / rv[4]
                    tz = (pz - rv[2]) / rv[5]
                    if tx * tx + ty * ty + tz * tz <= 1.0:
                        mask[i, j, k] = 1
                    tx = (px - outer[0]) / outer[3]
                    ty = (py - outer[1]) / outer[4]
                    tz = (pz - outer[2]) / outer[5]
                    if tx * tx + ty * ty + tz * tz <= 1.0:
                        mask[i, j, k] = 2
                    tx = (px - cavity[0]) / cavity[3]
                    ty = (py - cavity[1]) / cavity[4]
                    tz = (pz - cavity[2]) / cavity[5]
                    if tx * tx + ty * ty + tz * tz <= 1.0:
                        mask[i, j, k] = 3
        return mask

    def _rasterize_phantom_numba(shape, spacing, cavity, outer, rv):
        nx, ny, nz = shape
        sx, sy, sz = spacing
        return _rasterize_phantom_numba_impl(
            nx, ny, nz, float(sx), float(sy), float(sz),
            np.asarray(cavity, dtype=np.float64),
            np.asarray(outer, dtype=np.float64),
            np.asarray(rv, dtype=np.float64),
        )


def _rasterize_phantom_numpy_wrapped(shape, spacing, cavity, outer, rv):
    return _rasterize_phantom_numpy(
        tuple(int(d) for d in shape),
        tuple(float(s) for s in spacing),
        np.asarray(cavity, dtype=np.float64),
        np.asarray(outer, dtype=np.float64),
        np.asarray(rv, dtype=np.float64),
    )


IMPLEMENTATIONS = {
    "numpy": {
        "trilinear_sample": _trilinear_sample_numpy,
        "nearest_sample": _nearest_sample_numpy,
        "block_mean_pool": _block_mean_pool_numpy,
        "rasterize_phantom": _rasterize_phantom_numpy_wrapped,
    }
}
if HAVE_NUMBA:
    IMPLEMENTATIONS["numba"] = {
        "trilinear_sample": _trilinear_sample_numba,
        "nearest_sample": _nearest_sample_numba,
        "block_mean_pool": _block_mean_pool_numba,
        "rasterize_phantom": _rasterize_phantom_numba,
    }

_active = IMPLEMENTATIONS[BACKEND]
trilinear_sample = _active["trilinear_sample"]
nearest_sample = _active["nearest_sample"]
block_mean_pool = _active["block_mean_pool"]
rasterize_phantom = _active["rasterize_phantom"]
