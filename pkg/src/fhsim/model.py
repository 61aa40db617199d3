"""Small differentiable binary classifiers and their plain SGD update.

Two architectures are supported: a logistic head on the (average-pooled,
flattened) voxel grid, and a one-hidden-layer tanh MLP. All arithmetic is
float64 so parameter aggregation algebra is reproducible bit for bit.

A parameter vector is a flat float64 array plus a layout token; vectors
are only combinable when the token and length agree. The wire format is a
fixed 16-byte layout header followed by the raw little-endian float64
values.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kernels import block_mean_pool
from .seeding import derive_rng

KIND_LOGISTIC = "logistic"
KIND_MLP = "mlp"

LAYOUT_HEADER_BYTES = 16


class LayoutMismatchError(ValueError):
    """Raised when parameter/gradient layouts cannot be combined."""


@dataclass(frozen=True)
class ModelSpec:
    """Architecture description; fixes the parameter layout."""

    kind: str
    input_shape: tuple[int, int, int, int]  # (channels, x, y, z)
    hidden_width: int = 0
    downsample_factor: int = 1

    def __post_init__(self):
        if self.kind not in (KIND_LOGISTIC, KIND_MLP):
            raise ValueError(f"unknown model kind {self.kind!r}")
        if len(self.input_shape) != 4 or any(d < 1 for d in self.input_shape):
            raise ValueError(f"bad input shape {self.input_shape}")
        if self.downsample_factor < 1:
            raise ValueError("downsample_factor must be >= 1")
        if self.kind == KIND_MLP and self.hidden_width < 1:
            raise ValueError("mlp requires hidden_width >= 1")

    @property
    def pooled_shape(self) -> tuple[int, int, int, int]:
        c, x, y, z = self.input_shape
        f = self.downsample_factor
        return (c, -(-x // f), -(-y // f), -(-z // f))

    @property
    def n_features(self) -> int:
        c, x, y, z = self.pooled_shape
        return c * x * y * z

    @property
    def n_params(self) -> int:
        d = self.n_features
        if self.kind == KIND_LOGISTIC:
            return d + 1
        h = self.hidden_width
        return d * h + h + h + 1

    @property
    def layout_id(self) -> str:
        if self.kind == KIND_LOGISTIC:
            return f"log{self.n_features}"
        return f"mlp{self.n_features}x{self.hidden_width}"


@dataclass(frozen=True)
class ParameterVector:
    values: np.ndarray
    layout_id: str

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("parameter values must be a flat vector")
        if not np.all(np.isfinite(vals)):
            raise ValueError("parameter values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class GradientVector:
    values: np.ndarray
    layout_id: str

    def __post_init__(self):
        vals = np.ascontiguousarray(self.values, dtype=np.float64)
        if not np.all(np.isfinite(vals)):
            raise ValueError("gradient values must be finite")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class TrainerConfig:
    learning_rate: float
    max_epochs: int = 100
    patience: int = 10
    iterations_per_round: int = 7
    seed: int = 0

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.max_epochs < 1 or self.patience < 1 or self.iterations_per_round < 1:
            raise ValueError("max_epochs, patience and iterations_per_round must be >= 1")
        if self.patience > self.max_epochs:
            raise ValueError("patience must not exceed max_epochs")


def _check_layout(spec: ModelSpec, vec) -> None:
    if vec.layout_id != spec.layout_id or len(vec) != spec.n_params:
        raise LayoutMismatchError(
            f"layout {vec.layout_id!r} (len {len(vec)}) does not match "
            f"spec layout {spec.layout_id!r} (len {spec.n_params})"
        )


def init_parameters(spec: ModelSpec, seed: int) -> ParameterVector:
    """Symmetric uniform init with scale 1/sqrt(fan_in); zero biases."""
    rng = derive_rng(seed, "init", spec.layout_id)
    d = spec.n_features
    if spec.kind == KIND_LOGISTIC:
        limit = 1.0 / np.sqrt(d)
        vals = np.concatenate([rng.uniform(-limit, limit, size=d), [0.0]])
    else:
        h = spec.hidden_width
        lim1 = 1.0 / np.sqrt(d)
        lim2 = 1.0 / np.sqrt(h)
        vals = np.concatenate([
            rng.uniform(-lim1, lim1, size=d * h),  # W1, row-major (h, d)
            np.zeros(h),                           # b1
            rng.uniform(-lim2, lim2, size=h),      # w2
            [0.0],                                 # b2
        ])
    return ParameterVector(vals, spec.layout_id)


def featurize(spec: ModelSpec, inputs) -> np.ndarray:
    """Average-pool each channel by the downsample factor and flatten.

    Accepts a single (c, x, y, z) array, a list of them, or a stacked
    (n, c, x, y, z) array; returns (n, n_features) float64.
    """
    if isinstance(inputs, np.ndarray) and inputs.ndim == 4:
        inputs = [inputs]
    c, x, y, z = spec.input_shape
    f = spec.downsample_factor
    rows = np.empty((len(inputs), spec.n_features), dtype=np.float64)
    for i, vol in enumerate(inputs):
        vol = np.asarray(vol, dtype=np.float64)
        if vol.shape != (c, x, y, z):
            raise ValueError(f"input shape {vol.shape} does not match spec {(c, x, y, z)}")
        if f == 1:
            rows[i] = vol.ravel()
        else:
            rows[i] = np.stack([block_mean_pool(vol[ch], f) for ch in range(c)]).ravel()
    return rows


def _unpack_mlp(spec: ModelSpec, values: np.ndarray):
    d, h = spec.n_features, spec.hidden_width
    w1 = values[: d * h].reshape(h, d)
    b1 = values[d * h : d * h + h]
    w2 = values[d * h + h : d * h + 2 * h]
    b2 = values[-1]
    return w1, b1, w2, b2


def _logits(spec: ModelSpec, params: ParameterVector, feats: np.ndarray) -> np.ndarray:
    if spec.kind == KIND_LOGISTIC:
        w = params.values[:-1]
        b = params.values[-1]
        return feats @ w + b
    w1, b1, w2, b2 = _unpack_mlp(spec, params.values)
    hidden = np.tanh(feats @ w1.T + b1)
    return hidden @ w2 + b2


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def forward_features(spec: ModelSpec, params: ParameterVector, feats: np.ndarray) -> np.ndarray:
    _check_layout(spec, params)
    p = _sigmoid(_logits(spec, params, feats))
    # keep outputs strictly inside (0, 1) even at saturation
    return np.clip(p, 5e-324, np.nextafter(1.0, 0.0))


def forward(spec: ModelSpec, params: ParameterVector, batch) -> np.ndarray:
    """Probabilities of the positive class, one per batch element."""
    return forward_features(spec, params, featurize(spec, batch))


def loss_features(spec: ModelSpec, params: ParameterVector, feats, labels) -> float:
    """Mean binary cross-entropy, computed stably from logits."""
    _check_layout(spec, params)
    z = _logits(spec, params, feats)
    y = np.asarray(labels, dtype=np.float64)
    # softplus(z) - y*z, with softplus via the overflow-safe split
    sp = np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))
    return float(np.mean(sp - y * z))


def bce_loss(spec: ModelSpec, params: ParameterVector, batch, labels) -> float:
    return loss_features(spec, params, featurize(spec, batch), labels)


def gradient_features(spec: ModelSpec, params: ParameterVector, feats, labels) -> GradientVector:
    _check_layout(spec, params)
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or feats.shape[0] == 0:
        raise ValueError("batch must be non-empty")
    y = np.asarray(labels, dtype=np.float64)
    if y.shape != (feats.shape[0],):
        raise ValueError("labels must match batch length")
    n = feats.shape[0]
    if spec.kind == KIND_LOGISTIC:
        w = params.values[:-1]
        b = params.values[-1]
        p = _sigmoid(feats @ w + b)
        delta = (p - y) / n
        vals = np.concatenate([feats.T @ delta, [delta.sum()]])
    else:
        w1, b1, w2, b2 = _unpack_mlp(spec, params.values)
        hidden = np.tanh(feats @ w1.T + b1)
        p = _sigmoid(hidden @ w2 + b2)
        d2 = (p - y) / n
        d1 = (d2[:, None] * w2[None, :]) * (1.0 - hidden * hidden)
        vals = np.concatenate([
            (d1.T @ feats).ravel(),
            d1.sum(axis=0),
            hidden.T @ d2,
            [d2.sum()],
        ])
    return GradientVector(vals, spec.layout_id)


def gradient(spec: ModelSpec, params: ParameterVector, batch, labels) -> GradientVector:
    """Gradient of the mean binary cross-entropy over the batch."""
    return gradient_features(spec, params, featurize(spec, batch), labels)


def sgd_step(params: ParameterVector, grad: GradientVector, learning_rate: float) -> ParameterVector:
    if params.layout_id != grad.layout_id or len(params) != len(grad):
        raise LayoutMismatchError(
            f"cannot step layout {params.layout_id!r} with gradient {grad.layout_id!r}"
        )
    out = params.values - learning_rate * grad.values
    if not np.all(np.isfinite(out)):
        raise FloatingPointError("sgd_step produced non-finite parameters")
    return ParameterVector(out, params.layout_id)


# ---------------------------------------------------------------------------
# wire format: 16-byte layout header + little-endian float64 values


def to_bytes(params: ParameterVector) -> bytes:
    tag = params.layout_id.encode("ascii")
    if len(tag) > LAYOUT_HEADER_BYTES:
        raise ValueError(f"layout id {params.layout_id!r} exceeds {LAYOUT_HEADER_BYTES} bytes")
    header = tag.ljust(LAYOUT_HEADER_BYTES, b"\x00")
    return header + params.values.astype("<f8").tobytes()


def from_bytes(blob: bytes) -> ParameterVector:
    if len(blob) < LAYOUT_HEADER_BYTES or (len(blob) - LAYOUT_HEADER_BYTES) % 8:
        raise ValueError("truncated parameter blob")
    layout = blob[:LAYOUT_HEADER_BYTES].rstrip(b"\x00").decode("ascii")
    values = np.frombuffer(blob[LAYOUT_HEADER_BYTES:], dtype="<f8").astype(np.float64)
    return ParameterVector(values, layout)


def save_parameters(params: ParameterVector, path) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params))


def load_parameters(path) -> ParameterVector:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
