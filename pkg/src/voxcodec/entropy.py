"""Spatial-temporal implicit entropy model.

A per-frame two-layer MLP maps the causal neighbourhood of a quantized voxel
(13 already-coded neighbours in the current tensor, the 3x3x3 block of the
previous frame's coded tensor) to the location and scale of a Laplace
distribution over the voxel's integer value.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

N_SPATIAL = 13
N_TEMPORAL = 27
N_CONTEXT = N_SPATIAL + N_TEMPORAL
HIDDEN = 32
CONTEXT_NORM = 128.0

B_MIN, B_MAX = 1e-3, 1e4
N_SCALES = 256
LOG_B_MIN = math.log(B_MIN)
LOG_B_STEP = (math.log(B_MAX) - math.log(B_MIN)) / (N_SCALES - 1)
SCALE_TABLE = np.exp(LOG_B_MIN + LOG_B_STEP * np.arange(N_SCALES))
MU_RESOLUTION = 64

SYMBOL_MIN, SYMBOL_MAX = -32768, 32767
MASS_FLOOR = 1e-9

# (dz, dy, dx) offsets; raster order is z outer, y middle, x inner
SPATIAL_OFFSETS = np.array([o for o in itertools.product((-1, 0), (-1, 0, 1), (-1, 0, 1))
                            if o < (0, 0, 0)])
TEMPORAL_OFFSETS = np.array(list(itertools.product((-1, 0, 1), repeat=3)))
assert len(SPATIAL_OFFSETS) == N_SPATIAL


class DivergenceError(FloatingPointError):
    """Non-finite values appeared in a model output or loss."""


@dataclass
class LaplaceParams:
    mu: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.b = np.asarray(self.b, dtype=np.float64)


@dataclass
class ContextVector:
    spatial: np.ndarray
    temporal: np.ndarray

    @property
    def values(self) -> np.ndarray:
        return np.concatenate([self.spatial, self.temporal])


def gather_context(tensor, prev, pos) -> ContextVector:
    """Causal context of one voxel of a 3-D ``(Z, Y, X)`` integer tensor.

    Neighbours outside the tensor, and the whole temporal part when ``prev``
    is None, are zero.  Everything is divided by 128.
    """
    tensor = np.asarray(tensor)
    shape = np.array(tensor.shape)
    pos = np.asarray(pos)

    def pick(src, offsets):
        out = np.zeros(len(offsets))
        for n, off in enumerate(offsets):
            p = pos + off
            if np.all(p >= 0) and np.all(p < shape):
                out[n] = src[tuple(p)]
        return out / CONTEXT_NORM

    spatial = pick(tensor, SPATIAL_OFFSETS)
    temporal = np.zeros(N_TEMPORAL) if prev is None else pick(np.asarray(prev), TEMPORAL_OFFSETS)
    return ContextVector(spatial, temporal)


def gather_contexts(volumes, prev=None, flat_index=None) -> np.ndarray:
    """Vectorised contexts for a stack of volumes ``(C, Z, Y, X)``.

    Returns an ``(N, 40)`` array for the voxels in ``flat_index`` (raster
    order over the whole stack), or for every voxel when it is None.
    """
    volumes = np.asarray(volumes, dtype=np.float64)
    nc, nz, ny, nx = volumes.shape
    if flat_index is None:
        flat_index = np.arange(volumes.size)
    c, rem = np.divmod(flat_index, nz * ny * nx)
    z, rem = np.divmod(rem, ny * nx)
    y, x = np.divmod(rem, nx)
    pad = ((0, 0), (1, 1), (1, 1), (1, 1))
    cur = np.pad(volumes, pad)
    out = np.zeros((len(flat_index), N_CONTEXT))
    for n, (dz, dy, dx) in enumerate(SPATIAL_OFFSETS):
        out[:, n] = cur[c, z + 1 + dz, y + 1 + dy, x + 1 + dx]
    if prev is not None:
        old = np.pad(np.asarray(prev, dtype=np.float64), pad)
        for n, (dz, dy, dx) in enumerate(TEMPORAL_OFFSETS):
            out[:, N_SPATIAL + n] = old[c, z + 1 + dz, y + 1 + dy, x + 1 + dx]
    return out / CONTEXT_NORM


def grid_to_volumes(values) -> np.ndarray:
    """``(nx, ny, nz, C)`` grid layout to the ``(C, nz, ny, nx)`` coding layout."""
    return np.ascontiguousarray(np.transpose(values, (3, 2, 1, 0)))


def volumes_to_grid(volumes) -> np.ndarray:
    return np.ascontiguousarray(np.transpose(volumes, (3, 2, 1, 0)))


class ImplicitEntropyModel:
    """40 -> 32 (ReLU) -> 2 perceptron producing ``(mu, log b)``."""

    param_names = ("W1", "b1", "W2", "b2")

    def __init__(self, rng=None, params=None, hidden=HIDDEN):
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            params = {
                "W1": rng.uniform(-1, 1, (N_CONTEXT, hidden)) * np.sqrt(6.0 / N_CONTEXT),
                "b1": np.zeros(hidden),
                "W2": np.zeros((hidden, 2)),
                "b2": np.zeros(2),
            }
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in self.param_names}

    def copy(self) -> "ImplicitEntropyModel":
        return ImplicitEntropyModel(params={k: v.copy() for k, v in self.params.items()})

    def tensors(self) -> list[np.ndarray]:
        return [self.params[k] for k in self.param_names]

    @classmethod
    def from_tensors(cls, tensors) -> "ImplicitEntropyModel":
        return cls(params=dict(zip(cls.param_names, tensors)))

    def forward(self, ctx):
        p = self.params
        ctx = np.atleast_2d(ctx)
        a = ctx @ p["W1"] + p["b1"]
        h = np.maximum(a, 0.0)
        out = h @ p["W2"] + p["b2"]
        if not np.all(np.isfinite(out)):
            raise DivergenceError("entropy model produced non-finite parameters")
        log_b = out[:, 1]
        b = np.exp(np.clip(log_b, LOG_B_MIN, math.log(B_MAX)))
        return LaplaceParams(out[:, 0], b), (ctx, a, h, log_b)

    def backward(self, cache, d_mu, d_b):
        p = self.params
        ctx, a, h, log_b = cache
        inside = (log_b > LOG_B_MIN) & (log_b < math.log(B_MAX))
        d_out = np.stack([d_mu, d_b * np.exp(log_b) * inside], axis=1)
        grads = {"W2": h.T @ d_out, "b2": d_out.sum(0)}
        da = (d_out @ p["W2"].T) * (a > 0)
        grads["W1"] = ctx.T @ da
        grads["b1"] = da.sum(0)
        return grads


def predict_params(model: ImplicitEntropyModel, ctx) -> LaplaceParams:
    if isinstance(ctx, ContextVector):
        ctx = ctx.values
    single = np.ndim(ctx) == 1
    params, _ = model.forward(ctx)
    if single:
        return LaplaceParams(params.mu[0], params.b[0])
    return params


# ---------------------------------------------------------------- rates


def laplace_cdf(x, mu, b):
    z = (np.asarray(x, dtype=np.float64) - mu) / b
    return np.where(z < 0, 0.5 * np.exp(np.minimum(z, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(z, 0.0)))


def laplace_mass(v, mu, b):
    """``F(v + 1/2) - F(v - 1/2)`` computed without cancellation in the tails."""
    v = np.asarray(v, dtype=np.float64)
    lo = (v - 0.5 - mu) / b
    hi = (v + 0.5 - mu) / b
    below = 0.5 * (np.exp(np.minimum(hi, 0.0)) - np.exp(np.minimum(lo, 0.0)))
    above = 0.5 * (np.exp(-np.maximum(lo, 0.0)) - np.exp(-np.maximum(hi, 0.0)))
    middle = 1.0 - 0.5 * (np.exp(np.minimum(lo, 0.0)) + np.exp(-np.maximum(hi, 0.0)))
    return np.where(hi <= 0, below, np.where(lo >= 0, above, middle))


def rate_bits(v, params: LaplaceParams):
    """Bits to code ``v`` under the discretised Laplace; mass floored at 1e-9."""
    mass = laplace_mass(v, params.mu, params.b)
    return -np.log2(np.maximum(mass, MASS_FLOOR))


def rate_grads(v, params: LaplaceParams):
    """Partial derivatives of :func:`rate_bits` w.r.t. ``(v, mu, b)``."""
    v = np.asarray(v, dtype=np.float64)
    mu, b = params.mu, params.b
    mass = laplace_mass(v, mu, b)
    live = mass >= MASS_FLOOR
    x_lo, x_hi = v - 0.5 - mu, v + 0.5 - mu
    pdf_lo = np.exp(-np.abs(x_lo) / b) / (2 * b)
    pdf_hi = np.exp(-np.abs(x_hi) / b) / (2 * b)
    dm_dv = pdf_hi - pdf_lo
    dm_db = -(pdf_hi * x_hi - pdf_lo * x_lo) / b
    scale = np.where(live, -1.0 / (np.maximum(mass, MASS_FLOOR) * math.log(2)), 0.0)
    return scale * dm_dv, -scale * dm_dv, scale * dm_db


def rate_backward(v, params: LaplaceParams, model: ImplicitEntropyModel, cache):
    """Gradients of summed bits w.r.t. ``v`` and the model parameters.

    ``cache`` is the second return value of ``model.forward``.
    """
    dv, dmu, db = rate_grads(v, params)
    return dv, model.backward(cache, dmu, db)


# ---------------------------------------------------------------- discretisation


def mu_index(mu):
    mu = np.clip(np.asarray(mu, dtype=np.float64), SYMBOL_MIN, SYMBOL_MAX)
    return np.floor(mu * MU_RESOLUTION + 0.5).astype(np.int64)


def scale_index(b):
    """Nearest entry of the geometric scale table, measured in log space."""
    log_b = np.log(np.clip(np.asarray(b, dtype=np.float64), B_MIN, B_MAX))
    return np.clip(np.floor((log_b - LOG_B_MIN) / LOG_B_STEP + 0.5), 0, N_SCALES - 1).astype(np.int64)


def discretize_params(params: LaplaceParams) -> LaplaceParams:
    """Snap ``mu`` to multiples of 1/64 and ``b`` to the 256-entry scale table."""
    return LaplaceParams(mu_index(params.mu) / MU_RESOLUTION, SCALE_TABLE[scale_index(params.b)])
