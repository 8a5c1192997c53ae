"""Voxel feature fields: coefficient/basis grids, trilinear sampling and occupancy."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

# corner offsets in (x, y, z) order, bit 0 -> x
_CORNERS = np.array([[(c >> 0) & 1, (c >> 1) & 1, (c >> 2) & 1] for c in range(8)])


class OutOfBoundsError(ValueError):
    """Raised when a query point lies outside a grid's bounding box."""


class ConfigurationError(ValueError):
    pass


def _as_aabb(aabb) -> np.ndarray:
    box = np.asarray(aabb, dtype=np.float64).reshape(2, 3)
    if np.any(box[1] <= box[0]):
        raise ConfigurationError(f"degenerate aabb {box.tolist()}")
    return box


@dataclass
class FeatureGrid:
    """Dense node-aligned feature grid.

    ``values`` has shape ``(nx, ny, nz, channels)``; node ``(i, j, k)`` sits at
    ``aabb[0] + (i, j, k) * (aabb[1] - aabb[0]) / (dims - 1)``.
    """

    values: np.ndarray
    aabb: np.ndarray

    def __post_init__(self):
        self.values = np.asarray(self.values)
        self.aabb = _as_aabb(self.aabb)
        if self.values.ndim != 4:
            raise ConfigurationError("grid values must have shape (nx, ny, nz, channels)")
        if min(self.values.shape[:3]) < 2:
            raise ConfigurationError("every grid axis needs at least 2 nodes")

    @classmethod
    def uniform_init(cls, dims, channels, aabb, rng, scale=1e-2):
        values = rng.uniform(-scale, scale, size=(*dims, channels))
        return cls(values, aabb)

    @classmethod
    def zeros(cls, dims, channels, aabb):
        return cls(np.zeros((*dims, channels)), aabb)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.values.shape[:3])

    @property
    def channels(self) -> int:
        return int(self.values.shape[3])

    @property
    def spacing(self) -> np.ndarray:
        return (self.aabb[1] - self.aabb[0]) / (np.array(self.dims) - 1)

    def node_position(self, index) -> np.ndarray:
        return self.aabb[0] + np.asarray(index) * self.spacing

    def with_values(self, values) -> "FeatureGrid":
        return FeatureGrid(values, self.aabb)


@dataclass
class FieldFrame:
    """One frame's explicit representation.

    For P-frames the grid values are residuals against the previous
    reconstruction; for I-frames they are absolute.
    """

    coeff: FeatureGrid
    bases: list[FeatureGrid]
    qsteps: np.ndarray
    frame_type: str = "I"
    frame_index: int = 0

    def __post_init__(self):
        self.qsteps = np.asarray(self.qsteps, dtype=np.float64)
        if self.frame_type not in ("I", "P"):
            raise ConfigurationError(f"frame_type must be 'I' or 'P', got {self.frame_type!r}")
        if not self.bases:
            raise ConfigurationError("at least one basis grid is required")
        for b in self.bases:
            if b.channels != self.coeff.channels:
                raise ConfigurationError(
                    f"basis channels {b.channels} != coefficient channels {self.coeff.channels}"
                )
        if self.qsteps.shape != (1 + len(self.bases),):
            raise ConfigurationError("need one quantization step per grid")
        if np.any(self.qsteps <= 0):
            raise ConfigurationError("quantization steps must be positive")

    @property
    def grids(self) -> list[FeatureGrid]:
        return [self.coeff, *self.bases]

    @property
    def aabb(self) -> np.ndarray:
        return self.coeff.aabb

    @property
    def channels(self) -> int:
        return self.coeff.channels

    def with_values(self, values: Sequence[np.ndarray], **kw) -> "FieldFrame":
        grids = [g.with_values(v) for g, v in zip(self.grids, values)]
        args = dict(qsteps=self.qsteps, frame_type=self.frame_type, frame_index=self.frame_index)
        args.update(kw)
        return FieldFrame(grids[0], grids[1:], **args)


def make_frame(coeff_dims, basis_dims, channels, aabb, rng=None, frame_type="I",
               frame_index=0, qstep=0.02, init_scale=1e-2) -> FieldFrame:
    """Fresh frame: uniform init for I-frames, zeros for P-frame residuals."""
    all_dims = [tuple(coeff_dims)] + [tuple(d) for d in basis_dims]
    if frame_type == "I":
        rng = np.random.default_rng() if rng is None else rng
        grids = [FeatureGrid.uniform_init(d, channels, aabb, rng, init_scale) for d in all_dims]
    else:
        grids = [FeatureGrid.zeros(d, channels, aabb) for d in all_dims]
    return FieldFrame(grids[0], grids[1:], np.full(len(grids), qstep),
                      frame_type=frame_type, frame_index=frame_index)


# ---------------------------------------------------------------- trilinear


@dataclass
class TrilinearCache:
    index: np.ndarray      # (S, 8) flat node indices
    weight: np.ndarray     # (S, 8)
    frac: np.ndarray       # (S, 3)
    scale: np.ndarray      # (3,) d(grid coord)/d(world)


def _check_inside(grid: FeatureGrid, pts: np.ndarray, tol=1e-9):
    lo, hi = grid.aabb
    span = hi - lo
    bad = np.any((pts < lo - tol * span) | (pts > hi + tol * span), axis=-1)
    if np.any(bad):
        first = pts[np.argmax(bad)]
        raise OutOfBoundsError(f"point {first.tolist()} outside aabb {grid.aabb.tolist()}")


def trilinear_weights(grid: FeatureGrid, pts) -> TrilinearCache:
    pts = np.atleast_2d(np.asarray(pts, dtype=np.float64))
    _check_inside(grid, pts)
    dims = np.array(grid.dims)
    scale = (dims - 1) / (grid.aabb[1] - grid.aabb[0])
    u = np.clip((pts - grid.aabb[0]) * scale, 0.0, dims - 1)
    base = np.minimum(np.floor(u).astype(np.int64), dims - 2)
    frac = u - base
    nodes = base[:, None, :] + _CORNERS[None]                       # (S, 8, 3)
    nx, ny, nz = dims
    index = (nodes[..., 0] * ny + nodes[..., 1]) * nz + nodes[..., 2]
    w = np.where(_CORNERS[None], frac[:, None, :], 1.0 - frac[:, None, :])
    return TrilinearCache(index, w.prod(axis=-1), frac, scale)


def trilinear_sample(grid: FeatureGrid, x, cache: TrilinearCache | None = None):
    """Trilinearly interpolate grid features at world point(s) ``x``.

    Accepts a single point ``(3,)`` or a batch ``(S, 3)``; raises
    :class:`OutOfBoundsError` for points outside the grid box.
    """
    single = np.ndim(x) == 1
    cache = trilinear_weights(grid, x) if cache is None else cache
    flat = grid.values.reshape(-1, grid.channels)
    out = np.einsum("sk,skc->sc", cache.weight, flat[cache.index])
    return out[0] if single else out


def trilinear_backward(grid: FeatureGrid, x, upstream, cache: TrilinearCache | None = None):
    """Scatter ``upstream`` feature gradients onto grid nodes.

    Returns ``(grad_values, grad_x)`` where ``grad_values`` has the grid's
    value shape and accumulates additively over all query points.
    """
    single = np.ndim(x) == 1
    cache = trilinear_weights(grid, x) if cache is None else cache
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    grad_values = scatter_nodes(cache, g, grid.values.shape)

    flat = grid.values.reshape(-1, grid.channels)
    corner_vals = flat[cache.index]                                  # (S, 8, C)
    proj = np.einsum("skc,sc->sk", corner_vals, g)                   # (S, 8)
    grad_u = np.empty((len(g), 3))
    f = cache.frac
    for axis in range(3):
        others = [a for a in range(3) if a != axis]
        w = np.ones((len(g), 8))
        for a in others:
            w = w * np.where(_CORNERS[None, :, a], f[:, None, a], 1.0 - f[:, None, a])
        sign = np.where(_CORNERS[:, axis], 1.0, -1.0)
        grad_u[:, axis] = (proj * w * sign).sum(axis=1)
    grad_x = grad_u * cache.scale
    return grad_values, (grad_x[0] if single else grad_x)


def scatter_nodes(cache: TrilinearCache, g: np.ndarray, shape) -> np.ndarray:
    channels = shape[-1]
    contrib = cache.weight[:, :, None] * g[:, None, :]                # (S, 8, C)
    flat_idx = cache.index[:, :, None] * channels + np.arange(channels)
    out = np.bincount(flat_idx.ravel(), weights=contrib.ravel(),
                      minlength=int(np.prod(shape)))
    return out.reshape(shape)


# ---------------------------------------------------------------- fusion


@dataclass
class FusionCache:
    caches: list[TrilinearCache]
    coeff_feat: np.ndarray
    basis_mean: np.ndarray


def fuse_features(frame: FieldFrame, x, return_cache=False):
    """Coefficient feature times the mean of the basis features (element-wise)."""
    single = np.ndim(x) == 1
    pts = np.atleast_2d(np.asarray(x, dtype=np.float64))
    caches = [trilinear_weights(g, pts) for g in frame.grids]
    feats = [trilinear_sample(g, pts, c) for g, c in zip(frame.grids, caches)]
    basis_mean = np.mean(feats[1:], axis=0)
    fused = feats[0] * basis_mean
    if single:
        fused = fused[0]
    if return_cache:
        return fused, FusionCache(caches, feats[0], basis_mean)
    return fused


def fuse_backward(frame: FieldFrame, cache: FusionCache, upstream) -> list[np.ndarray]:
    """Gradients of the fused feature w.r.t. every grid's values."""
    g = np.atleast_2d(np.asarray(upstream, dtype=np.float64))
    grads = [scatter_nodes(cache.caches[0], g * cache.basis_mean, frame.coeff.values.shape)]
    g_basis = g * cache.coeff_feat / len(frame.bases)
    for grid, c in zip(frame.bases, cache.caches[1:]):
        grads.append(scatter_nodes(c, g_basis, grid.values.shape))
    return grads


# ---------------------------------------------------------------- occupancy


@dataclass
class OccupancyGrid:
    """Binary cell grid over an aabb; ``bits`` has shape ``(nx, ny, nz)``."""

    bits: np.ndarray
    aabb: np.ndarray = field(default_factory=lambda: np.array([[-1.0] * 3, [1.0] * 3]))

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        self.aabb = _as_aabb(self.aabb)
        if self.bits.ndim != 3:
            raise ConfigurationError("occupancy bits must be 3-D")

    @classmethod
    def full(cls, dims, aabb):
        return cls(np.ones(dims, dtype=bool), aabb)

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(int(n) for n in self.bits.shape)

    @property
    def cell_size(self) -> np.ndarray:
        return (self.aabb[1] - self.aabb[0]) / np.array(self.dims)

    def cell_centers(self) -> np.ndarray:
        idx = np.stack(np.meshgrid(*[np.arange(n) for n in self.dims], indexing="ij"), -1)
        return self.aabb[0] + (idx.reshape(-1, 3) + 0.5) * self.cell_size

    def cell_index(self, pts) -> np.ndarray:
        dims = np.array(self.dims)
        idx = np.floor((np.asarray(pts) - self.aabb[0]) / self.cell_size).astype(np.int64)
        return np.clip(idx, 0, dims - 1)

    def lookup(self, pts) -> np.ndarray:
        idx = self.cell_index(np.atleast_2d(pts))
        return self.bits[idx[:, 0], idx[:, 1], idx[:, 2]]

    def dilate(self, radius=1) -> "OccupancyGrid":
        from scipy.ndimage import binary_dilation
        st = np.ones((2 * radius + 1,) * 3, dtype=bool)
        return OccupancyGrid(binary_dilation(self.bits, st), self.aabb)

    def pack(self) -> bytes:
        """8 cells per byte in (z, y, x) raster order, LSB first, zero padded."""
        flat = self.bits.transpose(2, 1, 0).ravel()
        return np.packbits(flat, bitorder="little").tobytes()

    @classmethod
    def unpack(cls, data: bytes, dims, aabb) -> "OccupancyGrid":
        n = int(np.prod(dims))
        if len(data) != (n + 7) // 8:
            raise ValueError(f"packed occupancy has {len(data)} bytes, expected {(n + 7) // 8}")
        flat = np.unpackbits(np.frombuffer(data, dtype=np.uint8), bitorder="little")
        nx, ny, nz = dims
        bits = flat[:n].reshape(nz, ny, nx).transpose(2, 1, 0)
        return cls(bits.astype(bool), aabb)


def build_occupancy(frame: FieldFrame, render_mlp, threshold: float, dims=None,
                    chunk: int = 65536) -> OccupancyGrid:
    """Mark cells whose center opacity ``1 - exp(-sigma * diag)`` reaches ``threshold``.

    ``render_mlp`` only needs a ``density(features)`` method.
    """
    dims = frame.coeff.dims if dims is None else tuple(dims)
    occ = OccupancyGrid(np.zeros(dims, dtype=bool), frame.aabb)
    centers = occ.cell_centers()
    delta = float(np.linalg.norm(occ.cell_size))
    alpha = np.empty(len(centers))
    for s in range(0, len(centers), chunk):
        feat = fuse_features(frame, centers[s:s + chunk])
        alpha[s:s + chunk] = -np.expm1(-render_mlp.density(feat) * delta)
    occ.bits = (alpha >= threshold).reshape(dims)
    return occ
