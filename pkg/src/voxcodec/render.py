"""Differentiable volume renderer with a tiny feature-to-radiance MLP."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .field import FieldFrame, FusionCache, OccupancyGrid, fuse_backward, fuse_features

N_FREQ = 4
DIR_ENC_DIM = 3 * 2 * N_FREQ
HIDDEN = 64


# ---------------------------------------------------------------- cameras and rays


@dataclass
class Camera:
    """Pinhole camera, OpenCV axes (x right, y down, z forward).

    ``rotation`` maps camera axes to world axes; ``translation`` is the
    camera center in world units.
    """

    focal: float
    cx: float
    cy: float
    width: int
    height: int
    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        if not np.allclose(self.rotation @ self.rotation.T, np.eye(3), atol=1e-9, rtol=0):
            raise ValueError("camera rotation is not orthonormal")

    @property
    def forward(self) -> np.ndarray:
        return self.rotation[:, 2]

    def project(self, pts) -> np.ndarray:
        """World points to continuous pixel coordinates ``(col, row)``."""
        cam = (np.atleast_2d(pts) - self.translation) @ self.rotation
        return np.stack([self.focal * cam[:, 0] / cam[:, 2] + self.cx,
                         self.focal * cam[:, 1] / cam[:, 2] + self.cy], axis=1)


def look_at(eye, target, up, focal, width, height) -> Camera:
    eye, target, up = (np.asarray(v, dtype=np.float64) for v in (eye, target, up))
    z = target - eye
    z /= np.linalg.norm(z)
    x = np.cross(z, up)
    if np.linalg.norm(x) < 1e-12:
        x = np.cross(z, [1.0, 0.0, 0.0])
    x /= np.linalg.norm(x)
    y = np.cross(z, x)
    rot = np.stack([x, y, z], axis=1)
    return Camera(float(focal), width / 2.0, height / 2.0, int(width), int(height), rot, eye)


@dataclass
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    pixel: tuple[int, int]


@dataclass
class RayBatch:
    origins: np.ndarray      # (R, 3)
    directions: np.ndarray   # (R, 3) unit
    pixels: np.ndarray       # (R, 2) (row, col)

    def __len__(self):
        return len(self.origins)

    def __getitem__(self, i) -> Ray:
        return Ray(self.origins[i], self.directions[i], tuple(int(p) for p in self.pixels[i]))


def generate_rays(camera: Camera, pixels=None) -> RayBatch:
    """Rays through pixel centers; ``pixels`` is an iterable of ``(row, col)``."""
    if pixels is None:
        rows, cols = np.meshgrid(np.arange(camera.height), np.arange(camera.width), indexing="ij")
        pix = np.stack([rows.ravel(), cols.ravel()], axis=1)
    else:
        pix = np.asarray(pixels, dtype=np.int64).reshape(-1, 2)
    bad = (pix[:, 0] < 0) | (pix[:, 0] >= camera.height) | (pix[:, 1] < 0) | (pix[:, 1] >= camera.width)
    if np.any(bad):
        raise ValueError(f"pixel {pix[np.argmax(bad)].tolist()} outside {camera.height}x{camera.width} image")
    d_cam = np.stack([(pix[:, 1] + 0.5 - camera.cx) / camera.focal,
                      (pix[:, 0] + 0.5 - camera.cy) / camera.focal,
                      np.ones(len(pix))], axis=1)
    d = d_cam @ camera.rotation.T
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    origins = np.broadcast_to(camera.translation, d.shape).copy()
    return RayBatch(origins, d, pix)


# ---------------------------------------------------------------- sampling


@dataclass
class SamplePoint:
    x: np.ndarray
    delta: float
    t: float


@dataclass
class SampleBatch:
    points: np.ndarray     # (S, 3)
    t: np.ndarray          # (S,)
    delta: np.ndarray      # (S,)
    ray_index: np.ndarray  # (S,) sorted ascending; t increasing within a ray
    n_rays: int


def ray_box(origins, directions, aabb):
    """Slab test; returns ``(t_near, t_far)`` with ``t_near`` clamped at 0."""
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / directions
        t1 = (aabb[0] - origins) * inv
        t2 = (aabb[1] - origins) * inv
    tmin = np.where(np.isnan(t1), -np.inf, np.minimum(t1, t2))
    tmax = np.where(np.isnan(t1), np.inf, np.maximum(t1, t2))
    return np.maximum(tmin.max(axis=1), 0.0), tmax.min(axis=1)


def sample_rays(origins, directions, occ: OccupancyGrid, step: float) -> SampleBatch:
    """Uniform midpoint samples inside the box, culled by occupancy.

    Every retained sample integrates over one step length.
    """
    if step <= 0:
        raise ValueError("step must be positive")
    origins = np.atleast_2d(origins)
    directions = np.atleast_2d(directions)
    t0, t1 = ray_box(origins, directions, occ.aabb)
    n = np.where(t1 > t0, np.ceil((t1 - t0) / step - 0.5), 0).astype(np.int64)
    n = np.maximum(n, 0)
    ray_index = np.repeat(np.arange(len(origins)), n)
    starts = np.cumsum(n) - n
    k = np.arange(n.sum()) - np.repeat(starts, n)
    t = t0[ray_index] + (k + 0.5) * step
    pts = origins[ray_index] + t[:, None] * directions[ray_index]
    pts = np.clip(pts, occ.aabb[0], occ.aabb[1])
    keep = occ.lookup(pts) if len(pts) else np.zeros(0, dtype=bool)
    return SampleBatch(pts[keep], t[keep], np.full(int(keep.sum()), float(step)),
                       ray_index[keep], len(origins))


def sample_ray(ray: Ray, occ: OccupancyGrid, step: float) -> list[SamplePoint]:
    sb = sample_rays(ray.origin[None], ray.direction[None], occ, step)
    return [SamplePoint(p, float(d), float(t)) for p, d, t in zip(sb.points, sb.delta, sb.t)]


# ---------------------------------------------------------------- compositing


@dataclass
class CompositeCache:
    sigma: np.ndarray
    rgb: np.ndarray
    delta: np.ndarray
    ray_index: np.ndarray
    trans: np.ndarray       # T_i
    weights: np.ndarray     # T_i * alpha_i
    bg: np.ndarray
    n_rays: int


def _segment_sum(values, ray_index, n_rays):
    if values.ndim == 1:
        return np.bincount(ray_index, weights=values, minlength=n_rays)
    return np.stack([np.bincount(ray_index, weights=values[:, c], minlength=n_rays)
                     for c in range(values.shape[1])], axis=1)


def _exclusive_segment_cumsum(values, ray_index, n_rays):
    """Sum of values at earlier samples of the same ray."""
    csum = np.cumsum(values)
    totals = np.bincount(ray_index, weights=values, minlength=n_rays)
    ray_start = np.cumsum(totals) - totals
    return csum - values - ray_start[ray_index]


def composite(sigma, rgb, delta, ray_index, n_rays, bg=(0.0, 0.0, 0.0)):
    """Alpha-composite samples front to back; returns ``(colors, cache)``.

    ``C = sum_i T_i alpha_i c_i + (1 - sum_i T_i alpha_i) * bg`` with
    ``alpha_i = 1 - exp(-sigma_i delta_i)`` and ``T_i = prod_{j<i} (1 - alpha_j)``.
    """
    sigma = np.asarray(sigma, dtype=np.float64)
    rgb = np.asarray(rgb, dtype=np.float64).reshape(-1, 3)
    delta = np.asarray(delta, dtype=np.float64)
    ray_index = np.asarray(ray_index, dtype=np.int64)
    bg = np.asarray(bg, dtype=np.float64)
    tau = sigma * delta
    trans = np.exp(-_exclusive_segment_cumsum(tau, ray_index, n_rays))
    alpha = -np.expm1(-tau)
    weights = trans * alpha
    acc = _segment_sum(weights, ray_index, n_rays)
    color = _segment_sum(weights[:, None] * rgb, ray_index, n_rays) + (1.0 - acc)[:, None] * bg
    return color, CompositeCache(sigma, rgb, delta, ray_index, trans, weights, bg, n_rays)


def composite_backward(cache: CompositeCache, d_color):
    """Gradients of the composited colors w.r.t. per-sample sigma and rgb."""
    g = np.asarray(d_color, dtype=np.float64)[cache.ray_index]           # (S, 3)
    shifted = cache.rgb - cache.bg
    d_rgb = cache.weights[:, None] * g
    contrib = np.einsum("sc,sc->s", g, shifted) * cache.weights           # g . w_i (c_i - bg)
    # sum over later samples of the same ray
    later = (_segment_sum(contrib, cache.ray_index, cache.n_rays)[cache.ray_index]
             - _exclusive_segment_cumsum(contrib, cache.ray_index, cache.n_rays) - contrib)
    t_next = cache.trans * np.exp(-cache.sigma * cache.delta)
    d_tau = t_next * np.einsum("sc,sc->s", g, shifted) - later
    return d_tau * cache.delta, d_rgb


# ---------------------------------------------------------------- rendering MLP


def direction_encoding(d) -> np.ndarray:
    d = np.atleast_2d(d)
    parts = []
    for k in range(N_FREQ):
        parts.append(np.sin((2.0 ** k) * np.pi * d))
        parts.append(np.cos((2.0 ** k) * np.pi * d))
    return np.concatenate(parts, axis=1)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class RenderMLP:
    """Two hidden layers of width 64.

    Density is read from the first hidden layer (view independent); color
    comes from the second, which also sees a sinusoidal direction encoding.
    """

    param_names = ("W1", "b1", "Ws", "bs", "W2", "b2", "W3", "b3")

    def __init__(self, channels=4, hidden=HIDDEN, rng=None, params=None):
        self.channels = channels
        self.hidden = hidden
        if params is None:
            rng = np.random.default_rng() if rng is None else rng
            he = lambda fan_in, shape: rng.uniform(-1, 1, shape) * np.sqrt(6.0 / fan_in)
            params = {
                "W1": he(channels, (channels, hidden)),
                "b1": rng.uniform(-0.1, 0.1, hidden),
                "Ws": he(hidden, (hidden, 1)) * 0.1,
                "bs": np.zeros(1),
                "W2": he(hidden + DIR_ENC_DIM, (hidden + DIR_ENC_DIM, hidden)),
                "b2": np.zeros(hidden),
                "W3": he(hidden, (hidden, 3)) * 0.1,
                "b3": np.zeros(3),
            }
        self.params = {k: np.asarray(params[k], dtype=np.float64) for k in self.param_names}

    def copy(self) -> "RenderMLP":
        return RenderMLP(self.channels, self.hidden, params={k: v.copy() for k, v in self.params.items()})

    def tensors(self) -> list[np.ndarray]:
        return [self.params[k] for k in self.param_names]

    @classmethod
    def from_tensors(cls, tensors) -> "RenderMLP":
        params = dict(zip(cls.param_names, tensors))
        return cls(params["W1"].shape[0], params["W1"].shape[1], params=params)

    def density(self, feat) -> np.ndarray:
        p = self.params
        h1 = np.maximum(np.atleast_2d(feat) @ p["W1"] + p["b1"], 0.0)
        return np.logaddexp(0.0, h1 @ p["Ws"] + p["bs"])[:, 0]

    def forward(self, feat, enc):
        """Returns ``(rgb, sigma, cache)`` for features ``(S, C)`` and encodings ``(S, 24)``."""
        p = self.params
        a1 = feat @ p["W1"] + p["b1"]
        h1 = np.maximum(a1, 0.0)
        s_raw = (h1 @ p["Ws"] + p["bs"])[:, 0]
        sigma = np.logaddexp(0.0, s_raw)
        x2 = np.concatenate([h1, enc], axis=1)
        a2 = x2 @ p["W2"] + p["b2"]
        h2 = np.maximum(a2, 0.0)
        rgb = _sigmoid(h2 @ p["W3"] + p["b3"])
        return rgb, sigma, (feat, a1, h1, s_raw, x2, a2, h2, rgb)

    def backward(self, cache, d_rgb, d_sigma):
        """Returns ``(param_grads, d_feat)``."""
        p = self.params
        feat, a1, h1, s_raw, x2, a2, h2, rgb = cache
        da3 = d_rgb * rgb * (1.0 - rgb)
        grads = {"W3": h2.T @ da3, "b3": da3.sum(0)}
        da2 = (da3 @ p["W3"].T) * (a2 > 0)
        grads["W2"] = x2.T @ da2
        grads["b2"] = da2.sum(0)
        dh1 = (da2 @ p["W2"].T)[:, :self.hidden]
        ds = (d_sigma * _sigmoid(s_raw))[:, None]
        grads["Ws"] = h1.T @ ds
        grads["bs"] = ds.sum(0)
        dh1 = dh1 + ds @ p["Ws"].T
        da1 = dh1 * (a1 > 0)
        grads["W1"] = feat.T @ da1
        grads["b1"] = da1.sum(0)
        return grads, da1 @ p["W1"].T


# ---------------------------------------------------------------- full pipeline


@dataclass
class RenderCache:
    samples: SampleBatch
    fusion: FusionCache
    mlp: tuple
    comp: CompositeCache


def render_samples(frame: FieldFrame, mlp: RenderMLP, samples: SampleBatch, directions,
                   bg=(0.0, 0.0, 0.0)):
    """Shade and composite an already sampled ray batch; returns ``(colors, cache)``."""
    directions = np.atleast_2d(directions)
    if len(samples.points):
        feat, fcache = fuse_features(frame, samples.points, return_cache=True)
    else:
        feat, fcache = np.zeros((0, frame.channels)), None
    enc = direction_encoding(directions)[samples.ray_index]
    rgb, sigma, mcache = mlp.forward(feat, enc)
    color, ccache = composite(sigma, rgb, samples.delta, samples.ray_index, samples.n_rays, bg)
    return color, RenderCache(samples, fcache, mcache, ccache)


def render_rays(frame: FieldFrame, mlp: RenderMLP, origins, directions, occ: OccupancyGrid,
                step: float, bg=(0.0, 0.0, 0.0)):
    samples = sample_rays(origins, directions, occ, step)
    return render_samples(frame, mlp, samples, directions, bg)


def render_backward(frame: FieldFrame, mlp: RenderMLP, cache: RenderCache, d_color):
    """Gradients of the pixel loss w.r.t. grid values (one array per grid) and MLP params."""
    d_sigma, d_rgb = composite_backward(cache.comp, d_color)
    mlp_grads, d_feat = mlp.backward(cache.mlp, d_rgb, d_sigma)
    if cache.fusion is None:
        grid_grads = [np.zeros_like(g.values) for g in frame.grids]
    else:
        grid_grads = fuse_backward(frame, cache.fusion, d_feat)
    return grid_grads, mlp_grads


def render_ray(samples: list[SamplePoint], frame: FieldFrame, mlp: RenderMLP, ray: Ray,
               bg=(0.0, 0.0, 0.0)) -> np.ndarray:
    """Composited color of one ray from an explicit sample list."""
    if samples:
        pts = np.array([s.x for s in samples])
        batch = SampleBatch(pts, np.array([s.t for s in samples]),
                            np.array([s.delta for s in samples]), np.zeros(len(samples), np.int64), 1)
    else:
        batch = SampleBatch(np.zeros((0, 3)), np.zeros(0), np.zeros(0), np.zeros(0, np.int64), 1)
    color, _ = render_samples(frame, mlp, batch, ray.direction[None], bg)
    return color[0]


def render_image(frame: FieldFrame, mlp: RenderMLP, camera: Camera, occ: OccupancyGrid,
                 step: float, bg=(0.0, 0.0, 0.0), chunk: int = 4096) -> np.ndarray:
    rays = generate_rays(camera)
    out = np.empty((len(rays), 3))
    for s in range(0, len(rays), chunk):
        out[s:s + chunk], _ = render_rays(frame, mlp, rays.origins[s:s + chunk],
                                          rays.directions[s:s + chunk], occ, step, bg)
    return out.reshape(camera.height, camera.width, 3)
