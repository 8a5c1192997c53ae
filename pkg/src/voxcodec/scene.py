"""Synthetic dynamic scenes, analytic ground-truth rendering and dataset IO.

Dataset directory layout::

    manifest.txt          key = value lines (see ``MultiViewDataset.save``)
    cameras.txt           one camera per row
    frame_{t}/cam_{c}.ppm binary 8-bit portable pixmaps
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .render import Camera, composite, generate_rays, look_at, ray_box


@dataclass
class Primitive:
    kind: str                     # "sphere" or "box"
    center: tuple                 # position at frame 0
    size: float                   # sphere radius / box half-extent
    color: tuple
    density: float = 40.0
    softness: float = 0.03        # width of the density falloff at the surface
    velocity: tuple = (0.0, 0.0, 0.0)      # world units per frame
    wobble: tuple = (0.0, 0.0, 0.0)        # sinusoidal amplitude
    period: float = 40.0                   # frames

    def __post_init__(self):
        for name in ("center", "color", "velocity", "wobble"):
            setattr(self, name, tuple(float(v) for v in getattr(self, name)))

    def center_at(self, t) -> np.ndarray:
        c = np.asarray(self.center, dtype=np.float64)
        return (c + np.asarray(self.velocity) * t
                + np.asarray(self.wobble) * np.sin(2 * np.pi * t / self.period))

    def signed_distance(self, pts, t) -> np.ndarray:
        d = pts - self.center_at(t)
        if self.kind == "sphere":
            return np.linalg.norm(d, axis=-1) - self.size
        if self.kind == "box":
            q = np.abs(d) - self.size
            outside = np.linalg.norm(np.maximum(q, 0.0), axis=-1)
            return outside + np.minimum(q.max(axis=-1), 0.0)
        raise ValueError(f"unknown primitive kind {self.kind!r}")

    def sigma(self, pts, t) -> np.ndarray:
        z = -self.signed_distance(pts, t) / self.softness
        return self.density * 0.5 * (1.0 + np.tanh(0.5 * z))


@dataclass
class SyntheticSceneSpec:
    primitives: list[Primitive]
    n_frames: int = 20
    aabb: tuple = ((-1.0, -1.0, -1.0), (1.0, 1.0, 1.0))
    background: tuple = (0.0, 0.0, 0.0)
    seed: int = 0

    def __post_init__(self):
        self.primitives = [p if isinstance(p, Primitive) else Primitive(**p) for p in self.primitives]
        self.aabb = tuple(tuple(float(v) for v in corner) for corner in self.aabb)
        self.background = tuple(float(v) for v in self.background)
        box = np.asarray(self.aabb, dtype=np.float64)
        for p in self.primitives:
            if p.density < 0:
                raise ValueError("primitive densities must be non-negative")
            reach = p.size * (np.sqrt(3) if p.kind == "box" else 1.0)
            for t in range(self.n_frames):
                c = p.center_at(t)
                if np.any(c - reach < box[0]) or np.any(c + reach > box[1]):
                    raise ValueError(f"{p.kind} leaves the scene box at frame {t}")

    def density_color(self, pts, t):
        """Analytic density and density-weighted color at world points."""
        pts = np.atleast_2d(pts)
        sig = np.zeros(len(pts))
        col = np.zeros((len(pts), 3))
        for p in self.primitives:
            s = p.sigma(pts, t)
            sig += s
            col += s[:, None] * np.asarray(p.color, dtype=np.float64)
        col = np.where(sig[:, None] > 0, col / np.maximum(sig, 1e-300)[:, None], 0.0)
        return sig, col

    def to_json(self) -> str:
        d = asdict(self)
        return json.dumps(d, indent=2)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSceneSpec":
        d = json.loads(text)
        d["primitives"] = [Primitive(**p) for p in d.get("primitives", [])]
        return cls(**d)


def default_scene(n_frames=20, speed=1.0) -> SyntheticSceneSpec:
    """Three soft primitives drifting slowly; ``speed`` scales every motion."""
    s = float(speed)
    return SyntheticSceneSpec(
        primitives=[
            Primitive("sphere", (-0.25, 0.0, 0.1), 0.35, (0.9, 0.25, 0.2), softness=0.06,
                      velocity=(0.006 * s, 0.0, 0.0)),
            Primitive("sphere", (0.35, 0.2, -0.15), 0.25, (0.2, 0.5, 0.9), softness=0.06,
                      wobble=(0.0, 0.06 * s, 0.0), period=24.0),
            Primitive("box", (0.05, -0.35, 0.25), 0.16, (0.3, 0.85, 0.35), softness=0.05,
                      velocity=(0.0, 0.0, -0.004 * s)),
        ],
        n_frames=n_frames,
    )


def ring_cameras(n_train=8, n_test=2, resolution=64, radius=3.2, elevation=0.35,
                 focal_scale=1.1) -> tuple[list[Camera], list[int], list[int]]:
    """Cameras on a ring looking at the origin, plus held-out views between them."""
    cams = []
    focal = focal_scale * resolution
    for k in range(n_train):
        a = 2 * np.pi * k / n_train
        el = elevation * (1 if k % 2 == 0 else -0.6)
        eye = radius * np.array([np.cos(a) * np.cos(el), np.sin(el), np.sin(a) * np.cos(el)])
        cams.append(look_at(eye, np.zeros(3), [0, 1, 0], focal, resolution, resolution))
    for k in range(n_test):
        a = 2 * np.pi * (k + 0.5) / max(n_test, 1) + np.pi / n_train
        eye = radius * np.array([np.cos(a) * np.cos(0.15), np.sin(0.15), np.sin(a) * np.cos(0.15)])
        cams.append(look_at(eye, np.zeros(3), [0, 1, 0], focal, resolution, resolution))
    return cams, list(range(n_train)), list(range(n_train, n_train + n_test))


def render_analytic(spec: SyntheticSceneSpec, camera: Camera, t, n_samples=1024, chunk=256) -> np.ndarray:
    """Dense ray marching of the analytic field; independent of the learned pipeline."""
    rays = generate_rays(camera)
    box = np.asarray(spec.aabb, dtype=np.float64)
    out = np.empty((len(rays), 3))
    for s in range(0, len(rays), chunk):
        o, d = rays.origins[s:s + chunk], rays.directions[s:s + chunk]
        t0, t1 = ray_box(o, d, box)
        seg = np.maximum(t1 - t0, 0.0)
        frac = (np.arange(n_samples) + 0.5) / n_samples
        ts = t0[:, None] + seg[:, None] * frac[None]
        pts = o[:, None, :] + ts[..., None] * d[:, None, :]
        sig, col = spec.density_color(pts.reshape(-1, 3), t)
        delta = np.repeat(seg / n_samples, n_samples)
        ray_index = np.repeat(np.arange(len(o)), n_samples)
        out[s:s + chunk], _ = composite(sig, col, delta, ray_index, len(o), spec.background)
    return out.reshape(camera.height, camera.width, 3)


def quantize8(img) -> np.ndarray:
    return np.round(np.clip(img, 0.0, 1.0) * 255.0) / 255.0


@dataclass
class MultiViewDataset:
    cameras: list[Camera]
    train_ids: list[int]
    test_ids: list[int]
    images: np.ndarray                  # (frames, cameras, H, W, 3) in [0, 1]
    aabb: np.ndarray
    background: tuple = (0.0, 0.0, 0.0)
    meta: dict = field(default_factory=dict)

    @property
    def n_frames(self) -> int:
        return int(self.images.shape[0])

    @property
    def resolution(self) -> tuple[int, int]:
        return int(self.images.shape[2]), int(self.images.shape[3])

    def subset(self, frames) -> "MultiViewDataset":
        return MultiViewDataset(self.cameras, self.train_ids, self.test_ids,
                                self.images[list(frames)], self.aabb, self.background, dict(self.meta))

    def save(self, root):
        root = Path(root)
        root.mkdir(parents=True, exist_ok=True)
        h, w = self.resolution
        lines = {
            "frames": self.n_frames, "cameras": len(self.cameras), "width": w, "height": h,
            "train_cameras": ",".join(map(str, self.train_ids)),
            "test_cameras": ",".join(map(str, self.test_ids)),
            "background": ",".join(repr(float(c)) for c in self.background),
            "aabb": ",".join(repr(float(v)) for v in np.asarray(self.aabb).ravel()),
        }
        lines.update({k: v for k, v in self.meta.items() if k not in lines})
        (root / "manifest.txt").write_text("".join(f"{k} = {v}\n" for k, v in lines.items()))
        save_cameras(root / "cameras.txt", self.cameras)
        for t in range(self.n_frames):
            (root / f"frame_{t}").mkdir(exist_ok=True)
            for c in range(len(self.cameras)):
                save_image(root / f"frame_{t}" / f"cam_{c}.ppm", self.images[t, c])

    @classmethod
    def load(cls, root) -> "MultiViewDataset":
        root = Path(root)
        man = read_keyvalue(root / "manifest.txt")
        cams = load_cameras(root / "cameras.txt")
        n_frames = int(man["frames"])
        imgs = np.stack([np.stack([load_image(root / f"frame_{t}" / f"cam_{c}.ppm")
                                   for c in range(len(cams))]) for t in range(n_frames)])
        ids = lambda key: [int(x) for x in man.get(key, "").split(",") if x.strip()]
        aabb = np.array([float(x) for x in man["aabb"].split(",")]).reshape(2, 3)
        bg = tuple(float(x) for x in man["background"].split(","))
        known = {"frames", "cameras", "width", "height", "train_cameras", "test_cameras",
                 "background", "aabb"}
        return cls(cams, ids("train_cameras"), ids("test_cameras"), imgs, aabb, bg,
                   {k: v for k, v in man.items() if k not in known})


def generate_dataset(spec: SyntheticSceneSpec, cameras=None, resolution=64, train_ids=None,
                     test_ids=None, n_samples=1024) -> MultiViewDataset:
    if cameras is None:
        cameras, train_ids, test_ids = ring_cameras(resolution=resolution)
    train_ids = list(range(len(cameras))) if train_ids is None else list(train_ids)
    test_ids = [] if test_ids is None else list(test_ids)
    imgs = np.stack([
        np.stack([quantize8(render_analytic(spec, cam, t, n_samples)) for cam in cameras])
        for t in range(spec.n_frames)
    ])
    return MultiViewDataset(cameras, train_ids, test_ids, imgs, np.asarray(spec.aabb, dtype=np.float64),
                            tuple(spec.background), {"seed": spec.seed})


# ---------------------------------------------------------------- text / image IO


def read_keyvalue(path) -> dict:
    """``key = value`` lines; ``#`` starts a comment."""
    out = {}
    for n, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def save_cameras(path, cameras):
    rows = ["# focal cx cy width height r00 r01 r02 r10 r11 r12 r20 r21 r22 tx ty tz"]
    for c in cameras:
        vals = [c.focal, c.cx, c.cy, c.width, c.height, *c.rotation.ravel(), *c.translation]
        rows.append(" ".join(repr(float(v)) for v in vals))
    Path(path).write_text("\n".join(rows) + "\n")


def load_cameras(path) -> list[Camera]:
    cams = []
    for line in Path(path).read_text().splitlines():
        if not line.strip() or line.startswith("#"):
            continue
        v = [float(x) for x in line.split()]
        cams.append(Camera(v[0], v[1], v[2], int(v[3]), int(v[4]),
                           np.array(v[5:14]).reshape(3, 3), np.array(v[14:17])))
    return cams


def save_image(path, img):
    """Binary PPM (P6), 8 bits per channel."""
    img = np.asarray(img)
    h, w = img.shape[:2]
    data = np.round(np.clip(img, 0.0, 1.0) * 255.0).astype(np.uint8)
    Path(path).write_bytes(f"P6\n{w} {h}\n255\n".encode() + data.tobytes())


def load_image(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    fields, pos = [], 0
    while len(fields) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        fields.append(raw[pos:end])
        pos = end
    if fields[0] != b"P6" or int(fields[3]) != 255:
        raise ValueError(f"{path}: only 8-bit binary PPM is supported")
    w, h = int(fields[1]), int(fields[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + 3 * w * h], dtype=np.uint8)
    if data.size != 3 * w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return data.reshape(h, w, 3) / 255.0
