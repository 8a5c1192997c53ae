"""Per-frame rate-distortion training and group-of-frames orchestration."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .codec import (
    CodedFrame, DecodeBuffer, DecodedFrame, SequenceHeader, decode_frame, encode_frame,
    reconstruct, roundtrip_params, write_sequence,
)
from .entropy import (
    SYMBOL_MAX, SYMBOL_MIN, DivergenceError, ImplicitEntropyModel, gather_contexts,
    grid_to_volumes, rate_backward, rate_bits,
)
from .field import FieldFrame, OccupancyGrid, build_occupancy, make_frame
from .metrics import psnr, ssim
from .render import RenderMLP, generate_rays, render_backward, render_image, render_rays
from .scene import MultiViewDataset, read_keyvalue

log = logging.getLogger(__name__)

LAMBDAS = (7e-4, 1e-3, 2e-3, 5e-3)


def _dims(text) -> tuple[int, int, int]:
    if isinstance(text, (int, np.integer)):
        parts = [int(text)]
    elif isinstance(text, str):
        parts = [int(p) for p in text.replace("x", ",").split(",") if p.strip()]
    else:
        parts = [int(p) for p in text]
    if len(parts) == 1:
        parts *= 3
    if len(parts) != 3:
        raise ValueError(f"bad grid dims {text!r}")
    return tuple(parts)


@dataclass
class TrainConfig:
    lam: float = 1e-3
    alpha: float = 10.0
    group_size: int = 20
    iters_i: int = 3000
    iters_p: int = 1000
    lr_grid: float = 1e-1
    lr_residual: float = 5e-3       # grid learning rate for P-frame residuals
    lr_mlp: float = 1e-3
    lr_entropy: float = 1e-2
    lr_q: float = 1e-3
    lr_decay: float = 0.05         # learning-rate multiplier reached at the last iteration
    ray_batch: int = 1024
    rate_batch: int = 16384        # voxels per iteration for the rate estimate
    seed: int = 0
    grid_dims: tuple = (32, 32, 32)
    basis_dims: tuple = ((32, 32, 32), (16, 16, 16), (8, 8, 8))
    channels: int = 4
    qstep_init: float = 0.02
    adaptive_q: bool = True
    init_scale: float = 1e-2
    render_step: float = 0.0       # 0 -> aabb diagonal / 256
    occ_threshold: float = 1e-2
    occ_every: int = 100
    occ_warmup: int = 200
    log_every: int = 50

    def __post_init__(self):
        self.grid_dims = _dims(self.grid_dims) if not isinstance(self.grid_dims, tuple) else self.grid_dims
        self.basis_dims = tuple(_dims(d) if not isinstance(d, tuple) else d for d in self.basis_dims)
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ValueError("lambda must be a positive finite number")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if self.group_size < 1:
            raise ValueError("group_size must be at least 1")

    def step_for(self, aabb) -> float:
        if self.render_step > 0:
            return self.render_step
        box = np.asarray(aabb, dtype=np.float64)
        return float(np.linalg.norm(box[1] - box[0]) / 256.0)

    # key = value text format
    _KEYS = {"lambda": "lam"}

    def to_text(self) -> str:
        rows = []
        for f in fields(self):
            v = getattr(self, f.name)
            key = {"lam": "lambda"}.get(f.name, f.name)
            if f.name == "grid_dims":
                v = ",".join(map(str, v))
            elif f.name == "basis_dims":
                v = ";".join(",".join(map(str, d)) for d in v)
            rows.append(f"{key} = {v}")
        return "\n".join(rows) + "\n"

    @classmethod
    def from_mapping(cls, mapping: dict, base: "TrainConfig | None" = None) -> "TrainConfig":
        base = cls() if base is None else base
        vals = asdict(base)
        types = {f.name: type(getattr(base, f.name)) for f in fields(cls)}
        for key, raw in mapping.items():
            name = cls._KEYS.get(key, key).replace("-", "_")
            if name not in vals:
                raise ValueError(f"unknown config key {key!r}")
            if name == "grid_dims":
                vals[name] = _dims(raw)
            elif name == "basis_dims":
                vals[name] = tuple(_dims(p) for p in (raw.split(";") if isinstance(raw, str) else raw))
            elif types[name] is bool:
                vals[name] = raw if isinstance(raw, bool) else str(raw).lower() in ("1", "true", "yes", "on")
            else:
                vals[name] = types[name](raw)
        return cls(**vals)

    @classmethod
    def from_file(cls, path, base=None) -> "TrainConfig":
        return cls.from_mapping(read_keyvalue(path), base)


@dataclass
class LossReport:
    iteration: int
    distortion: float
    rate: float
    reg: float
    total: float

    def __post_init__(self):
        for name in ("distortion", "rate", "reg", "total"):
            v = getattr(self, name)
            if not math.isfinite(v) or v < 0:
                raise DivergenceError(f"{name} loss is {v} at iteration {self.iteration}")


def total_loss(rendered, ground_truth, rate_mean, reg_mean, cfg: TrainConfig | None = None,
               frame_type="P", iteration=0, lam=None, alpha=None) -> LossReport:
    """``MSE + lambda * (L_rate + alpha * L_reg)``; I-frames carry no residual term.

    ``lam`` and ``alpha`` override the values in ``cfg`` when given.
    """
    lam = cfg.lam if lam is None else lam
    alpha = cfg.alpha if alpha is None else alpha
    rendered = np.asarray(rendered, dtype=np.float64)
    ground_truth = np.asarray(ground_truth, dtype=np.float64)
    if rendered.shape != ground_truth.shape:
        raise ValueError("rendered and ground-truth pixel counts differ")
    mse = float(np.mean((rendered - ground_truth) ** 2))
    reg = 0.0 if frame_type == "I" else float(reg_mean)
    total = mse + lam * (float(rate_mean) + alpha * reg)
    return LossReport(iteration, mse, float(rate_mean), reg, total)


# ---------------------------------------------------------------- quantisation


@dataclass
class QuantSim:
    noisy: np.ndarray | None   # values / q + U(-1/2, 1/2), rate path
    dequant: np.ndarray        # q * round(values / q), render path
    ints: np.ndarray
    offset: np.ndarray         # round(v/q) - v/q; d(dequant)/dq under straight-through rounding


def simulate_quantization(values, q, rng=None, training=True) -> QuantSim:
    """Quantise ``values`` with step ``q``.

    The render path is ``q * round(v / q)`` with identity gradient to ``v`` and
    gradient ``round(v/q) - v/q`` to ``q``; the rate path adds uniform noise.
    """
    if not q > 0:
        raise ValueError(f"quantization step must be positive, got {q}")
    values = np.asarray(values, dtype=np.float64)
    scaled = values / q
    ints = np.clip(np.round(scaled), SYMBOL_MIN, SYMBOL_MAX)
    noisy = None
    if training:
        rng = np.random.default_rng() if rng is None else rng
        noisy = scaled + rng.uniform(-0.5, 0.5, size=scaled.shape)
    return QuantSim(noisy, q * ints, ints.astype(np.int64), ints - scaled)


# ---------------------------------------------------------------- optimiser


def adam_step(param, grad, state: dict, lr: float, beta1=0.9, beta2=0.99, eps=1e-8):
    """One Adam update; ``state`` holds ``m``, ``v`` and the step count ``t``."""
    if "m" not in state:
        state["m"] = np.zeros_like(param)
        state["v"] = np.zeros_like(param)
        state["t"] = 0
    state["t"] += 1
    state["m"] = beta1 * state["m"] + (1 - beta1) * grad
    state["v"] = beta2 * state["v"] + (1 - beta2) * grad * grad
    m_hat = state["m"] / (1 - beta1 ** state["t"])
    v_hat = state["v"] / (1 - beta2 ** state["t"])
    return param - lr * m_hat / (np.sqrt(v_hat) + eps)


class Adam:
    def __init__(self):
        self.state: dict[str, dict] = {}

    def step(self, params: dict, grads: dict, lr: float):
        for k, g in grads.items():
            params[k] = adam_step(params[k], g, self.state.setdefault(k, {}), lr)


# ---------------------------------------------------------------- frame training


@dataclass
class FrameResult:
    field: FieldFrame                  # trained values (absolute for I, residual for P)
    entropy_model: ImplicitEntropyModel
    render_mlp: RenderMLP
    history: list[LossReport]
    coded: CodedFrame
    bitstream: bytes = b""
    decoded: DecodedFrame | None = None
    seconds: float = 0.0


class _RayPool:
    """All training rays of the rig, reused for every frame."""

    def __init__(self, dataset: MultiViewDataset):
        origins, dirs, cam_pix = [], [], []
        for c in dataset.train_ids:
            rays = generate_rays(dataset.cameras[c])
            origins.append(rays.origins)
            dirs.append(rays.directions)
            cam_pix.append(np.column_stack([np.full(len(rays), c), rays.pixels]))
        self.origins = np.concatenate(origins)
        self.dirs = np.concatenate(dirs)
        self.cam_pix = np.concatenate(cam_pix)

    def colors(self, dataset, t, idx):
        cp = self.cam_pix[idx]
        return dataset.images[t, cp[:, 0], cp[:, 1], cp[:, 2]]


def _rate_term(raw, qs, ints_vols, prev_vols, model, rng, n_sub):
    """Stochastic mean-bits estimate over all grids and its gradients."""
    sizes = np.array([v.size for v in ints_vols])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    total = int(offsets[-1])
    pick = np.sort(rng.integers(0, total, size=min(n_sub, total)))
    which = np.searchsorted(offsets, pick, side="right") - 1
    ctx_parts, v_parts, owners = [], [], []
    for g in range(len(ints_vols)):
        local = pick[which == g] - offsets[g]
        if not len(local):
            continue
        prev = None if prev_vols is None else prev_vols[g]
        ctx_parts.append(gather_contexts(ints_vols[g], prev, local))
        scaled = grid_to_volumes(raw[g]).ravel()[local] / qs[g]
        v_parts.append(np.clip(scaled + rng.uniform(-0.5, 0.5, len(local)), SYMBOL_MIN, SYMBOL_MAX))
        owners.append((g, local, scaled))
    ctx = np.concatenate(ctx_parts)
    v = np.concatenate(v_parts)
    params, cache = model.forward(ctx)
    bits = rate_bits(v, params)
    n = len(v)
    dv, psi = rate_backward(v, params, model, cache)
    dv /= n
    psi = {k: g / n for k, g in psi.items()}
    grid_grads = [np.zeros_like(r) for r in raw]
    dlogq = np.zeros(len(raw))
    at = 0
    for g, local, scaled in owners:
        d = dv[at:at + len(local)]
        at += len(local)
        vol_grad = np.bincount(local, weights=d / qs[g], minlength=ints_vols[g].size)
        shape = ints_vols[g].shape
        grid_grads[g] = np.transpose(vol_grad.reshape(shape), (3, 2, 1, 0))
        dlogq[g] = -np.sum(d * scaled)
    return float(bits.mean()), grid_grads, dlogq, psi


def train_frame(dataset: MultiViewDataset, t: int, buffer: DecodeBuffer, cfg: TrainConfig,
                frame_type: str, group_id: int = 0, prev_entropy: ImplicitEntropyModel | None = None,
                rays: _RayPool | None = None) -> FrameResult:
    """Train one frame, then build its decoder-exact coded form."""
    start = time.perf_counter()
    rng = np.random.default_rng([cfg.seed, t])
    aabb = np.asarray(dataset.aabb, dtype=np.float32).astype(np.float64)
    step = cfg.step_for(aabb)
    rays = _RayPool(dataset) if rays is None else rays
    is_i = frame_type == "I"
    if not is_i and buffer.empty:
        raise ValueError("P-frame training needs the previous frame in the decode buffer")

    frame = make_frame(cfg.grid_dims, cfg.basis_dims, cfg.channels, aabb, rng, frame_type, t,
                       cfg.qstep_init, cfg.init_scale)
    raw = [g.values.copy() for g in frame.grids]
    base = None if is_i else buffer.recon
    prev_vols = None if is_i else buffer.volumes
    mlp = RenderMLP(cfg.channels, rng=rng) if is_i else buffer.render_mlp
    if is_i or prev_entropy is None:
        model = ImplicitEntropyModel(rng)
    else:
        model = prev_entropy.copy()
    log_q = np.log(np.full(len(raw), cfg.qstep_init))

    opt_grid, opt_q, opt_mlp, opt_ent = Adam(), Adam(), Adam(), Adam()
    occ = OccupancyGrid.full(cfg.grid_dims, aabb)
    iters = cfg.iters_i if is_i else cfg.iters_p
    n_vox = sum(r.size for r in raw)
    history: list[LossReport] = []

    def recon_frame(qs):
        sims = [simulate_quantization(r, q, training=False) for r, q in zip(raw, qs)]
        vals = [s.dequant if base is None else base[n] + s.dequant for n, s in enumerate(sims)]
        return sims, frame.with_values(vals, qsteps=qs)

    for it in range(iters):
        qs = np.exp(log_q)
        sims, rec = recon_frame(qs)
        if it >= cfg.occ_warmup and (it - cfg.occ_warmup) % cfg.occ_every == 0:
            occ = build_occupancy(rec, mlp, cfg.occ_threshold, cfg.grid_dims).dilate(1)

        idx = rng.integers(0, len(rays.origins), size=cfg.ray_batch)
        gt = rays.colors(dataset, t, idx)
        color, cache = render_rays(rec, mlp, rays.origins[idx], rays.dirs[idx], occ, step, dataset.background)
        d_color = 2.0 * (color - gt) / color.size
        render_grads, mlp_grads = render_backward(rec, mlp, cache, d_color)

        ints_vols = [grid_to_volumes(s.ints) for s in sims]
        rate, rate_grads, rate_dlogq, psi_grads = _rate_term(raw, qs, ints_vols, prev_vols, model,
                                                             rng, cfg.rate_batch)
        reg = 0.0 if is_i else sum(np.abs(r).sum() for r in raw) / n_vox
        report = total_loss(color, gt, rate, reg, cfg, frame_type, it)
        if it % cfg.log_every == 0 or it == iters - 1:
            history.append(report)
            log.debug("frame %d it %d: %s", t, it, report)

        lr_scale = cfg.lr_decay ** (it / max(iters - 1, 1))
        grid_grads = {}
        for n, r in enumerate(raw):
            g = render_grads[n] + cfg.lam * rate_grads[n]
            if not is_i:
                g = g + (cfg.lam * cfg.alpha / n_vox) * np.sign(r)
            grid_grads[n] = g
        params = dict(enumerate(raw))
        opt_grid.step(params, grid_grads, (cfg.lr_grid if is_i else cfg.lr_residual) * lr_scale)
        raw = [params[n] for n in range(len(raw))]
        if cfg.adaptive_q:
            dq = np.array([np.sum(render_grads[n] * sims[n].offset) for n in range(len(raw))]) * qs
            qp = {"log_q": log_q}
            opt_q.step(qp, {"log_q": dq + cfg.lam * rate_dlogq}, cfg.lr_q * lr_scale)
            log_q = qp["log_q"]
        opt_ent.step(model.params, {k: cfg.lam * g for k, g in psi_grads.items()}, cfg.lr_entropy * lr_scale)
        if is_i:
            opt_mlp.step(mlp.params, mlp_grads, cfg.lr_mlp * lr_scale)
        if not all(np.all(np.isfinite(r)) for r in raw):
            raise DivergenceError(f"grid values diverged at frame {t} iteration {it}")

    # decoder-exact artefacts
    q32 = np.exp(log_q).astype(np.float32).astype(np.float64)
    sims = [simulate_quantization(r, q, training=False) for r, q in zip(raw, q32)]
    volumes = [grid_to_volumes(s.ints) for s in sims]
    if is_i:
        mlp = RenderMLP.from_tensors(roundtrip_params(mlp.tensors()))
    model = ImplicitEntropyModel.from_tensors(roundtrip_params(model.tensors()))
    recon_vals = reconstruct(volumes, q32, base)
    recon = frame.with_values(recon_vals, qsteps=q32)
    occ = build_occupancy(recon, mlp, cfg.occ_threshold, cfg.grid_dims).dilate(1)
    coded = CodedFrame(t, frame_type, group_id, aabb, q32, volumes, occ, model,
                       mlp if is_i else None)
    trained = frame.with_values(raw, qsteps=q32)
    return FrameResult(trained, model, mlp, history, coded, seconds=time.perf_counter() - start)


# ---------------------------------------------------------------- sequences


def frame_types(n_frames: int, group_size: int) -> list[str]:
    return ["I" if t % group_size == 0 else "P" for t in range(n_frames)]


@dataclass
class FrameStats:
    frame_index: int
    frame_type: str
    bytes_total: int
    bytes_header: int
    bytes_occupancy: int
    bytes_mlp: int
    bytes_entropy: int
    bytes_grids: int
    psnr_train: float
    ssim_train: float
    psnr_test: float
    ssim_test: float
    final_loss: float
    seconds: float


@dataclass
class SequenceResult:
    config: TrainConfig
    bitstream: bytes
    frames: list[FrameResult]
    stats: list[FrameStats] = field(default_factory=list)

    def mean_bytes(self, frame_type=None) -> float:
        sel = [s.bytes_total for s in self.stats if frame_type in (None, s.frame_type)]
        return float(np.mean(sel)) if sel else float("nan")

    def mean_psnr(self, split="train") -> float:
        return float(np.mean([getattr(s, f"psnr_{split}") for s in self.stats]))


def evaluate_views(decoded: DecodedFrame, dataset: MultiViewDataset, t: int, cams, step) -> tuple[float, float]:
    if not cams:
        return float("nan"), float("nan")
    ps, ss = [], []
    for c in cams:
        img = render_image(decoded.frame, decoded.render_mlp, dataset.cameras[c], decoded.occupancy,
                           step, dataset.background)
        ps.append(psnr(img, dataset.images[t, c]))
        ss.append(ssim(img, dataset.images[t, c]))
    return float(np.mean(ps)), float(np.mean(ss))


def train_sequence(dataset: MultiViewDataset, cfg: TrainConfig, evaluate=True,
                   progress=None) -> SequenceResult:
    """Train, encode and decode every frame in order through the decode buffer."""
    buffer = DecodeBuffer()
    rays = _RayPool(dataset)
    types = frame_types(dataset.n_frames, cfg.group_size)
    step = cfg.step_for(np.asarray(dataset.aabb, dtype=np.float32))
    results, stats, chunks = [], [], []
    prev_entropy = None
    for t, ftype in enumerate(types):
        res = train_frame(dataset, t, buffer, cfg, ftype, t // cfg.group_size, prev_entropy, rays)
        data = encode_frame(res.coded, buffer)
        decoded = decode_frame(data, buffer)
        _check_consistency(res.coded, decoded, buffer)
        buffer.push(decoded)
        prev_entropy = decoded.entropy_model
        res.bitstream, res.decoded = data, decoded
        results.append(res)
        chunks.append(data)
        sizes = decoded.section_bytes
        ptr = pss = pte = sse = float("nan")
        if evaluate:
            ptr, pss = evaluate_views(decoded, dataset, t, dataset.train_ids, step)
            pte, sse = evaluate_views(decoded, dataset, t, dataset.test_ids, step)
        stats.append(FrameStats(t, ftype, sizes["total"], sizes["header"], sizes["occupancy"],
                                sizes["mlp"], sizes["entropy"], sizes["grids"], ptr, pss, pte, sse,
                                res.history[-1].total if res.history else float("nan"), res.seconds))
        log.info("frame %d (%s): %d bytes, train PSNR %.2f dB, %.1fs", t, ftype, sizes["total"], ptr, res.seconds)
        if progress is not None:
            progress(stats[-1])
    header = SequenceHeader(dataset.n_frames, cfg.group_size, step, tuple(float(c) for c in dataset.background))
    return SequenceResult(cfg, write_sequence(header, chunks), results, stats)


def _check_consistency(coded: CodedFrame, decoded: DecodedFrame, buffer: DecodeBuffer):
    for a, b in zip(coded.volumes, decoded.volumes):
        if not np.array_equal(a, b):
            raise RuntimeError("decoded integers differ from the encoder's")
    base = None if coded.frame_type == "I" else buffer.recon
    for a, b in zip(reconstruct(coded.volumes, coded.qsteps, base), decoded.frame.grids):
        if not np.array_equal(a, b.values):
            raise RuntimeError("decoder reconstruction differs from the encoder's")


def rd_sweep(dataset: MultiViewDataset, cfg: TrainConfig, lambdas=LAMBDAS, progress=None) -> list[dict]:
    """One full encode per lambda; returns rows with mean bytes per frame and PSNR."""
    rows = []
    for lam in lambdas:
        res = train_sequence(dataset, TrainConfig.from_mapping({"lam": lam}, cfg), progress=progress)
        rows.append({"lambda": lam, "bytes_per_frame": res.mean_bytes(), "bytes_i": res.mean_bytes("I"),
                     "bytes_p": res.mean_bytes("P"), "psnr_train": res.mean_psnr("train"),
                     "psnr_test": res.mean_psnr("test"), "result": res})
    return rows


SWEEP_COLUMNS = ("lambda", "bytes_per_frame", "bytes_i", "bytes_p", "psnr_train", "psnr_test")


def write_sweep_csv(rows, path):
    lines = [",".join(SWEEP_COLUMNS)]
    lines += [",".join(repr(float(r[c])) for c in SWEEP_COLUMNS) for r in rows]
    Path(path).write_text("\n".join(lines) + "\n")


def read_sweep_csv(path) -> dict[str, np.ndarray]:
    lines = [ln for ln in Path(path).read_text().splitlines() if ln.strip()]
    if not lines:
        raise ValueError(f"{path}: empty CSV")
    header = [h.strip() for h in lines[0].split(",")]
    data = np.array([[float(x) for x in ln.split(",")] for ln in lines[1:]], dtype=np.float64).reshape(-1, len(header))
    return {h: data[:, k] for k, h in enumerate(header)}


def save_run(result: SequenceResult, bitstream_path, manifest_path=None, csv_path=None):
    """Write the bitstream, a text manifest and a per-frame CSV.

    Wall-clock timings go to a separate ``.timing.txt`` file so that the
    manifest and CSV stay byte-identical across runs with the same seed.
    """
    bitstream_path = Path(bitstream_path)
    bitstream_path.write_bytes(result.bitstream)
    manifest_path = Path(manifest_path or bitstream_path.with_suffix(".manifest.txt"))
    csv_path = Path(csv_path or bitstream_path.with_suffix(".frames.csv"))
    lines = ["# effective configuration", result.config.to_text().rstrip(), "",
             "# totals",
             f"bitstream_bytes = {len(result.bitstream)}",
             f"frames = {len(result.stats)}",
             f"i_frames = {sum(s.frame_type == 'I' for s in result.stats)}",
             f"p_frames = {sum(s.frame_type == 'P' for s in result.stats)}",
             f"mean_bytes_per_frame = {result.mean_bytes():.3f}",
             f"mean_bytes_i = {result.mean_bytes('I'):.3f}",
             f"mean_bytes_p = {result.mean_bytes('P'):.3f}",
             f"mean_psnr_train = {result.mean_psnr('train'):.4f}",
             f"mean_psnr_test = {result.mean_psnr('test'):.4f}"]
    manifest_path.write_text("\n".join(lines) + "\n")
    cols = [f.name for f in fields(FrameStats) if f.name != "seconds"]
    rows = [",".join(cols)]
    for s in result.stats:
        vals = [getattr(s, c) for c in cols]
        rows.append(",".join(f"{v:.6f}" if isinstance(v, float) else str(v) for v in vals))
    csv_path.write_text("\n".join(rows) + "\n")
    timing = bitstream_path.with_suffix(".timing.txt")
    timing.write_text("".join(f"frame_{s.frame_index}_seconds = {s.seconds:.3f}\n" for s in result.stats))
    return manifest_path, csv_path


def read_frames_csv(path) -> list[dict]:
    lines = Path(path).read_text().splitlines()
    header = lines[0].split(",")
    return [dict(zip(header, ln.split(","))) for ln in lines[1:] if ln.strip()]
