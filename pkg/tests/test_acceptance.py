"""Acceptance criteria 1 to 10, one test each.

Every test records a ``CRITERION n: PASS|FAIL`` line, shown in the terminal
summary, before asserting. The rate-distortion criteria share cached toy runs.
Matched-PSNR comparisons interpolate log-bytes along the measured curve of the
configuration being compared (see ``voxcodec.metrics.rate_at_quality``).
"""

import math
import time

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES, UNIT_BOX, central_difference, rel_err
from voxcodec.cli import main
from voxcodec.codec import decode_grid, encode_grid, estimate_grid_bits
from voxcodec.entropy import ImplicitEntropyModel, LaplaceParams, rate_bits, rate_grads
from voxcodec.field import FeatureGrid, FieldFrame, OccupancyGrid
from voxcodec.metrics import rate_at_quality
from voxcodec.render import RenderMLP, composite, render_backward, render_rays
from voxcodec.scene import default_scene, generate_dataset, read_keyvalue, ring_cameras
from voxcodec.train import LAMBDAS, TrainConfig, simulate_quantization, train_sequence

# Oracle run of the toy pipeline at the highest-rate lambda reached 35.81 dB on
# training views; T leaves 0.8 dB of headroom for floating-point drift across
# machines.
TOY_PSNR_THRESHOLD = 35.0

TOY = dict(iters_i=600, iters_p=200, grid_dims=(16, 16, 16), basis_dims=((16, 16, 16), (8, 8, 8), (4, 4, 4)),
           ray_batch=512, rate_batch=4096, render_step=2 * math.sqrt(3) / 64, occ_warmup=100, occ_every=50,
           lr_q=1e-2)

_RUNS = {}


def record(n, ok, detail):
    line = f"CRITERION {n}: {'PASS' if ok else 'FAIL'} {detail}"
    ACCEPTANCE_LINES[n] = line
    print(line)
    return ok


def toy_dataset():
    if "dataset" not in _RUNS:
        cams, tr, te = ring_cameras(8, 2, 32)
        _RUNS["dataset"] = generate_dataset(default_scene(4), cams, 32, tr, te, n_samples=512)
    return _RUNS["dataset"]


def toy_sweep(name, **overrides):
    """Mean bytes/frame and training PSNR for every lambda; cached per configuration."""
    if name not in _RUNS:
        rows = []
        for lam in LAMBDAS:
            t0 = time.time()
            res = train_sequence(toy_dataset(), TrainConfig(**{**TOY, **overrides, "lam": lam}))
            rows.append(dict(lam=lam, bytes=res.mean_bytes(), bytes_i=res.mean_bytes("I"),
                             bytes_p=res.mean_bytes("P"), psnr=res.mean_psnr(), result=res,
                             seconds=time.time() - t0))
        _RUNS[name] = rows
    return _RUNS[name]


def matched_ratios(reference, other):
    """Bytes of ``other`` over ``reference`` at each reference PSNR inside the other curve's range."""
    rates, psnrs = [r["bytes"] for r in other], [r["psnr"] for r in other]
    out = []
    for row in reference:
        if min(psnrs) <= row["psnr"] <= max(psnrs):
            out.append((row["psnr"], rate_at_quality(rates, psnrs, row["psnr"]) / row["bytes"]))
    return out


def test_criterion_1_codec_exactness():
    rng = np.random.default_rng(2024)
    t0 = time.time()
    failures = 0
    for _ in range(100):
        shape = tuple(int(s) for s in rng.integers(1, 17, 3))
        channels = int(rng.integers(1, 5))
        model = ImplicitEntropyModel(rng)
        for k in model.params:
            model.params[k] = rng.normal(scale=0.3, size=model.params[k].shape)
        spread = float(np.exp(rng.uniform(0, 5)))
        vols = np.clip(np.round(rng.laplace(0, spread, (channels, *shape))), -256, 255).astype(np.int64)
        if rng.random() < 0.2:
            vols.flat[rng.integers(0, vols.size, 3)] = rng.choice([-256, 255], 3)
        prev = None
        if rng.random() < 0.5:
            prev = np.clip(np.round(rng.laplace(0, spread, vols.shape)), -256, 255).astype(np.int64)
        got = decode_grid(encode_grid(vols, model, prev), vols.shape, model, prev)
        failures += not np.array_equal(got, vols)
    seconds = time.time() - t0
    ok = failures == 0 and seconds < 60
    record(1, ok, f"100 triples, {failures} mismatches, {seconds:.1f} s (limit 60 s)")
    assert ok


def test_criterion_2_rate_estimate_fidelity():
    rng = np.random.default_rng(7)
    worst = []
    ok = True
    for shape, channels, spread in [((16, 16, 16), 1, 3.0), ((16, 16, 16), 4, 0.5), ((8, 16, 32), 2, 20.0),
                                    ((32, 32, 32), 1, 1.0), ((10, 20, 30), 4, 60.0)]:
        # a model whose scale roughly fits the data, as a trained one would; far-tail symbols are
        # capped at 24 bits by the coder but charged up to 30 bits by the floored estimate
        model = ImplicitEntropyModel(rng)
        for k in model.params:
            model.params[k] = rng.normal(scale=0.05, size=model.params[k].shape)
        model.params["b2"] = np.array([0.0, math.log(spread)])
        vols = np.clip(np.round(rng.laplace(0, spread, (channels, *shape))), -256, 255).astype(np.int64)
        prev = np.clip(vols + np.round(rng.normal(0, 1, vols.shape)), -256, 255).astype(np.int64)
        for p in (None, prev):
            est = estimate_grid_bits(vols, model, p)
            measured = 8 * len(encode_grid(vols, model, p))
            ok &= est <= measured <= 1.02 * est + 256
            worst.append(measured / est)
    record(2, ok, f"10 grids of >= 4096 voxels, measured/estimate in [{min(worst):.4f}, {max(worst):.4f}]")
    assert ok


def _pipeline(rng):
    """Small raw-field, q-step and MLP setup rendered through straight-through quantization."""
    raw = [rng.normal(scale=0.5, size=(*d, 3)) for d in ((5, 5, 5), (4, 4, 4), (3, 3, 3))]
    qs = np.array([0.03, 0.05, 0.08])
    mlp = RenderMLP(3, rng=rng)
    for k in mlp.params:
        mlp.params[k] = mlp.params[k] + rng.normal(scale=0.1, size=mlp.params[k].shape)
    occ = OccupancyGrid(np.ones((4, 4, 4), bool), UNIT_BOX)
    origins = np.array([[0.1, 0.2, -3.0], [-0.3, 0.05, -3.0], [0.0, -0.4, 3.0]])
    dirs = np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0], [0.0, 0.1, -1.0]])
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    up = rng.normal(size=(3, 3))
    return raw, qs, mlp, occ, origins, dirs, up


def _frame(field, qs):
    g = [FeatureGrid(f, UNIT_BOX) for f in field]
    return FieldFrame(g[0], g[1:], qs)


def test_criterion_3_gradients():
    rng = np.random.default_rng(99)
    raw, qs, mlp, occ, origins, dirs, up = _pipeline(rng)
    # straight-through surrogate: the rounding offset is frozen, so each grid is v + q * offset
    offsets = [simulate_quantization(v, q, training=False).offset for v, q in zip(raw, qs)]
    grids = [v + q * o for v, q, o in zip(raw, qs, offsets)]

    def loss(field):
        color, _ = render_rays(_frame(field, qs), mlp, origins, dirs, occ, 0.05)
        return float(np.sum(color * up))

    on_grids = lambda: loss(grids)
    on_qsteps = lambda: loss([v + q * o for v, q, o in zip(raw, qs, offsets)])

    frame = _frame(grids, qs)
    _, cache = render_rays(frame, mlp, origins, dirs, occ, 0.05)
    grid_grads, mlp_grads = render_backward(frame, mlp, cache, up)
    dq = np.array([np.sum(g * o) for g, o in zip(grid_grads, offsets)])
    errs = {"grid": 0.0, "mlp": 0.0, "qstep": 0.0, "rate": 0.0}
    checked = 0
    for n in range(3):
        nz = np.argwhere(np.abs(grid_grads[n]) > 1e-6)
        for row in nz[rng.choice(len(nz), min(8, len(nz)), replace=False)]:
            idx = tuple(row)
            errs["grid"] = max(errs["grid"], rel_err(central_difference(on_grids, grids[n], idx), grid_grads[n][idx]))
            checked += 1
    for name in mlp.param_names:
        nz = np.argwhere(np.abs(mlp_grads[name]) > 1e-6)
        for row in nz[rng.choice(len(nz), min(4, len(nz)), replace=False)]:
            idx = tuple(row)
            fd = central_difference(on_grids, mlp.params[name], idx)
            errs["mlp"] = max(errs["mlp"], rel_err(fd, mlp_grads[name][idx]))
            checked += 1
    for n in range(3):
        errs["qstep"] = max(errs["qstep"], rel_err(central_difference(on_qsteps, qs, n), dq[n]))
    for _ in range(200):
        x = np.array([rng.normal(scale=3), rng.normal(scale=3), math.exp(rng.uniform(-1.5, 2))])
        f = lambda: float(rate_bits(x[0], LaplaceParams(x[1], x[2])))
        analytic = [float(g) for g in rate_grads(x[0], LaplaceParams(x[1], x[2]))]
        for i in range(3):
            errs["rate"] = max(errs["rate"], rel_err(central_difference(f, x, i), analytic[i], floor=1e-3))
    ok = checked > 30 and errs["grid"] < 1e-3 and errs["mlp"] < 1e-3 and errs["qstep"] < 1e-3 and errs["rate"] < 1e-5
    record(3, ok, f"{checked + 603} checks, max rel err "
           + ", ".join(f"{k} {v:.2e}" for k, v in errs.items()) + " (limits 1e-3, 1e-3, 1e-3, 1e-5)")
    assert ok


def test_criterion_4_rendering_invariants():
    rng = np.random.default_rng(5)
    n_rays, n = 200, 4000
    ray_index = np.sort(rng.integers(0, n_rays, n))
    sigma = np.exp(rng.uniform(-6, 6, n))
    rgb, delta = rng.random((n, 3)), rng.uniform(0.01, 0.5, n)
    bg = (0.25, 0.5, 0.75)
    color, cache = composite(sigma, rgb, delta, ray_index, n_rays, bg)
    max_weight = np.bincount(ray_index, weights=cache.weights, minlength=n_rays).max()

    zero_color, _ = composite(np.zeros(n), rgb, delta, ray_index, n_rays, bg)
    frame = _frame([rng.normal(size=(*d, 3)) for d in ((5, 5, 5), (4, 4, 4))], np.array([0.05, 0.05]))
    empty = OccupancyGrid(np.zeros((4, 4, 4), bool), UNIT_BOX)
    dirs = rng.normal(size=(50, 3))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    empty_color, _ = render_rays(frame, RenderMLP(3, rng=rng), -2.5 * dirs, dirs, empty, 0.05, bg)
    background_exact = bool(np.all(zero_color == bg) and np.all(empty_color == bg))

    # insert zero-density samples with arbitrary colors at random positions along the rays
    extra = 3000
    ins_index = rng.integers(0, n_rays, extra)
    where = np.concatenate([np.arange(n) * 2.0, rng.uniform(-1, 2 * n, extra)])
    all_index = np.concatenate([ray_index, ins_index])
    order = np.lexsort((where, all_index))
    sigma2 = np.concatenate([sigma, np.zeros(extra)])[order]
    rgb2 = np.concatenate([rgb, rng.random((extra, 3))])[order]
    delta2 = np.concatenate([delta, rng.uniform(0.01, 0.5, extra)])[order]
    inserted, _ = composite(sigma2, rgb2, delta2, all_index[order], n_rays, bg)
    insertion_err = float(np.max(np.abs(inserted - color)))

    ok = max_weight <= 1 + 1e-9 and background_exact and insertion_err <= 1e-9
    record(4, ok, f"max weight sum {max_weight:.12f}, zero density exact background {background_exact}, "
                  f"insertion change {insertion_err:.1e}")
    assert ok


@pytest.mark.slow
def test_criterion_5_rd_monotonicity():
    rows = toy_sweep("gop20")
    bytes_ = [r["bytes"] for r in rows]
    psnrs = [r["psnr"] for r in rows]
    seconds = sum(r["seconds"] for r in rows)
    decreasing = all(a > b for a, b in zip(bytes_, bytes_[1:]))
    non_increasing = all(b <= a + 0.1 for a, b in zip(psnrs, psnrs[1:]))
    ok = decreasing and non_increasing and seconds < 7200
    curve = "; ".join(f"lambda {r['lam']:g}: {r['bytes']:.0f} B/frame {r['psnr']:.2f} dB" for r in rows)
    record(5, ok, f"{curve}; {seconds:.0f} s")
    assert ok


@pytest.mark.slow
def test_criterion_6_p_frames_cheaper_than_i_frames():
    rows = toy_sweep("gop20")
    ratios = [r["bytes_p"] / r["bytes_i"] for r in rows]
    ok = all(x <= 0.6 for x in ratios)
    record(6, ok, "P/I mean bytes " + ", ".join(f"{x:.3f}" for x in ratios) + " (limit 0.6)")
    assert ok


@pytest.mark.slow
def test_criterion_7_adaptive_quantization():
    adaptive = toy_sweep("gop20")
    frozen = toy_sweep("frozen", adaptive_q=False)
    matched = matched_ratios(frozen, adaptive)
    savings = [1 - r for _, r in matched]
    q = adaptive[0]["result"].frames[0].coded.qsteps
    spread = float(q.max() / q.min() - 1)
    ok = bool(matched) and min(savings) >= 0.05 and spread > 0.10
    detail = ", ".join(f"{p:.2f} dB: {100 * s:.1f}%" for (p, _), s in zip(matched, savings))
    record(7, ok, f"adaptive byte savings at matched PSNR [{detail}] (need >= 5%); "
                  f"I-frame q-step spread {100 * spread:.1f}% (need > 10%)")
    assert ok


@pytest.mark.slow
def test_criterion_8_dynamic_modeling():
    gop = toy_sweep("gop20")
    intra = toy_sweep("all_intra", group_size=1)
    matched = matched_ratios(gop, intra)
    ok = bool(matched) and min(r for _, r in matched) >= 1.5
    detail = ", ".join(f"{p:.2f} dB: {r:.2f}x" for p, r in matched)
    record(8, ok, f"all-I / GOP-20 bytes at matched PSNR [{detail}] (need >= 1.5x)")
    assert ok


@pytest.mark.slow
def test_criterion_9_toy_quality():
    best = toy_sweep("gop20")[0]
    ok = best["psnr"] >= TOY_PSNR_THRESHOLD
    record(9, ok, f"lambda {best['lam']:g} training PSNR {best['psnr']:.2f} dB (T = {TOY_PSNR_THRESHOLD} dB)")
    assert ok


@pytest.mark.slow
def test_criterion_10_determinism(tmp_path):
    toy_dataset().save(tmp_path / "data")
    (tmp_path / "toy.cfg").write_text(TrainConfig(**TOY, lam=LAMBDAS[0]).to_text())
    outputs = []
    for run in ("a", "b"):
        code = main(["encode", str(tmp_path / "data"), "--out", str(tmp_path / f"{run}.vxc"),
                     "--config", str(tmp_path / "toy.cfg"), "--seed", "0"])
        assert code == 0
        outputs.append(((tmp_path / f"{run}.vxc").read_bytes(), (tmp_path / f"{run}.manifest.txt").read_bytes(),
                        (tmp_path / f"{run}.frames.csv").read_bytes()))
    (a_bits, a_man, a_csv), (b_bits, b_man, b_csv) = outputs
    same_bits, same_manifest = a_bits == b_bits, a_man == b_man and a_csv == b_csv
    frames = read_keyvalue(tmp_path / "a.manifest.txt")["frames"]
    ok = same_bits and same_manifest
    record(10, ok, f"{len(a_bits)} byte bitstream over {frames} frames identical {same_bits}, "
                   f"manifest and frame table identical {same_manifest}")
    assert ok
