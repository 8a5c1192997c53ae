"""Command-line entry points: ``voxcodec <command> ...``.

Every command exits 0 on success.  Failures print one line to stderr of the
form ``error[<category>]: <message>`` and exit with the category's code.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .codec import CodecError, decode_sequence
from .entropy import DivergenceError
from .field import FeatureGrid, FieldFrame, OccupancyGrid
from .metrics import PSNR_INF, bd_rate, psnr, ssim
from .rangecoder import RangeCoderError
from .render import RenderMLP, render_image
from .scene import (
    MultiViewDataset, SyntheticSceneSpec, default_scene, generate_dataset, load_cameras,
    load_image, read_keyvalue, ring_cameras, save_image,
)
from .train import (
    LAMBDAS, TrainConfig, read_sweep_csv, rd_sweep, save_run, train_sequence, write_sweep_csv,
)

EXIT_CODES = {"usage": 2, "input": 3, "codec": 4, "training": 5, "internal": 70}


class CliError(Exception):
    def __init__(self, category, message):
        super().__init__(message)
        self.category = category


# ---------------------------------------------------------------- helpers


def _config_from_args(args) -> TrainConfig:
    cfg = TrainConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise CliError("input", f"config file not found: {args.config}")
        cfg = TrainConfig.from_file(args.config, cfg)
    flags = {
        "lambda": args.lam, "alpha": args.alpha, "group_size": args.group_size,
        "iters_i": args.iters_i, "iters_p": args.iters_p, "seed": args.seed,
        "grid_dims": args.grid_dims, "basis_dims": args.basis_dims,
    }
    return TrainConfig.from_mapping({k: v for k, v in flags.items() if v is not None}, cfg)


def _load_dataset(path) -> MultiViewDataset:
    path = Path(path)
    if not (path / "manifest.txt").is_file():
        raise CliError("input", f"not a dataset directory (no manifest.txt): {path}")
    return MultiViewDataset.load(path)


def _decoded_frames(source):
    """Frames plus rendering settings from a bitstream file or a decoded directory."""
    source = Path(source)
    if source.is_dir():
        return load_decoded(source)
    if not source.is_file():
        raise CliError("input", f"no such bitstream or directory: {source}")
    header, frames = decode_sequence(source.read_bytes())
    items = [(f.frame, f.render_mlp, f.occupancy) for f in frames]
    return items, header.render_step, header.background


def save_decoded(frames, step, background, out_dir):
    """One ``frame_{t}.npz`` per frame plus ``decoded.txt`` rendering settings."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for t, (frame, mlp, occ) in enumerate(frames):
        arrays = {f"grid_{n}": g.values for n, g in enumerate(frame.grids)}
        arrays.update({f"mlp_{k}": v for k, v in mlp.params.items()})
        np.savez(out / f"frame_{t}.npz", aabb=frame.aabb, qsteps=frame.qsteps,
                 occupancy=occ.bits, frame_type=np.array(frame.frame_type), **arrays)
    bg = ",".join(repr(float(c)) for c in background)
    (out / "decoded.txt").write_text(f"frames = {len(frames)}\nrender_step = {step!r}\nbackground = {bg}\n")


def load_decoded(root):
    root = Path(root)
    meta_path = root / "decoded.txt"
    if not meta_path.is_file():
        raise CliError("input", f"not a decoded directory (no decoded.txt): {root}")
    meta = read_keyvalue(meta_path)
    items = []
    for t in range(int(meta["frames"])):
        with np.load(root / f"frame_{t}.npz") as z:
            aabb = z["aabb"]
            grids = []
            while f"grid_{len(grids)}" in z:
                grids.append(FeatureGrid(z[f"grid_{len(grids)}"], aabb))
            frame = FieldFrame(grids[0], grids[1:], z["qsteps"], str(z["frame_type"]), t)
            mlp = RenderMLP.from_tensors([z[f"mlp_{k}"] for k in RenderMLP.param_names])
            items.append((frame, mlp, OccupancyGrid(z["occupancy"], aabb)))
    bg = tuple(float(c) for c in meta["background"].split(","))
    return items, float(meta["render_step"]), bg


def _cameras(path):
    path = Path(path)
    if path.is_dir():
        path = path / "cameras.txt"
    if not path.is_file():
        raise CliError("input", f"camera file not found: {path}")
    return load_cameras(path)


# ---------------------------------------------------------------- commands


def cmd_spec(args):
    spec = default_scene(args.frames, args.speed)
    Path(args.out).write_text(spec.to_json())
    print(args.out)


def cmd_generate(args):
    spec_path = Path(args.spec)
    if not spec_path.is_file():
        raise CliError("usage", f"scene spec file not found: {spec_path}")
    try:
        spec = SyntheticSceneSpec.from_json(spec_path.read_text())
    except (ValueError, KeyError, TypeError) as exc:
        raise CliError("input", f"invalid scene spec: {exc}") from exc
    cams, train_ids, test_ids = ring_cameras(args.n_train, args.n_test, args.resolution)
    ds = generate_dataset(spec, cams, args.resolution, train_ids, test_ids, args.samples)
    ds.save(args.out)
    print(f"wrote {ds.n_frames} frames x {len(cams)} cameras to {args.out}")


def cmd_encode(args):
    cfg = _config_from_args(args)
    ds = _load_dataset(args.dataset)
    result = train_sequence(ds, cfg)
    manifest, csv = save_run(result, args.out)
    print(f"wrote {len(result.bitstream)} bytes to {args.out}; manifest {manifest}; frames {csv}")


def cmd_decode(args):
    frames, step, bg = _decoded_frames(args.bitstream)
    save_decoded(frames, step, bg, args.out)
    print(f"decoded {len(frames)} frames to {args.out}")


def cmd_render(args):
    frames, step, bg = _decoded_frames(args.source)
    cams = _cameras(args.cameras)
    frame_ids = range(len(frames)) if args.frame is None else [args.frame]
    cam_ids = range(len(cams)) if args.camera is None else [args.camera]
    for t in frame_ids:
        if not 0 <= t < len(frames):
            raise CliError("input", f"frame {t} not in stream with {len(frames)} frames")
    for c in cam_ids:
        if not 0 <= c < len(cams):
            raise CliError("input", f"camera {c} not among {len(cams)} cameras")
    out = Path(args.out)
    single = args.frame is not None and args.camera is not None and out.suffix == ".ppm"
    for t in frame_ids:
        frame, mlp, occ = frames[t]
        for c in cam_ids:
            img = render_image(frame, mlp, cams[c], occ, step, bg)
            if single:
                out.parent.mkdir(parents=True, exist_ok=True)
                save_image(out, img)
            else:
                (out / f"frame_{t}").mkdir(parents=True, exist_ok=True)
                save_image(out / f"frame_{t}" / f"cam_{c}.ppm", img)
    print(f"rendered to {out}")


def cmd_metrics(args):
    ds_root, rendered = Path(args.dataset), Path(args.rendered)
    if not rendered.is_dir():
        raise CliError("input", f"rendered directory not found: {rendered}")
    man = read_keyvalue(ds_root / "manifest.txt") if (ds_root / "manifest.txt").is_file() else None
    if man is None:
        raise CliError("input", f"not a dataset directory (no manifest.txt): {ds_root}")
    test_ids = {int(x) for x in man.get("test_cameras", "").split(",") if x.strip()}
    rows = []
    for img_path in sorted(rendered.glob("frame_*/cam_*.ppm")):
        t = int(img_path.parent.name.split("_")[1])
        c = int(img_path.stem.split("_")[1])
        ref_path = ds_root / f"frame_{t}" / f"cam_{c}.ppm"
        if not ref_path.is_file():
            raise CliError("input", f"no reference image for frame {t} camera {c}")
        a, b = load_image(img_path), load_image(ref_path)
        rows.append((t, c, "test" if c in test_ids else "train", psnr(a, b), ssim(a, b)))
    if not rows:
        raise CliError("input", f"no frame_*/cam_*.ppm images under {rendered}")
    lines = ["frame,camera,split,psnr,ssim"]
    lines += [f"{t},{c},{s},{'inf' if p == PSNR_INF else f'{p:.4f}'},{q:.6f}" for t, c, s, p, q in rows]
    for split in ("train", "test"):
        sel = [r for r in rows if r[2] == split]
        if sel:
            lines.append(f"mean,{split},,{np.mean([r[3] for r in sel]):.4f},{np.mean([r[4] for r in sel]):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    print(text, end="")


def cmd_bdrate(args):
    a, b = read_sweep_csv(args.csv_a), read_sweep_csv(args.csv_b)
    col = args.rate_column
    for name, curve in (("A", a), ("B", b)):
        if col not in curve or args.quality_column not in curve:
            raise CliError("input", f"curve {name} lacks columns {col!r}/{args.quality_column!r}")
    value = bd_rate(a[col], a[args.quality_column], b[col], b[args.quality_column])
    print(f"bd_rate_percent = {value:.4f}")


def cmd_sweep(args):
    cfg = _config_from_args(args)
    ds = _load_dataset(args.dataset)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    lambdas = args.lambdas or LAMBDAS
    rows = rd_sweep(ds, cfg, lambdas)
    for row in rows:
        save_run(row["result"], out / f"lambda_{row['lambda']:g}.vxc")
    write_sweep_csv(rows, out / "sweep.csv")
    print((out / "sweep.csv").read_text(), end="")


# ---------------------------------------------------------------- parser


def _add_train_flags(p):
    p.add_argument("--config", help="key = value training config file")
    p.add_argument("--lambda", dest="lam", type=float, help="rate-distortion weight")
    p.add_argument("--alpha", type=float, help="residual L1 weight relative to lambda")
    p.add_argument("--group-size", type=int, help="frames per group (1 = all I-frames)")
    p.add_argument("--iters-i", type=int, help="iterations per I-frame")
    p.add_argument("--iters-p", type=int, help="iterations per P-frame")
    p.add_argument("--seed", type=int)
    p.add_argument("--grid-dims", help="coefficient grid dims, e.g. 32 or 32,32,32")
    p.add_argument("--basis-dims", help="basis grid dims per scale, e.g. '32;16;8'")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="voxcodec", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("spec", help="write the default toy scene spec (JSON)")
    p.add_argument("out")
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--speed", type=float, default=1.0)
    p.set_defaults(func=cmd_spec)

    p = sub.add_parser("generate", help="render a synthetic multi-view dataset")
    p.add_argument("spec", help="scene spec JSON file")
    p.add_argument("out", help="output dataset directory")
    p.add_argument("--resolution", type=int, default=64)
    p.add_argument("--n-train", type=int, default=8)
    p.add_argument("--n-test", type=int, default=2)
    p.add_argument("--samples", type=int, default=1024, help="ray-march steps for ground truth")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("encode", help="train and encode a dataset")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output bitstream (.vxc)")
    _add_train_flags(p)
    p.set_defaults(func=cmd_encode)

    p = sub.add_parser("decode", help="decode a bitstream into per-frame fields")
    p.add_argument("bitstream")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_decode)

    p = sub.add_parser("render", help="render views from a bitstream or decoded directory")
    p.add_argument("source")
    p.add_argument("--cameras", required=True, help="cameras.txt or a dataset directory")
    p.add_argument("--frame", type=int)
    p.add_argument("--camera", type=int)
    p.add_argument("--out", required=True, help="image path (.ppm) or output directory")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("metrics", help="PSNR/SSIM of rendered images against a dataset")
    p.add_argument("rendered")
    p.add_argument("dataset")
    p.add_argument("--out", help="also write the table to this CSV file")
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("bdrate", help="BD-rate of curve B against curve A")
    p.add_argument("csv_a")
    p.add_argument("csv_b")
    p.add_argument("--rate-column", default="bytes_per_frame")
    p.add_argument("--quality-column", default="psnr_train")
    p.set_defaults(func=cmd_bdrate)

    p = sub.add_parser("sweep", help="encode at several lambdas and tabulate rate vs PSNR")
    p.add_argument("dataset")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--lambdas", type=float, nargs="+")
    _add_train_flags(p)
    p.set_defaults(func=cmd_sweep)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except CliError as exc:
        category, message = exc.category, str(exc)
    except (CodecError, RangeCoderError) as exc:
        category, message = "codec", str(exc)
    except DivergenceError as exc:
        category, message = "training", str(exc)
    except (OSError, ValueError, IndexError, KeyError) as exc:
        category, message = "input", f"{type(exc).__name__}: {exc}"
    else:
        return 0
    print(f"error[{category}]: {' '.join(message.split())}", file=sys.stderr)
    return EXIT_CODES[category]


if __name__ == "__main__":
    sys.exit(main())
