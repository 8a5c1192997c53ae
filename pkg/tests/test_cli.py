import math

import numpy as np
import pytest

from voxcodec.cli import EXIT_CODES, load_decoded, main
from voxcodec.codec import decode_sequence
from voxcodec.render import render_image
from voxcodec.scene import load_image, read_keyvalue
from voxcodec.train import TrainConfig

TINY = TrainConfig(iters_i=40, iters_p=15, grid_dims=(8, 8, 8), basis_dims=((8, 8, 8), (4, 4, 4)), channels=2,
                   ray_batch=128, rate_batch=512, render_step=2 * math.sqrt(3) / 32,
                   occ_warmup=20, occ_every=20, lr_q=1e-2)


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    assert main(["spec", str(root / "scene.json"), "--frames", "2"]) == 0
    assert main(["generate", str(root / "scene.json"), str(root / "data"), "--resolution", "16",
                 "--n-train", "3", "--n-test", "1", "--samples", "256"]) == 0
    (root / "tiny.cfg").write_text(TINY.to_text())
    assert main(["encode", str(root / "data"), "--out", str(root / "run.vxc"),
                 "--config", str(root / "tiny.cfg"), "--group-size", "2"]) == 0
    return root


def test_generate_without_spec_is_usage_error(tmp_path, capsys):
    code = main(["generate", str(tmp_path / "missing.json"), str(tmp_path / "out")])
    assert code == EXIT_CODES["usage"] == 2
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error[usage]:")


def test_bad_flag_is_usage_error():
    assert main(["encode"]) == 2


def test_encode_writes_manifest_and_frame_table(workspace):
    man = read_keyvalue(workspace / "run.manifest.txt")
    assert man["lambda"] == "0.001"
    assert man["iters_i"] == "40" and man["group_size"] == "2"
    assert man["i_frames"] == "1" and man["p_frames"] == "1"
    assert int(man["bitstream_bytes"]) == (workspace / "run.vxc").stat().st_size
    rows = (workspace / "run.frames.csv").read_text().strip().splitlines()
    assert len(rows) == 3 and rows[1].split(",")[1] == "I" and rows[2].split(",")[1] == "P"


def test_flags_override_config_file(tmp_path, workspace):
    out = tmp_path / "allI.vxc"
    assert main(["encode", str(workspace / "data"), "--out", str(out), "--config", str(workspace / "tiny.cfg"),
                 "--group-size", "1", "--iters-i", "5", "--lambda", "0.002"]) == 0
    man = read_keyvalue(tmp_path / "allI.manifest.txt")
    assert man["group_size"] == "1" and man["iters_i"] == "5" and man["lambda"] == "0.002"
    assert man["p_frames"] == "0" and man["i_frames"] == "2"


def test_decode_then_render_matches_encoder_view(workspace, tmp_path):
    assert main(["decode", str(workspace / "run.vxc"), "--out", str(tmp_path / "dec")]) == 0
    assert main(["render", str(tmp_path / "dec"), "--cameras", str(workspace / "data"),
                 "--frame", "1", "--camera", "2", "--out", str(tmp_path / "view.ppm")]) == 0
    header, frames = decode_sequence((workspace / "run.vxc").read_bytes())
    from voxcodec.scene import MultiViewDataset
    cams = MultiViewDataset.load(workspace / "data").cameras
    f = frames[1]
    expected = render_image(f.frame, f.render_mlp, cams[2], f.occupancy, header.render_step, header.background)
    got = load_image(tmp_path / "view.ppm")
    assert np.max(np.abs(got - np.round(expected * 255) / 255)) <= 1 / 255 + 1e-12
    items, step, bg = load_decoded(tmp_path / "dec")
    assert step == header.render_step and bg == tuple(header.background)
    for (frame, _, occ), ref in zip(items, frames):
        np.testing.assert_array_equal(frame.coeff.values, ref.frame.coeff.values)
        np.testing.assert_array_equal(occ.bits, ref.occupancy.bits)


def test_render_unknown_frame_is_input_error(workspace, tmp_path, capsys):
    code = main(["render", str(workspace / "run.vxc"), "--cameras", str(workspace / "data"),
                 "--frame", "7", "--out", str(tmp_path / "x")])
    assert code == EXIT_CODES["input"]
    assert "frame 7" in capsys.readouterr().err


def test_corrupt_stream_fails_cleanly(workspace, tmp_path, capsys):
    data = bytearray((workspace / "run.vxc").read_bytes())
    bad = tmp_path / "bad.vxc"
    bad.write_bytes(bytes(data[: len(data) // 2]))
    assert main(["decode", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CODES["codec"]
    data[:4] = b"NOPE"
    bad.write_bytes(bytes(data))
    assert main(["decode", str(bad), "--out", str(tmp_path / "d")]) == EXIT_CODES["codec"]
    assert "error[codec]" in capsys.readouterr().err


def test_metrics_on_identical_images_is_infinite(workspace, capsys):
    data = str(workspace / "data")
    assert main(["metrics", data, data]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "frame,camera,split,psnr,ssim"
    body = [ln.split(",") for ln in lines[1:] if not ln.startswith("mean")]
    assert len(body) == 2 * 4
    assert all(row[3] == "inf" and float(row[4]) == pytest.approx(1.0) for row in body)


def test_metrics_on_rendered_views(workspace, tmp_path, capsys):
    assert main(["render", str(workspace / "run.vxc"), "--cameras", str(workspace / "data"),
                 "--out", str(tmp_path / "r")]) == 0
    capsys.readouterr()
    assert main(["metrics", str(tmp_path / "r"), str(workspace / "data"), "--out", str(tmp_path / "m.csv")]) == 0
    means = [ln.split(",") for ln in (tmp_path / "m.csv").read_text().splitlines() if ln.startswith("mean")]
    assert [m[1] for m in means] == ["train", "test"]
    assert 10 < float(means[0][3]) < 80


def test_bdrate_of_curve_against_itself_is_zero(tmp_path, capsys):
    csv = tmp_path / "c.csv"
    csv.write_text("lambda,bytes_per_frame,bytes_i,bytes_p,psnr_train,psnr_test\n"
                   "0.0007,9000,20000,3000,36.0,30.0\n0.001,8000,19000,2900,35.0,29.0\n"
                   "0.002,7000,18000,2800,33.0,28.0\n0.005,6000,17000,2700,30.0,26.0\n")
    assert main(["bdrate", str(csv), str(csv)]) == 0
    value = float(capsys.readouterr().out.split("=")[1])
    assert value == pytest.approx(0.0, abs=1e-9)
    assert main(["bdrate", str(csv), str(csv), "--rate-column", "nope"]) == EXIT_CODES["input"]


def test_missing_dataset_is_input_error(tmp_path):
    assert main(["encode", str(tmp_path), "--out", str(tmp_path / "x.vxc")]) == EXIT_CODES["input"]
