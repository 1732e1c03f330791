import subprocess
import sys
from pathlib import Path

import numpy as np
import pytest

from probesurf import io
from probesurf.cli import main, render_options
from probesurf.decoder import N_FRESNEL, DecoderMlp
from probesurf.grid import init_sphere
from probesurf.render import render_image
from probesurf.synth import glossy_sphere_scene, make_dataset

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

ZERO_ITERS = """
[scene]
resolution = 16
init = "visual_hull"

[[lod]]
iterations = 0
image_divisor = 2
"""


@pytest.fixture(scope="module")
def dataset_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("ds")
    ds = make_dataset(glossy_sphere_scene(), 4, 32, seed=1, n_points=2000)
    io.save_dataset(ds, root)
    return root


def run(argv, capsys):
    code = main([str(a) for a in argv])
    out = capsys.readouterr()
    return code, out.out, out.err


def error_line(err):
    lines = err.strip().splitlines()
    assert len(lines) == 1, err
    assert lines[0].startswith("error: ")
    return lines[0]


# ---------------------------------------------------------------- dataset
def test_dataset_round_trip(tmp_path):
    ds = make_dataset(glossy_sphere_scene(), 3, 24, seed=2, n_points=300)
    io.save_dataset(ds, tmp_path)
    back = io.load_dataset(tmp_path)
    assert len(back) == 3
    lines = [l for l in (tmp_path / "cameras.txt").read_text().splitlines() if l and not l.startswith("#")]
    assert len(lines) == len(back.cameras)
    for a, b, img, m in zip(ds.cameras, back.cameras, back.images, back.masks):
        np.testing.assert_array_equal(a.pose, b.pose)
        assert (a.fx, a.fy, a.cx, a.cy, a.width, a.height) == (b.fx, b.fy, b.cx, b.cy, b.width, b.height)
    for orig, img in zip(ds.images, back.images):
        np.testing.assert_array_equal(io.to_uint8(orig), io.to_uint8(img))
    for orig, m in zip(ds.masks, back.masks):
        np.testing.assert_array_equal(orig, m)
    np.testing.assert_allclose(back.points_gt, ds.points_gt, atol=1e-8)
    # saving what was loaded reproduces the files byte for byte
    again = tmp_path / "again"
    io.save_dataset(back, again)
    for name in ("0.png", "2.png"):
        assert (again / "images" / name).read_bytes() == (tmp_path / "images" / name).read_bytes()


def test_corrupted_pose_rejected(tmp_path):
    ds = make_dataset(glossy_sphere_scene(), 2, 16, seed=3, n_points=0)
    io.save_dataset(ds, tmp_path)
    p = tmp_path / "cameras.txt"
    lines = p.read_text().splitlines()
    parts = lines[2].split()
    parts[7] = str(float(parts[7]) * 1.01)  # scale one rotation entry
    lines[2] = " ".join(parts)
    p.write_text("\n".join(lines) + "\n")
    with pytest.raises(io.PoseError):
        io.load_dataset(tmp_path)


def test_missing_files_and_mismatch(tmp_path):
    with pytest.raises(io.DatasetError):
        io.load_dataset(tmp_path)
    ds = make_dataset(glossy_sphere_scene(), 2, 16, seed=4, n_points=0)
    io.save_dataset(ds, tmp_path)
    (tmp_path / "masks" / "1.png").unlink()
    with pytest.raises(io.DatasetError, match="missing"):
        io.load_dataset(tmp_path)
    io.write_png(tmp_path / "masks" / "1.png", np.zeros((8, 16), bool))
    with pytest.raises(io.DatasetError, match="size"):
        io.load_dataset(tmp_path)
    (tmp_path / "cameras.txt").write_text("0 1 2 3\n")
    with pytest.raises(io.DatasetError, match="19 fields"):
        io.load_dataset(tmp_path)


def test_mask_threshold(tmp_path):
    from PIL import Image

    Image.fromarray(np.array([[127, 128, 0, 255]], np.uint8)).save(tmp_path / "m.png")
    np.testing.assert_array_equal(io.read_mask(tmp_path / "m.png"), [[False, True, False, True]])


def test_raw_float_dump_round_trip(tmp_path):
    img = np.random.default_rng(5).random((5, 7, 3)).astype(np.float32)
    io.write_raw(tmp_path / "x.raw", img)
    np.testing.assert_array_equal(io.read_raw(tmp_path / "x.raw"), img)


def test_ply_obj(tmp_path):
    v = np.random.default_rng(6).random((10, 3))
    f = np.array([[0, 1, 2], [3, 4, 5]])
    io.write_ply(tmp_path / "m.ply", v, f)
    vb, fb = io.read_ply(tmp_path / "m.ply")
    np.testing.assert_allclose(vb, v, rtol=1e-8)
    np.testing.assert_array_equal(fb, f)
    io.write_obj(tmp_path / "m.obj", v, f)
    text = (tmp_path / "m.obj").read_text().splitlines()
    assert sum(l.startswith("v ") for l in text) == 10 and text[-1] == "f 4 5 6"


# ---------------------------------------------------------------- checkpoints
def model(dtype=np.float32, cams=None):
    rng = np.random.default_rng(7)
    g = init_sphere((-1, -1, -1), 2.0, 32, (0, 0, 0), 0.5, n_s=3, n_a=2, order=3, dtype=dtype)
    g.planes[:] = rng.random(g.planes.shape)
    g.probes[:] = rng.standard_normal(g.probes.shape)
    m = DecoderMlp.init(3 + 2 + N_FRESNEL, rng, num_cameras=cams, dtype=dtype)
    return g, m


@pytest.mark.parametrize("dtype,cams", [(np.float32, None), (np.float64, 3)])
def test_checkpoint_round_trip_bitwise(tmp_path, dtype, cams):
    g, m = model(dtype, cams)
    io.save_checkpoint(tmp_path / "a.ckpt", g, m, {"steps": 7})
    g2, m2, meta = io.load_checkpoint(tmp_path / "a.ckpt")
    assert meta == {"steps": 7}
    a, b = io.checkpoint_tensors(g, m), io.checkpoint_tensors(g2, m2)
    assert a.keys() == b.keys()
    for k in a:
        assert a[k].dtype == b[k].dtype and a[k].tobytes() == b[k].tobytes(), k
    assert (g2.voxel_size, g2.resolution, g2.lod) == (g.voxel_size, g.resolution, g.lod)
    io.save_checkpoint(tmp_path / "b.ckpt", g2, m2, meta)
    assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()


def test_checkpoint_truncated_and_version(tmp_path):
    g, m = model()
    p = tmp_path / "a.ckpt"
    io.save_checkpoint(p, g, m)
    data = p.read_bytes()
    for cut in (4, 20, len(data) - 1):
        (tmp_path / "t.ckpt").write_bytes(data[:cut])
        with pytest.raises(io.CheckpointError):
            io.load_checkpoint(tmp_path / "t.ckpt")
    bumped = data[:8] + (io.CHECKPOINT_VERSION + 1).to_bytes(4, "little") + data[12:]
    (tmp_path / "v.ckpt").write_bytes(bumped)
    with pytest.raises(io.CheckpointError, match="version"):
        io.load_checkpoint(tmp_path / "v.ckpt")


# ---------------------------------------------------------------- cli
def test_help_exits_zero():
    r = subprocess.run([sys.executable, "-m", "probesurf.cli", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "usage" in r.stdout
    for sub in ("synth", "train", "render", "mesh", "eval", "bench", "gradcheck"):
        assert sub in r.stdout
    r = subprocess.run([sys.executable, "-m", "probesurf.cli", "render", "--help"], capture_output=True, text=True)
    assert r.returncode == 0 and "--no-fresnel" in r.stdout and "--sh-order" in r.stdout


def test_synth_command(tmp_path, capsys):
    code, out, _ = run(["synth", CONFIGS / "glossy_sphere.toml", tmp_path / "d", "--views", 2,
                        "--resolution", 16, "--points", 100], capsys)
    assert code == 0
    ds = io.load_dataset(tmp_path / "d")
    assert len(ds) == 2 and ds.images[0].shape == (16, 16, 3) and len(ds.points_gt) == 100


def test_zero_iteration_train_equals_init(tmp_path, dataset_dir, capsys):
    sched = tmp_path / "zero.toml"
    sched.write_text(ZERO_ITERS)
    assert run(["init", dataset_dir, sched, "-o", tmp_path / "init.ckpt"], capsys)[0] == 0
    assert run(["train", dataset_dir, sched, "-o", tmp_path / "train.ckpt", "--quiet"], capsys)[0] == 0
    g1, m1, _ = io.load_checkpoint(tmp_path / "init.ckpt")
    g2, m2, _ = io.load_checkpoint(tmp_path / "train.ckpt")
    a, b = io.checkpoint_tensors(g1, m1), io.checkpoint_tensors(g2, m2)
    assert all(a[k].tobytes() == b[k].tobytes() for k in a)


def test_eval_on_own_renders_is_capped(tmp_path, dataset_dir, capsys):
    sched = tmp_path / "zero.toml"
    sched.write_text(ZERO_ITERS)
    run(["init", dataset_dir, sched, "-o", tmp_path / "m.ckpt"], capsys)
    g, m, meta = io.load_checkpoint(tmp_path / "m.ckpt")
    ds = io.load_dataset(dataset_dir)

    class A:
        tau = None
        max_samples = 512

    opts = render_options(meta, A)
    imgs, masks = [], []
    for cam in ds.cameras:
        rgb, alpha = render_image(g, m, cam, opts)
        imgs.append(rgb)
        masks.append(alpha > 0.5)
    io.save_dataset(io.Dataset(ds.cameras, imgs, masks, None), tmp_path / "own")
    code, out, _ = run(["eval", tmp_path / "m.ckpt", tmp_path / "own", "--json", tmp_path / "e.json"], capsys)
    assert code == 0
    metrics = dict(l.split("=", 1) for l in out.strip().splitlines())
    assert float(metrics["psnr"]) == 99.0
    assert (tmp_path / "e.json").exists()


def test_mesh_render_bench_commands(tmp_path, dataset_dir, capsys):
    sched = tmp_path / "zero.toml"
    sched.write_text(ZERO_ITERS)
    run(["init", dataset_dir, sched, "-o", tmp_path / "m.ckpt"], capsys)
    code, out, _ = run(["mesh", tmp_path / "m.ckpt", "-o", tmp_path / "m.obj"], capsys)
    assert code == 0 and (tmp_path / "m.obj").stat().st_size > 0
    code, _, _ = run(["mesh", tmp_path / "m.ckpt", "-o", tmp_path / "m.ply"], capsys)
    v, f = io.read_ply(tmp_path / "m.ply")
    assert code == 0 and len(f) > 0 and f.max() < len(v)
    code, _, _ = run(["render", tmp_path / "m.ckpt", "--dataset", dataset_dir, "--camera", 1,
                      "-o", tmp_path / "r.png", "--alpha", tmp_path / "a.png"], capsys)
    assert code == 0 and io.read_png(tmp_path / "r.png").shape == (32, 32, 3)
    code, out, _ = run(["bench", tmp_path / "m.ckpt", "--dataset", dataset_dir, "--repeat", 1], capsys)
    assert code == 0 and "shading_ms=" in out and "render_ms=" in out


@pytest.mark.parametrize("argv,kind", [
    (["train", "/nonexistent/ds", "/nonexistent/s.toml"], "dataset"),
    (["mesh", "/nonexistent/model.ckpt"], "io"),
    (["render", "{ckpt}", "--dataset", "{ds}", "--camera", "99"], "usage"),
    (["render", "{ckpt}", "--dataset", "{ds}", "--sh-order", "7"], "usage"),
    (["eval", "{bad}", "{ds}"], "checkpoint"),
    (["train"], "usage"),
])
def test_error_paths_single_line(tmp_path, dataset_dir, capsys, argv, kind):
    sched = tmp_path / "zero.toml"
    sched.write_text(ZERO_ITERS)
    run(["init", dataset_dir, sched, "-o", tmp_path / "m.ckpt"], capsys)
    (tmp_path / "bad.ckpt").write_bytes(b"not a checkpoint")
    argv = [a.format(ckpt=tmp_path / "m.ckpt", ds=dataset_dir, bad=tmp_path / "bad.ckpt") for a in argv]
    try:
        code = main(argv)
    except SystemExit as e:  # argparse usage errors
        code = e.code
    err = capsys.readouterr().err
    assert code != 0
    assert error_line(err).startswith(f"error: {kind}: ")


def test_pose_error_kind(tmp_path, capsys):
    ds = make_dataset(glossy_sphere_scene(), 1, 16, seed=8, n_points=0)
    io.save_dataset(ds, tmp_path / "d")
    p = tmp_path / "d" / "cameras.txt"
    lines = p.read_text().splitlines()
    parts = lines[1].split()
    parts[7] = "2.0"
    lines[1] = " ".join(parts)
    p.write_text("\n".join(lines) + "\n")
    (tmp_path / "s.toml").write_text(ZERO_ITERS)
    code, _, err = run(["train", tmp_path / "d", tmp_path / "s.toml"], capsys)
    assert code == 2 and error_line(err).startswith("error: pose: ")


def test_gradcheck_command_exit_code(capsys):
    code, out, _ = run(["gradcheck"], capsys)
    assert code == 0 and "gradcheck result=pass" in out
    code, out, _ = run(["gradcheck", "--tol", "1e-30"], capsys)
    assert code == 1 and "gradcheck result=fail" in out
