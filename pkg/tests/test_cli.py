import hashlib
import json

import numpy as np
import pytest

from surftex import cli, wire
from surftex.attention import BiasParams, NEG_INF
from surftex.cameras import make_camera_ring
from surftex.meshes import save_obj
from surftex.primitives import make_icosphere, make_quad


@pytest.fixture(scope="module")
def sphere_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "sphere.obj"
    save_obj(make_icosphere(1), str(path))
    return str(path)


@pytest.fixture(scope="module")
def quad_obj(tmp_path_factory):
    path = tmp_path_factory.mktemp("meshes") / "quad.obj"
    save_obj(make_quad(), str(path))
    return str(path)


def desk_args(mesh, out, seed=7, steps="4"):
    return [
        "run", "--desk", "--mesh", mesh, "--out", str(out), "--seed", str(seed),
        "--set", f"steps={steps}",
        "--set", "n_views=2",
        "--set", "latent_resolution=32",
        "--set", "latent_texture_resolution=64",
        "--set", "texture_resolution=64",
        "--set", "bias_resolutions=8",
    ]


def test_run_writes_artifacts(sphere_obj, tmp_path, capsys):
    out = tmp_path / "run1"
    assert cli.main(desk_args(sphere_obj, out)) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    for name in ["texture.twtf", "texture.png", "view_00.png", "view_01.png",
                 "dilation_report.json"]:
        assert name in manifest["artifacts"]
        assert (out / name).exists()
        digest = hashlib.sha256((out / name).read_bytes()).hexdigest()
        assert manifest["artifacts"][name] == digest
    tex = wire.load_twtf(out / "texture.twtf")
    assert tex.shape == (64, 64, 3)


def test_run_deterministic_output(sphere_obj, tmp_path):
    out1, out2 = tmp_path / "a", tmp_path / "b"
    assert cli.main(desk_args(sphere_obj, out1)) == 0
    assert cli.main(desk_args(sphere_obj, out2)) == 0
    assert (out1 / "texture.twtf").read_bytes() == (out2 / "texture.twtf").read_bytes()
    m1 = json.loads((out1 / "manifest.json").read_text())
    m2 = json.loads((out2 / "manifest.json").read_text())
    assert m1["artifacts"] == m2["artifacts"]


def test_run_missing_uv_exit_2(tmp_path, capsys):
    bad = tmp_path / "bad.obj"
    bad.write_text("v 0 0 0\nv 1 0 0\nv 0 1 0\nf 1 2 3\n")
    code = cli.main(["run", "--desk", "--mesh", str(bad), "--out", str(tmp_path / "o"),
                     "--seed", "1"])
    assert code == 2
    err = json.loads(capsys.readouterr().err.strip())
    assert err["stage"] == "mesh-core"


def test_run_unreachable_backend_exit_3(sphere_obj, tmp_path, capsys):
    code = cli.main([
        "run", "--mesh", sphere_obj, "--out", str(tmp_path / "o"),
        "--seed", "1", "--backend", "http://127.0.0.1:9",
    ])
    assert code == 3
    err = json.loads(capsys.readouterr().err.strip())
    assert err["stage"] == "backend"
    assert not (tmp_path / "o" / "texture.twtf").exists()


def test_bake_subcommand(quad_obj, tmp_path, capsys):
    cams = make_camera_ring(2, resolution=48)
    cam_manifest = {
        "cameras": [
            {"azimuth_deg": c.azimuth_deg, "elevation_deg": c.elevation_deg,
             "distance": c.distance, "fov_deg": c.fov_deg, "resolution": c.resolution}
            for c in cams
        ]
    }
    cam_path = tmp_path / "cams.json"
    cam_path.write_text(json.dumps(cam_manifest))
    img_paths = []
    for i in range(2):
        p = tmp_path / f"img{i}.twtf"
        wire.save_twtf(p, np.full((48, 48, 3), 0.25 + 0.5 * i, dtype=np.float32))
        img_paths.append(str(p))
    out = tmp_path / "bake"
    code = cli.main([
        "bake", "--mesh", quad_obj, "--cameras", str(cam_path),
        "--images", *img_paths, "--out", str(out),
        "--set", "texture_resolution=32",
    ])
    assert code == 0
    tex = wire.load_twtf(out / "texture.twtf")
    assert tex.shape == (32, 32, 3)
    report = json.loads((out / "dilation_report.json").read_text())
    assert set(report) == {"filled", "remaining", "iterations_used"}


def test_bake_count_mismatch(quad_obj, tmp_path):
    cam_path = tmp_path / "cams.json"
    cam_path.write_text(json.dumps({"cameras": [{"azimuth_deg": 0.0, "resolution": 16}]}))
    img = tmp_path / "i.twtf"
    wire.save_twtf(img, np.zeros((16, 16, 3), dtype=np.float32))
    code = cli.main([
        "bake", "--mesh", quad_obj, "--cameras", str(cam_path),
        "--images", str(img), str(img), "--out", str(tmp_path / "o"),
    ])
    assert code == 1


def test_dump_bias_heatmaps(quad_obj, tmp_path):
    out = tmp_path / "bias"
    code = cli.main([
        "dump-bias", "--mesh", quad_obj, "--resolution", "8",
        "--query-patch", "36", "--out", str(out),
        "--set", "n_views=2",
    ])
    assert code == 0
    from surftex.attention import load_bias

    bias = load_bias(out / "bias_v0_r8.twtf")
    assert bias.entries.shape == (64, 128)
    assert (out / "bias_v0_r8_q36.png").exists()
    # recompute from scratch and compare within f32 rounding
    from surftex import raster
    from surftex.attention import attended_sets, build_view_biases
    from surftex.cli import _load_mesh

    mesh = _load_mesh(quad_obj)
    cams = make_camera_ring(2, 2.0, 35.0, resolution=32)
    fresh = build_view_biases(
        [raster.render_maps(mesh, c) for c in cams],
        attended_sets(2), [8], BiasParams(),
    )[(0, 8)]
    np.testing.assert_allclose(bias.entries, fresh.entries, atol=1e-6)


def test_dump_bias_background_query_pattern(quad_obj, tmp_path):
    out = tmp_path / "bias2"
    assert cli.main([
        "dump-bias", "--mesh", quad_obj, "--resolution", "8",
        "--out", str(out), "--set", "n_views=2",
    ]) == 0
    from surftex.attention import load_bias
    from surftex import raster
    from surftex.cli import _load_mesh

    mesh = _load_mesh(quad_obj)
    cam = make_camera_ring(2, 2.0, 35.0, resolution=32)[0]
    small = raster.downsample_maps(raster.render_maps(mesh, cam), 4)
    fg = small.fg_mask.reshape(-1)
    bias = load_bias(out / "bias_v0_r8.twtf").entries
    bg_rows = bias[~fg]
    # background query rows: 0 toward background keys, masked toward FG keys
    cams = make_camera_ring(2, 2.0, 35.0, resolution=32)
    k_flags = np.concatenate([
        raster.downsample_maps(raster.render_maps(mesh, c), 4).fg_mask.reshape(-1)
        for c in cams
    ])
    assert np.all(bg_rows[:, k_flags] <= NEG_INF / 2)
    assert np.all(bg_rows[:, ~k_flags] == 0.0)
    # FG query rows peak at the geometrically nearest key patch
    fg_rows_idx = np.flatnonzero(fg)
    row = bias[fg_rows_idx[len(fg_rows_idx) // 2]]
    finite = row > NEG_INF / 2
    q_pos = small.position.reshape(-1, 3)[fg_rows_idx[len(fg_rows_idx) // 2]]
    k_pos = np.concatenate([
        raster.downsample_maps(raster.render_maps(mesh, c), 4).position.reshape(-1, 3)
        for c in cams
    ])
    d = np.linalg.norm(k_pos - q_pos, axis=1)
    best_key = np.flatnonzero(finite)[np.argmin(d[finite])]
    assert row[best_key] == row[finite].max()


def test_dilate_subcommand(quad_obj, tmp_path):
    tex = np.zeros((32, 32, 3), dtype=np.float32)
    vis = np.zeros((32, 32), dtype=np.float32)
    # color the left half of the chart, let dilation finish the rest
    tex[:, :16] = 0.8
    vis[:, :16] = 1.0
    tex_path, vis_path = tmp_path / "t.twtf", tmp_path / "v.twtf"
    wire.save_twtf(tex_path, tex)
    wire.save_twtf(vis_path, vis)
    out = tmp_path / "dil"
    code = cli.main([
        "dilate", "--mesh", quad_obj, "--texture", str(tex_path),
        "--visibility", str(vis_path), "--out", str(out),
        "--set", "dilation_dist=0.2",
    ])
    assert code == 0
    report = json.loads((out / "dilation_report.json").read_text())
    assert report["filled"] > 0
    filled = wire.load_twtf(out / "texture_dilated.twtf")
    assert np.isclose(filled[:, 20][np.any(filled[:, 20] > 0, axis=-1)], 0.8).all()


def test_config_file_and_overrides(tmp_path, sphere_obj):
    cfg_path = tmp_path / "cfg.json"
    cfg_path.write_text(json.dumps({
        "mesh": sphere_obj, "seed": 3, "steps": 3, "n_views": 2,
        "backend": "synthetic", "latent_resolution": 32,
        "latent_texture_resolution": 64, "texture_resolution": 64,
        "resolution": 32, "bias_resolutions": [8], "out_dir": str(tmp_path / "o"),
    }))
    assert cli.main(["run", "--config", str(cfg_path), "--set", "steps=2"]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["config"]["steps"] == 2
    assert manifest["config"]["seed"] == 3


def test_unknown_config_key_rejected(sphere_obj, tmp_path):
    code = cli.main(["run", "--desk", "--mesh", sphere_obj,
                     "--out", str(tmp_path / "x"), "--seed", "1",
                     "--set", "frobnicate=1"])
    assert code == 1
